#include "twoscale/fields.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace twoscale {

bool Region::contains(const Vec2& p) const {
    if (kind == Kind::Box) return box.contains(p);
    return (p - center).norm() <= radius;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed) {
    const auto* b = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t seed) {
    return fnv1a(s.data(), s.size(), seed);
}

PermeabilityField PermeabilityField::analytic(Analytic f, const Rect& domain, double beta,
                                              double lambda, std::string fingerprint,
                                              bool isotropic) {
    if (!(beta > 0) || !(lambda >= beta)) {
        throw InvalidInput("permeability bounds must satisfy 0 < beta <= lambda");
    }
    PermeabilityField k;
    k.base_ = std::move(f);
    k.domain_ = domain;
    k.beta_ = beta;
    k.lambda_ = lambda;
    k.hash_ = fnv1a("analytic:" + fingerprint);
    k.isotropic_ = isotropic;
    return k;
}

PermeabilityField PermeabilityField::constant(double value, const Rect& domain) {
    std::ostringstream fp;
    fp.precision(17);
    fp << "constant:" << value;
    return analytic([value](const Vec2&) { return Mat2(value * Mat2::Identity()); }, domain, value,
                    value, fp.str(), true);
}

PermeabilityField PermeabilityField::raster(const RasterLayout& layout, std::vector<double> values) {
    if (layout.ncols < 1 || layout.nrows < 1 || !(layout.dx > 0) || !(layout.dy > 0)) {
        throw InvalidInput("raster layout needs positive counts and pixel sizes");
    }
    if (values.size() != static_cast<std::size_t>(layout.ncols) * layout.nrows) {
        throw InvalidInput("raster value count does not match ncols*nrows");
    }
    if (layout.log10_values) {
        for (double& v : values) v = std::pow(10.0, v);
    }
    if (!layout.first_row_at_bottom) {
        std::vector<double> flipped(values.size());
        for (int r = 0; r < layout.nrows; ++r) {
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(r) * layout.ncols, layout.ncols,
                        flipped.begin() +
                            static_cast<std::ptrdiff_t>(layout.nrows - 1 - r) * layout.ncols);
        }
        values = std::move(flipped);
    }
    for (double v : values) {
        if (!(v > 0) || !std::isfinite(v)) {
            throw InvalidInput("non-positive permeability in raster");
        }
    }
    PermeabilityField k;
    auto data = std::make_shared<RasterData>();
    data->layout = layout;
    data->layout.log10_values = false;
    data->layout.first_row_at_bottom = true;
    data->values = std::move(values);
    const auto [lo, hi] = std::minmax_element(data->values.begin(), data->values.end());
    k.beta_ = *lo;
    k.lambda_ = *hi;
    k.domain_ = layout.extent();
    std::uint64_t h = fnv1a(data->values.data(), data->values.size() * sizeof(double));
    const double geom[4] = {layout.x0, layout.y0, layout.dx, layout.dy};
    h = fnv1a(geom, sizeof(geom), h);
    k.hash_ = h;
    k.isotropic_ = true;
    k.raster_ = std::move(data);
    return k;
}

PermeabilityField PermeabilityField::with_overrides(std::vector<Override> overrides) const {
    PermeabilityField k = *this;
    std::uint64_t h = hash_;
    for (const auto& o : overrides) {
        if (!(o.value > 0)) throw InvalidInput("override permeability must be positive");
        k.beta_ = std::min(k.beta_, o.value);
        k.lambda_ = std::max(k.lambda_, o.value);
        const double desc[6] = {static_cast<double>(o.region.kind == Region::Kind::Box),
                                o.region.box.x0 + o.region.center.x(),
                                o.region.box.x1 + o.region.center.y(),
                                o.region.box.y0 + o.region.radius,
                                o.region.box.y1,
                                o.value};
        h = fnv1a(desc, sizeof(desc), h);
    }
    k.overrides_.insert(k.overrides_.end(), overrides.begin(), overrides.end());
    k.hash_ = h;
    return k;
}

const RasterLayout* PermeabilityField::raster_layout() const {
    return raster_ ? &raster_->layout : nullptr;
}

const std::vector<double>& PermeabilityField::raster_values() const {
    static const std::vector<double> empty;
    return raster_ ? raster_->values : empty;
}

Mat2 PermeabilityField::eval(const Vec2& x) const {
    const double slack = 1e-12 * std::max(domain_.width(), domain_.height());
    if (!domain_.contains(x, slack)) {
        std::ostringstream msg;
        msg << "permeability evaluated outside its domain at (" << x.x() << ", " << x.y() << ")";
        throw InvalidInput(msg.str());
    }
    for (auto it = overrides_.rbegin(); it != overrides_.rend(); ++it) {
        if (it->region.contains(x)) return it->value * Mat2::Identity();
    }
    if (raster_) {
        const auto& L = raster_->layout;
        const int col = std::clamp(static_cast<int>(std::floor((x.x() - L.x0) / L.dx)), 0, L.ncols - 1);
        const int row = std::clamp(static_cast<int>(std::floor((x.y() - L.y0) / L.dy)), 0, L.nrows - 1);
        return raster_->values[static_cast<std::size_t>(row) * L.ncols + col] * Mat2::Identity();
    }
    return base_(x);
}

PermeabilityField quasi_periodic_field(const QuasiPeriodicOptions& opts) {
    if (!(opts.epsilon > 0)) throw InvalidInput("epsilon must be positive");
    const double eps = opts.epsilon;
    auto f = [eps](const Vec2& x) -> Mat2 {
        const double two_pi = 2.0 * std::numbers::pi;
        const double k = 10.0 * x.x() * x.x() * x.y() +
                         1.0 / (2.0 + 1.8 * std::cos(two_pi * x.x() / eps) * std::cos(two_pi * x.y() / eps));
        return k * Mat2::Identity();
    };
    // The periodic part lies in [1/3.8, 1/0.2]; the slow part in [0, 10 max(x1^2 x2)].
    const Rect& d = opts.domain;
    const double xmax = std::max(std::abs(d.x0), std::abs(d.x1));
    const double slow_max = 10.0 * xmax * xmax * std::max(0.0, d.y1);
    const double slow_min = (d.x0 <= 0.0 && d.x1 >= 0.0) || (d.y0 <= 0.0) ? 0.0
                            : 10.0 * std::min(d.x0 * d.x0, d.x1 * d.x1) * d.y0;
    std::ostringstream fp;
    fp.precision(17);
    fp << "quasi-periodic:" << eps << ":" << d.x0 << ":" << d.x1 << ":" << d.y0 << ":" << d.y1;
    auto k = PermeabilityField::analytic(f, d, slow_min + 1.0 / 3.8, slow_max + 5.0, fp.str(), true);
    if (!opts.inclusions) return k;
    return k.with_overrides({{Region::make_box(opts.box_inclusion), opts.high_value},
                             {Region::make_disk(opts.disk_center, opts.disk_radius), opts.low_value}});
}

PermeabilityField load_raster(const std::filesystem::path& path, const RasterLayout& layout) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open raster file " + path.string());
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(layout.ncols) * std::max(layout.nrows, 0));
    std::string token;
    while (in >> token) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(token, &used);
        } catch (const std::exception&) {
            throw InvalidInput("malformed raster value '" + token + "' in " + path.string());
        }
        if (used != token.size()) {
            throw InvalidInput("malformed raster value '" + token + "' in " + path.string());
        }
        values.push_back(v);
    }
    return PermeabilityField::raster(layout, std::move(values));
}

RasterLayout read_raster_sidecar(const std::filesystem::path& sidecar) {
    std::ifstream in(sidecar);
    if (!in) throw InvalidInput("cannot open raster sidecar " + sidecar.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput("malformed raster sidecar: " + std::string(e.what()));
    }
    RasterLayout L;
    try {
        L.ncols = j.at("ncols").get<int>();
        L.nrows = j.at("nrows").get<int>();
        L.x0 = j.value("x0", 0.0);
        L.y0 = j.value("y0", 0.0);
        L.dx = j.at("dx").get<double>();
        L.dy = j.at("dy").get<double>();
        L.log10_values = j.value("scale", std::string("linear")) == "log10";
        L.first_row_at_bottom = j.value("row_order", std::string("bottom-up")) != "top-down";
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput("raster sidecar missing field: " + std::string(e.what()));
    }
    return L;
}

PermeabilityField load_raster(const std::filesystem::path& path) {
    return load_raster(path, read_raster_sidecar(path.string() + ".json"));
}

SaturationLaw cubic_law(double R) {
    return {[](double p) { return p * p * p; }, [](double p) { return 3.0 * p * p; },
            [R](const Vec2&) { return R; }, true, "cubic"};
}

SaturationLaw linear_law(double c) {
    return {[](double p) { return p; }, [](double) { return 1.0; }, [c](const Vec2&) { return c; },
            true, "linear"};
}

SaturationLaw zero_law() {
    return {[](double) { return 0.0; }, [](double) { return 0.0; }, [](const Vec2&) { return 0.0; },
            true, "zero"};
}

double max_derivative(const SaturationLaw& law, double p_lo, double p_hi, int samples) {
    double m = 0.0;
    for (int k = 0; k < samples; ++k) {
        const double p = p_lo + (p_hi - p_lo) * k / (samples - 1);
        m = std::max(m, law.dbeta(p));
    }
    return m;
}

bool check_monotone(const SaturationLaw& law, double p_lo, double p_hi, int samples) {
    if (law.beta(0.0) != 0.0) return false;
    double prev = law.beta(p_lo);
    for (int k = 1; k < samples; ++k) {
        const double v = law.beta(p_lo + (p_hi - p_lo) * k / (samples - 1));
        if (v < prev) return false;
        prev = v;
    }
    return true;
}

bool check_holder(const SaturationLaw& law, double Lb, double alpha, double p_lo, double p_hi,
                  int samples) {
    for (int a = 0; a < samples; ++a) {
        const double p1 = p_lo + (p_hi - p_lo) * a / (samples - 1);
        for (int b = a + 1; b < samples; ++b) {
            const double p2 = p_lo + (p_hi - p_lo) * b / (samples - 1);
            const double lhs = std::abs(law.beta(p1) - law.beta(p2));
            if (lhs > Lb * std::pow(std::abs(p1 - p2), alpha) * (1 + 1e-12)) return false;
        }
    }
    return true;
}

void SourceSpec::validate() const {
    for (std::size_t a = 0; a < patches.size(); ++a) {
        if (!std::isfinite(patches[a].value)) throw InvalidInput("Dirichlet patch value is not finite");
        for (std::size_t b = a + 1; b < patches.size(); ++b) {
            const auto& ra = patches[a].region;
            const auto& rb = patches[b].region;
            if (ra.kind == Region::Kind::Box && rb.kind == Region::Kind::Box) {
                const bool apart = ra.box.x1 < rb.box.x0 || rb.box.x1 < ra.box.x0 ||
                                   ra.box.y1 < rb.box.y0 || rb.box.y1 < ra.box.y0;
                if (!apart) throw InvalidInput("Dirichlet patches overlap");
            } else if (ra.kind == Region::Kind::Disk && rb.kind == Region::Kind::Disk) {
                if ((ra.center - rb.center).norm() <= ra.radius + rb.radius) {
                    throw InvalidInput("Dirichlet patches overlap");
                }
            } else {
                const auto& box = ra.kind == Region::Kind::Box ? ra.box : rb.box;
                const auto& disk = ra.kind == Region::Kind::Disk ? ra : rb;
                const Vec2 nearest(std::clamp(disk.center.x(), box.x0, box.x1),
                                   std::clamp(disk.center.y(), box.y0, box.y1));
                if ((nearest - disk.center).norm() <= disk.radius) {
                    throw InvalidInput("Dirichlet patches overlap");
                }
            }
        }
    }
}

Region corner_region(const Rect& domain, Corner corner, double size) {
    if (!(size > 0)) throw InvalidInput("corner patch size must be positive");
    switch (corner) {
        case Corner::LowerLeft:
            return Region::make_box({domain.x0, domain.x0 + size, domain.y0, domain.y0 + size});
        case Corner::LowerRight:
            return Region::make_box({domain.x1 - size, domain.x1, domain.y0, domain.y0 + size});
        case Corner::UpperLeft:
            return Region::make_box({domain.x0, domain.x0 + size, domain.y1 - size, domain.y1});
        case Corner::UpperRight:
            return Region::make_box({domain.x1 - size, domain.x1, domain.y1 - size, domain.y1});
    }
    return Region::make_box(domain);
}

}  // namespace twoscale
