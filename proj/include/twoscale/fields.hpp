#pragma once

#include "twoscale/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace twoscale {

/// Closed region used for coefficient overrides and Dirichlet patches.
struct Region {
    enum class Kind { Box, Disk };
    Kind kind = Kind::Box;
    Rect box{};
    Vec2 center{0.0, 0.0};
    double radius = 0.0;

    static Region make_box(const Rect& r) { return {Kind::Box, r, {0.0, 0.0}, 0.0}; }
    static Region make_disk(const Vec2& c, double radius) { return {Kind::Disk, {}, c, radius}; }
    [[nodiscard]] bool contains(const Vec2& p) const;
};

/// Pixel geometry of a raster coefficient. Row 0 is the row at y0 when
/// `first_row_at_bottom`; values within a row run along +x.
struct RasterLayout {
    int ncols = 0;
    int nrows = 0;
    double x0 = 0.0;
    double y0 = 0.0;
    double dx = 1.0;
    double dy = 1.0;
    bool log10_values = false;
    bool first_row_at_bottom = true;

    [[nodiscard]] Rect extent() const { return {x0, x0 + ncols * dx, y0, y0 + nrows * dy}; }
};

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t fnv1a(const std::string& s, std::uint64_t seed = 1469598103934665603ULL);

/// Fine-scale permeability: symmetric 2x2 tensor evaluable at any point of its domain.
class PermeabilityField {
public:
    using Analytic = std::function<Mat2(const Vec2&)>;

    struct Override {
        Region region;
        double value;  ///< isotropic value inside the region
    };

    /// `beta`/`lambda` are the spectral bounds of the closure over `domain`.
    static PermeabilityField analytic(Analytic f, const Rect& domain, double beta, double lambda,
                                      std::string fingerprint, bool isotropic = false);
    static PermeabilityField raster(const RasterLayout& layout, std::vector<double> values);
    static PermeabilityField constant(double value, const Rect& domain);

    /// Composite field: overrides take precedence over the base on closed membership.
    [[nodiscard]] PermeabilityField with_overrides(std::vector<Override> overrides) const;

    [[nodiscard]] Mat2 eval(const Vec2& x) const;
    /// Scalar value for isotropic fields (K11).
    [[nodiscard]] double eval_scalar(const Vec2& x) const { return eval(x)(0, 0); }

    [[nodiscard]] const Rect& domain() const { return domain_; }
    [[nodiscard]] double beta() const { return beta_; }
    [[nodiscard]] double lambda() const { return lambda_; }
    [[nodiscard]] std::uint64_t hash() const { return hash_; }
    [[nodiscard]] bool isotropic() const { return isotropic_; }
    /// Raster layout when the base field is raster-backed.
    [[nodiscard]] const RasterLayout* raster_layout() const;
    [[nodiscard]] const std::vector<double>& raster_values() const;

private:
    struct RasterData {
        RasterLayout layout;
        std::vector<double> values;  ///< linear scale, row-major from the bottom row
    };

    Analytic base_;
    std::shared_ptr<const RasterData> raster_;
    std::vector<Override> overrides_;
    Rect domain_{};
    double beta_ = 1.0;
    double lambda_ = 1.0;
    std::uint64_t hash_ = 0;
    bool isotropic_ = true;
};

struct QuasiPeriodicOptions {
    double epsilon = 1.0 / 16.0;
    bool inclusions = false;
    double high_value = 1e-2;  ///< inside the box inclusion
    double low_value = 1e-7;   ///< inside the disk inclusion
    Rect box_inclusion{0.21, 0.41, 0.11, 0.41};
    Vec2 disk_center{0.75, 0.26};
    double disk_radius = 0.01;
    Rect domain{0.0, 1.0, 0.0, 0.5};
};

/// K(x) = (10 x1^2 x2 + 1/(2 + 1.8 cos(2 pi x1/eps) cos(2 pi x2/eps))) I, with optional
/// box and disk inclusions.
PermeabilityField quasi_periodic_field(const QuasiPeriodicOptions& opts);

/// Reads whitespace-separated values (row-major) described by `layout`.
PermeabilityField load_raster(const std::filesystem::path& path, const RasterLayout& layout);
/// Reads the layout from the JSON sidecar `<path>.json`.
PermeabilityField load_raster(const std::filesystem::path& path);
RasterLayout read_raster_sidecar(const std::filesystem::path& sidecar);

/// Storage law b(x,p) = theta(x) * beta(p).
struct SaturationLaw {
    std::function<double(double)> beta;
    std::function<double(double)> dbeta;
    std::function<double(const Vec2&)> theta;
    bool separable = true;
    std::string name;

    [[nodiscard]] double b(const Vec2& x, double p) const { return theta(x) * beta(p); }
};

/// b = R p^3, the fast-diffusion law.
SaturationLaw cubic_law(double R);
SaturationLaw linear_law(double c);
SaturationLaw zero_law();

/// Largest beta' over a pressure range, sampled on `samples` uniform points (endpoints included).
double max_derivative(const SaturationLaw& law, double p_lo = 0.0, double p_hi = 1.0,
                      int samples = 1001);
/// beta non-decreasing on the range and beta(0) == 0.
bool check_monotone(const SaturationLaw& law, double p_lo = 0.0, double p_hi = 1.0,
                    int samples = 1001);
/// |beta(p1)-beta(p2)| <= Lb |p1-p2|^alpha for all sampled pairs.
bool check_holder(const SaturationLaw& law, double Lb, double alpha, double p_lo = 0.0,
                  double p_hi = 1.0, int samples = 201);

struct DirichletPatch {
    Region region;
    double value = 0.0;
};

struct SourceSpec {
    std::function<double(const Vec2&, double)> f;  ///< volumetric source; empty means zero
    std::vector<DirichletPatch> patches;

    [[nodiscard]] double eval(const Vec2& x, double t) const { return f ? f(x, t) : 0.0; }
    /// Throws when patches overlap or carry non-finite pressures.
    void validate() const;
};

enum class Corner { LowerLeft, LowerRight, UpperLeft, UpperRight };

/// Square patch of side `size` anchored at a corner of `domain`.
Region corner_region(const Rect& domain, Corner corner, double size);

}  // namespace twoscale
