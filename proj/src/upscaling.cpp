#include "twoscale/upscaling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

namespace twoscale {

int snap_micro_n(const PermeabilityField& field, const Rect& rect, int micro_n) {
    const RasterLayout* L = field.raster_layout();
    if (!L) return micro_n;
    const double px = rect.width() / L->dx;
    const double py = rect.height() / L->dy;
    const long ix = std::lround(px);
    const long iy = std::lround(py);
    if (ix < 1 || iy < 1 || std::abs(px - ix) > 1e-9 * px || std::abs(py - iy) > 1e-9 * py) {
        return micro_n;
    }
    const long m = std::lcm(ix, iy);
    return static_cast<int>((micro_n + m - 1) / m * m);
}

CellSample sample_cell(const PermeabilityField& field, const Rect& rect, int micro_n, Split split) {
    if (micro_n < 2) throw InvalidInput("sample_cell: micro_n must be at least 2");
    const Rect& d = field.domain();
    const double slack = 1e-12 * std::max(d.width(), d.height());
    if (!d.contains({rect.x0, rect.y0}, slack) || !d.contains({rect.x1, rect.y1}, slack)) {
        throw InvalidInput("sample_cell: cell lies outside the permeability domain");
    }
    CellSample s;
    s.rect = rect;
    s.micro_n = snap_micro_n(field, rect, micro_n);
    TriMesh mesh = build_uniform_trimesh(s.micro_n, s.micro_n, rect, split);
    pair_periodic_edges(mesh, rect);
    s.coeff.reserve(mesh.num_triangles());
    for (const Vec2& c : mesh.centroid) s.coeff.push_back(field.eval(c));
    s.mesh = std::make_shared<const TriMesh>(std::move(mesh));
    return s;
}

Vec2 CellProblemResult::xi_mean(const CellSample& sample, int j, int t) const {
    return rt0_integral(*mesh, sigma[j], t) / mesh->area[t] + sample.coeff[t].col(j);
}

CellProblemResult solve_cell_problems(const CellSample& sample, LinearSolver kind) {
    const TriMesh& mesh = *sample.mesh;
    SaddleSystem sys = assemble_mixed(sample.mesh, sample.coeff, {}, periodic_bc(mesh));
    const MixedSolver solver(sys, kind);
    CellProblemResult out;
    out.mesh = sample.mesh;
    for (int j = 0; j < 2; ++j) {
        for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
            const auto& tri = mesh.triangles[t];
            for (int k = 0; k < 3; ++k) {
                // -<e_j, phi_k>_T with int_T phi_k = (c - a_k) / 2.
                sys.flux_load[t](k) = -0.5 * (mesh.centroid[t] - mesh.vertices[tri[k]])(j);
            }
        }
        MixedSolution sol = solver.solve(sys);
        out.max_residual = std::max(out.max_residual, saddle_residual(sys, sol));
        out.omega[j] = std::move(sol.p);
        out.sigma[j] = std::move(sol.u);
    }
    return out;
}

EffectiveTensor effective_tensor(const CellSample& sample, const CellProblemResult& cells) {
    const TriMesh& mesh = *sample.mesh;
    Mat2 k = Mat2::Zero();
    for (int j = 0; j < 2; ++j) {
        Vec2 total = Vec2::Zero();
        for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
            total += rt0_integral(mesh, cells.sigma[j], static_cast<int>(t));
        }
        k.col(j) = -total / sample.rect.area();
    }
    EffectiveTensor out;
    out.micro_n = sample.micro_n;
    const double norm = k.norm();
    out.asymmetry = norm > 0 ? (k - k.transpose()).norm() / norm : 0.0;
    out.K = 0.5 * (k + k.transpose());
    return out;
}

EffectiveTensor effective_tensor(const PermeabilityField& field, const Rect& rect, int micro_n) {
    const CellSample s = sample_cell(field, rect, micro_n);
    return effective_tensor(s, solve_cell_problems(s));
}

EffectiveStorage effective_storage_source(const SaturationLaw& law, const SourceSpec& source,
                                          const CellSample& sample) {
    if (!law.separable) throw InvalidInput("effective storage needs a separable law theta(x) beta(p)");
    const TriMesh& mesh = *sample.mesh;
    const double area = sample.rect.area();
    EffectiveStorage out;
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        out.theta += mesh.area[t] * law.theta(mesh.centroid[t]);
    }
    out.theta /= area;
    if (!source.f) {
        out.source = [](double) { return 0.0; };
        return out;
    }
    auto mesh_ptr = sample.mesh;
    auto f = source.f;
    out.source = [mesh_ptr, f, area](double time) {
        double s = 0.0;
        for (std::size_t t = 0; t < mesh_ptr->num_triangles(); ++t) {
            s += mesh_ptr->area[t] * f(mesh_ptr->centroid[t], time);
        }
        return s / area;
    };
    return out;
}

AnisotropyMetrics anisotropy_metrics(std::span<const Mat2> tensors, std::span<const double> areas) {
    if (tensors.size() != areas.size() || tensors.empty()) {
        throw InvalidInput("anisotropy_metrics: need one area per tensor");
    }
    double off = 0.0, diag = 0.0, gap = 0.0, mean_sq = 0.0;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        const Mat2& K = tensors[k];
        const Mat2 D = K.diagonal().asDiagonal();
        off += areas[k] * (D - K).squaredNorm();
        diag += areas[k] * D.squaredNorm();
        gap += areas[k] * (K(0, 0) - K(1, 1)) * (K(0, 0) - K(1, 1));
        mean_sq += areas[k] * (0.5 * K(0, 0) * K(0, 0) + 0.5 * K(1, 1) * K(1, 1));
    }
    return {std::sqrt(off / diag), std::sqrt(gap / mean_sq)};
}

namespace {

void require_isotropic(const CellSample& sample) {
    for (const Mat2& k : sample.coeff) {
        if (k(0, 1) != 0.0 || k(0, 0) != k(1, 1)) {
            throw InvalidInput("scalar averages need an isotropic permeability");
        }
    }
}

}  // namespace

Mat2 harmonic_average(const CellSample& sample) {
    require_isotropic(sample);
    const TriMesh& mesh = *sample.mesh;
    double s = 0.0, a = 0.0;
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const double k = sample.coeff[t](0, 0);
        if (!(k > 0)) throw InvalidInput("harmonic average of a zero permeability sample");
        s += mesh.area[t] / k;
        a += mesh.area[t];
    }
    return (a / s) * Mat2::Identity();
}

Mat2 harmonic_average(const PermeabilityField& field, const Rect& rect, int micro_n) {
    return harmonic_average(sample_cell(field, rect, micro_n));
}

Mat2 arithmetic_average(const CellSample& sample) {
    require_isotropic(sample);
    const TriMesh& mesh = *sample.mesh;
    double s = 0.0, a = 0.0;
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        s += mesh.area[t] * sample.coeff[t](0, 0);
        a += mesh.area[t];
    }
    return (s / a) * Mat2::Identity();
}

std::optional<EffectiveTensor> TensorCache::find(const Key& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

EffectiveTensor TensorCache::insert(const Key& key, const EffectiveTensor& value) {
    std::lock_guard lock(mutex_);
    return entries_.try_emplace(key, value).first->second;
}

const EffectiveTensor& TensorCache::at(const Key& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) throw InvalidInput("tensor cache has no entry for the requested cell");
    return it->second;
}

std::size_t TensorCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::uint64_t tensor_context(const PermeabilityField& field, const CoarseGrid& grid) {
    const Rect& d = grid.domain();
    const double geo[4] = {d.x0, d.x1, d.y0, d.y1};
    const std::int64_t n[2] = {grid.nx(), grid.ny()};
    const std::uint64_t h = field.hash();
    return fnv1a(geo, sizeof geo, fnv1a(n, sizeof n, fnv1a(&h, sizeof h)));
}

std::vector<std::pair<TensorCache::Key, EffectiveTensor>> TensorCache::entries() const {
    std::lock_guard lock(mutex_);
    return {entries_.begin(), entries_.end()};
}

std::size_t TensorCache::ensure(const PermeabilityField& field, const CoarseGrid& grid,
                                const std::vector<CellKey>& cells, int micro_n,
                                TensorModel model, int threads) {
    const std::uint64_t context = tensor_context(field, grid);
    std::vector<Key> missing;
    for (const CellKey& c : cells) {
        const Key key{cell_id(c), context, micro_n, model};
        if (!find(key)) missing.push_back(key);
    }
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());

    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> fresh{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t k = next++; k < missing.size(); k = next++) {
            try {
                const Key& key = missing[k];
                const Rect rect = grid.rect_of(cell_key(key.cell));
                const CellSample s = sample_cell(field, rect, micro_n);
                EffectiveTensor value;
                if (model == TensorModel::Homogenized) {
                    value = effective_tensor(s, solve_cell_problems(s));
                } else {
                    value.K = harmonic_average(s);
                    value.micro_n = s.micro_n;
                }
                insert(key, value);
                ++solves_;
                ++fresh;
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const int n = std::max(1, std::min<int>(threads, static_cast<int>(missing.size())));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    return fresh.load();
}

std::vector<Mat2> macro_coefficients(const TriMesh& mesh, const TensorCache& cache,
                                     std::uint64_t context, int micro_n, TensorModel model,
                                     bool diagonal_only) {
    std::vector<Mat2> out;
    out.reserve(mesh.num_triangles());
    for (CellId owner : mesh.owner) {
        Mat2 k = cache.at({owner, context, micro_n, model}).K;
        if (diagonal_only) {
            k(0, 1) = 0.0;
            k(1, 0) = 0.0;
        }
        out.push_back(k);
    }
    return out;
}

void write_tensor_csv(const std::filesystem::path& path, const CoarseGrid& grid,
                      const TensorCache& cache, std::uint64_t context, int micro_n,
                      TensorModel model) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(12);
    out << "cell_id,level,x0,y0,dx,dy,K11,K12,K22\n";
    for (const CellKey& key : grid.leaves()) {
        const Rect r = grid.rect_of(key);
        const Mat2& k = cache.at({cell_id(key), context, micro_n, model}).K;
        out << cell_id(key) << ',' << key.level << ',' << r.x0 << ',' << r.y0 << ',' << r.width()
            << ',' << r.height() << ',' << k(0, 0) << ',' << k(0, 1) << ',' << k(1, 1) << '\n';
    }
}

}  // namespace twoscale
