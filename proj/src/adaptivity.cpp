#include "twoscale/adaptivity.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <thread>

namespace twoscale {

namespace {

Vec3 barycentric(const TriMesh& mesh, int t, const Vec2& x) {
    const auto& tri = mesh.triangles[t];
    const Vec2& a = mesh.vertices[tri[0]];
    const Vec2& b = mesh.vertices[tri[1]];
    const Vec2& c = mesh.vertices[tri[2]];
    const double det = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
    const double l1 = ((x - a).x() * (c - a).y() - (x - a).y() * (c - a).x()) / det;
    const double l2 = ((b - a).x() * (x - a).y() - (b - a).y() * (x - a).x()) / det;
    return {1.0 - l1 - l2, l1, l2};
}

std::vector<std::vector<int>> vertex_triangles(const TriMesh& mesh) {
    std::vector<std::vector<int>> out(mesh.num_vertices());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t)
        for (int v : mesh.triangles[t]) out[v].push_back(static_cast<int>(t));
    return out;
}

template <class F>
void parallel_for(std::size_t n, int threads, F&& body) {
    const std::size_t k = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
    if (k == 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < k; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w * n / k; i < (w + 1) * n / k; ++i) body(i);
        });
    }
}

}  // namespace

Vec2 AveragedField::eval(int t, const Vec2& x) const {
    const Vec3 l = barycentric(*mesh, t, x);
    const auto& tri = mesh->triangles[t];
    return l(0) * vertex_values[tri[0]] + l(1) * vertex_values[tri[1]] + l(2) * vertex_values[tri[2]];
}

AveragedField average_field(MeshPtr mesh, const std::vector<double>& u, PatchMode mode) {
    const TriMesh& m = *mesh;
    if (u.size() != m.num_edges()) throw InvalidInput("average_field: flux does not match the mesh");
    std::vector<Vec2> integral(m.num_triangles());
    for (std::size_t t = 0; t < m.num_triangles(); ++t) integral[t] = rt0_integral(m, u, int(t));
    const auto ring = vertex_triangles(m);

    AveragedField out;
    out.mesh = mesh;
    out.vertex_values.assign(m.num_vertices(), Vec2::Zero());
    std::vector<int> patch;
    std::vector<char> seen(m.num_triangles(), 0);
    for (std::size_t v = 0; v < m.num_vertices(); ++v) {
        patch = ring[v];
        if (mode == PatchMode::TwoRing) {
            for (int t : ring[v]) seen[t] = 1;
            for (int t : ring[v])
                for (int w : m.triangles[t])
                    for (int s : ring[w])
                        if (!seen[s]) {
                            seen[s] = 1;
                            patch.push_back(s);
                        }
            for (int t : patch) seen[t] = 0;
        }
        Vec2 sum = Vec2::Zero();
        double area = 0.0;
        for (int t : patch) {
            sum += integral[t];
            area += m.area[t];
        }
        if (area > 0) out.vertex_values[v] = sum / area;
    }
    return out;
}

double IndicatorField::sum_squares() const {
    double s = 0.0;
    for (double e : eta) s += e * e;
    return s;
}

IndicatorField error_indicator(MeshPtr mesh, const std::vector<double>& u, PatchMode mode, int threads) {
    const AveragedField avg = average_field(mesh, u, mode);
    const TriMesh& m = *mesh;
    IndicatorField out;
    out.eta.assign(m.num_triangles(), 0.0);
    parallel_for(m.num_triangles(), threads, [&](std::size_t t) {
        const auto& edges = m.triangle_edges[t];
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
            const Vec2 x = m.edge_midpoint(edges[k]);
            s += (rt0_value(m, u, int(t), x) - avg.eval(int(t), x)).squaredNorm();
        }
        out.eta[t] = std::sqrt(m.area[t] * s / 3.0);
    });
    if (!out.eta.empty()) {
        const auto [lo, hi] = std::minmax_element(out.eta.begin(), out.eta.end());
        out.min = *lo;
        out.max = *hi;
    }
    return out;
}

Marks mark(const IndicatorField& indicator, double theta_r, double theta_c) {
    if (!(theta_r > 0 && theta_r < 1)) throw InvalidInput("mark: theta_r must lie in (0,1)");
    if (!(theta_c >= 1)) throw InvalidInput("mark: theta_c must be at least 1");
    Marks out;
    if (!(indicator.max > 0)) return out;
    for (std::size_t t = 0; t < indicator.eta.size(); ++t) {
        const double e = indicator.eta[t];
        if (e >= theta_r * indicator.max) out.refine.push_back(int(t));
        if (e <= theta_c * indicator.min) out.coarsen.push_back(int(t));
    }
    return out;
}

Marks mark_refinable(const IndicatorField& indicator, const TriMesh& mesh, const CoarseGrid& grid,
                     double theta_r, double theta_c, int max_level) {
    IndicatorField open = indicator;
    open.max = 0.0;
    for (std::size_t t = 0; t < indicator.eta.size(); ++t) {
        if (grid.cell(mesh.owner[t]).level() < max_level) open.max = std::max(open.max, indicator.eta[t]);
    }
    Marks out = mark(open, theta_r, theta_c);
    if (!(open.max > 0) && indicator.max > 0) out.coarsen = mark(indicator, theta_r, theta_c).coarsen;
    return out;
}

CellMarks lift_marks(const TriMesh& mesh, const CoarseGrid& grid, const Marks& marks, int max_level) {
    CellMarks out;
    for (int t : marks.refine) {
        const CellId c = mesh.owner[t];
        if (grid.cell(c).level() < max_level) out.refine.insert(c);
    }
    std::map<CellId, int> owned, marked;
    for (CellId c : mesh.owner) ++owned[c];
    for (int t : marks.coarsen) ++marked[mesh.owner[t]];
    for (const auto& [c, n] : marked) {
        if (n == owned[c] && !out.refine.contains(c)) out.coarsen.insert(c);
    }
    return out;
}

AdaptReport adapt_step(CoarseGrid& grid, MeshPtr& mesh, TensorCache& cache, const Marks& marks,
                       const MacroSetup& setup, int max_level) {
    AdaptReport report;
    if (marks.empty()) return report;
    const CellMarks cells = lift_marks(*mesh, grid, marks, max_level);
    if (!cells.refine.empty()) {
        const RefineReport r = grid.refine(cells.refine);
        report.refined = r.refined.size();
        report.created = r.created;
        report.deleted = r.refined;
    }
    if (!cells.coarsen.empty()) {
        // Cells split a moment ago are no longer leaves and are skipped by the grid.
        const CoarsenReport c = grid.coarsen(cells.coarsen);
        report.coarsened = c.merged.size();
        for (CellId p : c.merged) {
            report.created.push_back(p);
            const CellKey k = cell_key(p);
            for (int b = 0; b < 2; ++b)
                for (int a = 0; a < 2; ++a)
                    report.deleted.push_back(cell_id({k.level + 1, 2 * k.i + a, 2 * k.j + b}));
        }
    }
    if (!report.changed()) return report;
    const auto leaves = grid.leaves();
    report.new_solves = cache.ensure(*setup.field, grid, leaves, setup.micro_n, setup.model, setup.threads);
    mesh = std::make_shared<const TriMesh>(triangulate(grid));
    return report;
}

FlowProblem make_macro_problem(const CoarseGrid& grid, MeshPtr mesh, const TensorCache& cache,
                               const MacroSetup& setup) {
    if (!setup.field) throw InvalidInput("make_macro_problem: no permeability field");
    if (!setup.law.separable) throw InvalidInput("homogenized storage needs a separable law theta(x) beta(p)");
    const TriMesh& m = *mesh;
    FlowProblem fp;
    fp.mesh = mesh;
    fp.coeff = macro_coefficients(m, cache, tensor_context(*setup.field, grid), setup.micro_n, setup.model,
                                  setup.diagonal_only);
    // theta* per leaf: midpoint rule on a 16 x 16 grid of the cell.
    std::map<CellId, double> theta_cell;
    fp.theta.reserve(m.num_triangles());
    for (CellId c : m.owner) {
        auto it = theta_cell.find(c);
        if (it == theta_cell.end()) {
            const Rect r = grid.cell(c).rect;
            constexpr int n = 16;
            double s = 0.0;
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < n; ++i)
                    s += setup.law.theta({r.x0 + (i + 0.5) * r.width() / n, r.y0 + (j + 0.5) * r.height() / n});
            it = theta_cell.emplace(c, s / (n * n)).first;
        }
        fp.theta.push_back(it->second);
    }
    fp.beta = setup.law.beta;
    fp.dbeta = setup.law.dbeta;
    if (setup.source.f) {
        fp.source = [mesh, f = setup.source.f](double time) {
            auto v = l2_project([&](const Vec2& x) { return f(x, time); }, *mesh);
            for (std::size_t t = 0; t < v.size(); ++t) v[t] *= mesh->area[t];
            return v;
        };
    } else {
        fp.source = [n = m.num_triangles()](double) { return std::vector<double>(n, 0.0); };
    }
    fp.bc = patch_bc(m, setup.source.patches);
    return fp;
}

MacroRun run_macro(CoarseGrid grid, TensorCache& cache, const MacroSetup& setup,
                   const AdaptivityConfig& adapt, const TimeStepConfig& cfg, IterationLog& log,
                   const MacroObserver& observer) {
    if (!setup.field) throw InvalidInput("run_macro: no permeability field");
    cfg.validate();
    cache.ensure(*setup.field, grid, grid.leaves(), setup.micro_n, setup.model, setup.threads);
    MeshPtr mesh = std::make_shared<const TriMesh>(triangulate(grid));
    FlowProblem problem = make_macro_problem(grid, mesh, cache, setup);

    std::vector<MixedSolution> trajectory;
    std::vector<MacroStepInfo> infos;
    std::optional<IndicatorField> indicator;
    MacroStepInfo pending;

    SimulationHooks hooks;
    hooks.before_step = [&](int n, double, const MixedSolution* last)
        -> std::optional<std::pair<FlowProblem, std::vector<double>>> {
        pending = {};
        pending.step = n;
        indicator.reset();
        if (!adapt.enabled || !last) return std::nullopt;
        indicator = error_indicator(mesh, last->u, adapt.patch, setup.threads);
        pending.eta_max = indicator->max;
        const Marks marks = mark_refinable(*indicator, *mesh, grid, adapt.theta_r, adapt.theta_c, adapt.max_level);
        MeshPtr old = mesh;
        pending.adapt = adapt_step(grid, mesh, cache, marks, setup, adapt.max_level);
        if (!pending.adapt.changed()) return std::nullopt;
        return std::pair{make_macro_problem(grid, mesh, cache, setup), l2_project(*old, last->p, *mesh)};
    };
    hooks.after_step = [&](int n, double, const StepResult& res) {
        pending.leaves = grid.leaf_count();
        pending.triangles = mesh->num_triangles();
        pending.edges = mesh->num_edges();
        pending.iterations = res.iterations;
        infos.push_back(pending);
        trajectory.push_back(res.solution);
        if (observer) observer(n, grid, res.solution, indicator ? &*indicator : nullptr);
    };

    const std::vector<double> p0(mesh->num_triangles(), 0.0);
    SimulationSummary summary = run_simulation(std::move(problem), cfg, p0, log, hooks);
    return {std::move(grid), mesh, std::move(summary), std::move(trajectory), std::move(infos)};
}

}  // namespace twoscale
