#include "twoscale/nonlinear.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace twoscale {

int TimeStepConfig::num_steps() const { return static_cast<int>(std::llround(T / dt)); }

void TimeStepConfig::validate() const {
    if (!(dt > 0) || !(T > 0)) throw InvalidInput("time step and final time must be positive");
    if (std::abs(num_steps() * dt - T) > 1e-9 * T || num_steps() < 1) {
        throw InvalidInput("final time must be a positive multiple of the time step");
    }
    if (!(final_tol > 0) || !(switch_tol >= final_tol)) {
        throw InvalidInput("tolerances must satisfy 0 < final_tol <= switch_tol");
    }
    if (max_iters < 1) throw InvalidInput("max_iters must be positive");
    if (!(newton_divergence_tol >= 0)) throw InvalidInput("newton_divergence_tol must be non-negative");
    if (l_mode == LMode::Explicit && !(L_value > 0)) {
        throw InvalidInput("explicit L-scheme parameter must be positive");
    }
}

std::string scheme_name(Scheme s) { return s == Scheme::L ? "L" : "Newton"; }

std::vector<IterationRecord> IterationLog::step_records(int step) const {
    std::vector<IterationRecord> out;
    for (const auto& r : records)
        if (r.step == step) out.push_back(r);
    return out;
}

void IterationLog::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(12);
    out << "step,iter,scheme,residual\n";
    for (const auto& r : records) {
        out << r.step << ',' << r.iter << ',' << scheme_name(r.scheme) << ',' << r.residual << '\n';
    }
}

std::vector<double> FlowProblem::storage(std::span<const double> p) const {
    std::vector<double> s(p.size());
    for (std::size_t t = 0; t < p.size(); ++t) s[t] = mesh->area[t] * theta[t] * beta(p[t]);
    return s;
}

FlowProblem make_fine_problem(MeshPtr mesh, const PermeabilityField& field, const SaturationLaw& law,
                              const SourceSpec& source) {
    FlowProblem fp;
    fp.mesh = mesh;
    fp.coeff.reserve(mesh->num_triangles());
    fp.theta.reserve(mesh->num_triangles());
    for (const Vec2& c : mesh->centroid) {
        fp.coeff.push_back(field.eval(c));
        fp.theta.push_back(law.theta(c));
    }
    fp.beta = law.beta;
    fp.dbeta = law.dbeta;
    if (source.f) {
        fp.source = [mesh, f = source.f](double time) {
            auto v = l2_project([&](const Vec2& x) { return f(x, time); }, *mesh);
            for (std::size_t t = 0; t < v.size(); ++t) v[t] *= mesh->area[t];
            return v;
        };
    } else {
        fp.source = [n = mesh->num_triangles()](double) { return std::vector<double>(n, 0.0); };
    }
    fp.bc = patch_bc(*mesh, source.patches);
    return fp;
}

double max_storage_derivative(const FlowProblem& problem) {
    double dmax = 0.0;
    for (int k = 0; k <= 1000; ++k) dmax = std::max(dmax, problem.dbeta(k / 1000.0));
    const double theta_max = *std::max_element(problem.theta.begin(), problem.theta.end());
    return dmax * theta_max;
}

double l_parameter(const TimeStepConfig& cfg, const FlowProblem& problem) {
    const double m = max_storage_derivative(problem);
    double L = 0.0;
    switch (cfg.l_mode) {
        case LMode::Paper: L = 0.25 * m; break;
        case LMode::HalfMax: L = 0.5 * m; break;
        case LMode::Max: L = m; break;
        case LMode::Explicit: L = cfg.L_value; break;
    }
    if (!(L > 0)) {
        // Linear or storage-free problems still need a positive stabilization.
        L = cfg.l_mode == LMode::Explicit ? cfg.L_value : 1.0;
    }
    return L;
}

StepContext::StepContext(FlowProblem problem, TimeStepConfig cfg)
    : problem_(std::move(problem)), cfg_(cfg) {
    cfg_.validate();
    L_ = l_parameter(cfg_, problem_);
}

SaddleSystem StepContext::system_with(std::vector<double> reaction) const {
    return assemble_mixed(problem_.mesh, problem_.coeff, reaction, problem_.bc);
}

MixedSolution StepContext::l_scheme_iterate(std::span<const double> prev_time,
                                            std::span<const double> prev_iter, double time) {
    const TriMesh& mesh = *problem_.mesh;
    const double dt = cfg_.dt;
    if (!l_solver_) {
        l_system_ = system_with(std::vector<double>(mesh.num_triangles(), L_ / dt));
        l_solver_ = std::make_unique<MixedSolver>(*l_system_, cfg_.linear_solver);
    }
    const auto f = problem_.source(time);
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const double a = mesh.area[t];
        const double th = problem_.theta[t];
        l_system_->mass_rhs[t] =
            f[t] + a * (th * (problem_.beta(prev_time[t]) - problem_.beta(prev_iter[t])) + L_ * prev_iter[t]) / dt;
    }
    return l_solver_->solve(*l_system_);
}

MixedSolution StepContext::newton_iterate(std::span<const double> prev_time,
                                          std::span<const double> prev_iter, double time) const {
    const TriMesh& mesh = *problem_.mesh;
    const double dt = cfg_.dt;
    std::vector<double> reaction(mesh.num_triangles());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        reaction[t] = problem_.theta[t] * problem_.dbeta(prev_iter[t]) / dt;
    }
    SaddleSystem sys = system_with(reaction);
    const auto f = problem_.source(time);
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const double a = mesh.area[t];
        const double th = problem_.theta[t];
        const double p = prev_iter[t];
        sys.mass_rhs[t] = f[t] + a * th *
                                     (problem_.beta(prev_time[t]) - problem_.beta(p) +
                                      problem_.dbeta(p) * p) /
                                     dt;
    }
    return solve_saddle(sys, cfg_.linear_solver);
}

std::pair<std::vector<double>, double> step_mass_residual(const FlowProblem& problem,
                                                          const MixedSolution& sol,
                                                          std::span<const double> prev_time,
                                                          double time, double dt) {
    const TriMesh& mesh = *problem.mesh;
    const auto now = problem.storage(sol.p);
    const auto before = problem.storage(prev_time);
    auto f = problem.source(time);
    std::vector<double> inc(now.size());
    double scale = 0.0;
    for (std::size_t t = 0; t < now.size(); ++t) {
        inc[t] = now[t] - before[t];
        double flux = 0.0;
        for (int k = 0; k < 3; ++k) flux += std::abs(outward_flux(mesh, sol.u, int(t), k));
        scale = std::max({scale, std::abs(now[t]), std::abs(before[t]), dt * flux, dt * std::abs(f[t])});
    }
    return {local_mass_residual(sol, inc, f, dt), scale};
}

StepResult solve_time_step(StepContext& ctx, std::span<const double> prev_time, double time, int step,
                           IterationLog& log) {
    const TimeStepConfig& cfg = ctx.config();
    const TriMesh& mesh = *ctx.problem().mesh;
    const bool hybrid = cfg.newton && cfg.switch_tol > cfg.final_tol;
    std::vector<double> iter(prev_time.begin(), prev_time.end());
    Scheme scheme = Scheme::L;
    bool newton_allowed = hybrid;
    double handover = cfg.switch_tol;
    const double diverged = cfg.newton_divergence_tol > 0 ? cfg.newton_divergence_tol : cfg.switch_tol;
    StepResult result;
    std::vector<double> diff(iter.size());
    for (int i = 1; i <= cfg.max_iters; ++i) {
        MixedSolution sol;
        bool failed = false;
        if (scheme == Scheme::Newton) {
            try {
                sol = ctx.newton_iterate(prev_time, iter, time);
            } catch (const SingularSystem&) {
                failed = true;
            }
        }
        if (!failed && scheme == Scheme::L) sol = ctx.l_scheme_iterate(prev_time, iter, time);
        double residual = std::numeric_limits<double>::infinity();
        if (!failed) {
            for (std::size_t t = 0; t < iter.size(); ++t) diff[t] = sol.p[t] - iter[t];
            residual = l2_norm(mesh, diff);
        }
        if (scheme == Scheme::Newton && (failed || !std::isfinite(residual) || residual > diverged)) {
            // Newton left the basin provided by the L-scheme: resume the L-scheme from the
            // last accepted iterate and hand over again only much closer to the solution.
            if (!failed) log.records.push_back({step, i, scheme, residual});
            result.fell_back = true;
            handover *= 1e-2;
            newton_allowed = handover > cfg.final_tol;
            scheme = Scheme::L;
            ++result.newton_iterations;
            continue;
        }
        log.records.push_back({step, i, scheme, residual});
        if (scheme == Scheme::Newton) ++result.newton_iterations;
        iter = sol.p;
        result.iterations = i;
        if (residual < cfg.final_tol) {
            result.solution = std::move(sol);
            auto [r, scale] = step_mass_residual(ctx.problem(), result.solution, prev_time, time, cfg.dt);
            for (double v : r) result.mass_residual = std::max(result.mass_residual, std::abs(v));
            result.mass_scale = scale;
            return result;
        }
        if (scheme == Scheme::L && newton_allowed && residual < handover) scheme = Scheme::Newton;
    }
    std::ostringstream msg;
    msg << "time step " << step << " did not converge within " << cfg.max_iters << " iterations";
    throw NonConvergence(msg.str());
}

SimulationSummary run_simulation(FlowProblem problem, const TimeStepConfig& cfg,
                                 std::vector<double> p0, IterationLog& log,
                                 const SimulationHooks& hooks) {
    cfg.validate();
    if (p0.size() != problem.mesh->num_triangles()) {
        throw InvalidInput("initial pressure does not match the mesh");
    }
    auto ctx = std::make_unique<StepContext>(std::move(problem), cfg);
    std::vector<double> p = std::move(p0);
    SimulationSummary summary;
    std::optional<MixedSolution> last;
    const int steps = cfg.num_steps();
    for (int n = 1; n <= steps; ++n) {
        const double time = n * cfg.dt;
        if (hooks.before_step) {
            auto change = hooks.before_step(n, time, last ? &*last : nullptr);
            if (change) {
                ctx = std::make_unique<StepContext>(std::move(change->first), cfg);
                p = std::move(change->second);
            }
        }
        StepResult res = solve_time_step(*ctx, p, time, n, log);
        summary.total_iterations += res.iterations;
        if (res.mass_scale > 0) {
            summary.max_mass_ratio = std::max(summary.max_mass_ratio, res.mass_residual / res.mass_scale);
        }
        if (hooks.after_step) hooks.after_step(n, time, res);
        p = res.solution.p;
        last = std::move(res.solution);
        summary.steps = n;
    }
    if (last) summary.final_solution = std::move(*last);
    return summary;
}

}  // namespace twoscale
