#include "twoscale/nonlinear.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace twoscale;

namespace {

const Rect kDomain{0.0, 1.0, 0.0, 0.5};

SourceSpec corner_sources(double patch = 1.0 / 16) {
    return {{},
            {{corner_region(kDomain, Corner::UpperRight, patch), 1.0},
             {corner_region(kDomain, Corner::LowerLeft, patch), 0.0}}};
}

FlowProblem periodic_problem(int nx, const SaturationLaw& law, const SourceSpec& src = corner_sources()) {
    auto mesh = std::make_shared<const TriMesh>(build_uniform_trimesh(nx, nx / 2, kDomain));
    return make_fine_problem(mesh, quasi_periodic_field({.epsilon = 1.0 / 8}), law, src);
}

std::vector<double> zeros(const FlowProblem& fp) { return std::vector<double>(fp.mesh->num_triangles(), 0.0); }

// Direct backward-Euler step for b = c p: reaction c/dt, right-hand side f + c |T| p_old / dt.
MixedSolution linear_reference(const FlowProblem& fp, double c, double dt, std::span<const double> p_old,
                               double time) {
    const std::vector<double> reaction(fp.mesh->num_triangles(), c / dt);
    SaddleSystem sys = assemble_mixed(fp.mesh, fp.coeff, reaction, fp.bc);
    const auto f = fp.source(time);
    for (std::size_t t = 0; t < reaction.size(); ++t) {
        sys.mass_rhs[t] = f[t] + c * fp.mesh->area[t] * p_old[t] / dt;
    }
    return solve_saddle(sys, LinearSolver::DirectKKT);
}

double max_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(TimeStepConfig, Validation) {
    TimeStepConfig cfg;
    EXPECT_EQ(cfg.num_steps(), 50);
    EXPECT_NO_THROW(cfg.validate());
    cfg.T = 0.95 + 0.013;
    EXPECT_THROW(cfg.validate(), InvalidInput);
    cfg = {};
    cfg.switch_tol = 1e-12;
    EXPECT_THROW(cfg.validate(), InvalidInput);
    cfg = {};
    cfg.l_mode = LMode::Explicit;
    EXPECT_THROW(cfg.validate(), InvalidInput);
    cfg.L_value = 2.0;
    EXPECT_NO_THROW(cfg.validate());
}

TEST(LParameter, ModesForCubicLaw) {
    const auto fp = periodic_problem(8, cubic_law(2.0));
    EXPECT_NEAR(max_storage_derivative(fp), 6.0, 1e-12);
    TimeStepConfig cfg;
    cfg.l_mode = LMode::Paper;
    EXPECT_NEAR(l_parameter(cfg, fp), 1.5, 1e-12);
    cfg.l_mode = LMode::HalfMax;
    EXPECT_NEAR(l_parameter(cfg, fp), 3.0, 1e-12);
    cfg.l_mode = LMode::Max;
    EXPECT_NEAR(l_parameter(cfg, fp), 6.0, 1e-12);
    cfg.l_mode = LMode::Explicit;
    cfg.L_value = 0.4;
    EXPECT_DOUBLE_EQ(l_parameter(cfg, fp), 0.4);
}

TEST(LScheme, LinearLawExactAfterOneIterate) {
    const double c = 0.7;
    const auto fp = periodic_problem(16, linear_law(c));
    TimeStepConfig cfg;
    cfg.l_mode = LMode::Max;  // L = c: the iterate is the linear step itself
    StepContext ctx(fp, cfg);
    const auto p0 = zeros(fp);
    const auto it1 = ctx.l_scheme_iterate(p0, p0, cfg.dt);
    const auto it2 = ctx.l_scheme_iterate(p0, it1.p, cfg.dt);
    std::vector<double> d(p0.size());
    for (std::size_t t = 0; t < d.size(); ++t) d[t] = it2.p[t] - it1.p[t];
    EXPECT_LE(l2_norm(*fp.mesh, d), 1e-12);
    const auto ref = linear_reference(fp, c, cfg.dt, p0, cfg.dt);
    EXPECT_LE(max_diff(it1.p, ref.p), 1e-10);
}

TEST(Newton, LinearLawExactInOneIterate) {
    const double c = 1.3;
    const auto fp = periodic_problem(16, linear_law(c));
    TimeStepConfig cfg;
    StepContext ctx(fp, cfg);
    std::vector<double> seed(fp.mesh->num_triangles(), 0.37);
    const auto p0 = zeros(fp);
    const auto it1 = ctx.newton_iterate(p0, seed, cfg.dt);
    const auto ref = linear_reference(fp, c, cfg.dt, p0, cfg.dt);
    EXPECT_LE(max_diff(it1.p, ref.p), 1e-10);
    const auto it2 = ctx.newton_iterate(p0, it1.p, cfg.dt);
    std::vector<double> d(p0.size());
    for (std::size_t t = 0; t < d.size(); ++t) d[t] = it2.p[t] - it1.p[t];
    EXPECT_LE(l2_norm(*fp.mesh, d), 1e-12);
}

TEST(Schemes, AgreeForLinearLaw) {
    const auto fp = periodic_problem(16, linear_law(1.0));
    IterationLog log_l, log_n;
    TimeStepConfig pure;
    pure.newton = false;
    pure.l_mode = LMode::Explicit;
    pure.L_value = 3.0;  // deliberately not the exact linearization
    pure.T = 0.1;
    pure.final_tol = 1e-13;  // the increment bound alone leaves a contraction-rate tail
    TimeStepConfig hybrid;
    hybrid.T = 0.1;
    hybrid.switch_tol = 1e3;  // Newton from the first iterate
    const auto a = run_simulation(fp, pure, zeros(fp), log_l);
    const auto b = run_simulation(fp, hybrid, zeros(fp), log_n);
    EXPECT_LE(max_diff(a.final_solution.p, b.final_solution.p), 1e-10);
    EXPECT_GT(a.total_iterations, b.total_iterations);
}

TEST(LScheme, ResidualsNonIncreasingWithMaxDerivative) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig cfg;
    cfg.newton = false;
    cfg.l_mode = LMode::Max;
    cfg.T = 0.2;
    IterationLog log;
    const auto s = run_simulation(fp, cfg, zeros(fp), log);
    ASSERT_EQ(s.steps, 10);
    for (int n = 1; n <= s.steps; ++n) {
        const auto rec = log.step_records(n);
        ASSERT_FALSE(rec.empty());
        for (std::size_t i = 1; i < rec.size(); ++i) {
            EXPECT_LE(rec[i].residual, rec[i - 1].residual) << "step " << n << " iter " << rec[i].iter;
            EXPECT_EQ(rec[i].scheme, Scheme::L);
        }
        EXPECT_LT(rec.back().residual, cfg.final_tol);
    }
}

TEST(Hybrid, SuperlinearNewtonTail) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig cfg;
    cfg.T = 0.2;
    IterationLog log;
    const auto s = run_simulation(fp, cfg, zeros(fp), log);
    for (int n = 5; n <= s.steps; ++n) {
        std::vector<double> r;
        for (const auto& rec : log.step_records(n))
            if (rec.scheme == Scheme::Newton) r.push_back(rec.residual);
        ASSERT_GE(r.size(), 2u) << "step " << n;
        ASSERT_LE(r.size(), 10u);
        // Each Newton residual at least squares the relative distance to convergence.
        for (std::size_t i = 1; i < r.size(); ++i) {
            if (r[i] < 1e-13) break;
            EXPECT_LT(std::log(r[i]), 1.5 * std::log(r[i - 1]) + 2.0) << "step " << n;
        }
    }
}

TEST(Hybrid, FewerIterationsThanPureLScheme) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig pure;
    pure.newton = false;
    pure.T = 0.2;
    TimeStepConfig hybrid = pure;
    hybrid.newton = true;
    IterationLog lp, lh;
    run_simulation(fp, pure, zeros(fp), lp);
    run_simulation(fp, hybrid, zeros(fp), lh);
    int fewer = 0;
    for (int n = 1; n <= pure.num_steps(); ++n) {
        if (lh.step_records(n).size() < lp.step_records(n).size()) ++fewer;
    }
    EXPECT_GE(fewer, 9);
}

TEST(Hybrid, EqualTolerancesGivePureLScheme) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig a;
    a.T = 0.06;
    a.switch_tol = a.final_tol;
    TimeStepConfig b = a;
    b.newton = false;
    IterationLog la, lb;
    const auto sa = run_simulation(fp, a, zeros(fp), la);
    const auto sb = run_simulation(fp, b, zeros(fp), lb);
    ASSERT_EQ(la.records.size(), lb.records.size());
    for (std::size_t i = 0; i < la.records.size(); ++i) {
        EXPECT_EQ(la.records[i].scheme, Scheme::L);
        EXPECT_EQ(la.records[i].residual, lb.records[i].residual);
    }
    EXPECT_EQ(sa.final_solution.p, sb.final_solution.p);
}

TEST(Hybrid, NewtonFailureFallsBackAndIsLogged) {
    // Starting from p = 0 the storage derivative vanishes, so an early Newton handover
    // overshoots; the step must still converge through the L-scheme.
    const auto fp = periodic_problem(32, cubic_law(1.0), corner_sources(1.0 / 16));
    TimeStepConfig cfg;
    cfg.T = cfg.dt;
    StepContext ctx(fp, cfg);
    IterationLog log;
    const auto p0 = zeros(fp);
    const auto res = solve_time_step(ctx, p0, cfg.dt, 1, log);
    EXPECT_TRUE(res.fell_back);
    bool logged_growth = false;
    for (const auto& r : log.records)
        if (r.scheme == Scheme::Newton && r.residual > cfg.switch_tol) logged_growth = true;
    EXPECT_TRUE(logged_growth);
    EXPECT_LT(log.records.back().residual, cfg.final_tol);
}

TEST(Hybrid, DivergenceToleranceKeepsNewtonRunning) {
    const auto fp = periodic_problem(32, cubic_law(1.0), corner_sources(1.0 / 16));
    TimeStepConfig cfg;
    cfg.T = cfg.dt;
    cfg.newton_divergence_tol = 1e3;
    StepContext ctx(fp, cfg);
    IterationLog log;
    const auto res = solve_time_step(ctx, zeros(fp), cfg.dt, 1, log);
    EXPECT_FALSE(res.fell_back);
    std::size_t first_newton = log.records.size();
    for (std::size_t i = 0; i < log.records.size(); ++i)
        if (log.records[i].scheme == Scheme::Newton) first_newton = std::min(first_newton, i);
    for (std::size_t i = first_newton; i < log.records.size(); ++i) EXPECT_EQ(log.records[i].scheme, Scheme::Newton);
    EXPECT_LT(log.records.back().residual, cfg.final_tol);

    // Same converged pressure as the default fallback path.
    TimeStepConfig def = cfg;
    def.newton_divergence_tol = 0.0;
    StepContext ctx2(fp, def);
    IterationLog log2;
    const auto ref = solve_time_step(ctx2, zeros(fp), cfg.dt, 1, log2);
    for (std::size_t t = 0; t < ref.solution.p.size(); ++t) EXPECT_NEAR(res.solution.p[t], ref.solution.p[t], 1e-9);
}

TEST(Hybrid, MaxItersExceededThrows) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig cfg;
    cfg.max_iters = 2;
    cfg.newton = false;
    StepContext ctx(fp, cfg);
    IterationLog log;
    const auto p0 = zeros(fp);
    EXPECT_THROW(solve_time_step(ctx, p0, cfg.dt, 1, log), NonConvergence);
    EXPECT_EQ(log.records.size(), 2u);
}

TEST(Simulation, ZeroDataGivesZeroTrajectory) {
    const auto fp = periodic_problem(8, cubic_law(1.0), SourceSpec{});
    TimeStepConfig cfg;
    cfg.T = cfg.dt;
    IterationLog log;
    const auto s = run_simulation(fp, cfg, zeros(fp), log);
    EXPECT_EQ(s.steps, 1);
    for (double v : s.final_solution.p) EXPECT_EQ(v, 0.0);
    for (double v : s.final_solution.u) EXPECT_EQ(v, 0.0);
}

TEST(Simulation, LocalMassConservedEveryStep) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig cfg;
    cfg.T = 0.2;
    IterationLog log;
    int checked = 0;
    SimulationHooks hooks;
    hooks.after_step = [&](int, double, const StepResult& r) {
        ++checked;
        EXPECT_LE(r.mass_residual, 1e-9 * r.mass_scale);
    };
    const auto s = run_simulation(fp, cfg, zeros(fp), log, hooks);
    EXPECT_EQ(checked, 10);
    EXPECT_LE(s.max_mass_ratio, 1e-9);
}

TEST(Simulation, SourceTermDrivesStorage) {
    // Uniform source, no flow: each step adds dt * f to b(p) in every triangle.
    SourceSpec src;
    src.f = [](const Vec2&, double) { return 2.0; };
    const auto fp = periodic_problem(8, linear_law(1.0), src);
    TimeStepConfig cfg;
    cfg.T = 0.1;
    cfg.l_mode = LMode::Max;
    IterationLog log;
    const auto s = run_simulation(fp, cfg, zeros(fp), log);
    for (double v : s.final_solution.p) EXPECT_NEAR(v, 0.2, 1e-10);
}

TEST(Simulation, HookCanReplaceProblem) {
    const auto coarse = periodic_problem(8, cubic_law(1.0));
    const auto fine = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig cfg;
    cfg.T = 0.06;
    IterationLog log;
    SimulationHooks hooks;
    hooks.before_step = [&](int n, double, const MixedSolution* last)
        -> std::optional<std::pair<FlowProblem, std::vector<double>>> {
        if (n != 2) return std::nullopt;
        EXPECT_NE(last, nullptr);
        return std::pair{fine, l2_project(*coarse.mesh, last->p, *fine.mesh)};
    };
    const auto s = run_simulation(coarse, cfg, zeros(coarse), log, hooks);
    EXPECT_EQ(s.final_solution.p.size(), fine.mesh->num_triangles());
}

TEST(IterationLog, DeterministicAndWritable) {
    const auto fp = periodic_problem(16, cubic_law(1.0));
    TimeStepConfig cfg;
    cfg.T = 0.06;
    IterationLog a, b;
    run_simulation(fp, cfg, zeros(fp), a);
    run_simulation(fp, cfg, zeros(fp), b);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        EXPECT_EQ(a.records[i].residual, b.records[i].residual);
        EXPECT_EQ(a.records[i].scheme, b.records[i].scheme);
        EXPECT_GT(a.records[i].residual, 0.0);
    }
    const auto path = std::filesystem::temp_directory_path() / "twoscale_iterlog.csv";
    a.write_csv(path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "step,iter,scheme,residual");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    EXPECT_EQ(rows, a.records.size());
    std::filesystem::remove(path);
}
