#pragma once

#include "twoscale/fields.hpp"
#include "twoscale/mixedfem.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace twoscale {

/// How the L-scheme stabilization is chosen from M = max_{p in [0,1]} d_p b.
enum class LMode {
    Paper,     ///< M / 4 (0.75 R for b = R p^3)
    HalfMax,   ///< M / 2
    Max,       ///< M
    Explicit,  ///< TimeStepConfig::L_value
};

struct TimeStepConfig {
    double dt = 0.02;
    double T = 1.0;
    LMode l_mode = LMode::HalfMax;
    double L_value = 0.0;  ///< used with LMode::Explicit
    double switch_tol = 1e-2;
    double final_tol = 1e-10;
    /// Newton counts as failed once its residual exceeds this; 0 means switch_tol.
    double newton_divergence_tol = 0.0;
    int max_iters = 500;
    bool newton = true;  ///< hybrid L-then-Newton; false gives the pure L-scheme
    LinearSolver linear_solver = LinearSolver::Hybridized;

    [[nodiscard]] int num_steps() const;
    void validate() const;
};

enum class Scheme { L, Newton };

struct IterationRecord {
    int step = 0;
    int iter = 0;
    Scheme scheme = Scheme::L;
    double residual = 0.0;
};

struct IterationLog {
    std::vector<IterationRecord> records;

    [[nodiscard]] std::vector<IterationRecord> step_records(int step) const;
    void write_csv(const std::filesystem::path& path) const;
};

/// Discrete flow problem on one mesh: K, storage weight theta, law beta, source, boundary data.
struct FlowProblem {
    MeshPtr mesh;
    std::vector<Mat2> coeff;
    std::vector<double> theta;  ///< per triangle
    std::function<double(double)> beta;
    std::function<double(double)> dbeta;
    /// Per-triangle source integrals int_T f(., time).
    std::function<std::vector<double>(double)> source;
    BoundaryConditions bc;

    /// b(p) integrated over each triangle.
    [[nodiscard]] std::vector<double> storage(std::span<const double> p) const;
};

/// Fine-scale problem: coefficients and theta sampled at triangle centroids.
FlowProblem make_fine_problem(MeshPtr mesh, const PermeabilityField& field, const SaturationLaw& law,
                              const SourceSpec& source);

/// Largest d_p b over p in [0,1], taken over all triangles.
double max_storage_derivative(const FlowProblem& problem);
double l_parameter(const TimeStepConfig& cfg, const FlowProblem& problem);

class NonConvergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Holds the problem of one mesh plus the factorized L-scheme operator, which is reused
/// by every L-scheme iteration on that mesh.
class StepContext {
public:
    StepContext(FlowProblem problem, TimeStepConfig cfg);

    [[nodiscard]] const FlowProblem& problem() const { return problem_; }
    [[nodiscard]] const TimeStepConfig& config() const { return cfg_; }
    [[nodiscard]] double L() const { return L_; }

    /// One L-scheme iterate: reaction L/dt, previous iterate on the right-hand side.
    MixedSolution l_scheme_iterate(std::span<const double> prev_time, std::span<const double> prev_iter,
                                   double time);
    /// One Newton iterate: reaction b'(p^{i-1})/dt. Throws SingularSystem when the
    /// Jacobian cannot be factorized.
    MixedSolution newton_iterate(std::span<const double> prev_time, std::span<const double> prev_iter,
                                 double time) const;

private:
    SaddleSystem system_with(std::vector<double> reaction) const;

    FlowProblem problem_;
    TimeStepConfig cfg_;
    double L_ = 1.0;
    std::optional<SaddleSystem> l_system_;
    std::unique_ptr<MixedSolver> l_solver_;
};

struct StepResult {
    MixedSolution solution;
    int iterations = 0;
    int newton_iterations = 0;
    bool fell_back = false;     ///< Newton left its basin and the L-scheme resumed
    double mass_residual = 0.0;  ///< max_T |r_T|
    double mass_scale = 0.0;     ///< largest term magnitude entering r_T
};

/// Backward-Euler step: L-scheme until switch_tol, Newton until final_tol, falling
/// back to the L-scheme if Newton fails. Throws NonConvergence past max_iters.
StepResult solve_time_step(StepContext& ctx, std::span<const double> prev_time, double time, int step,
                           IterationLog& log);

/// r_T of a converged step, together with the magnitude scale used to judge it.
std::pair<std::vector<double>, double> step_mass_residual(const FlowProblem& problem,
                                                          const MixedSolution& sol,
                                                          std::span<const double> prev_time,
                                                          double time, double dt);

/// Per-step callbacks. `before_step` may replace the problem (remeshing) and must then
/// return the previous pressure transferred to the new mesh.
struct SimulationHooks {
    std::function<std::optional<std::pair<FlowProblem, std::vector<double>>>(
        int step, double time, const MixedSolution* last)>
        before_step;
    std::function<void(int step, double time, const StepResult&)> after_step;
};

struct SimulationSummary {
    int steps = 0;
    int total_iterations = 0;
    double max_mass_ratio = 0.0;  ///< max over steps of mass_residual / mass_scale
    MixedSolution final_solution;
};

/// Runs all time steps of `cfg` from initial pressure `p0`.
SimulationSummary run_simulation(FlowProblem problem, const TimeStepConfig& cfg,
                                 std::vector<double> p0, IterationLog& log,
                                 const SimulationHooks& hooks = {});

std::string scheme_name(Scheme s);

}  // namespace twoscale
