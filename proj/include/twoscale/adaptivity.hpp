#pragma once

#include "twoscale/nonlinear.hpp"
#include "twoscale/upscaling.hpp"

#include <functional>
#include <set>
#include <vector>

namespace twoscale {

/// Which triangles enter the averaging patch of a vertex.
enum class PatchMode {
    OneRing,  ///< triangles containing the vertex
    TwoRing,  ///< triangles touching any triangle of the one-ring
};

/// Patch averages of an RT0 field at the mesh vertices; the P1 interpolant of these
/// values is the smoothed flux.
struct AveragedField {
    MeshPtr mesh;
    std::vector<Vec2> vertex_values;

    /// P1 reconstruction inside triangle t.
    [[nodiscard]] Vec2 eval(int t, const Vec2& x) const;
};

AveragedField average_field(MeshPtr mesh, const std::vector<double>& u, PatchMode mode = PatchMode::OneRing);

struct IndicatorField {
    std::vector<double> eta;
    double max = 0.0;
    double min = 0.0;

    [[nodiscard]] double sum_squares() const;
};

/// eta_T = ||u - A u||_{L2(T)}, exact for the linear difference (edge-midpoint rule).
IndicatorField error_indicator(MeshPtr mesh, const std::vector<double>& u,
                               PatchMode mode = PatchMode::OneRing, int threads = 1);

/// Triangle indices.
struct Marks {
    std::vector<int> refine;
    std::vector<int> coarsen;

    [[nodiscard]] bool empty() const { return refine.empty() && coarsen.empty(); }
};

/// refine: eta >= theta_r max eta; coarsen: eta <= theta_c min eta. Nothing when max eta = 0.
Marks mark(const IndicatorField& indicator, double theta_r, double theta_c);

/// As `mark`, but the refinement threshold is relative to the largest indicator among
/// triangles whose cell is still below max_level, so capped cells do not freeze the rest.
Marks mark_refinable(const IndicatorField& indicator, const TriMesh& mesh, const CoarseGrid& grid,
                     double theta_r, double theta_c, int max_level);

/// Marks lifted from triangles to the coarse leaves owning them.
struct CellMarks {
    std::set<CellId> refine;   ///< any owned triangle marked, level below max_level
    std::set<CellId> coarsen;  ///< every owned triangle marked, not also refined
};

CellMarks lift_marks(const TriMesh& mesh, const CoarseGrid& grid, const Marks& marks, int max_level);

/// What macro-scale coefficients are built from.
struct MacroSetup {
    const PermeabilityField* field = nullptr;
    SaturationLaw law;
    SourceSpec source;
    int micro_n = 64;
    TensorModel model = TensorModel::Homogenized;
    bool diagonal_only = true;
    int threads = 1;
};

struct AdaptReport {
    std::vector<CellId> created;
    std::vector<CellId> deleted;
    std::size_t refined = 0;
    std::size_t coarsened = 0;
    std::size_t new_solves = 0;

    [[nodiscard]] bool changed() const { return !created.empty() || !deleted.empty(); }
};

/// Refines, then coarsens, then fills the tensor cache for every new leaf. `mesh` is
/// replaced by the triangulation of the new grid only when the grid changed.
AdaptReport adapt_step(CoarseGrid& grid, MeshPtr& mesh, TensorCache& cache, const Marks& marks,
                       const MacroSetup& setup, int max_level);

/// Homogenized problem on a triangulated grid: K* from the cache (all leaves must be
/// present), theta* and f* as cell averages, Dirichlet patches on the boundary.
FlowProblem make_macro_problem(const CoarseGrid& grid, MeshPtr mesh, const TensorCache& cache,
                               const MacroSetup& setup);

struct AdaptivityConfig {
    bool enabled = false;
    double theta_r = 0.5;
    double theta_c = 1.0;
    int max_level = 3;
    PatchMode patch = PatchMode::OneRing;
};

struct MacroStepInfo {
    int step = 0;
    std::size_t leaves = 0;
    std::size_t triangles = 0;
    std::size_t edges = 0;
    int iterations = 0;
    AdaptReport adapt;
    double eta_max = 0.0;
};

struct MacroRun {
    CoarseGrid grid;
    MeshPtr mesh;
    SimulationSummary summary;
    std::vector<MixedSolution> trajectory;  ///< one per time step
    std::vector<MacroStepInfo> steps;
};

/// Per-step observer: the solution, and the indicator used before the step (null when
/// adaptivity is off).
using MacroObserver = std::function<void(int step, const CoarseGrid& grid, const MixedSolution& sol,
                                         const IndicatorField* indicator)>;

/// Time loop on the coarse grid: estimate, refine/coarsen, recompute missing tensors,
/// project the previous pressure, iterate to convergence.
MacroRun run_macro(CoarseGrid grid, TensorCache& cache, const MacroSetup& setup,
                   const AdaptivityConfig& adapt, const TimeStepConfig& cfg, IterationLog& log,
                   const MacroObserver& observer = {});

}  // namespace twoscale
