#pragma once

#include "twoscale/adaptivity.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace twoscale {

enum class ProblemKind { Periodic, QuasiPeriodic, Spe10 };

struct ExperimentConfig {
    ProblemKind problem = ProblemKind::QuasiPeriodic;
    double epsilon = 1.0 / 16;
    std::string raster_path;  ///< SPE10 raster; falls back to $TWOSCALE_SPE10_RASTER

    int coarse_nx = 16;
    int coarse_ny = 8;
    int micro_n = 64;
    int fine_nx = 200;
    int fine_ny = 100;
    double dt = 0.02;
    double T = 1.0;
    double R = 1.0;
    /// Dirichlet patch: this many level-0 cells of each mesh at the corner; a positive
    /// patch_size fixes a square of that side instead.
    int patch_cells = 1;
    double patch_size = 0.0;

    LMode l_mode = LMode::HalfMax;
    double L_value = 0.0;
    double switch_tol = 1e-2;
    double final_tol = 1e-10;
    double newton_divergence_tol = 0.0;
    int max_iters = 500;
    bool newton = true;
    bool fine_newton = true;  ///< hybrid solver for fine references (same converged solution)

    AdaptivityConfig adapt{true, 0.5, 1.0, 3, PatchMode::OneRing};
    TensorModel model = TensorModel::Homogenized;
    bool diagonal_only = true;

    std::vector<int> table1_inverse_eps{8, 16, 32};
    std::vector<int> table1_nx{8, 16, 32};

    std::filesystem::path out_dir = "out";
    std::filesystem::path cache_dir;  ///< empty: <out_dir>/cache
    int vtk_every = 0;                ///< 0 writes only the final step
    bool serial = false;
    unsigned seed = 0;  ///< accepted for interface stability; meshes are deterministic

    [[nodiscard]] TimeStepConfig time_config(bool fine = false) const;
    [[nodiscard]] int threads() const;
    [[nodiscard]] std::filesystem::path resolved_cache_dir() const;
    void validate() const;
};

/// Defaults for the named experiments (quasi-periodic, table1, spe10, compare-harmonic).
ExperimentConfig preset(const std::string& experiment);

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Missing keys keep the values already in `c`.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

PermeabilityField make_field(const ExperimentConfig& cfg);
/// Source at the upper-right corner and sink at the lower-left (swapped for SPE10),
/// each covering `patch_cells` cells of an nx x ny grid of the domain.
SourceSpec corner_sources(const ExperimentConfig& cfg, const Rect& domain, int nx, int ny);

/// ||Pi_h p_H - p_h|| / ||p_h|| with Pi_h the L2 projection onto the fine mesh.
double relative_error_eH(const MixedSolution& coarse, const MixedSolution& fine);

struct TimeIntegratedError {
    double E_T = 0.0;
    double E_T2 = 0.0;
};

/// Rectangle rule in time of the squared L2 norms.
TimeIntegratedError time_integrated_error(const std::vector<MixedSolution>& coarse,
                                          const std::vector<MixedSolution>& fine, double dt);

/// Edges plus triangles.
std::size_t mixed_dofs(const TriMesh& mesh);

struct FineReference {
    MeshPtr mesh;
    std::vector<MixedSolution> trajectory;  ///< fluxes are kept for the final step only
    int total_iterations = 0;
    double max_mass_ratio = 0.0;
    bool from_cache = false;
    double seconds = 0.0;
};

/// Runs or reloads (keyed by a hash of every input) the fine-scale trajectory.
FineReference fine_reference(const ExperimentConfig& cfg, const PermeabilityField& field,
                             IterationLog* log = nullptr);

void save_tensor_cache(const TensorCache& cache, const std::filesystem::path& path);
/// Returns the number of entries read; a missing file reads nothing.
std::size_t load_tensor_cache(TensorCache& cache, const std::filesystem::path& path);

struct VtkCellField {
    std::string name;
    std::vector<double> values;
};

struct VtkVectorField {
    std::string name;
    std::vector<Vec2> values;
};

/// Legacy ASCII unstructured grid with triangles (cell type 5).
void write_vtk(const std::filesystem::path& path, const TriMesh& mesh,
               const std::vector<VtkCellField>& scalars, const std::vector<VtkVectorField>& vectors = {});
/// Pressure, flux at the centroid and its magnitude.
void write_solution_vtk(const std::filesystem::path& path, const MixedSolution& sol);

/// Files written by one run, listed in manifest.json.
class ArtifactSet {
public:
    explicit ArtifactSet(std::filesystem::path dir);

    [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path add(const std::string& name);
    void write_json(const std::string& name, const nlohmann::json& j);
    void write_manifest() const;
    [[nodiscard]] const std::vector<std::string>& files() const { return files_; }

private:
    std::filesystem::path dir_;
    std::vector<std::string> files_;
};

/// Runs `experiment` (table1, quasi-periodic, spe10, compare-harmonic) and returns the
/// report also written to <out>/<experiment>/report.json.
nlohmann::json run_experiment(const std::string& experiment, const ExperimentConfig& cfg);

/// Single macro run (adaptive per config) with all artifacts; returns the report.
nlohmann::json run_macro_command(const ExperimentConfig& cfg);
/// Fine-scale run with artifacts; returns the report.
nlohmann::json run_fine_command(const ExperimentConfig& cfg);
/// Effective tensors on the level-0 grid plus anisotropy metrics.
nlohmann::json upscale_command(const ExperimentConfig& cfg);

/// Which of the two reported E_T^2 figures (0.0507, 0.016) a value is nearer to.
std::string nearest_reported_figure(double e_t2);

}  // namespace twoscale
