#pragma once

#include "twoscale/fields.hpp"
#include "twoscale/geometry.hpp"
#include "twoscale/mixedfem.hpp"

#include <array>
#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <vector>

namespace twoscale {

/// Micro-scale coefficients of one coarse cell on a periodic uniform mesh of the cell.
struct CellSample {
    Rect rect;
    int micro_n = 0;
    MeshPtr mesh;               ///< periodic edges paired across the cell
    std::vector<Mat2> coeff;    ///< centroid samples of the fine field
};

/// For raster fields the resolution is raised to the smallest multiple of the pixel
/// count across the cell that is >= micro_n; other fields keep micro_n.
int snap_micro_n(const PermeabilityField& field, const Rect& rect, int micro_n);

CellSample sample_cell(const PermeabilityField& field, const Rect& rect, int micro_n,
                       Split split = Split::Crossed);

/// Periodic corrector problems for both unit directions e_1, e_2.
///
/// Solved in total-flux form: sigma^j = -K (e_j + grad omega^j) satisfies
///   <K^{-1} sigma, v> - <omega, div v> = -<e_j, v>,  div sigma = 0,
/// periodic, with zero-mean omega. The corrector flux is xi^j = sigma^j + K e_j.
struct CellProblemResult {
    MeshPtr mesh;
    std::array<std::vector<double>, 2> omega;  ///< P0 correctors
    std::array<std::vector<double>, 2> sigma;  ///< RT0 total fluxes
    double max_residual = 0.0;

    /// Cell average of xi^j over triangle t.
    [[nodiscard]] Vec2 xi_mean(const CellSample& sample, int j, int t) const;
};

CellProblemResult solve_cell_problems(const CellSample& sample,
                                      LinearSolver kind = LinearSolver::Hybridized);

struct EffectiveTensor {
    Mat2 K = Mat2::Identity();  ///< symmetrized
    double asymmetry = 0.0;     ///< ||K - K^T|| / ||K|| before symmetrization
    int micro_n = 0;
};

/// K*_{ij} = -(1/|Y|) int_Y sigma^j . e_i
EffectiveTensor effective_tensor(const CellSample& sample, const CellProblemResult& cells);
EffectiveTensor effective_tensor(const PermeabilityField& field, const Rect& rect, int micro_n);

struct EffectiveStorage {
    double theta = 0.0;
    std::function<double(double)> source;  ///< f*(t), cell average of f
};

EffectiveStorage effective_storage_source(const SaturationLaw& law, const SourceSpec& source,
                                          const CellSample& sample);

struct AnisotropyMetrics {
    double tau1 = 0.0;  ///< relative Frobenius size of the off-diagonal part
    double tau2 = 0.0;  ///< relative difference of the diagonal entries
};

/// Area-weighted discrete versions of the two anisotropy integrals.
AnisotropyMetrics anisotropy_metrics(std::span<const Mat2> tensors, std::span<const double> areas);

/// Harmonic mean of the (isotropic) micro samples, times the identity.
Mat2 harmonic_average(const CellSample& sample);
Mat2 harmonic_average(const PermeabilityField& field, const Rect& rect, int micro_n);
/// Arithmetic mean of the (isotropic) micro samples, times the identity.
Mat2 arithmetic_average(const CellSample& sample);

enum class TensorModel { Homogenized, Harmonic };

/// Cache namespace for the cells of one field on one level-0 grid: cell ids only name a
/// rectangle together with the grid they index.
std::uint64_t tensor_context(const PermeabilityField& field, const CoarseGrid& grid);

/// Thread-safe store of per-cell tensors keyed by (cell id, context, micro_n, model).
class TensorCache {
public:
    struct Key {
        CellId cell;
        std::uint64_t context;  ///< tensor_context of field and grid
        int micro_n;
        TensorModel model;
        friend auto operator<=>(const Key&, const Key&) = default;
    };

    [[nodiscard]] std::optional<EffectiveTensor> find(const Key& key) const;
    /// Returns the stored value when another writer got there first.
    EffectiveTensor insert(const Key& key, const EffectiveTensor& value);

    /// Computes every missing tensor for `cells` (parallel when threads > 1).
    /// Returns the number of new cell solves.
    std::size_t ensure(const PermeabilityField& field, const CoarseGrid& grid,
                       const std::vector<CellKey>& cells, int micro_n, TensorModel model,
                       int threads = 1);

    [[nodiscard]] const EffectiveTensor& at(const Key& key) const;
    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::size_t solve_count() const { return solves_.load(); }
    [[nodiscard]] std::vector<std::pair<Key, EffectiveTensor>> entries() const;

private:
    mutable std::mutex mutex_;
    std::map<Key, EffectiveTensor> entries_;
    std::atomic<std::size_t> solves_{0};
};

/// Per-triangle coefficient on a triangulated grid, from the tensors of the owning leaves.
std::vector<Mat2> macro_coefficients(const TriMesh& mesh, const TensorCache& cache,
                                     std::uint64_t context, int micro_n, TensorModel model,
                                     bool diagonal_only);

/// CSV rows: cell_id,level,x0,y0,dx,dy,K11,K12,K22 for every leaf.
void write_tensor_csv(const std::filesystem::path& path, const CoarseGrid& grid,
                      const TensorCache& cache, std::uint64_t context, int micro_n,
                      TensorModel model);

}  // namespace twoscale
