#pragma once

#include "twoscale/fields.hpp"
#include "twoscale/geometry.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace twoscale {

// Lowest-order Raviart-Thomas (flux) / piecewise-constant (pressure) machinery.
//
// Flux unknowns are total fluxes through edges, measured along the edge's fixed
// normal. On a triangle the local basis function of edge k is
//   phi_k(x) = (x - a_k) / (2|T|),
// with a_k the opposite vertex; it carries unit outward flux through edge k and
// has divergence 1/|T|.

using MeshPtr = std::shared_ptr<const TriMesh>;

enum class BcKind : std::uint8_t { Interior, NoFlux, Dirichlet, Periodic };

struct BoundaryConditions {
    std::vector<BcKind> kind;   ///< per edge
    std::vector<double> value;  ///< Dirichlet pressure per edge (ignored elsewhere)
    bool zero_mean = false;     ///< impose mean(p) = 0 through a multiplier

    [[nodiscard]] bool has_dirichlet() const;
};

/// Interior edges stay interior, periodic edges periodic, every other boundary edge
/// becomes no-flux.
BoundaryConditions natural_bc(const TriMesh& mesh);
/// No-flux boundary except edges whose midpoint lies in a patch (Dirichlet with its value).
BoundaryConditions patch_bc(const TriMesh& mesh, std::span<const DirichletPatch> patches);
/// Dirichlet data g on every boundary edge (evaluated at the edge midpoint).
BoundaryConditions dirichlet_bc(const TriMesh& mesh, const std::function<double(const Vec2&)>& g);
/// Periodic identification on a mesh with paired edges, plus the zero-mean constraint.
BoundaryConditions periodic_bc(const TriMesh& mesh);

/// Block system
///   M u - B^T p = g        (flux equations)
///   B u + D p   = r        (mass equations, one per triangle)
/// stored element by element; global blocks are assembled on demand.
struct SaddleSystem {
    MeshPtr mesh;
    std::vector<Mat3> local_mass;    ///< coefficient-inverse weighted, outward basis
    std::vector<Vec3> flux_load;     ///< <load, phi_k> per triangle (outward basis)
    std::vector<double> reaction;    ///< D_T = reaction_T * |T|
    std::vector<double> mass_rhs;    ///< r_T, already integrated over T
    BoundaryConditions bc;

    std::vector<int> edge_dof;   ///< global flux dof per edge, -1 for no-flux edges
    std::vector<int> edge_sign;  ///< sign of the edge flux relative to its dof
    int num_flux_dofs = 0;

    [[nodiscard]] std::size_t num_triangles() const { return local_mass.size(); }
};

/// Assembles the element blocks. `reaction` may be empty (zero).
SaddleSystem assemble_mixed(MeshPtr mesh, std::span<const Mat2> coeff,
                            std::span<const double> reaction, BoundaryConditions bc);

/// Local mass matrix of `coeff^{-1}` in the outward basis, exact for constant coefficients.
Mat3 rt0_local_mass(const TriMesh& mesh, int t, const Mat2& coeff_inverse);

struct MixedSolution {
    MeshPtr mesh;
    std::vector<double> p;  ///< per triangle
    std::vector<double> u;  ///< per edge, along the edge normal
};

enum class LinearSolver {
    Hybridized,  ///< element-wise static condensation to edge multipliers, sparse Cholesky
    DirectKKT,   ///< sparse LU on the assembled saddle-point system
};

/// Factorizes the operator of a SaddleSystem once; solves for any right-hand side
/// sharing that operator (same mesh, coefficients, reaction, and boundary kinds).
class MixedSolver {
public:
    explicit MixedSolver(const SaddleSystem& system, LinearSolver kind = LinearSolver::Hybridized);
    ~MixedSolver();
    MixedSolver(MixedSolver&&) noexcept;
    MixedSolver& operator=(MixedSolver&&) noexcept;

    [[nodiscard]] MixedSolution solve(const SaddleSystem& system) const;
    [[nodiscard]] LinearSolver kind() const { return kind_; }

    struct Impl;

private:
    std::unique_ptr<Impl> impl_;
    LinearSolver kind_;
};

MixedSolution solve_saddle(const SaddleSystem& system, LinearSolver kind = LinearSolver::Hybridized);

/// Relative residual of the block equations: ||r|| / ||sum of |terms| per row||.
double saddle_residual(const SaddleSystem& system, const MixedSolution& sol);

/// Outward total flux of triangle t through its local edge k.
inline double outward_flux(const TriMesh& mesh, const std::vector<double>& u, int t, int k) {
    return mesh.orientation[t][k] * u[mesh.triangle_edges[t][k]];
}
/// Integral of div u over triangle t (sum of outward fluxes).
double divergence_integral(const TriMesh& mesh, const std::vector<double>& u, int t);
/// Point value of the RT0 field inside triangle t.
Vec2 rt0_value(const TriMesh& mesh, const std::vector<double>& u, int t, const Vec2& x);
/// Integral of the RT0 field over triangle t.
Vec2 rt0_integral(const TriMesh& mesh, const std::vector<double>& u, int t);
/// RT0 interpolant of a vector field (edge fluxes by Gauss quadrature).
std::vector<double> rt0_interpolate(const TriMesh& mesh,
                                    const std::function<Vec2(const Vec2&)>& field);

/// Per-triangle average of a scalar function (degree-4 quadrature).
std::vector<double> l2_project(const std::function<double(const Vec2&)>& f, const TriMesh& target);
/// Exact L2 projection of a P0 field between two triangulations of the same domain.
std::vector<double> l2_project(const TriMesh& source, std::span<const double> values,
                               const TriMesh& target);

/// r_T = storage_increment_T + dt * (div u, 1)_T - dt * source_T.
/// `storage_increment` and `source` are already integrated over each triangle.
std::vector<double> local_mass_residual(const MixedSolution& sol,
                                        std::span<const double> storage_increment,
                                        std::span<const double> source, double dt);

/// Area-weighted L2 norm of a P0 field.
double l2_norm(const TriMesh& mesh, std::span<const double> values);

}  // namespace twoscale
