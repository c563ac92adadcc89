#include "twoscale/mixedfem.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace twoscale {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

namespace {

// Degree-4 symmetric rule (6 points) in barycentric coordinates.
struct QuadPoint {
    double l0, l1, l2, w;
};
constexpr std::array<QuadPoint, 6> kTriangleRule{{
    {0.108103018168070, 0.445948490915965, 0.445948490915965, 0.223381589678011},
    {0.445948490915965, 0.108103018168070, 0.445948490915965, 0.223381589678011},
    {0.445948490915965, 0.445948490915965, 0.108103018168070, 0.223381589678011},
    {0.816847572980459, 0.091576213509771, 0.091576213509771, 0.109951743655322},
    {0.091576213509771, 0.816847572980459, 0.091576213509771, 0.109951743655322},
    {0.091576213509771, 0.091576213509771, 0.816847572980459, 0.109951743655322},
}};

bool is_spd(const Mat2& k) {
    const double scale = k.cwiseAbs().maxCoeff();
    if (!(scale > 0) || !std::isfinite(scale)) return false;
    if (std::abs(k(0, 1) - k(1, 0)) > 1e-12 * scale) return false;
    return k(0, 0) > 0 && k.determinant() > 0;
}

void validate_bc(const TriMesh& mesh, const BoundaryConditions& bc) {
    if (bc.kind.size() != mesh.num_edges() || bc.value.size() != mesh.num_edges()) {
        throw InvalidInput("boundary conditions do not match the mesh edge count");
    }
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        const bool boundary = mesh.edge_triangles[e][1] < 0;
        switch (bc.kind[e]) {
            case BcKind::Interior:
                if (boundary) throw InvalidInput("inconsistent bc tags: boundary edge tagged interior");
                break;
            case BcKind::NoFlux:
            case BcKind::Dirichlet:
                if (!boundary) throw InvalidInput("inconsistent bc tags: interior edge tagged as boundary");
                break;
            case BcKind::Periodic: {
                const int partner = mesh.periodic_partner[e];
                if (!boundary || partner < 0 || bc.kind[partner] != BcKind::Periodic) {
                    throw InvalidInput("inconsistent bc tags: periodic edge without a periodic partner");
                }
                break;
            }
        }
    }
}

// Triangle-local slot (t, k) of an edge's first triangle.
std::pair<int, int> first_slot(const TriMesh& mesh, int e) {
    const int t = mesh.edge_triangles[e][0];
    for (int k = 0; k < 3; ++k) {
        if (mesh.triangle_edges[t][k] == e) return {t, k};
    }
    return {t, 0};
}

}  // namespace

bool BoundaryConditions::has_dirichlet() const {
    return std::any_of(kind.begin(), kind.end(), [](BcKind k) { return k == BcKind::Dirichlet; });
}

BoundaryConditions natural_bc(const TriMesh& mesh) {
    BoundaryConditions bc;
    bc.kind.resize(mesh.num_edges());
    bc.value.assign(mesh.num_edges(), 0.0);
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        switch (mesh.edge_tag[e]) {
            case EdgeTag::Interior: bc.kind[e] = BcKind::Interior; break;
            case EdgeTag::Boundary: bc.kind[e] = BcKind::NoFlux; break;
            case EdgeTag::Periodic: bc.kind[e] = BcKind::Periodic; break;
        }
    }
    return bc;
}

BoundaryConditions patch_bc(const TriMesh& mesh, std::span<const DirichletPatch> patches) {
    BoundaryConditions bc = natural_bc(mesh);
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        if (bc.kind[e] != BcKind::NoFlux) continue;
        const Vec2 mid = mesh.edge_midpoint(static_cast<int>(e));
        for (const auto& patch : patches) {
            if (patch.region.contains(mid)) {
                bc.kind[e] = BcKind::Dirichlet;
                bc.value[e] = patch.value;
                break;
            }
        }
    }
    return bc;
}

BoundaryConditions dirichlet_bc(const TriMesh& mesh, const std::function<double(const Vec2&)>& g) {
    BoundaryConditions bc = natural_bc(mesh);
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        if (bc.kind[e] == BcKind::NoFlux) {
            bc.kind[e] = BcKind::Dirichlet;
            bc.value[e] = g(mesh.edge_midpoint(static_cast<int>(e)));
        }
    }
    return bc;
}

BoundaryConditions periodic_bc(const TriMesh& mesh) {
    BoundaryConditions bc = natural_bc(mesh);
    for (auto k : bc.kind) {
        if (k == BcKind::NoFlux) throw InvalidInput("periodic_bc: mesh has unpaired boundary edges");
    }
    bc.zero_mean = true;
    return bc;
}

Mat3 rt0_local_mass(const TriMesh& mesh, int t, const Mat2& coeff_inverse) {
    const auto& tri = mesh.triangles[t];
    const double area = mesh.area[t];
    std::array<Vec2, 3> a{mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]};
    // Edge-midpoint rule is exact for the quadratic integrand.
    std::array<Vec2, 3> mid{0.5 * (a[1] + a[2]), 0.5 * (a[2] + a[0]), 0.5 * (a[0] + a[1])};
    Mat3 m = Mat3::Zero();
    for (const auto& q : mid) {
        std::array<Vec2, 3> phi;
        for (int k = 0; k < 3; ++k) phi[k] = (q - a[k]) / (2.0 * area);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) m(i, j) += phi[i].dot(coeff_inverse * phi[j]);
    }
    return m * (area / 3.0);
}

SaddleSystem assemble_mixed(MeshPtr mesh_ptr, std::span<const Mat2> coeff,
                            std::span<const double> reaction, BoundaryConditions bc) {
    const TriMesh& mesh = *mesh_ptr;
    const std::size_t nt = mesh.num_triangles();
    if (coeff.size() != nt) throw InvalidInput("assemble_mixed: one coefficient per triangle required");
    if (!reaction.empty() && reaction.size() != nt) {
        throw InvalidInput("assemble_mixed: reaction size mismatch");
    }
    validate_bc(mesh, bc);

    SaddleSystem sys;
    sys.mesh = mesh_ptr;
    sys.local_mass.resize(nt);
    sys.flux_load.assign(nt, Vec3::Zero());
    sys.reaction.assign(nt, 0.0);
    sys.mass_rhs.assign(nt, 0.0);
    for (std::size_t t = 0; t < nt; ++t) {
        if (!is_spd(coeff[t])) {
            std::ostringstream msg;
            msg << "non-SPD coefficient on triangle " << t;
            throw InvalidInput(msg.str());
        }
        sys.local_mass[t] = rt0_local_mass(mesh, static_cast<int>(t), coeff[t].inverse());
        if (!reaction.empty()) {
            if (!(reaction[t] >= 0)) throw InvalidInput("assemble_mixed: negative reaction");
            sys.reaction[t] = reaction[t];
        }
    }

    // Flux dofs: no-flux edges are eliminated, periodic partners share one dof.
    sys.edge_dof.assign(mesh.num_edges(), -1);
    sys.edge_sign.assign(mesh.num_edges(), 1);
    int next = 0;
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        if (bc.kind[e] == BcKind::NoFlux) continue;
        if (bc.kind[e] == BcKind::Periodic) {
            const int partner = mesh.periodic_partner[e];
            if (partner < static_cast<int>(e)) {
                // Outflow through one side enters through the other:
                // s_e u_e = -s_partner u_partner in outward terms.
                const auto [te, ke] = first_slot(mesh, static_cast<int>(e));
                const auto [tp, kp] = first_slot(mesh, partner);
                sys.edge_dof[e] = sys.edge_dof[partner];
                sys.edge_sign[e] = -mesh.orientation[te][ke] * mesh.orientation[tp][kp] *
                                   sys.edge_sign[partner];
                continue;
            }
        }
        sys.edge_dof[e] = next++;
    }
    sys.num_flux_dofs = next;
    sys.bc = std::move(bc);
    return sys;
}

double divergence_integral(const TriMesh& mesh, const std::vector<double>& u, int t) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += outward_flux(mesh, u, t, k);
    return s;
}

Vec2 rt0_value(const TriMesh& mesh, const std::vector<double>& u, int t, const Vec2& x) {
    Vec2 v = Vec2::Zero();
    const auto& tri = mesh.triangles[t];
    for (int k = 0; k < 3; ++k) {
        v += outward_flux(mesh, u, t, k) * (x - mesh.vertices[tri[k]]);
    }
    return v / (2.0 * mesh.area[t]);
}

Vec2 rt0_integral(const TriMesh& mesh, const std::vector<double>& u, int t) {
    Vec2 v = Vec2::Zero();
    const auto& tri = mesh.triangles[t];
    for (int k = 0; k < 3; ++k) {
        v += outward_flux(mesh, u, t, k) * (mesh.centroid[t] - mesh.vertices[tri[k]]);
    }
    return 0.5 * v;
}

std::vector<double> rt0_interpolate(const TriMesh& mesh,
                                    const std::function<Vec2(const Vec2&)>& field) {
    static const double g = std::sqrt(3.0 / 5.0);
    static const std::array<std::pair<double, double>, 3> gauss{
        {{-g, 5.0 / 9.0}, {0.0, 8.0 / 9.0}, {g, 5.0 / 9.0}}};
    std::vector<double> u(mesh.num_edges());
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        const Vec2 a = mesh.vertices[mesh.edges[e][0]];
        const Vec2 b = mesh.vertices[mesh.edges[e][1]];
        double s = 0.0;
        for (const auto& [xi, w] : gauss) {
            const Vec2 x = 0.5 * (a + b) + 0.5 * xi * (b - a);
            s += 0.5 * w * field(x).dot(mesh.edge_normal[e]);
        }
        u[e] = s * mesh.edge_length[e];
    }
    return u;
}

// ---------------------------------------------------------------------------
// Solvers

struct MixedSolver::Impl {
    // Hybridized data.
    std::vector<Mat3> minv;
    std::vector<Vec3> a;      // M^{-1} 1
    std::vector<double> den;  // 1^T M^{-1} 1 + D_T
    std::vector<int> hdof;    // per edge, -1 for Dirichlet
    int pinned = -1;
    int num_hdofs = 0;
    Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>> llt;

    // Direct data.
    Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>> lu;
    int n_total = 0;
};

namespace {

void build_hybrid(const SaddleSystem& sys, MixedSolver::Impl& im) {
    const TriMesh& mesh = *sys.mesh;
    const std::size_t nt = mesh.num_triangles();
    im.minv.resize(nt);
    im.a.resize(nt);
    im.den.resize(nt);
    bool any_reaction = false;
    for (std::size_t t = 0; t < nt; ++t) {
        im.minv[t] = sys.local_mass[t].inverse();
        im.a[t] = im.minv[t] * Vec3::Ones();
        const double d = sys.reaction[t] * mesh.area[t];
        any_reaction = any_reaction || d > 0;
        im.den[t] = im.a[t].sum() + d;
    }
    im.hdof.assign(mesh.num_edges(), -1);
    int next = 0;
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        const BcKind kind = sys.bc.kind[e];
        if (kind == BcKind::Dirichlet) continue;
        if (kind == BcKind::Periodic && mesh.periodic_partner[e] < static_cast<int>(e)) {
            im.hdof[e] = im.hdof[mesh.periodic_partner[e]];
            continue;
        }
        im.hdof[e] = next++;
    }
    im.num_hdofs = next;
    const bool singular = !any_reaction && !sys.bc.has_dirichlet();
    if (singular) {
        if (!sys.bc.zero_mean) {
            throw SingularSystem(
                "singular mixed system: no Dirichlet data and no reaction, so the pressure is "
                "determined only up to a constant (nullspace = constants); enable the zero-mean "
                "constraint");
        }
        im.pinned = 0;
    }
    if (next == 0) return;

    std::vector<Triplet> trips;
    trips.reserve(nt * 9);
    for (std::size_t t = 0; t < nt; ++t) {
        const Mat3 S = im.minv[t] - im.a[t] * im.a[t].transpose() / im.den[t];
        for (int i = 0; i < 3; ++i) {
            const int gi = im.hdof[mesh.triangle_edges[t][i]];
            if (gi < 0 || gi == im.pinned) continue;
            for (int j = 0; j < 3; ++j) {
                const int gj = im.hdof[mesh.triangle_edges[t][j]];
                if (gj < 0 || gj == im.pinned) continue;
                trips.emplace_back(gi, gj, S(i, j));
            }
        }
    }
    if (im.pinned >= 0) trips.emplace_back(im.pinned, im.pinned, 1.0);
    SpMat A(next, next);
    A.setFromTriplets(trips.begin(), trips.end());
    im.llt.compute(A);
    if (im.llt.info() != Eigen::Success) {
        throw SingularSystem("hybridized mixed system is not positive definite (Cholesky failed)");
    }
}

MixedSolution solve_hybrid(const SaddleSystem& sys, const MixedSolver::Impl& im) {
    const TriMesh& mesh = *sys.mesh;
    const std::size_t nt = mesh.num_triangles();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(im.num_hdofs);
    std::vector<Vec3> F(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        const Vec3 w = im.minv[t] * sys.flux_load[t];
        F[t] = w + im.a[t] * (sys.mass_rhs[t] - im.a[t].dot(sys.flux_load[t])) / im.den[t];
        const Mat3 S = im.minv[t] - im.a[t] * im.a[t].transpose() / im.den[t];
        Vec3 known = Vec3::Zero();
        for (int j = 0; j < 3; ++j) {
            const int e = mesh.triangle_edges[t][j];
            if (sys.bc.kind[e] == BcKind::Dirichlet) known(j) = sys.bc.value[e];
        }
        const Vec3 local = F[t] - S * known;
        for (int i = 0; i < 3; ++i) {
            const int gi = im.hdof[mesh.triangle_edges[t][i]];
            if (gi >= 0 && gi != im.pinned) rhs(gi) += local(i);
        }
    }
    Eigen::VectorXd lambda = im.num_hdofs > 0 ? Eigen::VectorXd(im.llt.solve(rhs))
                                              : Eigen::VectorXd();
    if (im.pinned >= 0) lambda(im.pinned) = 0.0;

    MixedSolution sol;
    sol.mesh = sys.mesh;
    sol.p.resize(nt);
    sol.u.assign(mesh.num_edges(), 0.0);
    std::vector<Vec3> lam(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        for (int j = 0; j < 3; ++j) {
            const int e = mesh.triangle_edges[t][j];
            lam[t](j) = sys.bc.kind[e] == BcKind::Dirichlet ? sys.bc.value[e] : lambda(im.hdof[e]);
        }
        sol.p[t] = (sys.mass_rhs[t] - im.a[t].dot(sys.flux_load[t]) + im.a[t].dot(lam[t])) / im.den[t];
    }
    if (sys.bc.zero_mean && im.pinned >= 0) {
        double num = 0.0, den = 0.0;
        for (std::size_t t = 0; t < nt; ++t) {
            num += mesh.area[t] * sol.p[t];
            den += mesh.area[t];
        }
        const double shift = -num / den;
        for (std::size_t t = 0; t < nt; ++t) {
            sol.p[t] += shift;
            lam[t].array() += shift;
        }
    }
    for (std::size_t t = 0; t < nt; ++t) {
        const Vec3 ut = im.minv[t] * (sys.flux_load[t] + sol.p[t] * Vec3::Ones() - lam[t]);
        for (int k = 0; k < 3; ++k) {
            const int e = mesh.triangle_edges[t][k];
            if (mesh.edge_triangles[e][0] == static_cast<int>(t) && sys.bc.kind[e] != BcKind::NoFlux) {
                sol.u[e] = mesh.orientation[t][k] * ut(k);
            }
        }
    }
    return sol;
}

// Assembled symmetric KKT: [M -B^T 0; -B -D -a; 0 -a^T 0].
void build_direct(const SaddleSystem& sys, MixedSolver::Impl& im) {
    const TriMesh& mesh = *sys.mesh;
    const int nf = sys.num_flux_dofs;
    const int nt = static_cast<int>(mesh.num_triangles());
    const bool mean = sys.bc.zero_mean;
    im.n_total = nf + nt + (mean ? 1 : 0);
    std::vector<Triplet> trips;
    trips.reserve(static_cast<std::size_t>(nt) * 16);
    for (int t = 0; t < nt; ++t) {
        std::array<int, 3> dof{};
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k) {
            const int e = mesh.triangle_edges[t][k];
            dof[k] = sys.edge_dof[e];
            c[k] = mesh.orientation[t][k] * sys.edge_sign[e];
        }
        for (int i = 0; i < 3; ++i) {
            if (dof[i] < 0) continue;
            for (int j = 0; j < 3; ++j) {
                if (dof[j] < 0) continue;
                trips.emplace_back(dof[i], dof[j], c[i] * sys.local_mass[t](i, j) * c[j]);
            }
            trips.emplace_back(dof[i], nf + t, -c[i]);
            trips.emplace_back(nf + t, dof[i], -c[i]);
        }
        trips.emplace_back(nf + t, nf + t, -sys.reaction[t] * mesh.area[t]);
        if (mean) {
            trips.emplace_back(nf + t, nf + nt, -mesh.area[t]);
            trips.emplace_back(nf + nt, nf + t, -mesh.area[t]);
        }
    }
    SpMat A(im.n_total, im.n_total);
    A.setFromTriplets(trips.begin(), trips.end());
    A.makeCompressed();
    im.lu.compute(A);
    if (im.lu.info() != Eigen::Success) {
        throw SingularSystem("saddle-point factorization failed: " + im.lu.lastErrorMessage() +
                             (sys.bc.has_dirichlet() || sys.bc.zero_mean
                                  ? std::string()
                                  : std::string(" (pressure nullspace: constants; no Dirichlet data "
                                                "or zero-mean constraint)")));
    }
}

MixedSolution solve_direct(const SaddleSystem& sys, const MixedSolver::Impl& im) {
    const TriMesh& mesh = *sys.mesh;
    const int nf = sys.num_flux_dofs;
    const int nt = static_cast<int>(mesh.num_triangles());
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(im.n_total);
    for (int t = 0; t < nt; ++t) {
        for (int k = 0; k < 3; ++k) {
            const int e = mesh.triangle_edges[t][k];
            const int d = sys.edge_dof[e];
            if (d < 0) continue;
            const double c = mesh.orientation[t][k] * sys.edge_sign[e];
            double load = sys.flux_load[t](k);
            if (sys.bc.kind[e] == BcKind::Dirichlet) load -= sys.bc.value[e];
            rhs(d) += c * load;
        }
        rhs(nf + t) = -sys.mass_rhs[t];
    }
    Eigen::VectorXd x = im.lu.solve(rhs);
    MixedSolution sol;
    sol.mesh = sys.mesh;
    sol.p.resize(nt);
    sol.u.assign(mesh.num_edges(), 0.0);
    for (int t = 0; t < nt; ++t) sol.p[t] = x(nf + t);
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        if (sys.edge_dof[e] >= 0) sol.u[e] = sys.edge_sign[e] * x(sys.edge_dof[e]);
    }
    return sol;
}

}  // namespace

MixedSolver::MixedSolver(const SaddleSystem& system, LinearSolver kind)
    : impl_(std::make_unique<Impl>()), kind_(kind) {
    if (kind == LinearSolver::Hybridized) build_hybrid(system, *impl_);
    else build_direct(system, *impl_);
}

MixedSolver::~MixedSolver() = default;
MixedSolver::MixedSolver(MixedSolver&&) noexcept = default;
MixedSolver& MixedSolver::operator=(MixedSolver&&) noexcept = default;

MixedSolution MixedSolver::solve(const SaddleSystem& system) const {
    return kind_ == LinearSolver::Hybridized ? solve_hybrid(system, *impl_)
                                             : solve_direct(system, *impl_);
}

MixedSolution solve_saddle(const SaddleSystem& system, LinearSolver kind) {
    return MixedSolver(system, kind).solve(system);
}

double saddle_residual(const SaddleSystem& sys, const MixedSolution& sol) {
    const TriMesh& mesh = *sys.mesh;
    const int nt = static_cast<int>(mesh.num_triangles());
    std::vector<double> flux_res(sys.num_flux_dofs, 0.0), flux_scale(sys.num_flux_dofs, 0.0);
    double res2 = 0.0, scale2 = 0.0;
    double mean_res = 0.0, mean_scale = 0.0;
    for (int t = 0; t < nt; ++t) {
        Vec3 ut;
        for (int k = 0; k < 3; ++k) ut(k) = outward_flux(mesh, sol.u, t, k);
        const Vec3 mu = sys.local_mass[t] * ut;
        for (int k = 0; k < 3; ++k) {
            const int e = mesh.triangle_edges[t][k];
            const int d = sys.edge_dof[e];
            if (d < 0) continue;
            const double c = mesh.orientation[t][k] * sys.edge_sign[e];
            const double g = sys.bc.kind[e] == BcKind::Dirichlet ? sys.bc.value[e] : 0.0;
            double row_scale = 0.0;
            for (int j = 0; j < 3; ++j) row_scale += std::abs(sys.local_mass[t](k, j) * ut(j));
            // Outward test function on T is c times the global basis function.
            flux_res[d] += c * (mu(k) - sol.p[t] + g - sys.flux_load[t](k));
            flux_scale[d] += row_scale + std::abs(sol.p[t]) + std::abs(g) + std::abs(sys.flux_load[t](k));
        }
        const double d_term = sys.reaction[t] * mesh.area[t] * sol.p[t];
        const double r = ut.sum() + d_term - sys.mass_rhs[t];
        res2 += r * r;
        const double s = ut.cwiseAbs().sum() + std::abs(d_term) + std::abs(sys.mass_rhs[t]);
        scale2 += s * s;
        mean_res += mesh.area[t] * sol.p[t];
        mean_scale += mesh.area[t] * std::abs(sol.p[t]);
    }
    for (int d = 0; d < sys.num_flux_dofs; ++d) {
        res2 += flux_res[d] * flux_res[d];
        scale2 += flux_scale[d] * flux_scale[d];
    }
    if (sys.bc.zero_mean) {
        res2 += mean_res * mean_res;
        scale2 += mean_scale * mean_scale;
    }
    if (scale2 == 0.0) return std::sqrt(res2);
    return std::sqrt(res2 / scale2);
}

// ---------------------------------------------------------------------------
// Projections

std::vector<double> l2_project(const std::function<double(const Vec2&)>& f, const TriMesh& target) {
    std::vector<double> out(target.num_triangles());
    for (std::size_t t = 0; t < target.num_triangles(); ++t) {
        const auto& tri = target.triangles[t];
        const Vec2& a = target.vertices[tri[0]];
        const Vec2& b = target.vertices[tri[1]];
        const Vec2& c = target.vertices[tri[2]];
        double s = 0.0;
        for (const auto& q : kTriangleRule) s += q.w * f(q.l0 * a + q.l1 * b + q.l2 * c);
        out[t] = s;
    }
    return out;
}

namespace {

using Polygon = std::vector<Vec2>;

// Clip a convex polygon by the half-plane on the left of a->b.
Polygon clip(const Polygon& poly, const Vec2& a, const Vec2& b) {
    Polygon out;
    const Vec2 d = b - a;
    auto side = [&](const Vec2& p) { return d.x() * (p.y() - a.y()) - d.y() * (p.x() - a.x()); };
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % poly.size()];
        const double sp = side(p);
        const double sq = side(q);
        if (sp >= 0) out.push_back(p);
        if ((sp >= 0) != (sq >= 0)) {
            const double s = sp / (sp - sq);
            out.push_back(p + s * (q - p));
        }
    }
    return out;
}

double polygon_area(const Polygon& poly) {
    double s = 0.0;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % poly.size()];
        s += p.x() * q.y() - p.y() * q.x();
    }
    return 0.5 * s;
}

}  // namespace

std::vector<double> l2_project(const TriMesh& source, std::span<const double> values,
                               const TriMesh& target) {
    if (values.size() != source.num_triangles()) {
        throw InvalidInput("l2_project: value count does not match the source mesh");
    }
    const Rect box = source.bounding_box();
    const Rect tbox = target.bounding_box();
    const double tol = 1e-9 * std::max(box.width(), box.height());
    if (std::abs(box.x0 - tbox.x0) > tol || std::abs(box.x1 - tbox.x1) > tol ||
        std::abs(box.y0 - tbox.y0) > tol || std::abs(box.y1 - tbox.y1) > tol) {
        throw InvalidInput("l2_project: source and target meshes do not cover the same domain");
    }
    // Bucket source triangles on a uniform grid.
    const int nb = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(source.num_triangles())) / 2));
    const double bw = box.width() / nb;
    const double bh = box.height() / nb;
    auto bucket_range = [&](double lo, double hi, double origin, double size) {
        int a = static_cast<int>(std::floor((lo - origin) / size - 1e-9));
        int b = static_cast<int>(std::floor((hi - origin) / size + 1e-9));
        return std::pair{std::clamp(a, 0, nb - 1), std::clamp(b, 0, nb - 1)};
    };
    std::vector<std::vector<int>> buckets(static_cast<std::size_t>(nb) * nb);
    for (std::size_t s = 0; s < source.num_triangles(); ++s) {
        const auto& tri = source.triangles[s];
        double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
        for (int v : tri) {
            x0 = std::min(x0, source.vertices[v].x());
            x1 = std::max(x1, source.vertices[v].x());
            y0 = std::min(y0, source.vertices[v].y());
            y1 = std::max(y1, source.vertices[v].y());
        }
        const auto [ia, ib] = bucket_range(x0, x1, box.x0, bw);
        const auto [ja, jb] = bucket_range(y0, y1, box.y0, bh);
        for (int j = ja; j <= jb; ++j)
            for (int i = ia; i <= ib; ++i) buckets[static_cast<std::size_t>(j) * nb + i].push_back(int(s));
    }

    std::vector<double> out(target.num_triangles(), 0.0);
    std::vector<int> stamp(source.num_triangles(), -1);
    for (std::size_t t = 0; t < target.num_triangles(); ++t) {
        const auto& tri = target.triangles[t];
        const Polygon tpoly{target.vertices[tri[0]], target.vertices[tri[1]], target.vertices[tri[2]]};
        double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
        for (const auto& v : tpoly) {
            x0 = std::min(x0, v.x());
            x1 = std::max(x1, v.x());
            y0 = std::min(y0, v.y());
            y1 = std::max(y1, v.y());
        }
        const auto [ia, ib] = bucket_range(x0, x1, box.x0, bw);
        const auto [ja, jb] = bucket_range(y0, y1, box.y0, bh);
        double covered = 0.0, acc = 0.0;
        for (int j = ja; j <= jb; ++j) {
            for (int i = ia; i <= ib; ++i) {
                for (int s : buckets[static_cast<std::size_t>(j) * nb + i]) {
                    if (stamp[s] == static_cast<int>(t)) continue;
                    stamp[s] = static_cast<int>(t);
                    const auto& st = source.triangles[s];
                    Polygon poly = tpoly;
                    for (int k = 0; k < 3 && poly.size() >= 3; ++k) {
                        poly = clip(poly, source.vertices[st[k]], source.vertices[st[(k + 1) % 3]]);
                    }
                    if (poly.size() < 3) continue;
                    const double area = polygon_area(poly);
                    if (area <= 0) continue;
                    covered += area;
                    acc += area * values[s];
                }
            }
        }
        if (covered < (1.0 - 1e-8) * target.area[t]) {
            throw InvalidInput("l2_project: target triangle not covered by the source mesh");
        }
        out[t] = acc / covered;
    }
    return out;
}

std::vector<double> local_mass_residual(const MixedSolution& sol,
                                        std::span<const double> storage_increment,
                                        std::span<const double> source, double dt) {
    const TriMesh& mesh = *sol.mesh;
    std::vector<double> r(mesh.num_triangles());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        r[t] = storage_increment[t] + dt * divergence_integral(mesh, sol.u, static_cast<int>(t)) -
               dt * source[t];
    }
    return r;
}

double l2_norm(const TriMesh& mesh, std::span<const double> values) {
    double s = 0.0;
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) s += mesh.area[t] * values[t] * values[t];
    return std::sqrt(s);
}

}  // namespace twoscale
