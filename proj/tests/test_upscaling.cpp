#include "twoscale/upscaling.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

using namespace twoscale;

namespace {

const Rect kUnit{0, 1, 0, 1};

PermeabilityField laminate(double k_left, double k_right) {
    return PermeabilityField::analytic(
        [=](const Vec2& x) -> Mat2 { return (x.x() < 0.5 ? k_left : k_right) * Mat2::Identity(); },
        kUnit, std::min(k_left, k_right), std::max(k_left, k_right), "laminate", true);
}

// Periodic 1D corrector -(k (1 + w'))' = 0 by finite volumes on n cells, zero mean.
double laminate_flux_1d(const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const double h = 1.0 / n;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + 1, n + 1);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n + 1);
    for (int i = 0; i < n; ++i) {
        const int r = (i + 1) % n;
        const double kf = 2.0 / (1.0 / k[i] + 1.0 / k[r]);
        // flux through face i+1/2: kf ((w_r - w_i)/h + 1)
        A(i, i) += kf / h;
        A(i, r) -= kf / h;
        A(r, r) += kf / h;
        A(r, i) -= kf / h;
        b(i) += kf;
        b(r) -= kf;
        A(i, n) = A(n, i) = h;
    }
    Eigen::VectorXd w = A.fullPivLu().solve(b);
    double q = 0.0;
    for (int i = 0; i < n; ++i) {
        const int r = (i + 1) % n;
        const double kf = 2.0 / (1.0 / k[i] + 1.0 / k[r]);
        q += kf * ((w(r) - w(i)) / h + 1.0) * h;
    }
    return q;
}

}  // namespace

TEST(CellSampling, ConstantField) {
    auto s = sample_cell(PermeabilityField::constant(3.0, kUnit), kUnit, 8);
    for (const auto& k : s.coeff) EXPECT_EQ(k, 3.0 * Mat2::Identity());
    EXPECT_EQ(s.micro_n, 8);
}

TEST(CellSampling, RasterSnapsToPixels) {
    RasterLayout L{.ncols = 8, .nrows = 8, .dx = 0.125, .dy = 0.125};
    std::vector<double> v(64);
    for (int i = 0; i < 64; ++i) v[i] = 1.0 + i;
    auto field = PermeabilityField::raster(L, v);
    const Rect cell{0.25, 0.75, 0.25, 0.75};  // 4 x 4 pixels
    EXPECT_EQ(snap_micro_n(field, cell, 10), 12);
    EXPECT_EQ(snap_micro_n(field, cell, 64), 64);
    auto s = sample_cell(field, cell, 10);
    ASSERT_EQ(s.micro_n, 12);
    for (std::size_t t = 0; t < s.coeff.size(); ++t) {
        const Vec2 c = s.mesh->centroid[t];
        const int col = static_cast<int>(std::floor(c.x() / 0.125));
        const int row = static_cast<int>(std::floor(c.y() / 0.125));
        EXPECT_EQ(s.coeff[t](0, 0), v[row * 8 + col]);
    }
}

TEST(CellSampling, PeriodicFieldMatchesAcrossCell) {
    const double eps = 1.0 / 8;
    auto field = quasi_periodic_field({.epsilon = eps, .domain = {0, 1, 0, 1}});
    auto s = sample_cell(field, {0.25, 0.25 + eps, 0.25, 0.25 + eps}, 16);
    const TriMesh& m = *s.mesh;
    for (std::size_t e = 0; e < m.num_edges(); ++e) {
        const int p = m.periodic_partner[e];
        if (p < 0) continue;
        const int te = m.edge_triangles[e][0], tp = m.edge_triangles[p][0];
        // Periodic part identical, slow part differs by O(eps) across the cell.
        const double slow_e = 10 * std::pow(m.centroid[te].x(), 2) * m.centroid[te].y();
        const double slow_p = 10 * std::pow(m.centroid[tp].x(), 2) * m.centroid[tp].y();
        EXPECT_NEAR(s.coeff[te](0, 0) - slow_e, s.coeff[tp](0, 0) - slow_p, 1e-12);
    }
}

TEST(CellSampling, OutsideDomainRejected) {
    auto field = PermeabilityField::constant(1.0, kUnit);
    EXPECT_THROW(sample_cell(field, {0.5, 1.5, 0, 1}, 4), InvalidInput);
    EXPECT_THROW(sample_cell(field, kUnit, 1), InvalidInput);
}

TEST(CellProblem, ConstantCoefficientHasZeroCorrector) {
    auto s = sample_cell(PermeabilityField::constant(5.0, kUnit), kUnit, 16);
    auto r = solve_cell_problems(s);
    for (int j = 0; j < 2; ++j) {
        for (double w : r.omega[j]) EXPECT_NEAR(w, 0.0, 1e-12);
        for (std::size_t t = 0; t < s.coeff.size(); ++t)
            EXPECT_LT(r.xi_mean(s, j, int(t)).norm(), 1e-11);
    }
    auto k = effective_tensor(s, r);
    EXPECT_LT((k.K - 5.0 * Mat2::Identity()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CellProblem, LaminateCorrectorIsOneDimensional) {
    auto s = sample_cell(laminate(1.0, 4.0), kUnit, 16);
    auto r = solve_cell_problems(s);
    EXPECT_LT(r.max_residual, 1e-12);
    double mean = 0.0;
    for (std::size_t t = 0; t < s.coeff.size(); ++t) {
        EXPECT_NEAR(r.omega[1][t], 0.0, 1e-12);
        mean += r.omega[0][t] * s.mesh->area[t];
        // omega^1 equals the exact piecewise-linear corrector averaged over the triangle.
        const double x = s.mesh->centroid[t].x();
        const double q = 1.6;
        const double exact = x < 0.5 ? (q - 1.0) * x : (q - 1.0) * 0.5 + (q / 4.0 - 1.0) * (x - 0.5);
        const double shift = (q - 1.0) * 0.125 + (q - 1.0) * 0.25 + (q / 4.0 - 1.0) * 0.125;
        EXPECT_NEAR(r.omega[0][t], exact - shift, 1e-10);
    }
    EXPECT_NEAR(mean, 0.0, 1e-14);
}

TEST(CellProblem, LaminateEffectiveTensor) {
    std::vector<double> k1d(64);
    for (int i = 0; i < 64; ++i) k1d[i] = i < 32 ? 1.0 : 4.0;
    const double brute = laminate_flux_1d(k1d);
    EXPECT_NEAR(brute, 1.6, 1e-12);

    auto s = sample_cell(laminate(1.0, 4.0), kUnit, 64);
    auto k = effective_tensor(s, solve_cell_problems(s));
    EXPECT_NEAR(k.K(0, 0), brute, 0.016);
    EXPECT_NEAR(k.K(1, 1), 2.5, 0.025);
    EXPECT_LE(std::abs(k.K(0, 1)), 1e-3);
    EXPECT_LE(k.asymmetry, 1e-8);
}

TEST(CellProblem, CheckerboardReflectionAntisymmetry) {
    auto field = PermeabilityField::analytic(
        [](const Vec2& x) -> Mat2 {
            const int a = std::min(2, static_cast<int>(3 * x.x()));
            const int b = std::min(2, static_cast<int>(3 * x.y()));
            return ((a + b) % 2 == 0 ? 1.0 : 10.0) * Mat2::Identity();
        },
        kUnit, 1.0, 10.0, "checker", true);
    auto s = sample_cell(field, kUnit, 18);
    auto r = solve_cell_problems(s);
    const TriMesh& m = *s.mesh;
    // Pair each triangle with its mirror image under y1 -> 1 - y1.
    int matched = 0;
    for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        const Vec2 mirror(1.0 - m.centroid[t].x(), m.centroid[t].y());
        for (std::size_t u = 0; u < m.num_triangles(); ++u) {
            if ((m.centroid[u] - mirror).norm() < 1e-12) {
                ++matched;
                // A 3 x 3 checkerboard is invariant under the reflection, so omega^1 flips sign.
                EXPECT_NEAR(r.omega[0][t], -r.omega[0][u], 1e-10);
                break;
            }
        }
    }
    EXPECT_EQ(matched, static_cast<int>(m.num_triangles()));
}

TEST(EffectiveTensor, QuasiPeriodicSelfConvergence) {
    const double eps = 1.0 / 16;
    auto field = quasi_periodic_field({.epsilon = eps});
    const Rect cell{0, eps, 0, eps};
    std::vector<Mat2> k;
    for (int n : {32, 64, 128}) k.push_back(effective_tensor(field, cell, n).K);
    for (int i = 0; i < 2; ++i) {
        const double d1 = k[0](i, i) - k[1](i, i), d2 = k[1](i, i) - k[2](i, i);
        ASSERT_GT(std::abs(d1), std::abs(d2));
        const double rate = std::log2(std::abs(d1 / d2));
        const double extrapolated = k[2](i, i) - d2 / (std::pow(2.0, rate) - 1.0);
        EXPECT_LT(std::abs(k[1](i, i) - extrapolated) / extrapolated, 0.005);
    }
}

TEST(EffectiveTensor, SymmetricSpdWithinBounds) {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 6; ++trial) {
        RasterLayout L{.ncols = 8, .nrows = 8, .dx = 1.0 / 8, .dy = 1.0 / 8};
        std::vector<double> v(64);
        for (auto& x : v) x = std::pow(10.0, 3.0 * u(rng) - 1.5);
        auto field = PermeabilityField::raster(L, v);
        auto s = sample_cell(field, kUnit, 16);
        auto k = effective_tensor(s, solve_cell_problems(s));
        EXPECT_LE(k.asymmetry, 1e-8);
        Eigen::SelfAdjointEigenSolver<Mat2> eig(k.K);
        const double lo = harmonic_average(s)(0, 0), hi = arithmetic_average(s)(0, 0);
        EXPECT_GE(eig.eigenvalues()(0), lo * (1 - 1e-10));
        EXPECT_LE(eig.eigenvalues()(1), hi * (1 + 1e-10));
        EXPECT_GE(k.K(0, 0), lo);
        EXPECT_LE(k.K(0, 0), hi);
    }
}

TEST(EffectiveTensor, RefinementDifferencesShrink) {
    auto field = quasi_periodic_field({.epsilon = 1.0 / 8});
    const Rect cell{0.25, 0.375, 0.125, 0.25};
    double prev = std::numeric_limits<double>::infinity();
    Mat2 last = effective_tensor(field, cell, 8).K;
    for (int n : {16, 32, 64}) {
        const Mat2 k = effective_tensor(field, cell, n).K;
        const double diff = (k - last).norm();
        EXPECT_LT(diff, prev);
        prev = diff;
        last = k;
    }
}

TEST(Storage, Averages) {
    auto s = sample_cell(PermeabilityField::constant(1.0, kUnit), kUnit, 8);
    auto st = effective_storage_source(cubic_law(2.5), {}, s);
    EXPECT_DOUBLE_EQ(st.theta, 2.5);
    EXPECT_EQ(st.source(0.3), 0.0);
    SaturationLaw half = cubic_law(1.0);
    half.theta = [](const Vec2& x) { return x.x() < 0.5 ? 2.0 : 0.0; };
    SourceSpec src{[](const Vec2& x, double t) { return x.y() * t; }, {}};
    auto st2 = effective_storage_source(half, src, s);
    EXPECT_NEAR(st2.theta, 1.0, 1e-14);
    EXPECT_NEAR(st2.source(2.0), 1.0, 1e-14);
    half.separable = false;
    EXPECT_THROW(effective_storage_source(half, src, s), InvalidInput);
}

TEST(Anisotropy, Metrics) {
    std::vector<Mat2> iso{2.0 * Mat2::Identity(), 3.0 * Mat2::Identity()};
    std::vector<double> areas{1.0, 2.0};
    auto m = anisotropy_metrics(iso, areas);
    EXPECT_EQ(m.tau1, 0.0);
    EXPECT_EQ(m.tau2, 0.0);
    Mat2 d;
    d << 2.0, 0.0, 0.0, 1.0;
    std::vector<Mat2> one{d};
    std::vector<double> a1{0.7};
    auto m2 = anisotropy_metrics(one, a1);
    EXPECT_EQ(m2.tau1, 0.0);
    EXPECT_NEAR(m2.tau2, 1.0 / std::sqrt(2.5), 1e-15);
}

TEST(Averages, HarmonicOfTwoValues) {
    auto s = sample_cell(laminate(1.0, 4.0), kUnit, 8);
    EXPECT_NEAR(harmonic_average(s)(0, 0), 1.6, 1e-14);
    EXPECT_NEAR(arithmetic_average(s)(0, 0), 2.5, 1e-14);
    EXPECT_LT((harmonic_average(PermeabilityField::constant(7.0, kUnit), kUnit, 4) - 7.0 * Mat2::Identity()).norm(),
              1e-14);
}

TEST(Cache, SolveAccounting) {
    auto field = quasi_periodic_field({});
    auto grid = build_coarse_grid(4, 2, field.domain());
    TensorCache cache;
    const auto leaves = grid.leaves();
    EXPECT_EQ(cache.ensure(field, grid, leaves, 8, TensorModel::Homogenized), 8u);
    EXPECT_EQ(cache.ensure(field, grid, leaves, 8, TensorModel::Homogenized), 0u);
    EXPECT_EQ(cache.ensure(field, grid, leaves, 16, TensorModel::Homogenized, 3), 8u);
    EXPECT_EQ(cache.solve_count(), 16u);
    const auto before = cache.at({cell_id(leaves[2]), tensor_context(field, grid), 8, TensorModel::Homogenized}).K;
    EXPECT_LT((before - effective_tensor(field, grid.rect_of(leaves[2]), 8).K).norm(), 1e-14);
}

TEST(Cache, GridsOfDifferentResolutionDoNotShareEntries) {
    auto field = quasi_periodic_field({});
    auto coarse = build_coarse_grid(4, 2, field.domain());
    auto finer = build_coarse_grid(8, 4, field.domain());
    EXPECT_NE(tensor_context(field, coarse), tensor_context(field, finer));
    TensorCache cache;
    cache.ensure(field, coarse, coarse.leaves(), 8, TensorModel::Homogenized);
    EXPECT_EQ(cache.ensure(field, finer, finer.leaves(), 8, TensorModel::Homogenized), 32u);
    const CellId first = cell_id({0, 0, 0});
    const auto a = cache.at({first, tensor_context(field, coarse), 8, TensorModel::Homogenized}).K;
    const auto b = cache.at({first, tensor_context(field, finer), 8, TensorModel::Homogenized}).K;
    EXPECT_LT((a - effective_tensor(field, coarse.rect_of({0, 0, 0}), 8).K).norm(), 1e-14);
    EXPECT_LT((b - effective_tensor(field, finer.rect_of({0, 0, 0}), 8).K).norm(), 1e-14);
}
