#include "twoscale/geometry.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace twoscale;

namespace {

bool leaves_partition(const CoarseGrid& g) {
    double area = 0.0;
    for (const auto& k : g.leaves()) area += g.rect_of(k).area();
    return std::abs(area - g.domain().area()) <= 1e-12 * g.domain().area();
}

CellId leaf_at(const CoarseGrid& g, double x, double y) {
    for (const auto& k : g.leaves()) {
        const Rect r = g.rect_of(k);
        if (x > r.x0 && x < r.x1 && y > r.y0 && y < r.y1) return cell_id(k);
    }
    return ~CellId{0};
}

std::vector<std::array<double, 6>> triangle_multiset(const TriMesh& m) {
    std::vector<std::array<double, 6>> out;
    for (const auto& t : m.triangles) {
        std::array<Vec2, 3> v{m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]};
        std::sort(v.begin(), v.end(), [](const Vec2& a, const Vec2& b) {
            return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
        });
        out.push_back({v[0].x(), v[0].y(), v[1].x(), v[1].y(), v[2].x(), v[2].y()});
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST(CellIds, RoundTrip) {
    for (const CellKey k : {CellKey{0, 0, 0}, CellKey{3, 17, 5}, CellKey{7, 54 * 128 + 3, 14 * 128}}) {
        EXPECT_EQ(cell_key(cell_id(k)), k);
    }
}

TEST(CoarseGrid, SingleLeaf) {
    auto g = build_coarse_grid(1, 1, {0, 1, 0, 1});
    ASSERT_EQ(g.leaf_count(), 1u);
    const Rect r = g.rect_of(g.leaves()[0]);
    EXPECT_DOUBLE_EQ(r.x0, 0.0);
    EXPECT_DOUBLE_EQ(r.x1, 1.0);
    EXPECT_DOUBLE_EQ(r.y1, 1.0);
}

TEST(CoarseGrid, QuasiPeriodicBaseGrid) {
    auto g = build_coarse_grid(16, 8, {0, 1, 0, 0.5});
    EXPECT_EQ(g.leaf_count(), 128u);
    for (const auto& k : g.leaves()) {
        EXPECT_NEAR(g.rect_of(k).width(), 1.0 / 16, 1e-15);
        EXPECT_NEAR(g.rect_of(k).height(), 1.0 / 16, 1e-15);
    }
}

TEST(CoarseGrid, Spe10BaseGrid) {
    auto g = build_coarse_grid(55, 15, {0, 1, 0, 60.0 / 220});
    EXPECT_EQ(g.leaf_count(), 825u);
}

TEST(CoarseGrid, RejectsBadInput) {
    EXPECT_THROW(build_coarse_grid(0, 1, {0, 1, 0, 1}), InvalidInput);
    EXPECT_THROW(build_coarse_grid(1, -2, {0, 1, 0, 1}), InvalidInput);
    EXPECT_THROW(build_coarse_grid(1, 1, {0, 0, 0, 1}), InvalidInput);
}

TEST(CoarseGrid, RefineOneLeaf) {
    auto g = build_coarse_grid(1, 1, {0, 1, 0, 1});
    auto rep = refine_cells(g, {cell_id({0, 0, 0})});
    EXPECT_EQ(g.leaf_count(), 4u);
    EXPECT_EQ(rep.created.size(), 4u);
    for (const auto& k : g.leaves()) EXPECT_EQ(k.level, 1);
    const Rect r = g.rect_of({1, 1, 1});
    EXPECT_DOUBLE_EQ(r.x0, 0.5);
    EXPECT_DOUBLE_EQ(r.y0, 0.5);
}

TEST(CoarseGrid, RefineEmptySetIsIdentity) {
    auto g = build_coarse_grid(3, 2, {0, 3, 0, 2});
    const auto before = g;
    refine_cells(g, {});
    EXPECT_TRUE(g == before);
}

TEST(CoarseGrid, RefineNonLeafThrows) {
    auto g = build_coarse_grid(1, 1, {0, 1, 0, 1});
    refine_cells(g, {cell_id({0, 0, 0})});
    EXPECT_THROW(refine_cells(g, {cell_id({0, 0, 0})}), InvalidInput);
    EXPECT_THROW(refine_cells(g, {cell_id({4, 0, 0})}), InvalidInput);
}

TEST(CoarseGrid, BalanceClosureAfterRepeatedCornerRefinement) {
    auto g = build_coarse_grid(2, 2, {0, 1, 0, 1});
    refine_cells(g, {cell_id({0, 0, 0})});
    refine_cells(g, {cell_id({1, 1, 1})});
    auto rep = refine_cells(g, {cell_id({2, 3, 3})});
    EXPECT_TRUE(g.is_balanced());
    EXPECT_TRUE(leaves_partition(g));
    // The level-2 cell (3,3) touches the unrefined level-0 neighbors; closure must split them.
    EXPECT_GT(rep.refined.size(), 1u);
    EXPECT_FALSE(g.is_leaf({0, 1, 1}));
}

TEST(CoarseGrid, CoarsenFullQuadrupleRestoresParent) {
    auto g = build_coarse_grid(2, 2, {0, 1, 0, 1});
    const auto before = g;
    auto rep = refine_cells(g, {cell_id({0, 1, 0})});
    std::set<CellId> ids(rep.created.begin(), rep.created.end());
    auto crep = coarsen_cells(g, ids);
    EXPECT_EQ(crep.merged.size(), 1u);
    EXPECT_TRUE(g == before);
}

TEST(CoarseGrid, CoarsenIncompleteQuadrupleSkipped) {
    auto g = build_coarse_grid(1, 1, {0, 1, 0, 1});
    auto rep = refine_cells(g, {cell_id({0, 0, 0})});
    std::set<CellId> ids(rep.created.begin(), rep.created.end() - 1);
    const auto before = g;
    auto crep = coarsen_cells(g, ids);
    EXPECT_TRUE(crep.merged.empty());
    ASSERT_EQ(crep.skipped.size(), 1u);
    EXPECT_EQ(crep.skipped[0].second, CoarsenSkip::IncompleteQuadruple);
    EXPECT_TRUE(g == before);
}

TEST(CoarseGrid, CoarsenThatBreaksBalanceSkipped) {
    auto g = build_coarse_grid(2, 1, {0, 2, 0, 1});
    refine_cells(g, {cell_id({0, 0, 0}), cell_id({0, 1, 0})});
    refine_cells(g, {cell_id({1, 1, 0})});  // level-2 cells adjacent to (1,2,0)
    ASSERT_TRUE(g.is_balanced());
    std::set<CellId> right;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) right.insert(cell_id({1, 2 + a, b}));
    const auto before = g;
    auto crep = coarsen_cells(g, right);
    EXPECT_TRUE(crep.merged.empty());
    ASSERT_EQ(crep.skipped.size(), 1u);
    EXPECT_EQ(crep.skipped[0].second, CoarsenSkip::WouldBreakBalance);
    EXPECT_TRUE(g == before);
}

TEST(CoarseGrid, RandomRefineCoarsenKeepsPartitionAndBalance) {
    std::mt19937 rng(7);
    auto g = build_coarse_grid(4, 2, {0, 1, 0, 0.5});
    for (int it = 0; it < 40; ++it) {
        auto leaves = g.leaves();
        std::set<CellId> ids;
        std::uniform_int_distribution<std::size_t> pick(0, leaves.size() - 1);
        for (int k = 0; k < 3; ++k) {
            const auto key = leaves[pick(rng)];
            if (key.level < 4) ids.insert(cell_id(key));
        }
        if (it % 3 == 2) {
            std::set<CellId> all;
            for (const auto& k : leaves)
                if (std::bernoulli_distribution(0.7)(rng)) all.insert(cell_id(k));
            coarsen_cells(g, all);
        } else {
            refine_cells(g, ids);
        }
        ASSERT_TRUE(g.is_balanced());
        ASSERT_TRUE(leaves_partition(g));
        const auto mesh = triangulate(g);
        const auto audit = audit_mesh(mesh, g.domain());
        ASSERT_TRUE(audit.conforming);
        ASSERT_TRUE(audit.positive_areas);
        ASSERT_GE(audit.min_angle_deg, 20.0);
        ASSERT_TRUE(owners_match(mesh, g));
    }
}

TEST(Triangulate, SingleCellGivesTwoTriangles) {
    auto g = build_coarse_grid(1, 1, {0, 1, 0, 1});
    auto m = triangulate(g);
    EXPECT_EQ(m.num_triangles(), 2u);
    for (auto o : m.owner) EXPECT_EQ(o, cell_id({0, 0, 0}));
}

TEST(Triangulate, UniformGridCount) {
    auto g = build_coarse_grid(16, 8, {0, 1, 0, 0.5});
    auto m = triangulate(g);
    EXPECT_EQ(m.num_triangles(), 2u * 128u);
    EXPECT_EQ(m.num_edges(), 16u * 9 + 17u * 8 + 128u);
}

TEST(Triangulate, RefinedCellIsConforming) {
    auto g = build_coarse_grid(4, 4, {0, 1, 0, 1});
    refine_cells(g, {cell_id({0, 1, 2})});
    auto m = triangulate(g);
    const auto audit = audit_mesh(m, g.domain());
    EXPECT_TRUE(audit.conforming);
    EXPECT_TRUE(audit.positive_areas);
    EXPECT_NEAR(audit.area_sum, 1.0, 1e-12);
    EXPECT_GE(audit.min_angle_deg, 20.0);
    for (std::size_t e = 0; e < m.num_edges(); ++e) {
        if (m.edge_tag[e] == EdgeTag::Interior) EXPECT_GE(m.edge_triangles[e][1], 0);
    }
    // 4 neighbors fan (4 + 1 extra triangles each), refined children 2 each, others 2 each.
    EXPECT_EQ(m.num_triangles(), 11u * 2 + 4u * 5 + 4u * 2);
}

TEST(Triangulate, RefineCoarsenRoundTripReproducesMesh) {
    auto g = build_coarse_grid(3, 2, {0, 1.5, 0, 1});
    refine_cells(g, {cell_id({0, 1, 1})});
    const auto reference = triangle_multiset(triangulate(g));
    auto rep = refine_cells(g, {cell_id({1, 2, 2})});
    std::set<CellId> ids(rep.created.begin(), rep.created.end());
    coarsen_cells(g, ids);
    EXPECT_EQ(triangle_multiset(triangulate(g)), reference);
}

TEST(UniformMesh, UnitSquare) {
    auto m = build_uniform_trimesh(1, 1, {0, 1, 0, 1});
    EXPECT_EQ(m.num_triangles(), 2u);
    EXPECT_NEAR(m.h, std::sqrt(2.0), 1e-15);
}

TEST(UniformMesh, FineQuasiPeriodicMesh) {
    auto m = build_uniform_trimesh(200, 100, {0, 1, 0, 0.5});
    EXPECT_EQ(m.num_triangles(), 40000u);
    EXPECT_NEAR(m.h, 5e-3 * std::sqrt(2.0), 1e-15);
}

TEST(UniformMesh, AreasSumToOne) {
    for (auto split : {Split::RightDiagonal, Split::Crossed}) {
        auto m = build_uniform_trimesh(7, 7, {0, 1, 0, 1}, split);
        double s = 0.0;
        for (double a : m.area) s += a;
        EXPECT_NEAR(s, 1.0, 1e-13);
        EXPECT_TRUE(audit_mesh(m, {0, 1, 0, 1}).conforming);
    }
}

TEST(UniformMesh, RejectsNonPositiveCounts) {
    EXPECT_THROW(build_uniform_trimesh(0, 3, {0, 1, 0, 1}), InvalidInput);
}

TEST(TriMeshTopology, NormalsFollowSortedVertexIds) {
    auto m = build_uniform_trimesh(3, 2, {0, 1, 0, 1}, Split::Crossed);
    for (std::size_t e = 0; e < m.num_edges(); ++e) {
        const auto [lo, hi] = m.edges[e];
        ASSERT_LT(lo, hi);
        const Vec2 t = m.vertices[hi] - m.vertices[lo];
        const Vec2 n = Vec2(t.y(), -t.x()).normalized();
        EXPECT_NEAR((n - m.edge_normal[e]).norm(), 0.0, 1e-15);
    }
    for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        for (int k = 0; k < 3; ++k) {
            const int e = m.triangle_edges[t][k];
            const Vec2 out = m.edge_midpoint(e) - m.centroid[t];
            EXPECT_EQ(m.orientation[t][k], out.dot(m.edge_normal[e]) > 0 ? 1 : -1);
        }
    }
}

TEST(TriMeshTopology, PeriodicPairing) {
    auto m = build_uniform_trimesh(4, 4, {0, 2, 0, 2});
    pair_periodic_edges(m, {0, 2, 0, 2});
    int paired = 0;
    for (std::size_t e = 0; e < m.num_edges(); ++e) {
        if (m.edge_tag[e] == EdgeTag::Boundary) ADD_FAILURE() << "unpaired boundary edge " << e;
        if (m.edge_tag[e] != EdgeTag::Periodic) continue;
        ++paired;
        const int p = m.periodic_partner[e];
        ASSERT_GE(p, 0);
        EXPECT_EQ(m.periodic_partner[p], static_cast<int>(e));
        const Vec2 d = m.edge_midpoint(p) - m.edge_midpoint(static_cast<int>(e));
        EXPECT_NEAR(std::min(std::abs(d.x()), std::abs(d.y())), 0.0, 1e-14);
        EXPECT_NEAR(std::max(std::abs(d.x()), std::abs(d.y())), 2.0, 1e-14);
    }
    EXPECT_EQ(paired, 16);
}
