#pragma once

#include "twoscale/types.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

namespace twoscale {

/// Quadtree cell address: refinement level plus integer coordinates at that level.
/// Level-0 cells form the nx x ny base grid; a level-l cell (i,j) has children
/// (l+1, 2i+a, 2j+b) for a,b in {0,1}.
struct CellKey {
    int level = 0;
    std::int64_t i = 0;
    std::int64_t j = 0;

    friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

using CellId = std::uint64_t;

/// Packs a key into a stable id (8 bits level, 28 bits per coordinate).
CellId cell_id(const CellKey& key);
CellKey cell_key(CellId id);

enum class Side { West = 0, East = 1, South = 2, North = 3 };

struct QuadCell {
    CellKey key;
    Rect rect;
    bool leaf = true;

    [[nodiscard]] CellId id() const { return cell_id(key); }
    [[nodiscard]] int level() const { return key.level; }
};

struct RefineReport {
    std::vector<CellId> created;  ///< new leaves (including those from balance closure)
    std::vector<CellId> refined;  ///< former leaves that were split
};

enum class CoarsenSkip { NoParent, IncompleteQuadruple, NotAllLeaves, WouldBreakBalance };

struct CoarsenReport {
    std::vector<CellId> merged;  ///< parents restored as leaves
    std::vector<std::pair<CellId, CoarsenSkip>> skipped;  ///< parent (or leaf, for NoParent)
};

/// Balanced quadtree of rectangular cells over a rectangle.
class CoarseGrid {
public:
    CoarseGrid(int nx, int ny, const Rect& domain);

    [[nodiscard]] const Rect& domain() const { return domain_; }
    [[nodiscard]] int nx() const { return nx_; }
    [[nodiscard]] int ny() const { return ny_; }

    [[nodiscard]] bool contains(const CellKey& key) const { return cells_.contains(key); }
    [[nodiscard]] bool is_leaf(const CellKey& key) const;
    [[nodiscard]] const QuadCell& cell(const CellKey& key) const;
    [[nodiscard]] const QuadCell& cell(CellId id) const { return cell(cell_key(id)); }
    [[nodiscard]] Rect rect_of(const CellKey& key) const;

    /// Leaves in deterministic (level, j, i) order.
    [[nodiscard]] std::vector<CellKey> leaves() const;
    [[nodiscard]] std::size_t leaf_count() const;
    [[nodiscard]] int max_level() const;

    /// Leaves across one side of a leaf; empty on the outer boundary.
    [[nodiscard]] std::vector<CellKey> neighbor_leaves(const CellKey& key, Side side) const;
    /// True when the same-level neighbor across `side` exists and is refined.
    [[nodiscard]] bool has_finer_neighbor(const CellKey& key, Side side) const;
    [[nodiscard]] bool is_balanced() const;

    /// Splits the listed leaves and closes the 2:1 balance transitively.
    RefineReport refine(const std::set<CellId>& ids);
    /// Merges complete sibling quadruples of leaves when balance allows.
    CoarsenReport coarsen(const std::set<CellId>& ids);

    friend bool operator==(const CoarseGrid& a, const CoarseGrid& b);

private:
    [[nodiscard]] bool in_bounds(const CellKey& key) const;
    [[nodiscard]] std::vector<CellKey> leaves_touching(const CellKey& key, Side facing) const;
    void split(const CellKey& key, RefineReport& report);

    Rect domain_;
    int nx_;
    int ny_;
    std::map<CellKey, QuadCell> cells_;
};

CoarseGrid build_coarse_grid(int nx, int ny, const Rect& domain);
RefineReport refine_cells(CoarseGrid& grid, const std::set<CellId>& ids);
CoarsenReport coarsen_cells(CoarseGrid& grid, const std::set<CellId>& ids);

enum class EdgeTag : std::uint8_t { Interior, Boundary, Periodic };

/// Conforming triangulation with edge topology for RT0/P0 discretizations.
///
/// Triangles are counter-clockwise. Local edge k of a triangle is opposite its
/// local vertex k. Every edge carries a unit normal fixed by its sorted vertex ids
/// (rotate v_hi - v_lo clockwise); `orientation(t,k)` is +1 when that normal points
/// out of triangle t.
struct TriMesh {
    std::vector<Vec2> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<CellId> owner;

    std::vector<std::array<int, 2>> edges;           ///< sorted vertex pair
    std::vector<std::array<int, 2>> edge_triangles;  ///< second entry -1 on the boundary
    std::vector<std::array<int, 3>> triangle_edges;
    std::vector<std::array<int, 3>> orientation;
    std::vector<Vec2> edge_normal;
    std::vector<double> edge_length;
    std::vector<EdgeTag> edge_tag;
    std::vector<int> periodic_partner;  ///< -1 unless tagged Periodic

    std::vector<double> area;
    std::vector<Vec2> centroid;
    double h = 0.0;  ///< max triangle diameter

    [[nodiscard]] std::size_t num_triangles() const { return triangles.size(); }
    [[nodiscard]] std::size_t num_edges() const { return edges.size(); }
    [[nodiscard]] std::size_t num_vertices() const { return vertices.size(); }
    [[nodiscard]] Vec2 edge_midpoint(int e) const {
        return 0.5 * (vertices[edges[e][0]] + vertices[edges[e][1]]);
    }
    [[nodiscard]] Rect bounding_box() const;
};

/// Builds topology (edges, orientations, areas) from raw triangles.
TriMesh make_trimesh(std::vector<Vec2> vertices, std::vector<std::array<int, 3>> triangles,
                     std::vector<CellId> owner);

/// Identifies boundary edges on opposite sides of `cell` (x0<->x1, y0<->y1).
void pair_periodic_edges(TriMesh& mesh, const Rect& cell);

enum class Split { RightDiagonal, Crossed };

TriMesh build_uniform_trimesh(int nx, int ny, const Rect& domain,
                              Split split = Split::RightDiagonal);

/// Conforming triangulation of the leaves: two triangles per leaf, or a fan from the
/// leaf centroid through edge midpoints when a neighbor is finer.
TriMesh triangulate(const CoarseGrid& grid);

struct MeshAudit {
    bool conforming = true;          ///< interior edges shared by two triangles, no hanging nodes
    bool positive_areas = true;
    double min_angle_deg = 180.0;
    double area_sum = 0.0;
};

MeshAudit audit_mesh(const TriMesh& mesh, const Rect& domain);
/// Checks that every triangle lies inside the rect of its owning leaf.
bool owners_match(const TriMesh& mesh, const CoarseGrid& grid);

}  // namespace twoscale
