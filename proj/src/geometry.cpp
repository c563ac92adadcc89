#include "twoscale/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>


namespace twoscale {

namespace {

constexpr int kCoordBits = 28;
constexpr std::uint64_t kCoordMask = (std::uint64_t{1} << kCoordBits) - 1;

CellKey child_key(const CellKey& k, int a, int b) {
    return {k.level + 1, 2 * k.i + a, 2 * k.j + b};
}

CellKey parent_key(const CellKey& k) {
    // Coordinates are non-negative, so integer halving is a floor.
    return {k.level - 1, k.i / 2, k.j / 2};
}

CellKey shifted(const CellKey& k, Side side) {
    switch (side) {
        case Side::West: return {k.level, k.i - 1, k.j};
        case Side::East: return {k.level, k.i + 1, k.j};
        case Side::South: return {k.level, k.i, k.j - 1};
        case Side::North: return {k.level, k.i, k.j + 1};
    }
    return k;
}

Side opposite(Side side) {
    switch (side) {
        case Side::West: return Side::East;
        case Side::East: return Side::West;
        case Side::South: return Side::North;
        case Side::North: return Side::South;
    }
    return side;
}

constexpr std::array<Side, 4> kSides{Side::West, Side::East, Side::South, Side::North};

}  // namespace

CellId cell_id(const CellKey& key) {
    return (static_cast<std::uint64_t>(key.level) << (2 * kCoordBits)) |
           ((static_cast<std::uint64_t>(key.i) & kCoordMask) << kCoordBits) |
           (static_cast<std::uint64_t>(key.j) & kCoordMask);
}

CellKey cell_key(CellId id) {
    return {static_cast<int>(id >> (2 * kCoordBits)),
            static_cast<std::int64_t>((id >> kCoordBits) & kCoordMask),
            static_cast<std::int64_t>(id & kCoordMask)};
}

CoarseGrid::CoarseGrid(int nx, int ny, const Rect& domain) : domain_(domain), nx_(nx), ny_(ny) {
    if (nx < 1 || ny < 1) {
        throw InvalidInput("coarse grid needs positive cell counts");
    }
    if (domain.degenerate()) {
        throw InvalidInput("coarse grid domain is degenerate");
    }
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            CellKey key{0, i, j};
            cells_.emplace(key, QuadCell{key, rect_of(key), true});
        }
    }
}

Rect CoarseGrid::rect_of(const CellKey& key) const {
    const double scale = std::ldexp(1.0, -key.level);
    const double dx = domain_.width() / nx_ * scale;
    const double dy = domain_.height() / ny_ * scale;
    const auto i = static_cast<double>(key.i);
    const auto j = static_cast<double>(key.j);
    return {domain_.x0 + i * dx, domain_.x0 + (i + 1) * dx, domain_.y0 + j * dy,
            domain_.y0 + (j + 1) * dy};
}

bool CoarseGrid::is_leaf(const CellKey& key) const {
    auto it = cells_.find(key);
    return it != cells_.end() && it->second.leaf;
}

const QuadCell& CoarseGrid::cell(const CellKey& key) const {
    auto it = cells_.find(key);
    if (it == cells_.end()) {
        throw InvalidInput("unknown coarse cell");
    }
    return it->second;
}

std::vector<CellKey> CoarseGrid::leaves() const {
    std::vector<CellKey> out;
    for (const auto& [key, c] : cells_) {
        if (c.leaf) out.push_back(key);
    }
    return out;
}

std::size_t CoarseGrid::leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(cells_.begin(), cells_.end(), [](const auto& kv) { return kv.second.leaf; }));
}

int CoarseGrid::max_level() const {
    int m = 0;
    for (const auto& [key, c] : cells_) m = std::max(m, key.level);
    return m;
}

bool CoarseGrid::in_bounds(const CellKey& key) const {
    const std::int64_t n = std::int64_t{1} << key.level;
    return key.i >= 0 && key.j >= 0 && key.i < nx_ * n && key.j < ny_ * n;
}

// Leaves inside cell `key` that touch its `facing` side.
std::vector<CellKey> CoarseGrid::leaves_touching(const CellKey& key, Side facing) const {
    const auto& c = cells_.at(key);
    if (c.leaf) return {key};
    std::array<CellKey, 2> kids;
    switch (facing) {
        case Side::West: kids = {child_key(key, 0, 0), child_key(key, 0, 1)}; break;
        case Side::East: kids = {child_key(key, 1, 0), child_key(key, 1, 1)}; break;
        case Side::South: kids = {child_key(key, 0, 0), child_key(key, 1, 0)}; break;
        case Side::North: kids = {child_key(key, 0, 1), child_key(key, 1, 1)}; break;
    }
    std::vector<CellKey> out;
    for (const auto& k : kids) {
        auto sub = leaves_touching(k, facing);
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::vector<CellKey> CoarseGrid::neighbor_leaves(const CellKey& key, Side side) const {
    CellKey n = shifted(key, side);
    if (!in_bounds(n)) return {};
    while (!cells_.contains(n)) {
        n = parent_key(n);
    }
    return leaves_touching(n, opposite(side));
}

bool CoarseGrid::has_finer_neighbor(const CellKey& key, Side side) const {
    CellKey n = shifted(key, side);
    if (!in_bounds(n)) return false;
    auto it = cells_.find(n);
    return it != cells_.end() && !it->second.leaf;
}

bool CoarseGrid::is_balanced() const {
    for (const auto& [key, c] : cells_) {
        if (!c.leaf) continue;
        for (Side s : kSides) {
            for (const auto& nb : neighbor_leaves(key, s)) {
                if (std::abs(nb.level - key.level) > 1) return false;
            }
        }
    }
    return true;
}

void CoarseGrid::split(const CellKey& key, RefineReport& report) {
    auto& c = cells_.at(key);
    c.leaf = false;
    report.refined.push_back(cell_id(key));
    for (int b = 0; b < 2; ++b) {
        for (int a = 0; a < 2; ++a) {
            CellKey k = child_key(key, a, b);
            cells_.emplace(k, QuadCell{k, rect_of(k), true});
            report.created.push_back(cell_id(k));
        }
    }
}

RefineReport CoarseGrid::refine(const std::set<CellId>& ids) {
    for (CellId id : ids) {
        if (!is_leaf(cell_key(id))) {
            throw InvalidInput("refine_cells: id is not a leaf");
        }
    }
    RefineReport report;
    std::deque<CellKey> pending;
    for (CellId id : ids) {
        const CellKey key = cell_key(id);
        if (!is_leaf(key)) continue;
        split(key, report);
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) pending.push_back(child_key(key, a, b));
    }
    // Balance closure: a new leaf at level l forces every edge neighbor to level >= l-1.
    while (!pending.empty()) {
        const CellKey key = pending.front();
        pending.pop_front();
        if (!is_leaf(key)) continue;
        for (Side s : kSides) {
            for (const auto& nb : neighbor_leaves(key, s)) {
                if (nb.level < key.level - 1) {
                    split(nb, report);
                    for (int b = 0; b < 2; ++b)
                        for (int a = 0; a < 2; ++a) pending.push_back(child_key(nb, a, b));
                    pending.push_back(key);
                }
            }
        }
    }
    // Leaves created and later split again are no longer leaves.
    std::erase_if(report.created, [this](CellId id) { return !is_leaf(cell_key(id)); });
    return report;
}

CoarsenReport CoarseGrid::coarsen(const std::set<CellId>& ids) {
    CoarsenReport report;
    std::set<CellKey> parents;
    for (CellId id : ids) {
        const CellKey key = cell_key(id);
        if (key.level == 0) {
            report.skipped.emplace_back(id, CoarsenSkip::NoParent);
            continue;
        }
        parents.insert(parent_key(key));
    }
    // Deepest parents first, deterministic within a level.
    std::vector<CellKey> order(parents.begin(), parents.end());
    std::stable_sort(order.begin(), order.end(),
                     [](const CellKey& a, const CellKey& b) { return a.level > b.level; });

    for (const CellKey& p : order) {
        const CellId pid = cell_id(p);
        bool complete = true;
        bool all_leaves = true;
        for (int b = 0; b < 2; ++b) {
            for (int a = 0; a < 2; ++a) {
                const CellKey k = child_key(p, a, b);
                if (!ids.contains(cell_id(k))) complete = false;
                if (!is_leaf(k)) all_leaves = false;
            }
        }
        if (!complete) {
            report.skipped.emplace_back(pid, CoarsenSkip::IncompleteQuadruple);
            continue;
        }
        if (!all_leaves) {
            report.skipped.emplace_back(pid, CoarsenSkip::NotAllLeaves);
            continue;
        }
        // After the merge p is a leaf at level p.level; neighbors must be at most one deeper.
        bool balanced = true;
        for (Side s : kSides) {
            CellKey n = shifted(p, s);
            if (!in_bounds(n)) continue;
            auto it = cells_.find(n);
            if (it == cells_.end() || it->second.leaf) continue;
            for (const auto& leaf : leaves_touching(n, opposite(s))) {
                if (leaf.level > p.level + 1) balanced = false;
            }
        }
        if (!balanced) {
            report.skipped.emplace_back(pid, CoarsenSkip::WouldBreakBalance);
            continue;
        }
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) cells_.erase(child_key(p, a, b));
        cells_.at(p).leaf = true;
        report.merged.push_back(pid);
    }
    return report;
}

bool operator==(const CoarseGrid& a, const CoarseGrid& b) {
    if (a.nx_ != b.nx_ || a.ny_ != b.ny_ || a.cells_.size() != b.cells_.size()) return false;
    auto ib = b.cells_.begin();
    for (const auto& [key, c] : a.cells_) {
        if (!(key == ib->first) || c.leaf != ib->second.leaf) return false;
        ++ib;
    }
    return true;
}

CoarseGrid build_coarse_grid(int nx, int ny, const Rect& domain) { return {nx, ny, domain}; }

RefineReport refine_cells(CoarseGrid& grid, const std::set<CellId>& ids) {
    return grid.refine(ids);
}

CoarsenReport coarsen_cells(CoarseGrid& grid, const std::set<CellId>& ids) {
    return grid.coarsen(ids);
}

// ---------------------------------------------------------------------------
// Triangle meshes

Rect TriMesh::bounding_box() const {
    Rect r{std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest(),
           std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest()};
    for (const auto& v : vertices) {
        r.x0 = std::min(r.x0, v.x());
        r.x1 = std::max(r.x1, v.x());
        r.y0 = std::min(r.y0, v.y());
        r.y1 = std::max(r.y1, v.y());
    }
    return r;
}

TriMesh make_trimesh(std::vector<Vec2> vertices, std::vector<std::array<int, 3>> triangles,
                     std::vector<CellId> owner) {
    if (owner.size() != triangles.size()) {
        throw InvalidInput("make_trimesh: owner count does not match triangle count");
    }
    TriMesh m;
    m.vertices = std::move(vertices);
    m.triangles = std::move(triangles);
    m.owner = std::move(owner);

    const std::size_t nt = m.triangles.size();
    m.area.resize(nt);
    m.centroid.resize(nt);
    m.triangle_edges.resize(nt);
    m.orientation.resize(nt);

    std::map<std::pair<int, int>, int> edge_index;
    for (std::size_t t = 0; t < nt; ++t) {
        auto& tri = m.triangles[t];
        const Vec2& a = m.vertices[tri[0]];
        const Vec2& b = m.vertices[tri[1]];
        const Vec2& c = m.vertices[tri[2]];
        const double signed_area = 0.5 * ((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
        m.area[t] = signed_area;
        m.centroid[t] = (a + b + c) / 3.0;
        for (int k = 0; k < 3; ++k) {
            const Vec2& p = m.vertices[tri[k]];
            const Vec2& q = m.vertices[tri[(k + 1) % 3]];
            m.h = std::max(m.h, (q - p).norm());
        }
        for (int k = 0; k < 3; ++k) {
            const int v1 = tri[(k + 1) % 3];
            const int v2 = tri[(k + 2) % 3];
            const std::pair<int, int> key{std::min(v1, v2), std::max(v1, v2)};
            auto [it, inserted] = edge_index.try_emplace(key, static_cast<int>(m.edges.size()));
            const int e = it->second;
            if (inserted) {
                m.edges.push_back({key.first, key.second});
                m.edge_triangles.push_back({static_cast<int>(t), -1});
                const Vec2 tangent = m.vertices[key.second] - m.vertices[key.first];
                const double len = tangent.norm();
                m.edge_length.push_back(len);
                m.edge_normal.emplace_back(tangent.y() / len, -tangent.x() / len);
            } else {
                m.edge_triangles[e][1] = static_cast<int>(t);
            }
            m.triangle_edges[t][k] = e;
            // Outward normal of a CCW triangle's edge v1->v2 is the clockwise rotation.
            const Vec2 tang = m.vertices[v2] - m.vertices[v1];
            const Vec2 out(tang.y(), -tang.x());
            m.orientation[t][k] = out.dot(m.edge_normal[e]) > 0 ? 1 : -1;
        }
    }
    m.edge_tag.assign(m.edges.size(), EdgeTag::Interior);
    m.periodic_partner.assign(m.edges.size(), -1);
    for (std::size_t e = 0; e < m.edges.size(); ++e) {
        if (m.edge_triangles[e][1] < 0) m.edge_tag[e] = EdgeTag::Boundary;
    }
    return m;
}

void pair_periodic_edges(TriMesh& mesh, const Rect& cell) {
    const double tol = 1e-9 * std::max(cell.width(), cell.height());
    std::map<std::int64_t, int> west, south;
    std::vector<int> east, north;
    auto snap = [&](double v, double lo, double len) {
        return static_cast<std::int64_t>(std::llround((v - lo) / len * 1e9));
    };
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        if (mesh.edge_tag[e] != EdgeTag::Boundary) continue;
        const Vec2 mid = mesh.edge_midpoint(static_cast<int>(e));
        if (std::abs(mid.x() - cell.x0) < tol) west[snap(mid.y(), cell.y0, cell.height())] = int(e);
        else if (std::abs(mid.x() - cell.x1) < tol) east.push_back(int(e));
        else if (std::abs(mid.y() - cell.y0) < tol) south[snap(mid.x(), cell.x0, cell.width())] = int(e);
        else if (std::abs(mid.y() - cell.y1) < tol) north.push_back(int(e));
    }
    auto link = [&](int e, std::map<std::int64_t, int>& side, double coord, double lo, double len) {
        auto it = side.find(snap(coord, lo, len));
        if (it == side.end()) {
            throw InvalidInput("pair_periodic_edges: boundary edges do not match across the cell");
        }
        mesh.edge_tag[e] = EdgeTag::Periodic;
        mesh.edge_tag[it->second] = EdgeTag::Periodic;
        mesh.periodic_partner[e] = it->second;
        mesh.periodic_partner[it->second] = e;
    };
    for (int e : east) link(e, west, mesh.edge_midpoint(e).y(), cell.y0, cell.height());
    for (int e : north) link(e, south, mesh.edge_midpoint(e).x(), cell.x0, cell.width());
}

TriMesh build_uniform_trimesh(int nx, int ny, const Rect& domain, Split split) {
    if (nx < 1 || ny < 1) {
        throw InvalidInput("uniform mesh needs positive cell counts");
    }
    if (domain.degenerate()) {
        throw InvalidInput("uniform mesh domain is degenerate");
    }
    std::vector<Vec2> verts;
    verts.reserve(static_cast<std::size_t>((nx + 1) * (ny + 1)));
    const double dx = domain.width() / nx;
    const double dy = domain.height() / ny;
    for (int j = 0; j <= ny; ++j)
        for (int i = 0; i <= nx; ++i) verts.emplace_back(domain.x0 + i * dx, domain.y0 + j * dy);
    auto vid = [nx](int i, int j) { return j * (nx + 1) + i; };

    std::vector<std::array<int, 3>> tris;
    std::vector<CellId> owner;
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            const int sw = vid(i, j), se = vid(i + 1, j), ne = vid(i + 1, j + 1), nw = vid(i, j + 1);
            const CellId id = cell_id({0, i, j});
            if (split == Split::RightDiagonal) {
                tris.push_back({sw, se, ne});
                tris.push_back({sw, ne, nw});
                owner.insert(owner.end(), 2, id);
            } else {
                const int c = static_cast<int>(verts.size());
                verts.emplace_back(domain.x0 + (i + 0.5) * dx, domain.y0 + (j + 0.5) * dy);
                tris.push_back({sw, se, c});
                tris.push_back({se, ne, c});
                tris.push_back({ne, nw, c});
                tris.push_back({nw, sw, c});
                owner.insert(owner.end(), 4, id);
            }
        }
    }
    return make_trimesh(std::move(verts), std::move(tris), std::move(owner));
}

TriMesh triangulate(const CoarseGrid& grid) {
    if (!grid.is_balanced()) {
        throw InvalidInput("triangulate: grid violates 2:1 balance");
    }
    const int finest = grid.max_level() + 1;
    const double unit_x = grid.domain().width() / grid.nx() * std::ldexp(1.0, -finest);
    const double unit_y = grid.domain().height() / grid.ny() * std::ldexp(1.0, -finest);

    std::map<std::pair<std::int64_t, std::int64_t>, int> lattice;
    std::vector<Vec2> verts;
    auto vertex = [&](std::int64_t X, std::int64_t Y) {
        auto [it, inserted] = lattice.try_emplace({X, Y}, static_cast<int>(verts.size()));
        if (inserted) {
            verts.emplace_back(grid.domain().x0 + static_cast<double>(X) * unit_x,
                               grid.domain().y0 + static_cast<double>(Y) * unit_y);
        }
        return it->second;
    };

    std::vector<std::array<int, 3>> tris;
    std::vector<CellId> owner;
    for (const CellKey& key : grid.leaves()) {
        const std::int64_t s = std::int64_t{1} << (finest - key.level);
        const std::int64_t X = key.i * s;
        const std::int64_t Y = key.j * s;
        const std::int64_t half = s / 2;
        const CellId id = cell_id(key);
        const bool west = grid.has_finer_neighbor(key, Side::West);
        const bool east = grid.has_finer_neighbor(key, Side::East);
        const bool south = grid.has_finer_neighbor(key, Side::South);
        const bool north = grid.has_finer_neighbor(key, Side::North);

        const int sw = vertex(X, Y);
        const int se = vertex(X + s, Y);
        const int ne = vertex(X + s, Y + s);
        const int nw = vertex(X, Y + s);
        if (!(west || east || south || north)) {
            tris.push_back({sw, se, ne});
            tris.push_back({sw, ne, nw});
            owner.insert(owner.end(), 2, id);
            continue;
        }
        std::vector<int> ring{sw};
        if (south) ring.push_back(vertex(X + half, Y));
        ring.push_back(se);
        if (east) ring.push_back(vertex(X + s, Y + half));
        ring.push_back(ne);
        if (north) ring.push_back(vertex(X + half, Y + s));
        ring.push_back(nw);
        if (west) ring.push_back(vertex(X, Y + half));
        const int c = vertex(X + half, Y + half);
        for (std::size_t k = 0; k < ring.size(); ++k) {
            tris.push_back({ring[k], ring[(k + 1) % ring.size()], c});
            owner.push_back(id);
        }
    }
    return make_trimesh(std::move(verts), std::move(tris), std::move(owner));
}

MeshAudit audit_mesh(const TriMesh& mesh, const Rect& domain) {
    MeshAudit audit;
    const double tol = 1e-10 * std::max(domain.width(), domain.height());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        if (!(mesh.area[t] > 0)) audit.positive_areas = false;
        audit.area_sum += mesh.area[t];
        const auto& tri = mesh.triangles[t];
        for (int k = 0; k < 3; ++k) {
            const Vec2 a = mesh.vertices[tri[(k + 1) % 3]] - mesh.vertices[tri[k]];
            const Vec2 b = mesh.vertices[tri[(k + 2) % 3]] - mesh.vertices[tri[k]];
            const double cosang = a.dot(b) / (a.norm() * b.norm());
            const double ang = std::acos(std::clamp(cosang, -1.0, 1.0)) * 180.0 / std::numbers::pi;
            audit.min_angle_deg = std::min(audit.min_angle_deg, ang);
        }
    }
    for (std::size_t e = 0; e < mesh.num_edges(); ++e) {
        if (mesh.edge_triangles[e][1] >= 0) continue;
        // A single-sided edge must lie on the outer boundary; otherwise a hanging node exists.
        const Vec2 a = mesh.vertices[mesh.edges[e][0]];
        const Vec2 b = mesh.vertices[mesh.edges[e][1]];
        const bool on_x = (std::abs(a.x() - domain.x0) < tol && std::abs(b.x() - domain.x0) < tol) ||
                          (std::abs(a.x() - domain.x1) < tol && std::abs(b.x() - domain.x1) < tol);
        const bool on_y = (std::abs(a.y() - domain.y0) < tol && std::abs(b.y() - domain.y0) < tol) ||
                          (std::abs(a.y() - domain.y1) < tol && std::abs(b.y() - domain.y1) < tol);
        if (!on_x && !on_y) audit.conforming = false;
    }
    return audit;
}

bool owners_match(const TriMesh& mesh, const CoarseGrid& grid) {
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const CellKey key = cell_key(mesh.owner[t]);
        if (!grid.is_leaf(key)) return false;
        const Rect r = grid.rect_of(key);
        const double slack = 1e-12 * std::max(r.width(), r.height());
        for (int v : mesh.triangles[t]) {
            if (!r.contains(mesh.vertices[v], slack)) return false;
        }
    }
    return true;
}

}  // namespace twoscale
