#pragma once

/**
 * @file geometry.hpp
 *
 * @brief Local planar frame and flat-top hexagonal tessellation of a boundary.
 *
 * Grid size is the center-to-center spacing of adjacent hexagons, which equals
 * the flat-to-flat width. The circumradius is therefore size / sqrt(3) and each
 * cell covers (sqrt(3)/2) * size^2. Cell (0, 0) is centered on the boundary
 * centroid, which is also the origin of the local frame.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "detail/planar.hpp"
#include "error.hpp"
#include "ingest.hpp"

namespace urbanform {

using Point = detail::Vec2;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kSqrt3 = 1.7320508075688772;
inline constexpr double kMetersPerDegLat = 2.0 * kPi * kEarthRadiusM / 360.0;

/// Equirectangular frame tangent at an origin; exact affine inverse.
struct LocalFrame {
    double origin_lat = 0.0;
    double origin_lon = 0.0;
    double meters_per_deg_lat = kMetersPerDegLat;
    double meters_per_deg_lon = kMetersPerDegLat;

    static LocalFrame at(const LatLon& origin) {
        return {origin.lat, origin.lon, kMetersPerDegLat,
                kMetersPerDegLat * std::cos(origin.lat * kPi / 180.0)};
    }
};

inline Point project(const LatLon& p, const LocalFrame& f) {
    return {(p.lon - f.origin_lon) * f.meters_per_deg_lon, (p.lat - f.origin_lat) * f.meters_per_deg_lat};
}

inline LatLon unproject(const Point& p, const LocalFrame& f) {
    return {p.y / f.meters_per_deg_lat + f.origin_lat, p.x / f.meters_per_deg_lon + f.origin_lon};
}

/// Area centroid of the boundary's exterior ring, in degrees.
inline LatLon centroid(const Boundary& b) {
    std::vector<Point> ring;
    for (const auto& p : b.exterior()) ring.push_back(detail::to_vec(p));
    if (ring.size() > 1 && ring.front() == ring.back()) ring.pop_back();
    const auto c = detail::ring_centroid(ring);
    return {c.y, c.x};
}

inline std::vector<std::vector<Point>> project_rings(const Boundary& b, const LocalFrame& f) {
    std::vector<std::vector<Point>> out;
    for (const auto& ring : b.rings) {
        auto& r = out.emplace_back();
        for (const auto& p : ring) r.push_back(project(p, f));
    }
    return out;
}

/// Planar area of the boundary (exterior minus holes) in square meters.
inline double area_m2(const Boundary& b, const LocalFrame& f) {
    const auto rings = project_rings(b, f);
    double a = std::abs(detail::signed_area(rings.at(0)));
    for (std::size_t i = 1; i < rings.size(); ++i) a -= std::abs(detail::signed_area(rings[i]));
    return a;
}

inline double area_m2(const Boundary& b) { return area_m2(b, LocalFrame::at(centroid(b))); }

struct Axial {
    std::int32_t q = 0;
    std::int32_t r = 0;

    friend bool operator==(const Axial&, const Axial&) = default;
};

inline std::int64_t cell_id_of(Axial a) {
    return static_cast<std::int64_t>(
        (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a.q)) << 32) | static_cast<std::uint32_t>(a.r));
}

inline Axial axial_of(std::int64_t id) {
    const auto u = static_cast<std::uint64_t>(id);
    return {static_cast<std::int32_t>(static_cast<std::uint32_t>(u >> 32)),
            static_cast<std::int32_t>(static_cast<std::uint32_t>(u & 0xffffffffu))};
}

inline constexpr std::array<Axial, 6> kAxialNeighbors{{{1, 0}, {1, -1}, {0, -1}, {-1, 0}, {-1, 1}, {0, 1}}};

struct HexCell {
    std::int64_t cell_id = 0;
    Axial axial;
    Point center;
    /// Counter-clockwise, starting at angle 0.
    std::array<Point, 6> vertices;
};

/// Hex layout arithmetic for one spacing; independent of any boundary.
class HexLayout {
public:
    explicit HexLayout(double size_m) : size_(size_m), radius_(size_m / kSqrt3) {}

    double size() const { return size_; }
    double circumradius() const { return radius_; }
    double cell_area() const { return 0.5 * kSqrt3 * size_ * size_; }

    Point center(Axial a) const {
        return {radius_ * 1.5 * a.q, radius_ * kSqrt3 * (a.r + 0.5 * a.q)};
    }

    std::array<Point, 6> vertices(Axial a) const {
        const Point c = center(a);
        std::array<Point, 6> v;
        for (int i = 0; i < 6; ++i) {
            const double ang = kPi / 3.0 * i;
            v[static_cast<std::size_t>(i)] = {c.x + radius_ * std::cos(ang), c.y + radius_ * std::sin(ang)};
        }
        return v;
    }

    /// Cube-rounded axial coordinates of the hexagon containing p.
    Axial round(const Point& p) const {
        const double qf = (2.0 / 3.0 * p.x) / radius_;
        const double rf = (-1.0 / 3.0 * p.x + kSqrt3 / 3.0 * p.y) / radius_;
        const double sf = -qf - rf;
        double q = std::round(qf), r = std::round(rf), s = std::round(sf);
        const double dq = std::abs(q - qf), dr = std::abs(r - rf), ds = std::abs(s - sf);
        if (dq > dr && dq > ds)
            q = -r - s;
        else if (dr > ds)
            r = -q - s;
        return {static_cast<std::int32_t>(q), static_cast<std::int32_t>(r)};
    }

    /// Closed containment test against the hexagon at a, with tolerance in meters.
    bool contains(Axial a, const Point& p, double eps) const {
        const auto v = vertices(a);
        for (std::size_t i = 0; i < 6; ++i) {
            const Point& s = v[i];
            const Point& e = v[(i + 1) % 6];
            if (detail::cross(s, e, p) < -eps * radius_) return false;
        }
        return true;
    }

private:
    double size_;
    double radius_;
};

class HexGrid {
public:
    HexGrid(LocalFrame frame, double size_m, std::vector<HexCell> cells, Boundary boundary)
        : frame_(frame), layout_(size_m), cells_(std::move(cells)), boundary_(std::move(boundary)) {
        index_.reserve(cells_.size());
        for (std::size_t i = 0; i < cells_.size(); ++i) {
            if (!index_.emplace(cells_[i].cell_id, i).second)
                throw ValidationError("duplicate cell id " + std::to_string(cells_[i].cell_id));
        }
    }

    const LocalFrame& frame() const { return frame_; }
    const HexLayout& layout() const { return layout_; }
    double size_m() const { return layout_.size(); }
    const std::vector<HexCell>& cells() const { return cells_; }
    std::size_t size() const { return cells_.size(); }
    const Boundary& boundary() const { return boundary_; }

    /// Position of a cell in `cells()`, if retained.
    std::optional<std::size_t> index_of(std::int64_t cell_id) const {
        auto it = index_.find(cell_id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    /// Row index of the retained cell containing p. Points on a shared edge go to
    /// the smallest containing cell id.
    std::optional<std::size_t> locate_index(const Point& p) const {
        const Axial base = layout_.round(p);
        std::optional<std::size_t> best;
        const auto consider = [&](Axial a) {
            auto idx = index_of(cell_id_of(a));
            if (!idx || !layout_.contains(a, p, kEdgeEps)) return;
            if (!best || cells_[*idx].cell_id < cells_[*best].cell_id) best = idx;
        };
        consider(base);
        for (const auto& d : kAxialNeighbors) consider({base.q + d.q, base.r + d.r});
        return best;
    }

    std::optional<std::int64_t> locate(const Point& p) const {
        if (auto idx = locate_index(p)) return cells_[*idx].cell_id;
        return std::nullopt;
    }

    std::optional<std::int64_t> locate(double x, double y) const { return locate(Point{x, y}); }

    /// Relative tolerance used for shared-edge containment.
    static constexpr double kEdgeEps = 1e-9;

private:
    LocalFrame frame_;
    HexLayout layout_;
    std::vector<HexCell> cells_;
    Boundary boundary_;
    std::unordered_map<std::int64_t, std::size_t> index_;
};

inline HexCell make_cell(const HexLayout& layout, Axial a) {
    return {cell_id_of(a), a, layout.center(a), layout.vertices(a)};
}

/// Builds the grid from explicit axial coordinates. Used when reloading a grid file.
inline HexGrid make_hexgrid_from_cells(const Boundary& boundary, const LocalFrame& frame, double size_m,
                                      std::vector<Axial> axials) {
    const HexLayout layout(size_m);
    std::sort(axials.begin(), axials.end(),
              [](Axial a, Axial b) { return cell_id_of(a) < cell_id_of(b); });
    std::vector<HexCell> cells;
    cells.reserve(axials.size());
    for (auto a : axials) cells.push_back(make_cell(layout, a));
    return HexGrid(frame, size_m, std::move(cells), boundary);
}

/**
 * Tessellates the boundary's bounding box and keeps cells whose center lies in
 * the boundary (on-edge counts as inside). Cells are ordered by cell id.
 */
inline HexGrid make_hexgrid(const Boundary& boundary, double size_m) {
    if (!(size_m > 0.0) || !std::isfinite(size_m)) throw ValidationError("grid size must be positive");
    if (boundary.rings.empty()) throw ValidationError("boundary has no rings");
    const LocalFrame frame = LocalFrame::at(centroid(boundary));
    const auto rings = project_rings(boundary, frame);

    double minx = INFINITY, miny = INFINITY, maxx = -INFINITY, maxy = -INFINITY;
    for (const auto& p : rings[0]) {
        minx = std::min(minx, p.x);
        maxx = std::max(maxx, p.x);
        miny = std::min(miny, p.y);
        maxy = std::max(maxy, p.y);
    }
    const HexLayout layout(size_m);
    const double R = layout.circumradius();
    const double est = (maxx - minx + 2 * size_m) * (maxy - miny + 2 * size_m) / layout.cell_area();
    if (est > 5e7) throw ValidationError("grid size too small for study area");

    const auto q0 = static_cast<std::int32_t>(std::floor(minx / (1.5 * R))) - 1;
    const auto q1 = static_cast<std::int32_t>(std::ceil(maxx / (1.5 * R))) + 1;
    std::vector<HexCell> cells;
    for (std::int32_t q = q0; q <= q1; ++q) {
        const auto r0 = static_cast<std::int32_t>(std::floor(miny / (kSqrt3 * R) - 0.5 * q)) - 1;
        const auto r1 = static_cast<std::int32_t>(std::ceil(maxy / (kSqrt3 * R) - 0.5 * q)) + 1;
        for (std::int32_t r = r0; r <= r1; ++r) {
            const Axial a{q, r};
            const Point c = layout.center(a);
            if (c.x < minx || c.x > maxx || c.y < miny || c.y > maxy) continue;
            if (detail::point_in_rings(c, rings, 1e-9)) cells.push_back(make_cell(layout, a));
        }
    }
    if (cells.empty()) throw ValidationError("grid size exceeds study area");
    std::sort(cells.begin(), cells.end(), [](const HexCell& a, const HexCell& b) { return a.cell_id < b.cell_id; });
    return HexGrid(frame, size_m, std::move(cells), boundary);
}

/// Closed WGS84 ring of a cell: 6 vertices plus the first repeated, counter-clockwise.
inline std::vector<LatLon> cell_ring_wgs84(const HexGrid& grid, const HexCell& cell) {
    std::vector<LatLon> ring;
    ring.reserve(7);
    for (const auto& v : cell.vertices) ring.push_back(unproject(v, grid.frame()));
    ring.push_back(ring.front());
    return ring;
}

inline nlohmann::ordered_json ring_to_json(const std::vector<LatLon>& ring) {
    auto out = nlohmann::ordered_json::array();
    for (const auto& p : ring) out.push_back({p.lon, p.lat});
    return out;
}

// ---------------------------------------------------------------------------
// Grid file: a GeoJSON FeatureCollection of hexagons with a top-level
// "urbanform_grid" member carrying what is needed to rebuild the HexGrid.

inline nlohmann::ordered_json grid_to_geojson(const HexGrid& grid) {
    nlohmann::ordered_json doc;
    doc["type"] = "FeatureCollection";
    nlohmann::ordered_json meta;
    meta["version"] = 1;
    meta["size_m"] = grid.size_m();
    meta["origin_lat"] = grid.frame().origin_lat;
    meta["origin_lon"] = grid.frame().origin_lon;
    meta["boundary_name"] = grid.boundary().name;
    auto rings = nlohmann::ordered_json::array();
    for (const auto& ring : grid.boundary().rings) rings.push_back(ring_to_json(ring));
    meta["boundary"] = std::move(rings);
    doc["urbanform_grid"] = std::move(meta);
    auto features = nlohmann::ordered_json::array();
    for (const auto& cell : grid.cells()) {
        nlohmann::ordered_json f;
        f["type"] = "Feature";
        f["properties"] = {{"cell_id", cell.cell_id}, {"q", cell.axial.q}, {"r", cell.axial.r}};
        f["geometry"] = {{"type", "Polygon"},
                         {"coordinates", nlohmann::ordered_json::array({ring_to_json(cell_ring_wgs84(grid, cell))})}};
        features.push_back(std::move(f));
    }
    doc["features"] = std::move(features);
    return doc;
}

inline HexGrid grid_from_geojson(const nlohmann::json& doc) {
    try {
        const auto& meta = doc.at("urbanform_grid");
        if (meta.at("version").get<int>() != 1) throw ParseError("unsupported grid file version");
        Boundary b;
        b.name = meta.value("boundary_name", "");
        for (const auto& ring : meta.at("boundary")) {
            auto& r = b.rings.emplace_back();
            for (const auto& p : ring) r.push_back({p.at(1).get<double>(), p.at(0).get<double>()});
        }
        const double size = meta.at("size_m").get<double>();
        const LocalFrame frame = LocalFrame::at({meta.at("origin_lat").get<double>(), meta.at("origin_lon").get<double>()});
        std::vector<Axial> axials;
        for (const auto& f : doc.at("features")) {
            const auto id = f.at("properties").at("cell_id").get<std::int64_t>();
            axials.push_back(axial_of(id));
        }
        return make_hexgrid_from_cells(b, frame, size, std::move(axials));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid grid file: ") + e.what());
    }
}

inline void write_grid_file(const std::filesystem::path& path, const HexGrid& grid) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write grid file " + path.string());
    out << grid_to_geojson(grid).dump() << '\n';
}

inline HexGrid read_grid_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open grid file " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("invalid grid file: ") + e.what());
    }
    return grid_from_geojson(doc);
}

}  // namespace urbanform
