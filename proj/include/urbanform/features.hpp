#pragma once

/**
 * @file features.hpp
 *
 * @brief Per-cell urban-form features: tag counts, walk-network degree
 * centrality, the feature matrix and its normalizations.
 */

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "error.hpp"
#include "geometry.hpp"
#include "ingest.hpp"

namespace urbanform {

struct TagSelector {
    std::string key;
    /// Absent: any value of `key` matches.
    std::optional<std::string> value;

    bool matches(const Entity& e) const {
        auto v = e.tag(key);
        return v && (!value || *v == *value);
    }

    /// Column name: `key_value`, or just `key` for key-only selectors.
    std::string column_name() const { return value ? key + "_" + *value : key; }
};

enum class Aggregation { extensive, intensive };
enum class Normalization { raw, zscore, mean_ratio };

inline std::string_view to_string(Aggregation a) { return a == Aggregation::extensive ? "extensive" : "intensive"; }

inline std::string_view to_string(Normalization n) {
    switch (n) {
        case Normalization::raw: return "raw";
        case Normalization::zscore: return "zscore";
        case Normalization::mean_ratio: return "mean_ratio";
    }
    return "raw";
}

inline Normalization normalization_from_string(std::string_view s) {
    if (s == "raw") return Normalization::raw;
    if (s == "zscore") return Normalization::zscore;
    if (s == "mean_ratio") return Normalization::mean_ratio;
    throw ValidationError("unknown normalization '" + std::string(s) + "'");
}

struct FeatureColumn {
    std::string name;
    /// Cell ids in grid order; `values` is parallel to it.
    std::vector<std::int64_t> cell_ids;
    std::vector<double> values;
    Aggregation aggregation = Aggregation::extensive;
    /// Cells whose value was defaulted (intensive mean over an empty cell).
    std::vector<std::int64_t> flagged_cells;
    std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Catalogue

/// Highway values that make a way part of the pedestrian network.
inline const std::vector<std::string>& default_walkable_highways() {
    static const std::vector<std::string> v{"pedestrian", "footway",     "path",         "steps",    "living_street",
                                            "residential", "service",    "unclassified", "tertiary", "secondary",
                                            "primary",     "track",      "crossing",     "cycleway"};
    return v;
}

struct FeatureSpec {
    enum class Kind { count, network };

    std::string name;
    Kind kind = Kind::count;
    TagSelector selector;  // count features
    std::string network = "walk";
    std::string metric = "degree_centrality";
    Aggregation aggregation = Aggregation::extensive;
};

struct Catalog {
    std::vector<FeatureSpec> features;
    std::set<std::string> walkable_highways{default_walkable_highways().begin(), default_walkable_highways().end()};

    bool needs_network() const {
        return std::any_of(features.begin(), features.end(),
                           [](const FeatureSpec& f) { return f.kind == FeatureSpec::Kind::network; });
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::istringstream in{std::string(s)};
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

inline FeatureSpec count_spec(std::string key, std::optional<std::string> value) {
    FeatureSpec f;
    f.selector = {std::move(key), std::move(value)};
    f.name = f.selector.column_name();
    return f;
}

}  // namespace detail

/// The 31-feature catalogue, in reporting order.
inline Catalog builtin_catalog() {
    using detail::count_spec;
    Catalog c;
    auto& f = c.features;
    for (const char* v : {"pedestrian", "service", "living_street", "footway", "steps", "path"})
        f.push_back(count_spec("highway", v));
    FeatureSpec dc;
    dc.name = "degree_centrality";
    dc.kind = FeatureSpec::Kind::network;
    f.push_back(dc);
    f.push_back(count_spec("public_transport", std::nullopt));
    for (const char* v : {"bus_stop", "cycleway", "crossing"}) f.push_back(count_spec("highway", v));
    f.push_back(count_spec("railway", "subway_entrance"));
    for (const char* v : {"residential", "commercial", "public", "school", "church", "university", "train_station"})
        f.push_back(count_spec("building", v));
    for (const char* v : {"parking", "restaurant", "cafe", "bar", "pub", "theatre", "cinema", "library", "hospital",
                          "pharmacy", "doctors"})
        f.push_back(count_spec("amenity", v));
    f.push_back(count_spec("natural", std::nullopt));
    return c;
}

/**
 * Parses an INI-style catalogue:
 *
 *     [features]
 *     highway_pedestrian = count highway=pedestrian
 *     natural            = count natural
 *     degree_centrality  = network walk degree_centrality extensive
 *     [walk]
 *     highway = pedestrian, footway, path
 *
 * Entry order is column order. The `[walk]` section is optional and replaces
 * the default walkable highway set.
 */
inline Catalog parse_catalog(std::istream& in) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ParseError("invalid catalogue: " + e.message(), e.line());
    }
    Catalog c;
    const auto features = tree.get_child_optional("features");
    if (!features || features->empty()) throw ParseError("catalogue has no [features] entries");
    std::set<std::string> names;
    for (const auto& [name, node] : *features) {
        const auto toks = detail::split_ws(node.data());
        if (toks.empty()) throw ParseError("catalogue entry '" + name + "' is empty");
        if (!names.insert(name).second) throw ParseError("duplicate catalogue entry '" + name + "'");
        FeatureSpec f;
        f.name = name;
        if (toks[0] == "count") {
            if (toks.size() != 2) throw ParseError("count entry '" + name + "' needs one selector key[=value]");
            const auto eq = toks[1].find('=');
            f.selector.key = toks[1].substr(0, eq);
            if (eq != std::string::npos) f.selector.value = toks[1].substr(eq + 1);
            if (f.selector.key.empty()) throw ParseError("selector of '" + name + "' has an empty key");
        } else if (toks[0] == "network") {
            if (toks.size() != 4) throw ParseError("network entry '" + name + "' needs: network <net> <metric> <mode>");
            f.kind = FeatureSpec::Kind::network;
            f.network = toks[1];
            f.metric = toks[2];
            if (f.network != "walk") throw ParseError("unsupported network '" + f.network + "'");
            if (f.metric != "degree_centrality") throw ParseError("unsupported metric '" + f.metric + "'");
            if (toks[3] == "extensive")
                f.aggregation = Aggregation::extensive;
            else if (toks[3] == "intensive")
                f.aggregation = Aggregation::intensive;
            else
                throw ParseError("unknown aggregation '" + toks[3] + "'");
        } else {
            throw ParseError("unknown feature kind '" + toks[0] + "' for '" + name + "'");
        }
        c.features.push_back(std::move(f));
    }
    if (auto walk = tree.get_optional<std::string>("walk.highway")) {
        c.walkable_highways.clear();
        for (auto& v : detail::split(*walk, ',')) {
            if (!v.empty()) c.walkable_highways.insert(v);
        }
    }
    return c;
}

inline Catalog read_catalog_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open catalogue " + path.string());
    return parse_catalog(in);
}

inline void write_catalog(std::ostream& out, const Catalog& c) {
    out << "[features]\n";
    for (const auto& f : c.features) {
        out << f.name << " = ";
        if (f.kind == FeatureSpec::Kind::count)
            out << "count " << f.selector.key << (f.selector.value ? "=" + *f.selector.value : "") << '\n';
        else
            out << "network " << f.network << ' ' << f.metric << ' ' << to_string(f.aggregation) << '\n';
    }
    out << "\n[walk]\nhighway = ";
    bool first = true;
    for (const auto& h : c.walkable_highways) {
        out << (first ? "" : ", ") << h;
        first = false;
    }
    out << '\n';
}

// ---------------------------------------------------------------------------
// Counting

/// Planar sample points along a polyline, spaced at most `step` apart, endpoints included.
inline std::vector<Point> sample_polyline(const std::vector<Point>& line, double step) {
    std::vector<Point> out;
    if (line.empty()) return out;
    out.push_back(line.front());
    for (std::size_t i = 1; i < line.size(); ++i) {
        const Point& a = line[i - 1];
        const Point& b = line[i];
        const double len = std::hypot(b.x - a.x, b.y - a.y);
        const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(len / step)));
        for (std::size_t k = 1; k <= n; ++k) {
            const double t = static_cast<double>(k) / static_cast<double>(n);
            out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
        }
    }
    return out;
}

namespace detail {

/// Closed test: does segment ab meet the hexagon at `a`?
inline bool segment_meets_cell(const HexLayout& layout, Axial a, const Point& p, const Point& q, double eps) {
    if (layout.contains(a, p, eps) || layout.contains(a, q, eps)) return true;
    const auto v = layout.vertices(a);
    for (std::size_t i = 0; i < 6; ++i) {
        if (segments_intersect(p, q, v[i], v[(i + 1) % 6])) return true;
    }
    return false;
}

}  // namespace detail

/**
 * Grid row indices touched by an entity: its node's cell, or every retained
 * cell whose closed hexagon meets one of the way's segments. Candidates come
 * from samples at size/8 spacing and their neighbors; each is then tested exactly.
 */
inline std::vector<std::size_t> cells_touched(const Entity& e, const HexGrid& grid) {
    std::vector<std::size_t> out;
    if (e.kind == EntityKind::node) {
        if (auto idx = grid.locate_index(project(e.coords[0], grid.frame()))) out.push_back(*idx);
        return out;
    }
    const auto& layout = grid.layout();
    const double eps = HexGrid::kEdgeEps;
    std::vector<Point> line;
    line.reserve(e.coords.size());
    for (const auto& c : e.coords) line.push_back(project(c, grid.frame()));
    for (std::size_t i = 0; i + 1 < line.size(); ++i) {
        const Point& p = line[i];
        const Point& q = line[i + 1];
        std::set<std::int64_t> candidates;
        for (const auto& s : sample_polyline({p, q}, grid.size_m() / 8.0)) {
            const Axial base = layout.round(s);
            candidates.insert(cell_id_of(base));
            for (const auto& d : kAxialNeighbors) candidates.insert(cell_id_of({base.q + d.q, base.r + d.r}));
        }
        for (auto id : candidates) {
            auto idx = grid.index_of(id);
            if (idx && detail::segment_meets_cell(layout, axial_of(id), p, q, eps)) out.push_back(*idx);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

namespace detail {

inline FeatureColumn empty_column(const HexGrid& grid, std::string name, Aggregation agg) {
    FeatureColumn col;
    col.name = std::move(name);
    col.aggregation = agg;
    col.cell_ids.reserve(grid.size());
    for (const auto& c : grid.cells()) col.cell_ids.push_back(c.cell_id);
    col.values.assign(grid.size(), 0.0);
    return col;
}

}  // namespace detail

/**
 * Extensive count of entities matching `selector` per cell. A way adds at most
 * one to each cell its polyline meets.
 */
inline FeatureColumn count_feature(const EntitySet& entities, const HexGrid& grid, const TagSelector& selector,
                                   std::string name = {}) {
    if (selector.key.empty()) throw ValidationError("selector key must be nonempty");
    auto col = detail::empty_column(grid, name.empty() ? selector.column_name() : std::move(name),
                                    Aggregation::extensive);
    std::size_t matched = 0;
    for (const auto& e : entities.entities) {
        if (!selector.matches(e)) continue;
        ++matched;
        for (auto idx : cells_touched(e, grid)) col.values[idx] += 1.0;
    }
    if (matched == 0) col.warnings.push_back("selector '" + col.name + "' matched no entities");
    return col;
}

// ---------------------------------------------------------------------------
// Walk network

struct WalkGraph {
    /// Sorted ascending.
    std::vector<std::int64_t> node_ids;
    std::vector<LatLon> positions;
    /// Vertex index pairs (a < b), sorted, unique.
    std::vector<std::pair<std::size_t, std::size_t>> edges;

    std::size_t vertex_count() const { return node_ids.size(); }
    std::size_t edge_count() const { return edges.size(); }

    std::vector<std::size_t> degrees() const {
        std::vector<std::size_t> deg(node_ids.size(), 0);
        for (const auto& [a, b] : edges) {
            ++deg[a];
            ++deg[b];
        }
        return deg;
    }
};

inline WalkGraph build_walk_network(const EntitySet& entities,
                                    const std::set<std::string>& walkable = {default_walkable_highways().begin(),
                                                                             default_walkable_highways().end()}) {
    std::map<std::int64_t, LatLon> vertices;
    std::set<std::pair<std::int64_t, std::int64_t>> edge_ids;
    for (const auto& e : entities.entities) {
        if (e.kind != EntityKind::way) continue;
        auto hw = e.tag("highway");
        if (!hw || !walkable.contains(std::string(*hw))) continue;
        for (std::size_t i = 0; i < e.node_refs.size(); ++i) {
            vertices.emplace(e.node_refs[i], e.coords[i]);
            if (i == 0) continue;
            auto a = e.node_refs[i - 1], b = e.node_refs[i];
            if (a == b) continue;
            if (a > b) std::swap(a, b);
            edge_ids.emplace(a, b);
        }
    }
    if (vertices.empty()) throw ComputeError("no walk network in extract");
    WalkGraph g;
    std::unordered_map<std::int64_t, std::size_t> index;
    for (const auto& [id, pos] : vertices) {
        index.emplace(id, g.node_ids.size());
        g.node_ids.push_back(id);
        g.positions.push_back(pos);
    }
    for (const auto& [a, b] : edge_ids) g.edges.emplace_back(index.at(a), index.at(b));
    return g;
}

/// degree(v) / (N - 1), keyed by node id.
inline std::map<std::int64_t, double> degree_centrality(const WalkGraph& g) {
    const std::size_t n = g.vertex_count();
    if (n < 2) throw ComputeError("degree centrality needs at least 2 vertices");
    const auto deg = g.degrees();
    std::map<std::int64_t, double> out;
    const double denom = static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) out.emplace(g.node_ids[i], static_cast<double>(deg[i]) / denom);
    return out;
}

/// Per-cell sum (extensive) or mean (intensive) of node degree centrality.
inline FeatureColumn network_feature(const HexGrid& grid, const WalkGraph& graph, Aggregation mode,
                                     std::string name = "degree_centrality") {
    const auto centrality = degree_centrality(graph);
    auto col = detail::empty_column(grid, std::move(name), mode);
    std::vector<std::size_t> counts(grid.size(), 0);
    for (std::size_t i = 0; i < graph.vertex_count(); ++i) {
        auto idx = grid.locate_index(project(graph.positions[i], grid.frame()));
        if (!idx) continue;
        col.values[*idx] += centrality.at(graph.node_ids[i]);
        ++counts[*idx];
    }
    if (mode == Aggregation::intensive) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (counts[i] == 0)
                col.flagged_cells.push_back(col.cell_ids[i]);
            else
                col.values[i] /= static_cast<double>(counts[i]);
        }
    }
    return col;
}

// ---------------------------------------------------------------------------
// Feature matrix

struct RowId {
    std::string city;
    std::int64_t cell_id = 0;

    friend bool operator==(const RowId&, const RowId&) = default;
};

struct FeatureMatrix {
    std::vector<RowId> row_ids;
    std::vector<std::string> column_names;
    /// rows x columns.
    Eigen::MatrixXd values;
    Normalization normalization = Normalization::raw;
    /// Per-column transform applied by standardize: (x - center) / scale.
    std::vector<double> center;
    std::vector<double> scale;
    /// Columns removed by standardize because they were degenerate.
    std::vector<std::string> dropped_columns;
    /// Grid spacing the rows were computed on, when known.
    std::optional<double> grid_size_m;
    std::vector<std::string> warnings;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index cols() const { return values.cols(); }

    std::optional<Eigen::Index> column_index(std::string_view name) const {
        for (std::size_t i = 0; i < column_names.size(); ++i) {
            if (column_names[i] == name) return static_cast<Eigen::Index>(i);
        }
        return std::nullopt;
    }
};

inline void validate(const FeatureMatrix& m) {
    if (m.values.rows() != static_cast<Eigen::Index>(m.row_ids.size()))
        throw ValidationError("row id count differs from matrix rows");
    if (m.values.cols() != static_cast<Eigen::Index>(m.column_names.size()))
        throw ValidationError("column name count differs from matrix columns");
    std::set<std::string> names;
    for (const auto& n : m.column_names) {
        if (!names.insert(n).second) throw ValidationError("duplicate column name '" + n + "'");
    }
    if (!m.values.allFinite()) throw ValidationError("feature matrix has non-finite entries");
}

namespace detail {

inline std::size_t catalogue_rank(const std::string& name) {
    static const auto ranks = [] {
        std::unordered_map<std::string, std::size_t> r;
        const auto c = builtin_catalog();
        for (std::size_t i = 0; i < c.features.size(); ++i) r.emplace(c.features[i].name, i);
        return r;
    }();
    auto it = ranks.find(name);
    return it == ranks.end() ? ranks.size() : it->second;
}

}  // namespace detail

/**
 * Stacks columns into a raw matrix. Columns named after catalogue features are
 * placed in catalogue order; any others follow in their given order.
 */
inline FeatureMatrix assemble_matrix(const std::vector<FeatureColumn>& columns, const std::string& city_tag) {
    if (columns.empty()) throw ValidationError("no feature columns to assemble");
    std::vector<std::size_t> order(columns.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detail::catalogue_rank(columns[a].name) < detail::catalogue_rank(columns[b].name);
    });
    const auto& first = columns[order[0]];
    FeatureMatrix m;
    m.values.resize(static_cast<Eigen::Index>(first.values.size()), static_cast<Eigen::Index>(columns.size()));
    std::set<std::string> names;
    for (std::size_t j = 0; j < order.size(); ++j) {
        const auto& col = columns[order[j]];
        if (col.values.size() != first.values.size() || col.cell_ids.size() != col.values.size())
            throw ValidationError("column '" + col.name + "' length mismatch");
        if (col.cell_ids != first.cell_ids) throw ValidationError("column '" + col.name + "' uses a different cell order");
        if (!names.insert(col.name).second) throw ValidationError("duplicate column name '" + col.name + "'");
        m.column_names.push_back(col.name);
        for (std::size_t i = 0; i < col.values.size(); ++i) m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col.values[i];
        for (const auto& w : col.warnings) m.warnings.push_back(w);
    }
    for (auto id : first.cell_ids) m.row_ids.push_back({city_tag, id});
    validate(m);
    return m;
}

/// Computes every catalogue feature over the grid.
inline FeatureMatrix compute_features(const EntitySet& entities, const HexGrid& grid, const Catalog& catalog,
                                      const std::string& city_tag) {
    std::optional<WalkGraph> graph;
    if (catalog.needs_network()) graph = build_walk_network(entities, catalog.walkable_highways);
    std::vector<FeatureColumn> columns;
    for (const auto& f : catalog.features) {
        if (f.kind == FeatureSpec::Kind::count)
            columns.push_back(count_feature(entities, grid, f.selector, f.name));
        else
            columns.push_back(network_feature(grid, *graph, f.aggregation, f.name));
    }
    auto m = assemble_matrix(columns, city_tag);
    m.grid_size_m = grid.size_m();
    return m;
}

namespace detail {

inline double column_mean(const Eigen::MatrixXd& v, Eigen::Index j) {
    return v.rows() == 0 ? 0.0 : v.col(j).sum() / static_cast<double>(v.rows());
}

inline double column_pop_stdev(const Eigen::MatrixXd& v, Eigen::Index j, double mean) {
    if (v.rows() == 0) return 0.0;
    return std::sqrt((v.col(j).array() - mean).square().sum() / static_cast<double>(v.rows()));
}

}  // namespace detail

/**
 * z-score (population stdev) or mean-ratio normalization of a raw matrix.
 * Zero-variance columns (zscore) and zero-mean columns (mean_ratio) are dropped
 * and listed in `dropped_columns`.
 */
inline FeatureMatrix standardize(const FeatureMatrix& raw, Normalization method) {
    if (raw.normalization != Normalization::raw) throw ValidationError("standardize expects a raw matrix");
    if (method == Normalization::raw) return raw;
    FeatureMatrix out;
    out.row_ids = raw.row_ids;
    out.normalization = method;
    out.grid_size_m = raw.grid_size_m;
    out.warnings = raw.warnings;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < raw.cols(); ++j) {
        const double mean = detail::column_mean(raw.values, j);
        double center = 0.0, scale = 0.0;
        bool degenerate = false;
        if (method == Normalization::zscore) {
            const double sd = detail::column_pop_stdev(raw.values, j, mean);
            degenerate = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
            center = mean;
            scale = sd;
        } else {
            degenerate = !(std::abs(mean) > 0.0);
            scale = mean;
        }
        const auto& name = raw.column_names[static_cast<std::size_t>(j)];
        if (degenerate) {
            out.dropped_columns.push_back(name);
            continue;
        }
        keep.push_back(j);
        out.column_names.push_back(name);
        out.center.push_back(center);
        out.scale.push_back(scale);
    }
    if (keep.empty()) throw ValidationError("all feature columns are degenerate");
    if (!out.dropped_columns.empty()) {
        std::string msg = "dropped degenerate columns:";
        for (const auto& n : out.dropped_columns) msg += " " + n;
        out.warnings.push_back(msg);
    }
    out.values.resize(raw.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        const auto j = static_cast<Eigen::Index>(k);
        out.values.col(j) = (raw.values.col(keep[k]).array() - out.center[k]) / out.scale[k];
    }
    return out;
}

/// Re-applies a stored standardization to raw rows with the same columns.
inline FeatureMatrix apply_standardization(const FeatureMatrix& raw, const std::vector<std::string>& names,
                                           const std::vector<double>& center, const std::vector<double>& scale,
                                           Normalization method) {
    FeatureMatrix out;
    out.row_ids = raw.row_ids;
    out.normalization = method;
    out.grid_size_m = raw.grid_size_m;
    out.column_names = names;
    out.center = center;
    out.scale = scale;
    out.values.resize(raw.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t k = 0; k < names.size(); ++k) {
        auto j = raw.column_index(names[k]);
        if (!j) throw ValidationError("feature column '" + names[k] + "' missing");
        out.values.col(static_cast<Eigen::Index>(k)) = (raw.values.col(*j).array() - center[k]) / scale[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV: header `city,cell_id,<features...>`, one row per cell. A sidecar
// `<file>.meta.json` records the city and grid size for joins.

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::vector<std::string> parse_csv_line(const std::string& line, std::size_t lineno) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    if (quoted) throw ParseError("unterminated quoted CSV field", lineno);
    out.push_back(std::move(cur));
    return out;
}

}  // namespace detail

inline void write_features_csv(std::ostream& out, const FeatureMatrix& m) {
    out << "city,cell_id";
    for (const auto& n : m.column_names) out << ',' << detail::csv_field(n);
    out << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const auto& id = m.row_ids[static_cast<std::size_t>(i)];
        out << detail::csv_field(id.city) << ',' << id.cell_id;
        for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << format_double(m.values(i, j));
        out << '\n';
    }
}

inline FeatureMatrix read_features_csv(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw ParseError("empty features CSV", 1);
    auto header = detail::parse_csv_line(line, lineno);
    if (header.size() < 3 || header[0] != "city" || header[1] != "cell_id")
        throw ParseError("features CSV header must start with city,cell_id and list at least one feature", 1);
    FeatureMatrix m;
    m.column_names.assign(header.begin() + 2, header.end());
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = detail::parse_csv_line(line, lineno);
        if (fields.size() != header.size()) throw ParseError("wrong field count", lineno);
        RowId id{fields[0], 0};
        if (!detail::parse_number(fields[1], id.cell_id)) throw ParseError("invalid cell_id", lineno);
        auto& row = rows.emplace_back();
        for (std::size_t j = 2; j < fields.size(); ++j) {
            double v = 0;
            if (!detail::parse_number(fields[j], v) || !std::isfinite(v))
                throw ParseError("invalid value in column '" + header[j] + "'", lineno);
            row.push_back(v);
        }
        m.row_ids.push_back(std::move(id));
    }
    m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.column_names.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    validate(m);
    return m;
}

inline std::filesystem::path features_meta_path(const std::filesystem::path& csv) {
    auto p = csv;
    p += ".meta.json";
    return p;
}

inline void write_features_file(const std::filesystem::path& path, const FeatureMatrix& m) {
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write features file " + path.string());
        write_features_csv(out, m);
    }
    nlohmann::ordered_json meta;
    meta["city"] = m.row_ids.empty() ? "" : m.row_ids.front().city;
    meta["normalization"] = to_string(m.normalization);
    if (m.grid_size_m)
        meta["grid_size_m"] = *m.grid_size_m;
    else
        meta["grid_size_m"] = nullptr;
    std::ofstream out(features_meta_path(path), std::ios::binary);
    out << meta.dump(2) << '\n';
}

inline FeatureMatrix read_features_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open features file " + path.string());
    auto m = read_features_csv(in);
    std::ifstream meta_in(features_meta_path(path));
    if (meta_in) {
        try {
            const auto meta = nlohmann::json::parse(meta_in);
            if (meta.contains("grid_size_m") && meta["grid_size_m"].is_number())
                m.grid_size_m = meta["grid_size_m"].get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("invalid features sidecar: ") + e.what());
        }
    }
    return m;
}

}  // namespace urbanform
