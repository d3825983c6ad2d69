#pragma once

/**
 * @file ingest.hpp
 *
 * @brief OSM XML and GeoJSON boundary readers, clipping, and the line-delimited
 * entity interchange format.
 *
 * Only nodes and ways are read. Relations are skipped; study-area boundaries
 * are expected as pre-exported GeoJSON polygons.
 */

#include <algorithm>
#include <charconv>
#include <chrono>
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
#include <utility>
#include <vector>

#include <expat.h>
#include <nlohmann/json.hpp>

#include "detail/planar.hpp"
#include "error.hpp"

namespace urbanform {

struct LatLon {
    double lat = 0.0;
    double lon = 0.0;

    friend bool operator==(const LatLon&, const LatLon&) = default;
};

enum class EntityKind { node, way };

inline std::string_view to_string(EntityKind k) { return k == EntityKind::node ? "node" : "way"; }

struct Entity {
    std::int64_t id = 0;
    EntityKind kind = EntityKind::node;
    std::map<std::string, std::string> tags;
    /// One point for nodes; the resolved polyline for ways.
    std::vector<LatLon> coords;
    /// Node ids of a way, parallel to `coords`. Empty for nodes.
    std::vector<std::int64_t> node_refs;

    bool has_key(const std::string& key) const { return tags.contains(key); }

    std::optional<std::string_view> tag(const std::string& key) const {
        auto it = tags.find(key);
        if (it == tags.end()) return std::nullopt;
        return std::string_view(it->second);
    }

    friend bool operator==(const Entity&, const Entity&) = default;
};

struct EntitySet {
    std::vector<Entity> entities;
    std::string source;
    std::vector<std::string> warnings;

    std::size_t size() const { return entities.size(); }
    std::size_t count(EntityKind k) const {
        return static_cast<std::size_t>(std::count_if(entities.begin(), entities.end(),
                                                      [k](const Entity& e) { return e.kind == k; }));
    }

    /// Equality on content; warnings are diagnostics and do not participate.
    friend bool operator==(const EntitySet& a, const EntitySet& b) {
        return a.entities == b.entities && a.source == b.source;
    }
};

struct Boundary {
    /// rings[0] is the exterior; the rest are holes. Each ring is closed.
    std::vector<std::vector<LatLon>> rings;
    std::string name;
    std::vector<std::string> warnings;

    const std::vector<LatLon>& exterior() const { return rings.at(0); }
};

/// Validates the Entity invariants, throwing ValidationError on the first violation.
inline void validate(const Entity& e) {
    const auto where = [&] { return std::string(to_string(e.kind)) + " " + std::to_string(e.id); };
    if (e.kind == EntityKind::node && e.coords.size() != 1)
        throw ValidationError(where() + ": node must have exactly one coordinate");
    if (e.kind == EntityKind::way) {
        if (e.coords.size() < 2) throw ValidationError(where() + ": way needs at least 2 coordinates");
        if (e.node_refs.size() != e.coords.size())
            throw ValidationError(where() + ": node reference count differs from coordinate count");
    }
    for (const auto& c : e.coords) {
        if (!(c.lat >= -90.0 && c.lat <= 90.0) || !(c.lon >= -180.0 && c.lon <= 180.0))
            throw ValidationError(where() + ": coordinate out of WGS84 range");
    }
    for (const auto& [k, v] : e.tags) {
        if (k.empty()) throw ValidationError(where() + ": empty tag key");
    }
}

/// Validates every entity plus (kind, id) uniqueness.
inline void validate(const EntitySet& set) {
    std::set<std::pair<int, std::int64_t>> seen;
    for (const auto& e : set.entities) {
        validate(e);
        if (!seen.emplace(static_cast<int>(e.kind), e.id).second)
            throw ValidationError("duplicate " + std::string(to_string(e.kind)) + " id " +
                                  std::to_string(e.id));
    }
}

namespace detail {

inline detail::Vec2 to_vec(const LatLon& p) { return {p.lon, p.lat}; }

inline std::vector<std::vector<Vec2>> to_vec_rings(const Boundary& b) {
    std::vector<std::vector<Vec2>> out;
    out.reserve(b.rings.size());
    for (const auto& ring : b.rings) {
        auto& r = out.emplace_back();
        r.reserve(ring.size());
        for (const auto& p : ring) r.push_back(to_vec(p));
    }
    return out;
}

// Degree-space on-edge tolerance, about 0.1 micrometre on the ground.
inline constexpr double kDegreeEps = 1e-12;

template <class T>
bool parse_number(std::string_view s, T& out) {
    const auto* first = s.data();
    const auto* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

class OsmXmlReader {
public:
    explicit OsmXmlReader(EntitySet& out) : out_(out) {}

    void parse(std::istream& in) {
        XML_Parser p = XML_ParserCreate(nullptr);
        if (!p) throw Error("cannot allocate XML parser");
        parser_ = p;
        XML_SetUserData(p, this);
        XML_SetElementHandler(p, &OsmXmlReader::on_start, &OsmXmlReader::on_end);
        struct Guard {
            XML_Parser p;
            ~Guard() { XML_ParserFree(p); }
        } guard{p};

        std::vector<char> buf(1 << 16);
        bool done = false;
        while (!done) {
            in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            const auto got = in.gcount();
            done = got == 0 || in.eof();
            if (XML_Parse(p, buf.data(), static_cast<int>(got), done ? 1 : 0) == XML_STATUS_ERROR) {
                if (pending_error_) throw ParseError(*pending_error_, pending_line_);
                throw ParseError(std::string("malformed OSM XML: ") + XML_ErrorString(XML_GetErrorCode(p)),
                                 XML_GetCurrentLineNumber(p));
            }
            if (pending_error_) throw ParseError(*pending_error_, pending_line_);
            if (in.bad()) throw Error("read error on OSM stream");
        }
        if (!saw_root_) throw ParseError("document has no <osm> root element");
        finish();
    }

private:
    struct RawNode {
        std::int64_t id;
        LatLon pos;
        std::size_t tagged_index;  // index into tagged_ or npos
    };
    struct RawWay {
        std::int64_t id;
        std::vector<std::int64_t> refs;
        std::map<std::string, std::string> tags;
    };
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    static const char* attr(const XML_Char** atts, std::string_view name) {
        for (int i = 0; atts[i]; i += 2) {
            if (name == atts[i]) return atts[i + 1];
        }
        return nullptr;
    }

    void fail(std::string msg) {
        if (pending_error_) return;
        pending_error_ = std::move(msg);
        pending_line_ = XML_GetCurrentLineNumber(parser_);
        XML_StopParser(parser_, XML_FALSE);
    }

    std::int64_t require_id(const XML_Char** atts, const char* name, std::string_view element) {
        const char* v = attr(atts, name);
        std::int64_t id = 0;
        if (!v || !parse_number(v, id)) {
            fail("<" + std::string(element) + "> missing or invalid '" + name + "' attribute");
        }
        return id;
    }

    static void on_start(void* self, const XML_Char* name, const XML_Char** atts) {
        static_cast<OsmXmlReader*>(self)->start(name, atts);
    }
    static void on_end(void* self, const XML_Char* name) { static_cast<OsmXmlReader*>(self)->end(name); }

    void start(std::string_view name, const XML_Char** atts) {
        if (pending_error_) return;
        if (depth_++ == 0) {
            if (name != "osm") fail("root element must be <osm>, found <" + std::string(name) + ">");
            saw_root_ = true;
            return;
        }
        if (name == "node" && !in_node_ && !in_way_) {
            in_node_ = true;
            const std::int64_t id = require_id(atts, "id", "node");
            const char* lat = attr(atts, "lat");
            const char* lon = attr(atts, "lon");
            LatLon pos;
            if (!lat || !lon || !parse_number(lat, pos.lat) || !parse_number(lon, pos.lon)) {
                fail("<node id=" + std::to_string(id) + "> missing or invalid lat/lon");
                return;
            }
            if (!(pos.lat >= -90 && pos.lat <= 90 && pos.lon >= -180 && pos.lon <= 180)) {
                fail("<node id=" + std::to_string(id) + "> coordinate out of range");
                return;
            }
            if (node_index_.contains(id)) {
                fail("duplicate node id " + std::to_string(id));
                return;
            }
            node_index_.emplace(id, nodes_.size());
            nodes_.push_back({id, pos, npos});
            current_tags_.clear();
        } else if (name == "way" && !in_node_ && !in_way_) {
            in_way_ = true;
            current_way_ = RawWay{require_id(atts, "id", "way"), {}, {}};
            current_tags_.clear();
        } else if (name == "nd" && in_way_) {
            current_way_.refs.push_back(require_id(atts, "ref", "nd"));
        } else if (name == "tag" && (in_node_ || in_way_)) {
            const char* k = attr(atts, "k");
            const char* v = attr(atts, "v");
            if (!k || !v) {
                fail("<tag> requires 'k' and 'v'");
                return;
            }
            if (*k == '\0') {
                fail("<tag> with empty key");
                return;
            }
            current_tags_[k] = v;
        }
    }

    void end(std::string_view name) {
        --depth_;
        if (pending_error_) return;
        if (name == "node" && in_node_) {
            in_node_ = false;
            if (!current_tags_.empty()) {
                nodes_.back().tagged_index = tagged_.size();
                tagged_.push_back(std::move(current_tags_));
                current_tags_ = {};
            }
        } else if (name == "way" && in_way_) {
            in_way_ = false;
            current_way_.tags = std::move(current_tags_);
            current_tags_ = {};
            if (!current_way_.tags.empty()) {
                if (ways_seen_.contains(current_way_.id)) {
                    fail("duplicate way id " + std::to_string(current_way_.id));
                    return;
                }
                ways_seen_.insert(current_way_.id);
                ways_.push_back(std::move(current_way_));
            }
            current_way_ = {};
        }
    }

    void finish() {
        std::vector<char> referenced(nodes_.size(), 0);
        std::vector<Entity> ways;
        for (auto& w : ways_) {
            Entity e{w.id, EntityKind::way, std::move(w.tags), {}, {}};
            std::vector<std::size_t> idx;
            idx.reserve(w.refs.size());
            bool ok = true;
            for (auto ref : w.refs) {
                auto it = node_index_.find(ref);
                if (it == node_index_.end()) {
                    out_.warnings.push_back("way " + std::to_string(w.id) + " dropped: references missing node " +
                                            std::to_string(ref));
                    ok = false;
                    break;
                }
                idx.push_back(it->second);
            }
            if (!ok) continue;
            if (idx.size() < 2) {
                out_.warnings.push_back("way " + std::to_string(w.id) + " dropped: fewer than 2 nodes");
                continue;
            }
            for (auto i : idx) {
                referenced[i] = 1;
                e.coords.push_back(nodes_[i].pos);
                e.node_refs.push_back(nodes_[i].id);
            }
            ways.push_back(std::move(e));
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& n = nodes_[i];
            if (n.tagged_index == npos && !referenced[i]) continue;
            Entity e{n.id, EntityKind::node, {}, {n.pos}, {}};
            if (n.tagged_index != npos) e.tags = std::move(tagged_[n.tagged_index]);
            out_.entities.push_back(std::move(e));
        }
        for (auto& w : ways) out_.entities.push_back(std::move(w));
    }

    EntitySet& out_;
    XML_Parser parser_ = nullptr;
    int depth_ = 0;
    bool saw_root_ = false;
    bool in_node_ = false;
    bool in_way_ = false;
    std::optional<std::string> pending_error_;
    std::size_t pending_line_ = 0;
    std::map<std::string, std::string> current_tags_;
    RawWay current_way_;
    std::vector<RawNode> nodes_;
    std::vector<std::map<std::string, std::string>> tagged_;
    std::unordered_map<std::int64_t, std::size_t> node_index_;
    std::vector<RawWay> ways_;
    std::set<std::int64_t> ways_seen_;
};

inline std::string file_provenance(const std::filesystem::path& path) {
    std::error_code ec;
    const auto mtime = std::filesystem::last_write_time(path, ec);
    if (ec) return path.string();
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(mtime.time_since_epoch()).count();
    return path.string() + "@" + std::to_string(secs);
}

}  // namespace detail

/**
 * Reads an OSM XML document.
 *
 * Keeps every tagged node and tagged way, plus the untagged nodes that a kept
 * way references. Nodes come first in document order, then ways. A way with a
 * dangling node reference is dropped and reported in `warnings`.
 */
inline EntitySet parse_osm_xml(std::istream& in, std::string source = "<stream>") {
    EntitySet out;
    out.source = std::move(source);
    detail::OsmXmlReader reader(out);
    reader.parse(in);
    return out;
}

inline EntitySet parse_osm_xml_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open OSM file " + path.string());
    return parse_osm_xml(in, detail::file_provenance(path));
}

namespace detail {

inline double ring_area_deg_scaled(const std::vector<LatLon>& ring) {
    std::vector<Vec2> v;
    double lat_sum = 0.0;
    for (const auto& p : ring) {
        v.push_back(to_vec(p));
        lat_sum += p.lat;
    }
    const double mean_lat = ring.empty() ? 0.0 : lat_sum / static_cast<double>(ring.size());
    return std::abs(signed_area(v)) * std::cos(mean_lat * 3.14159265358979323846 / 180.0);
}

inline std::vector<std::vector<LatLon>> read_polygon(const nlohmann::json& rings_json) {
    if (!rings_json.is_array() || rings_json.empty()) throw ParseError("polygon has no rings");
    std::vector<std::vector<LatLon>> rings;
    for (const auto& ring_json : rings_json) {
        auto& ring = rings.emplace_back();
        for (const auto& pt : ring_json) {
            if (!pt.is_array() || pt.size() < 2 || !pt[0].is_number() || !pt[1].is_number())
                throw ParseError("polygon position must be [lon, lat]");
            const LatLon p{pt[1].get<double>(), pt[0].get<double>()};
            if (!(p.lat >= -90 && p.lat <= 90 && p.lon >= -180 && p.lon <= 180))
                throw ParseError("polygon position out of WGS84 range");
            ring.push_back(p);
        }
        if (ring.size() < 4) throw ParseError("polygon ring needs at least 4 positions");
        if (!(ring.front() == ring.back())) throw ParseError("unclosed polygon ring");
        std::vector<Vec2> v;
        for (const auto& p : ring) v.push_back(to_vec(p));
        if (ring_self_intersects(v)) throw ParseError("self-intersecting polygon ring");
    }
    return rings;
}

inline double polygon_area(const std::vector<std::vector<LatLon>>& rings) {
    double a = ring_area_deg_scaled(rings[0]);
    for (std::size_t i = 1; i < rings.size(); ++i) a -= ring_area_deg_scaled(rings[i]);
    return a;
}

}  // namespace detail

/**
 * Reads the study-area boundary from a GeoJSON Feature, FeatureCollection
 * (first feature is used) or bare geometry. For a MultiPolygon only the largest
 * part is kept; every other part produces a warning.
 */
inline Boundary parse_boundary_geojson(std::istream& in) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("invalid GeoJSON: ") + e.what());
    }
    nlohmann::json feature = doc;
    if (doc.value("type", "") == "FeatureCollection") {
        if (!doc.contains("features") || !doc["features"].is_array() || doc["features"].empty())
            throw ParseError("FeatureCollection has no features");
        feature = doc["features"][0];
    }
    Boundary b;
    nlohmann::json geometry = feature;
    if (feature.value("type", "") == "Feature") {
        geometry = feature.value("geometry", nlohmann::json());
        if (feature.contains("properties") && feature["properties"].is_object()) {
            const auto& props = feature["properties"];
            if (props.contains("name") && props["name"].is_string()) b.name = props["name"].get<std::string>();
        }
    }
    if (!geometry.is_object()) throw ParseError("no polygonal feature present");
    const std::string type = geometry.value("type", "");
    if (type == "Polygon") {
        b.rings = detail::read_polygon(geometry.at("coordinates"));
    } else if (type == "MultiPolygon") {
        const auto& parts = geometry.at("coordinates");
        if (!parts.is_array() || parts.empty()) throw ParseError("empty MultiPolygon");
        std::vector<std::vector<std::vector<LatLon>>> polys;
        for (const auto& part : parts) polys.push_back(detail::read_polygon(part));
        std::size_t best = 0;
        double best_area = -1.0;
        for (std::size_t i = 0; i < polys.size(); ++i) {
            const double a = detail::polygon_area(polys[i]);
            if (a > best_area) {
                best_area = a;
                best = i;
            }
        }
        for (std::size_t i = 0; i < polys.size(); ++i) {
            if (i != best)
                b.warnings.push_back("MultiPolygon part " + std::to_string(i) +
                                     " ignored; only the largest part is used");
        }
        b.rings = std::move(polys[best]);
    } else {
        throw ParseError("no polygonal feature present (geometry type '" + type + "')");
    }
    return b;
}

inline Boundary parse_boundary_geojson_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open boundary file " + path.string());
    auto b = parse_boundary_geojson(in);
    if (b.name.empty()) b.name = path.stem().string();
    return b;
}

/// Even-odd containment with on-edge points counted inside.
inline bool contains(const Boundary& boundary, const LatLon& p) {
    const auto rings = detail::to_vec_rings(boundary);
    return detail::point_in_rings(detail::to_vec(p), rings, detail::kDegreeEps);
}

/**
 * Keeps nodes inside or on the boundary and ways with at least one vertex
 * inside. Untagged nodes referenced by a kept way are retained as geometry
 * support wherever they lie; tagged nodes must themselves be inside.
 */
inline EntitySet clip_to_boundary(const EntitySet& entities, const Boundary& boundary) {
    const auto rings = detail::to_vec_rings(boundary);
    const auto inside = [&](const LatLon& p) {
        return detail::point_in_rings(detail::to_vec(p), rings, detail::kDegreeEps);
    };
    std::set<std::int64_t> way_nodes;
    std::vector<char> keep(entities.entities.size(), 0);
    for (std::size_t i = 0; i < entities.entities.size(); ++i) {
        const auto& e = entities.entities[i];
        if (e.kind != EntityKind::way) continue;
        if (std::any_of(e.coords.begin(), e.coords.end(), inside)) {
            keep[i] = 1;
            way_nodes.insert(e.node_refs.begin(), e.node_refs.end());
        }
    }
    EntitySet out;
    out.source = entities.source;
    out.warnings = entities.warnings;
    for (std::size_t i = 0; i < entities.entities.size(); ++i) {
        const auto& e = entities.entities[i];
        if (e.kind == EntityKind::node) {
            const bool support = e.tags.empty() && way_nodes.contains(e.id);
            if (support || inside(e.coords[0])) out.entities.push_back(e);
        } else if (keep[i]) {
            out.entities.push_back(e);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Interchange format: one JSON record per line. The first line is a header
// {"format":"urbanform-entities","version":1,"source":...}; every following
// line is {"id","kind","tags","coords":[[lat,lon],...],"refs":[...]}.

inline constexpr int kEntityFormatVersion = 1;

inline void write_entities(std::ostream& out, const EntitySet& set) {
    nlohmann::ordered_json header;
    header["format"] = "urbanform-entities";
    header["version"] = kEntityFormatVersion;
    header["source"] = set.source;
    out << header.dump() << '\n';
    for (const auto& e : set.entities) {
        nlohmann::ordered_json rec;
        rec["id"] = e.id;
        rec["kind"] = to_string(e.kind);
        rec["tags"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : e.tags) rec["tags"][k] = v;
        auto coords = nlohmann::ordered_json::array();
        for (const auto& c : e.coords) coords.push_back({c.lat, c.lon});
        rec["coords"] = std::move(coords);
        if (e.kind == EntityKind::way) rec["refs"] = e.node_refs;
        out << rec.dump() << '\n';
    }
}

inline EntitySet read_entities(std::istream& in) {
    EntitySet set;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("invalid entity record: ") + e.what(), lineno);
        }
        try {
            if (!header) {
                if (rec.value("format", "") != "urbanform-entities")
                    throw ParseError("missing urbanform-entities header", lineno);
                if (rec.value("version", 0) != kEntityFormatVersion)
                    throw ParseError("unsupported entity file version", lineno);
                set.source = rec.value("source", "");
                header = true;
                continue;
            }
            Entity e;
            e.id = rec.at("id").get<std::int64_t>();
            const auto kind = rec.at("kind").get<std::string>();
            if (kind == "node")
                e.kind = EntityKind::node;
            else if (kind == "way")
                e.kind = EntityKind::way;
            else
                throw ParseError("unknown entity kind '" + kind + "'", lineno);
            for (const auto& [k, v] : rec.at("tags").items()) e.tags[k] = v.get<std::string>();
            for (const auto& c : rec.at("coords")) e.coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
            if (rec.contains("refs")) e.node_refs = rec["refs"].get<std::vector<std::int64_t>>();
            validate(e);
            set.entities.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("invalid entity record: ") + e.what(), lineno);
        } catch (const ValidationError& e) {
            throw ParseError(e.what(), lineno);
        }
    }
    if (!header) throw ParseError("empty entity file");
    return set;
}

inline EntitySet read_entities_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open entity file " + path.string());
    return read_entities(in);
}

inline void write_entities_file(const std::filesystem::path& path, const EntitySet& set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write entity file " + path.string());
    write_entities(out, set);
}

}  // namespace urbanform
