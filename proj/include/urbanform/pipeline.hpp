#pragma once

/**
 * @file pipeline.hpp
 *
 * @brief Declarative run configuration and the end-to-end pipeline:
 * ingest -> grid -> features -> select K (or fixed K) -> fit -> report.
 */

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "compare.hpp"
#include "error.hpp"
#include "features.hpp"
#include "geometry.hpp"
#include "gmm.hpp"
#include "ingest.hpp"
#include "report.hpp"
#include "selection.hpp"

namespace urbanform {

/// A failure inside one named pipeline stage.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& cause)
        : Error(stage + ": " + cause), stage_(std::move(stage)), cause_(cause) {}
    const std::string& stage() const noexcept { return stage_; }
    const std::string& cause() const noexcept { return cause_; }

private:
    std::string stage_;
    std::string cause_;
};

struct RunConfig {
    std::string city;
    std::filesystem::path osm;
    std::filesystem::path boundary;
    /// Empty means the built-in 31-feature catalogue.
    std::filesystem::path catalog;
    std::optional<double> grid_size_m;
    std::vector<double> sweep_sizes;
    /// nullopt selects K by BIC over [k_min, k_max].
    std::optional<int> k;
    int k_min = 2;
    int k_max = 12;
    GmmConfig gmm;
    std::optional<std::uint64_t> seed;
    Normalization cluster_normalization = Normalization::zscore;
    std::string log_level = "info";
};

namespace detail {

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    if (path.empty() || path.is_absolute()) return path;
    return (base / path).lexically_normal();
}

}  // namespace detail

/// Reads a run configuration; relative paths resolve against `base_dir`.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    try {
        c.city = j.value("city", "");
        c.osm = detail::resolve_path(base_dir, j.at("osm").get<std::string>());
        c.boundary = detail::resolve_path(base_dir, j.at("boundary").get<std::string>());
        if (j.contains("catalog") && !j["catalog"].is_null())
            c.catalog = detail::resolve_path(base_dir, j["catalog"].get<std::string>());
        if (j.contains("grid_size_m") && !j["grid_size_m"].is_null()) c.grid_size_m = j["grid_size_m"].get<double>();
        if (j.contains("sweep_sizes") && !j["sweep_sizes"].is_null())
            c.sweep_sizes = j["sweep_sizes"].get<std::vector<double>>();
        if (j.contains("k") && !j["k"].is_null()) {
            if (j["k"].is_string()) {
                if (j["k"].get<std::string>() != "auto") throw ValidationError("k must be an integer or \"auto\"");
            } else {
                c.k = j["k"].get<int>();
            }
        }
        c.k_min = j.value("k_min", c.k_min);
        c.k_max = j.value("k_max", c.k_max);
        if (j.contains("gmm")) {
            const auto& g = j["gmm"];
            c.gmm.covariance = covariance_from_string(g.value("covariance", std::string(to_string(c.gmm.covariance))));
            c.gmm.max_iter = g.value("max_iter", c.gmm.max_iter);
            c.gmm.tol = g.value("tol", c.gmm.tol);
            c.gmm.n_restarts = g.value("n_restarts", c.gmm.n_restarts);
            c.gmm.reg_var = g.value("reg_var", c.gmm.reg_var);
        }
        if (j.contains("seed") && !j["seed"].is_null()) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("cluster_normalization"))
            c.cluster_normalization = normalization_from_string(j["cluster_normalization"].get<std::string>());
        c.log_level = j.value("log_level", c.log_level);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("invalid run configuration: ") + e.what());
    }
    return c;
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open run configuration " + path.string());
    try {
        return run_config_from_json(nlohmann::json::parse(in), std::filesystem::absolute(path).parent_path());
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(std::string("invalid run configuration: ") + e.what());
    }
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["city"] = c.city;
    j["osm"] = c.osm.string();
    j["boundary"] = c.boundary.string();
    j["catalog"] = c.catalog.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(c.catalog.string());
    j["grid_size_m"] = c.grid_size_m ? nlohmann::ordered_json(*c.grid_size_m) : nlohmann::ordered_json(nullptr);
    j["sweep_sizes"] = c.sweep_sizes;
    j["k"] = c.k ? nlohmann::ordered_json(*c.k) : nlohmann::ordered_json("auto");
    j["k_min"] = c.k_min;
    j["k_max"] = c.k_max;
    nlohmann::ordered_json g;
    g["covariance"] = to_string(c.gmm.covariance);
    g["max_iter"] = c.gmm.max_iter;
    g["tol"] = c.gmm.tol;
    g["n_restarts"] = c.gmm.n_restarts;
    g["reg_var"] = c.gmm.reg_var;
    j["gmm"] = std::move(g);
    j["seed"] = c.seed ? nlohmann::ordered_json(*c.seed) : nlohmann::ordered_json(nullptr);
    j["cluster_normalization"] = to_string(c.cluster_normalization);
    j["log_level"] = c.log_level;
    return j;
}

/// Throws ValidationError before any work is done.
inline void validate(const RunConfig& c) {
    namespace fs = std::filesystem;
    if (c.osm.empty() || !fs::is_regular_file(c.osm)) throw ValidationError("OSM file not found: " + c.osm.string());
    if (c.boundary.empty() || !fs::is_regular_file(c.boundary))
        throw ValidationError("boundary file not found: " + c.boundary.string());
    if (!c.catalog.empty() && !fs::is_regular_file(c.catalog))
        throw ValidationError("catalogue not found: " + c.catalog.string());
    if (!c.grid_size_m && c.sweep_sizes.empty()) throw ValidationError("either grid_size_m or sweep_sizes is required");
    if (c.grid_size_m && !(*c.grid_size_m > 0)) throw ValidationError("grid_size_m must be positive");
    if (!c.grid_size_m && c.sweep_sizes.size() < 2) throw ValidationError("sweep_sizes needs at least 2 sizes");
    if (c.k && *c.k < 1) throw ValidationError("k must be at least 1");
    if (!c.k && (c.k_min < 1 || c.k_max < c.k_min)) throw ValidationError("invalid k range");
    if (c.cluster_normalization == Normalization::raw) throw ValidationError("clustering needs a normalized matrix");
    GmmConfig probe = c.gmm;
    probe.K = 1;
    probe.validate(1);
}

struct PipelineResult {
    int K = 0;
    std::optional<double> best_size;
    std::size_t cell_count = 0;
    std::vector<std::string> dropped_columns;
    std::vector<std::string> warnings;
};

using LogFn = std::function<void(const std::string&)>;

/**
 * Runs every stage and writes the output tree under `out_dir`. A stage failure
 * leaves a `FAILED` marker next to the partial outputs and throws StageError.
 * The fully resolved configuration, including the effective seed and the
 * dropped columns, is written to resolved_config.json.
 */
inline PipelineResult run_pipeline(RunConfig config, const std::filesystem::path& out_dir, unsigned threads = 1,
                                   const LogFn& log = {}) {
    namespace fs = std::filesystem;
    const auto info = [&](const std::string& m) {
        if (log) log(m);
    };
    validate(config);
    if (!config.seed) config.seed = std::random_device{}();
    config.gmm.seed = *config.seed;
    fs::create_directories(out_dir);
    fs::remove(out_dir / "FAILED");

    PipelineResult result;
    std::string stage = "ingest";
    const auto write_resolved = [&](const std::vector<std::string>* dropped) {
        auto j = run_config_to_json(config);
        j["dropped_columns"] = dropped ? *dropped : std::vector<std::string>{};
        detail::write_file(out_dir / "resolved_config.json", [&](std::ostream& o) { o << j.dump(2) << '\n'; });
    };
    try {
        write_resolved(nullptr);
        const auto boundary = parse_boundary_geojson_file(config.boundary);
        if (config.city.empty()) config.city = boundary.name;
        auto entities = clip_to_boundary(parse_osm_xml_file(config.osm), boundary);
        for (const auto& w : entities.warnings) result.warnings.push_back(w);
        write_entities_file(out_dir / "entities.ndjson", entities);
        info("ingest: " + std::to_string(entities.size()) + " entities after clipping");

        const Catalog catalog = config.catalog.empty() ? builtin_catalog() : read_catalog_file(config.catalog);
        const int k_lo = config.k ? *config.k : config.k_min;
        const int k_hi = config.k ? *config.k : config.k_max;

        std::optional<GridSweepResult> sweep;
        double size = config.grid_size_m.value_or(0.0);
        if (!config.grid_size_m) {
            stage = "select-grid";
            CityInputs city{config.city, entities, boundary, catalog};
            sweep = select_grid(city, config.sweep_sizes, k_lo, k_hi, config.gmm, threads);
            size = sweep->best_size;
            result.best_size = size;
            for (const auto& w : sweep->warnings) result.warnings.push_back(w);
            detail::write_file(out_dir / "silhouette_sweep.csv",
                               [&](std::ostream& o) { write_silhouette_sweep_csv(o, *sweep); });
            info("select-grid: best size " + format_double(size) + " m");
        }

        stage = "grid";
        const auto grid = make_hexgrid(boundary, size);
        result.cell_count = grid.size();
        write_grid_file(out_dir / "grid.geojson", grid);
        info("grid: " + std::to_string(grid.size()) + " cells at " + format_double(size) + " m");

        stage = "features";
        const auto raw = compute_features(entities, grid, catalog, config.city);
        for (const auto& w : raw.warnings) result.warnings.push_back(w);
        write_features_file(out_dir / "features.csv", raw);
        const auto z = standardize(raw, config.cluster_normalization);
        result.dropped_columns = z.dropped_columns;

        stage = "select-k";
        std::optional<BicCurve> curve;
        GmmModel model;
        if (!config.k) {
            curve = select_k(z, config.k_min, std::min<int>(config.k_max, static_cast<int>(z.rows())), config.gmm, threads);
            detail::write_file(out_dir / "bic.csv", [&](std::ostream& o) { write_bic_csv(o, *curve); });
            model = curve->best_model;
            info("select-k: best K " + std::to_string(curve->best_K));
        } else {
            stage = "fit";
            GmmConfig g = config.gmm;
            g.K = *config.k;
            model = fit(z, g, threads);
        }
        result.K = model.K();
        write_model_file(out_dir / "model.json", model);

        const auto labels = assign(model, z.values);
        detail::write_file(out_dir / "labels.csv", [&](std::ostream& o) { write_labels_csv(o, raw.row_ids, labels); });

        stage = "report";
        ReportInputs rep;
        rep.raw = &raw;
        rep.labels = labels;
        rep.K = model.K();
        rep.grids = {{config.city, &grid}};
        rep.bic = curve ? &*curve : nullptr;
        rep.sweep = sweep ? &*sweep : nullptr;
        write_report(out_dir / "report", rep);
        write_resolved(&result.dropped_columns);
        info("report: written to " + (out_dir / "report").string());
    } catch (const std::exception& e) {
        std::ofstream marker(out_dir / "FAILED", std::ios::binary);
        marker << stage << ": " << e.what() << '\n';
        throw StageError(stage, e.what());
    }
    return result;
}

// ---------------------------------------------------------------------------
// Cross-city comparison

struct CompareOptions {
    JoinMode mode = JoinMode::per_city_grid;
    std::optional<int> k;
    int k_min = 2;
    int k_max = 12;
    GmmConfig gmm;
    double share_threshold = 0.05;
    bool centrality_only = false;
};

struct CompareResult {
    JointMatrix joint;
    std::vector<int> labels;
    CrossCityReport report;
    std::optional<BicCurve> curve;
    GmmModel model;
};

/// Joint clustering over several raw city matrices.
inline CompareResult compare_cities(const std::vector<FeatureMatrix>& raws, const CompareOptions& opt,
                                    unsigned threads = 1) {
    CompareResult out;
    out.joint = join_cities(raws, opt.mode);
    if (opt.centrality_only) out.joint = centrality_only(out.joint);
    const auto& z = out.joint.standardized;
    if (opt.k) {
        GmmConfig g = opt.gmm;
        g.K = *opt.k;
        out.model = fit(z, g, threads);
    } else {
        out.curve = select_k(z, opt.k_min, std::min<int>(opt.k_max, static_cast<int>(z.rows())), opt.gmm, threads);
        out.model = out.curve->best_model;
    }
    out.labels = assign(out.model, z.values);
    out.report = cross_city_report(out.labels, out.joint, opt.share_threshold);
    return out;
}

inline void write_contingency_csv(std::ostream& o, const CrossCityReport& r) {
    o << "cluster";
    for (const auto& c : r.cities) o << ',' << detail::csv_field(c);
    o << ",total,shared\n";
    for (int k = 0; k < r.K; ++k) {
        o << (k + 1);
        for (Eigen::Index c = 0; c < r.contingency.cols(); ++c) o << ',' << r.contingency(k, c);
        o << ',' << r.contingency.row(k).sum() << ',' << (r.shared[static_cast<std::size_t>(k)] ? "yes" : "no") << '\n';
    }
}

/// Writes contingency.csv, cluster_means_<city>.csv and, for cities with a
/// grid, map_<city>.geojson into `dir`.
inline void write_compare_report(const std::filesystem::path& dir, const CompareResult& res,
                                 const std::vector<CityGrid>& grids) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto& rep = res.report;
    detail::write_file(dir / "contingency.csv", [&](std::ostream& o) { write_contingency_csv(o, rep); });
    for (std::size_t c = 0; c < rep.cities.size(); ++c) {
        detail::write_file(dir / ("cluster_means_" + detail::safe_file_stem(rep.cities[c]) + ".csv"), [&](std::ostream& o) {
            o << "feature";
            for (int k = 0; k < rep.K; ++k) o << ",cluster_" << (k + 1);
            o << '\n';
            for (std::size_t f = 0; f < rep.feature_names.size(); ++f) {
                o << detail::csv_field(rep.feature_names[f]);
                for (int k = 0; k < rep.K; ++k)
                    o << ',' << format_fixed(rep.per_city_means[static_cast<std::size_t>(k)][c](static_cast<Eigen::Index>(f)), 3);
                o << '\n';
            }
        });
    }
    for (const auto& g : grids) {
        std::vector<RowId> rows;
        std::vector<int> labels;
        for (std::size_t i = 0; i < res.joint.raw.row_ids.size(); ++i) {
            if (res.joint.raw.row_ids[i].city != g.city) continue;
            rows.push_back(res.joint.raw.row_ids[i]);
            labels.push_back(res.labels[i]);
        }
        const auto doc = export_choropleth({g}, rows, labels);
        detail::write_file(dir / ("map_" + detail::safe_file_stem(g.city) + ".geojson"),
                           [&](std::ostream& o) { o << doc.dump() << '\n'; });
    }
}

}  // namespace urbanform
