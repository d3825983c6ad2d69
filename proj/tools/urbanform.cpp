// Command-line front end: one subcommand per pipeline stage plus `run`.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <urbanform/urbanform.hpp>

namespace fs = std::filesystem;
using namespace urbanform;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

struct Globals {
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    std::string log_level = "info";
};

struct GmmOptions {
    std::string covariance = "diagonal";
    int max_iter = 500;
    double tol = 1e-7;
    int n_restarts = 10;
    double reg_var = 1e-6;

    void add(CLI::App* app) {
        app->add_option("--covariance", covariance, "diagonal or full")->capture_default_str();
        app->add_option("--max-iter", max_iter)->capture_default_str();
        app->add_option("--tol", tol)->capture_default_str();
        app->add_option("--restarts", n_restarts)->capture_default_str();
        app->add_option("--reg-var", reg_var)->capture_default_str();
    }

    GmmConfig config(const Globals& g) const {
        GmmConfig c;
        c.covariance = covariance_from_string(covariance);
        c.max_iter = max_iter;
        c.tol = tol;
        c.n_restarts = n_restarts;
        c.reg_var = reg_var;
        if (!g.seed) throw ValidationError("--seed is required for stochastic stages");
        c.seed = *g.seed;
        return c;
    }
};

/// Parses "auto" or a positive integer.
std::optional<int> parse_k(const std::string& s) {
    if (s == "auto") return std::nullopt;
    int k = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), k);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || k < 1)
        throw ValidationError("--k must be a positive integer or 'auto'");
    return k;
}

Catalog load_catalog(const std::string& path) { return path.empty() ? builtin_catalog() : read_catalog_file(path); }

template <class F>
void write_output(const fs::path& path, F&& body) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    detail::write_file(path, std::forward<F>(body));
}

void log_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) spdlog::warn("{}", w);
}

std::pair<std::vector<RowId>, std::vector<int>> read_labels(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open labels file " + path.string());
    return read_labels_csv(in);
}

/// Reorders `labels` so that they line up with `rows`.
std::vector<int> align_labels(const std::vector<RowId>& rows, const std::vector<RowId>& label_rows,
                              const std::vector<int>& labels) {
    std::map<std::pair<std::string, std::int64_t>, int> by_id;
    for (std::size_t i = 0; i < label_rows.size(); ++i) by_id[{label_rows[i].city, label_rows[i].cell_id}] = labels[i];
    std::vector<int> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        auto it = by_id.find({r.city, r.cell_id});
        if (it == by_id.end()) throw ValidationError("no label for cell " + std::to_string(r.cell_id) + " of " + r.city);
        out.push_back(it->second);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Urban typology discovery from OSM extracts"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for every stochastic stage");
    app.add_option("--threads", g.threads, "Worker threads for EM restarts")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off")->capture_default_str();

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Parse an OSM extract and clip it to a boundary");
    std::string osm, boundary, out;
    ingest->add_option("--osm", osm)->required()->check(CLI::ExistingFile);
    ingest->add_option("--boundary", boundary)->required()->check(CLI::ExistingFile);
    ingest->add_option("--out", out)->required();

    // grid
    auto* grid_cmd = app.add_subcommand("grid", "Tessellate a boundary with hexagons");
    std::string entities_path;
    double size_m = 0.0;
    grid_cmd->add_option("--entities", entities_path, "Entities file (only checked for readability)")
        ->check(CLI::ExistingFile);
    grid_cmd->add_option("--boundary", boundary)->required()->check(CLI::ExistingFile);
    grid_cmd->add_option("--size", size_m, "Center spacing in meters")->required();
    grid_cmd->add_option("--out", out)->required();

    // features
    auto* features_cmd = app.add_subcommand("features", "Aggregate catalogue features per cell");
    std::string grid_path, catalog_path, city;
    features_cmd->add_option("--entities", entities_path)->required()->check(CLI::ExistingFile);
    features_cmd->add_option("--grid", grid_path)->required()->check(CLI::ExistingFile);
    features_cmd->add_option("--catalog", catalog_path, "INI catalogue; defaults to the built-in 31 features")
        ->check(CLI::ExistingFile);
    features_cmd->add_option("--city", city, "City tag; defaults to the grid's boundary name");
    features_cmd->add_option("--out", out)->required();

    // select-k
    auto* selk = app.add_subcommand("select-k", "BIC sweep over the component count");
    std::string features_path, model_out;
    int k_min = 2, k_max = 12;
    GmmOptions gmm_opts;
    selk->add_option("--features", features_path)->required()->check(CLI::ExistingFile);
    selk->add_option("--k-min", k_min)->capture_default_str();
    selk->add_option("--k-max", k_max)->capture_default_str();
    selk->add_option("--model-out", model_out, "Also write the best model");
    selk->add_option("--out", out)->required();
    gmm_opts.add(selk);

    // select-grid
    auto* selg = app.add_subcommand("select-grid", "Silhouette sweep over grid sizes");
    std::vector<double> sizes;
    selg->add_option("--osm", osm)->required()->check(CLI::ExistingFile);
    selg->add_option("--boundary", boundary)->required()->check(CLI::ExistingFile);
    selg->add_option("--sizes", sizes)->required()->delimiter(',');
    selg->add_option("--catalog", catalog_path)->check(CLI::ExistingFile);
    selg->add_option("--city", city);
    selg->add_option("--k-min", k_min)->capture_default_str();
    selg->add_option("--k-max", k_max)->capture_default_str();
    selg->add_option("--out", out)->required();
    gmm_opts.add(selg);

    // cluster
    auto* cluster = app.add_subcommand("cluster", "Fit a mixture and assign cells");
    std::string k_str = "auto", labels_out;
    cluster->add_option("--features", features_path)->required()->check(CLI::ExistingFile);
    cluster->add_option("--k", k_str, "Component count or 'auto'")->capture_default_str();
    cluster->add_option("--k-min", k_min)->capture_default_str();
    cluster->add_option("--k-max", k_max)->capture_default_str();
    cluster->add_option("--out", out, "Model file")->required();
    cluster->add_option("--labels", labels_out, "Labels CSV")->required();
    gmm_opts.add(cluster);

    // compare
    auto* compare = app.add_subcommand("compare", "Joint clustering across cities");
    std::vector<std::string> feature_files, grid_files;
    std::string mode = "per-city-grid";
    double threshold = 0.05;
    bool centrality = false;
    compare->add_option("--features", feature_files, "Raw feature CSVs, one per city")->required()->check(CLI::ExistingFile);
    compare->add_option("--grid", grid_files, "Grid files in the same order, for maps")->check(CLI::ExistingFile);
    compare->add_option("--mode", mode, "uniform-grid or per-city-grid")->capture_default_str();
    compare->add_option("--k", k_str)->capture_default_str();
    compare->add_option("--k-min", k_min)->capture_default_str();
    compare->add_option("--k-max", k_max)->capture_default_str();
    compare->add_option("--share-threshold", threshold)->capture_default_str();
    compare->add_flag("--centrality-only", centrality, "Cluster on degree centrality alone");
    compare->add_option("--out", out)->required();
    gmm_opts.add(compare);

    // report
    auto* report = app.add_subcommand("report", "Write tables and maps for a labeling");
    std::string labels_path, bic_path;
    report->add_option("--features", features_path)->required()->check(CLI::ExistingFile);
    report->add_option("--labels", labels_path)->required()->check(CLI::ExistingFile);
    report->add_option("--grid", grid_files)->check(CLI::ExistingFile);
    report->add_option("--out", out)->required();

    // run
    auto* run = app.add_subcommand("run", "End-to-end pipeline from a JSON run configuration");
    std::string config_path;
    run->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    run->add_option("--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    auto logger = spdlog::stderr_color_mt("urbanform");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const auto level = spdlog::level::from_str(g.log_level);
    if (level == spdlog::level::off && g.log_level != "off") {
        std::cerr << "unknown --log-level '" << g.log_level << "'\n";
        return kExitValidation;
    }
    spdlog::set_level(level);

    try {
        if (*ingest) {
            auto b = parse_boundary_geojson_file(boundary);
            log_warnings(b.warnings);
            auto set = clip_to_boundary(parse_osm_xml_file(osm), b);
            log_warnings(set.warnings);
            write_output(out, [&](std::ostream& o) { write_entities(o, set); });
            spdlog::info("{} entities ({} nodes, {} ways)", set.size(), set.count(EntityKind::node),
                         set.count(EntityKind::way));
        } else if (*grid_cmd) {
            if (!entities_path.empty()) (void)read_entities_file(entities_path);
            const auto b = parse_boundary_geojson_file(boundary);
            log_warnings(b.warnings);
            const auto grid = make_hexgrid(b, size_m);
            if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
            write_grid_file(out, grid);
            spdlog::info("{} cells at {} m", grid.size(), format_double(size_m));
        } else if (*features_cmd) {
            const auto set = read_entities_file(entities_path);
            const auto grid = read_grid_file(grid_path);
            const auto name = city.empty() ? (grid.boundary().name.empty() ? std::string("city") : grid.boundary().name) : city;
            const auto m = compute_features(set, grid, load_catalog(catalog_path), name);
            log_warnings(m.warnings);
            if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
            write_features_file(out, m);
            spdlog::info("{} cells x {} features", m.rows(), m.cols());
        } else if (*selk) {
            const auto z = standardize(read_features_file(features_path), Normalization::zscore);
            for (const auto& c : z.dropped_columns) spdlog::warn("dropped constant column {}", c);
            const auto curve = select_k(z, k_min, k_max, gmm_opts.config(g), g.threads);
            write_output(out, [&](std::ostream& o) { write_bic_csv(o, curve); });
            if (!model_out.empty()) write_model_file(model_out, curve.best_model);
            spdlog::info("best K {}", curve.best_K);
        } else if (*selg) {
            auto b = parse_boundary_geojson_file(boundary);
            log_warnings(b.warnings);
            CityInputs in{city.empty() ? b.name : city, clip_to_boundary(parse_osm_xml_file(osm), b), b,
                          load_catalog(catalog_path)};
            const auto sweep = select_grid(in, sizes, k_min, k_max, gmm_opts.config(g), g.threads);
            log_warnings(sweep.warnings);
            write_output(out, [&](std::ostream& o) { write_silhouette_sweep_csv(o, sweep); });
            spdlog::info("best grid size {} m", format_double(sweep.best_size));
        } else if (*cluster) {
            const auto z = standardize(read_features_file(features_path), Normalization::zscore);
            for (const auto& c : z.dropped_columns) spdlog::warn("dropped constant column {}", c);
            auto cfg = gmm_opts.config(g);
            GmmModel model;
            if (const auto k = parse_k(k_str)) {
                cfg.K = *k;
                model = fit(z, cfg, g.threads);
            } else {
                model = select_k(z, k_min, std::min<int>(k_max, static_cast<int>(z.rows())), cfg, g.threads).best_model;
            }
            if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
            write_model_file(out, model);
            const auto labels = assign(model, z.values);
            write_output(labels_out, [&](std::ostream& o) { write_labels_csv(o, z.row_ids, labels); });
            spdlog::info("K {}", model.K());
        } else if (*compare) {
            std::vector<FeatureMatrix> raws;
            for (const auto& f : feature_files) raws.push_back(read_features_file(f));
            if (!grid_files.empty() && grid_files.size() != raws.size())
                throw ValidationError("--grid needs one file per --features file");
            CompareOptions opt;
            opt.mode = join_mode_from_string(mode);
            opt.k = parse_k(k_str);
            opt.k_min = k_min;
            opt.k_max = k_max;
            opt.gmm = gmm_opts.config(g);
            opt.share_threshold = threshold;
            opt.centrality_only = centrality;
            const auto res = compare_cities(raws, opt, g.threads);
            std::vector<HexGrid> grids;
            for (const auto& gf : grid_files) grids.push_back(read_grid_file(gf));
            std::vector<CityGrid> cg;
            for (std::size_t i = 0; i < grids.size(); ++i) cg.push_back({single_city(raws[i]), &grids[i]});
            write_compare_report(out, res, cg);
            spdlog::info("K {}, {} shared clusters", res.report.K, res.report.shared_count());
        } else if (*report) {
            const auto raw = read_features_file(features_path);
            const auto [label_rows, labels] = read_labels(labels_path);
            ReportInputs in;
            in.raw = &raw;
            in.labels = align_labels(raw.row_ids, label_rows, labels);
            std::vector<HexGrid> grids;
            for (const auto& gf : grid_files) grids.push_back(read_grid_file(gf));
            const auto name = single_city(raw);
            for (const auto& gr : grids) in.grids.push_back({name, &gr});
            write_report(out, in);
        } else if (*run) {
            auto cfg = read_run_config(config_path);
            if (g.seed) cfg.seed = g.seed;
            const auto res = run_pipeline(cfg, out, g.threads, [](const std::string& m) { spdlog::info("{}", m); });
            log_warnings(res.warnings);
            spdlog::info("done: K {}, {} cells", res.K, res.cell_count);
        }
    } catch (const ValidationError& e) {
        spdlog::error("validation error: {}", e.what());
        return kExitValidation;
    } catch (const StageError& e) {
        spdlog::error("stage '{}' failed: {}", e.stage(), e.cause());
        return kExitStage;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kExitStage;
    }
    return 0;
}
