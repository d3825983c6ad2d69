#pragma once

/**
 * @file report.hpp
 *
 * @brief Result artifacts: cluster-mean tables, correlations, per-cluster
 * distributions, sweep curves and labeled choropleth GeoJSON.
 */

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "error.hpp"
#include "features.hpp"
#include "geometry.hpp"
#include "selection.hpp"

namespace urbanform {

struct ClusterMeansTable {
    std::vector<std::string> features;
    /// features x K; NaN marks an empty cluster.
    Eigen::MatrixXd values;
    std::vector<int> cluster_sizes;
    /// Raw columns without mass, absent from the table.
    std::vector<std::string> dropped_columns;
    std::vector<std::string> warnings;

    int K() const { return static_cast<int>(cluster_sizes.size()); }

    /// Cluster-size weighted average of each feature row; all ones for a mean-ratio table.
    Eigen::VectorXd weighted_average() const {
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(values.rows());
        double total = 0.0;
        for (int k = 0; k < K(); ++k) {
            if (cluster_sizes[static_cast<std::size_t>(k)] == 0) continue;
            acc += cluster_sizes[static_cast<std::size_t>(k)] * values.col(k);
            total += cluster_sizes[static_cast<std::size_t>(k)];
        }
        return acc / total;
    }
};

/// Mean-ratio normalizes the raw matrix, then averages each feature per cluster.
inline ClusterMeansTable cluster_means(const FeatureMatrix& raw, const std::vector<int>& labels, int K = 0) {
    if (static_cast<Eigen::Index>(labels.size()) != raw.rows()) throw ValidationError("label count differs from row count");
    for (int l : labels) {
        if (l < 0) throw ValidationError("negative cluster label");
        K = std::max(K, l + 1);
    }
    const auto ratio = standardize(raw, Normalization::mean_ratio);
    ClusterMeansTable t;
    t.features = ratio.column_names;
    t.dropped_columns = ratio.dropped_columns;
    t.cluster_sizes.assign(static_cast<std::size_t>(K), 0);
    t.values = Eigen::MatrixXd::Zero(ratio.cols(), K);
    for (Eigen::Index i = 0; i < ratio.rows(); ++i) {
        const int k = labels[static_cast<std::size_t>(i)];
        t.values.col(k) += ratio.values.row(i).transpose();
        ++t.cluster_sizes[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < K; ++k) {
        const int n = t.cluster_sizes[static_cast<std::size_t>(k)];
        if (n == 0) {
            t.values.col(k).setConstant(std::numeric_limits<double>::quiet_NaN());
            t.warnings.push_back("cluster " + std::to_string(k + 1) + " is empty");
        } else {
            t.values.col(k) /= static_cast<double>(n);
        }
    }
    return t;
}

/// Pearson correlations between columns, unit diagonal.
inline Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& X) {
    if (X.rows() < 2) throw ValidationError("correlation needs at least 2 rows");
    const Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered;
    const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
    Eigen::MatrixXd corr(X.cols(), X.cols());
    for (Eigen::Index i = 0; i < X.cols(); ++i) {
        for (Eigen::Index j = 0; j < X.cols(); ++j) {
            corr(i, j) = (i == j) ? 1.0 : cov(i, j) / (sd(i) * sd(j));
        }
    }
    return corr;
}

// ---------------------------------------------------------------------------
// Choropleth

struct CityGrid {
    std::string city;
    const HexGrid* grid = nullptr;
};

/**
 * One polygon feature per labeled BSU with `cell_id`, `city` and `cluster`
 * (1-based) properties. When `raw` is given, its values for the row are added
 * as properties too.
 */
inline nlohmann::ordered_json export_choropleth(const std::vector<CityGrid>& grids, const std::vector<RowId>& rows,
                                                const std::vector<int>& labels, const FeatureMatrix* raw = nullptr) {
    if (rows.size() != labels.size()) throw ValidationError("cell/label count mismatch");
    std::map<std::string, const HexGrid*> by_city;
    for (const auto& g : grids) by_city[g.city] = g.grid;
    nlohmann::ordered_json doc;
    doc["type"] = "FeatureCollection";
    auto features = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto it = by_city.find(rows[i].city);
        if (it == by_city.end()) throw ValidationError("no grid for city '" + rows[i].city + "'");
        auto idx = it->second->index_of(rows[i].cell_id);
        if (!idx) throw ValidationError("label refers to unknown cell " + std::to_string(rows[i].cell_id));
        const auto& cell = it->second->cells()[*idx];
        nlohmann::ordered_json f;
        f["type"] = "Feature";
        nlohmann::ordered_json props;
        props["cell_id"] = cell.cell_id;
        props["city"] = rows[i].city;
        props["cluster"] = labels[i] + 1;
        if (raw) {
            for (std::size_t c = 0; c < raw->column_names.size(); ++c)
                props[raw->column_names[c]] = raw->values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
        }
        f["properties"] = std::move(props);
        f["geometry"] = {{"type", "Polygon"},
                         {"coordinates",
                          nlohmann::ordered_json::array({ring_to_json(cell_ring_wgs84(*it->second, cell))})}};
        features.push_back(std::move(f));
    }
    doc["features"] = std::move(features);
    return doc;
}

struct LabeledCell {
    std::string city;
    std::int64_t cell_id = 0;
    int label = 0;

    friend bool operator==(const LabeledCell&, const LabeledCell&) = default;
};

/// Recovers (city, cell_id, 0-based label) triples from a choropleth document.
inline std::vector<LabeledCell> read_choropleth(const nlohmann::json& doc) {
    std::vector<LabeledCell> out;
    try {
        for (const auto& f : doc.at("features")) {
            const auto& p = f.at("properties");
            out.push_back({p.at("city").get<std::string>(), p.at("cell_id").get<std::int64_t>(),
                           p.at("cluster").get<int>() - 1});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid choropleth document: ") + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV writers

inline std::string format_fixed(double v, int decimals) {
    if (std::isnan(v)) return "NA";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, decimals);
    std::string s(buf, ptr);
    if (s == "-0.000" || s == "-0") s.erase(0, 1);
    return s;
}

/// Rows are features, columns are clusters 1..K, three decimals.
inline void write_cluster_means_csv(std::ostream& out, const ClusterMeansTable& t) {
    out << "feature";
    for (int k = 0; k < t.K(); ++k) out << ",cluster_" << (k + 1);
    out << '\n';
    for (Eigen::Index i = 0; i < t.values.rows(); ++i) {
        out << detail::csv_field(t.features[static_cast<std::size_t>(i)]);
        for (int k = 0; k < t.K(); ++k) out << ',' << format_fixed(t.values(i, k), 3);
        out << '\n';
    }
}

inline void write_correlations_csv(std::ostream& out, const std::vector<std::string>& names, const Eigen::MatrixXd& corr) {
    out << "feature";
    for (const auto& n : names) out << ',' << detail::csv_field(n);
    out << '\n';
    for (Eigen::Index i = 0; i < corr.rows(); ++i) {
        out << detail::csv_field(names[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = 0; j < corr.cols(); ++j) out << ',' << format_double(corr(i, j));
        out << '\n';
    }
}

inline void write_bic_csv(std::ostream& out, const BicCurve& curve) {
    out << "K,bic,train_log_likelihood,converged_restarts,status\n";
    for (const auto& e : curve.entries) {
        out << e.K << ',' << (e.failed ? "NA" : format_double(e.bic)) << ','
            << (e.failed ? "NA" : format_double(e.train_log_likelihood)) << ',' << e.converged_restarts << ','
            << (e.failed ? "failed" : (e.K == curve.best_K ? "best" : "ok")) << '\n';
    }
}

inline void write_silhouette_sweep_csv(std::ostream& out, const GridSweepResult& sweep) {
    out << "size_m,best_K,silhouette,cell_count,status\n";
    for (const auto& e : sweep.entries) {
        out << format_double(e.size_m) << ',' << (e.skipped && e.best_K == 0 ? "NA" : std::to_string(e.best_K)) << ','
            << (e.skipped ? "NA" : format_double(e.silhouette)) << ',' << e.cell_count << ','
            << (e.skipped ? "skipped" : (e.size_m == sweep.best_size ? "best" : "ok")) << '\n';
    }
}

inline void write_labels_csv(std::ostream& out, const std::vector<RowId>& rows, const std::vector<int>& labels) {
    out << "city,cell_id,cluster\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
        out << detail::csv_field(rows[i].city) << ',' << rows[i].cell_id << ',' << (labels[i] + 1) << '\n';
}

inline std::pair<std::vector<RowId>, std::vector<int>> read_labels_csv(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || detail::trim(line) != "city,cell_id,cluster")
        throw ParseError("labels CSV header must be city,cell_id,cluster", 1);
    std::vector<RowId> rows;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        auto f = detail::parse_csv_line(line, lineno);
        RowId id{f.at(0), 0};
        int cluster = 0;
        if (f.size() != 3 || !detail::parse_number(f[1], id.cell_id) || !detail::parse_number(f[2], cluster) ||
            cluster < 1)
            throw ParseError("invalid labels row", lineno);
        rows.push_back(std::move(id));
        labels.push_back(cluster - 1);
    }
    return {std::move(rows), std::move(labels)};
}

/// Per-BSU values of one feature, tagged with the cluster, for histogram plotting.
inline void write_distribution_csv(std::ostream& out, const FeatureMatrix& raw, const FeatureMatrix& ratio,
                                   const std::vector<int>& labels, const std::string& feature) {
    const auto rj = raw.column_index(feature);
    const auto nj = ratio.column_index(feature);
    if (!rj) throw ValidationError("unknown feature '" + feature + "'");
    out << "cluster,city,cell_id,raw,mean_ratio\n";
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const auto& id = raw.row_ids[static_cast<std::size_t>(i)];
        out << (labels[static_cast<std::size_t>(i)] + 1) << ',' << detail::csv_field(id.city) << ',' << id.cell_id << ','
            << format_double(raw.values(i, *rj)) << ',' << (nj ? format_double(ratio.values(i, *nj)) : "NA") << '\n';
    }
}

namespace detail {

template <class F>
void write_file(const std::filesystem::path& path, F&& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    body(out);
    if (!out) throw Error("write failed for " + path.string());
}

inline std::string safe_file_stem(const std::string& s) {
    std::string out;
    for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '_';
    return out.empty() ? "unnamed" : out;
}

}  // namespace detail

struct ReportInputs {
    /// Raw rows, aligned with labels.
    const FeatureMatrix* raw = nullptr;
    std::vector<int> labels;
    int K = 0;
    std::vector<CityGrid> grids;
    const BicCurve* bic = nullptr;
    const GridSweepResult* sweep = nullptr;
};

/**
 * Writes the report tree: cluster_means.csv, correlations.csv,
 * distributions/<feature>.csv, map_<city>.geojson, plus bic.csv and
 * silhouette_sweep.csv when those results are supplied.
 */
inline void write_report(const std::filesystem::path& dir, const ReportInputs& in) {
    namespace fs = std::filesystem;
    if (!in.raw) throw ValidationError("report needs the raw feature matrix");
    const auto& raw = *in.raw;
    fs::create_directories(dir / "distributions");
    const auto table = cluster_means(raw, in.labels, in.K);
    detail::write_file(dir / "cluster_means.csv", [&](std::ostream& o) { write_cluster_means_csv(o, table); });

    const auto z = standardize(raw, Normalization::zscore);
    if (z.rows() >= 2) {
        const auto corr = correlation_matrix(z.values);
        detail::write_file(dir / "correlations.csv", [&](std::ostream& o) { write_correlations_csv(o, z.column_names, corr); });
    }
    const auto ratio = standardize(raw, Normalization::mean_ratio);
    for (const auto& name : raw.column_names) {
        detail::write_file(dir / "distributions" / (detail::safe_file_stem(name) + ".csv"),
                           [&](std::ostream& o) { write_distribution_csv(o, raw, ratio, in.labels, name); });
    }
    for (const auto& g : in.grids) {
        std::vector<RowId> rows;
        std::vector<int> labels;
        std::vector<Eigen::Index> idx;
        for (std::size_t i = 0; i < raw.row_ids.size(); ++i) {
            if (raw.row_ids[i].city != g.city) continue;
            rows.push_back(raw.row_ids[i]);
            labels.push_back(in.labels[i]);
            idx.push_back(static_cast<Eigen::Index>(i));
        }
        FeatureMatrix sub;
        sub.column_names = raw.column_names;
        sub.values = raw.values(idx, Eigen::all);
        const auto doc = export_choropleth({g}, rows, labels, &sub);
        detail::write_file(dir / ("map_" + detail::safe_file_stem(g.city) + ".geojson"),
                           [&](std::ostream& o) { o << doc.dump() << '\n'; });
    }
    if (in.bic) detail::write_file(dir / "bic.csv", [&](std::ostream& o) { write_bic_csv(o, *in.bic); });
    if (in.sweep)
        detail::write_file(dir / "silhouette_sweep.csv", [&](std::ostream& o) { write_silhouette_sweep_csv(o, *in.sweep); });
}

}  // namespace urbanform
