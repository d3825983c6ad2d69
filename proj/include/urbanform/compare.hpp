#pragma once

/**
 * @file compare.hpp
 *
 * @brief Joint clustering inputs for several cities and the shared-cluster report.
 */

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "features.hpp"

namespace urbanform {

enum class JoinMode { uniform_grid, per_city_grid };

inline JoinMode join_mode_from_string(std::string_view s) {
    if (s == "uniform-grid" || s == "uniform_grid") return JoinMode::uniform_grid;
    if (s == "per-city-grid" || s == "per_city_grid") return JoinMode::per_city_grid;
    throw ValidationError("unknown join mode '" + std::string(s) + "'");
}

struct CitySlice {
    std::string city;
    Eigen::Index begin = 0;
    Eigen::Index end = 0;
    std::optional<double> grid_size_m;
};

struct JointMatrix {
    /// Concatenated raw rows.
    FeatureMatrix raw;
    /// z-scored over the union of rows.
    FeatureMatrix standardized;
    std::vector<CitySlice> cities;
};

/// Rows of `m` whose city tag is unique; throws when several are mixed.
inline std::string single_city(const FeatureMatrix& m) {
    if (m.row_ids.empty()) throw ValidationError("feature matrix has no rows");
    const auto& c = m.row_ids.front().city;
    for (const auto& r : m.row_ids) {
        if (r.city != c) throw ValidationError("feature matrix mixes cities '" + c + "' and '" + r.city + "'");
    }
    return c;
}

/**
 * Concatenates raw per-city matrices and z-scores the union. All inputs must
 * carry the same column set; uniform_grid additionally requires one recorded
 * grid size across inputs.
 */
inline JointMatrix join_cities(const std::vector<FeatureMatrix>& raws, JoinMode mode) {
    if (raws.size() < 2) throw ValidationError("joining needs at least 2 cities");
    const auto& ref = raws.front();
    const std::set<std::string> ref_cols(ref.column_names.begin(), ref.column_names.end());
    for (const auto& m : raws) {
        if (m.normalization != Normalization::raw) throw ValidationError("join_cities expects raw matrices");
        const std::set<std::string> cols(m.column_names.begin(), m.column_names.end());
        if (cols != ref_cols) {
            std::vector<std::string> diff;
            std::set_symmetric_difference(ref_cols.begin(), ref_cols.end(), cols.begin(), cols.end(),
                                          std::back_inserter(diff));
            std::string msg = "column mismatch between cities:";
            for (const auto& d : diff) msg += " " + d;
            throw ValidationError(msg);
        }
    }
    if (mode == JoinMode::uniform_grid) {
        for (const auto& m : raws) {
            if (!m.grid_size_m || !ref.grid_size_m || *m.grid_size_m != *ref.grid_size_m)
                throw ValidationError("uniform-grid join requires every city to use the same recorded grid size");
        }
    }
    JointMatrix j;
    Eigen::Index total = 0;
    for (const auto& m : raws) total += m.rows();
    j.raw.column_names = ref.column_names;
    j.raw.values.resize(total, static_cast<Eigen::Index>(ref.column_names.size()));
    if (mode == JoinMode::uniform_grid) j.raw.grid_size_m = ref.grid_size_m;
    Eigen::Index at = 0;
    for (const auto& m : raws) {
        CitySlice slice{single_city(m), at, at + m.rows(), m.grid_size_m};
        for (std::size_t c = 0; c < ref.column_names.size(); ++c) {
            const auto src = *m.column_index(ref.column_names[c]);
            j.raw.values.block(at, static_cast<Eigen::Index>(c), m.rows(), 1) = m.values.col(src);
        }
        j.raw.row_ids.insert(j.raw.row_ids.end(), m.row_ids.begin(), m.row_ids.end());
        at += m.rows();
        j.cities.push_back(std::move(slice));
    }
    validate(j.raw);
    j.standardized = standardize(j.raw, Normalization::zscore);
    return j;
}

/// One-column raw matrix holding only `degree_centrality`.
inline FeatureMatrix centrality_only_matrix(const FeatureMatrix& raw, const std::string& column = "degree_centrality") {
    auto j = raw.column_index(column);
    if (!j) throw ValidationError("matrix has no '" + column + "' column");
    FeatureMatrix out;
    out.row_ids = raw.row_ids;
    out.column_names = {column};
    out.values = raw.values.col(*j);
    out.normalization = raw.normalization;
    out.grid_size_m = raw.grid_size_m;
    return out;
}

/// The same joint matrix restricted to degree centrality, re-standardized.
inline JointMatrix centrality_only(const JointMatrix& joint, const std::string& column = "degree_centrality") {
    JointMatrix out;
    out.raw = centrality_only_matrix(joint.raw, column);
    out.cities = joint.cities;
    out.standardized = standardize(out.raw, Normalization::zscore);
    return out;
}

struct CrossCityReport {
    std::vector<std::string> cities;
    int K = 0;
    /// K x cities BSU counts.
    Eigen::MatrixXi contingency;
    std::vector<bool> shared;
    /// Columns of the mean-ratio feature space, in order.
    std::vector<std::string> feature_names;
    /// per_city_means[k][c]: mean feature vector of cluster k in city c (NaN when empty).
    std::vector<std::vector<Eigen::VectorXd>> per_city_means;
    double threshold = 0.05;

    int shared_count() const { return static_cast<int>(std::count(shared.begin(), shared.end(), true)); }
};

/**
 * Cluster x city contingency. A cluster is shared when every city holds at
 * least one of its BSUs and at least `threshold` of its total.
 */
inline CrossCityReport cross_city_report(const std::vector<int>& labels, const JointMatrix& joint,
                                         double threshold = 0.05) {
    const auto n = joint.raw.rows();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw ValidationError("label count differs from joint rows");
    if (threshold < 0.0 || threshold > 1.0) throw ValidationError("sharing threshold must lie in [0, 1]");
    CrossCityReport rep;
    rep.threshold = threshold;
    int K = 0;
    for (int l : labels) {
        if (l < 0) throw ValidationError("negative cluster label");
        K = std::max(K, l + 1);
    }
    rep.K = K;
    const auto C = static_cast<Eigen::Index>(joint.cities.size());
    for (const auto& s : joint.cities) rep.cities.push_back(s.city);
    rep.contingency = Eigen::MatrixXi::Zero(K, C);
    std::vector<Eigen::Index> city_of(static_cast<std::size_t>(n), -1);
    for (Eigen::Index c = 0; c < C; ++c) {
        for (Eigen::Index i = joint.cities[static_cast<std::size_t>(c)].begin; i < joint.cities[static_cast<std::size_t>(c)].end; ++i)
            city_of[static_cast<std::size_t>(i)] = c;
    }
    for (Eigen::Index i = 0; i < n; ++i) rep.contingency(labels[static_cast<std::size_t>(i)], city_of[static_cast<std::size_t>(i)]) += 1;

    for (int k = 0; k < K; ++k) {
        const int size = rep.contingency.row(k).sum();
        bool shared = size > 0 && C >= 2;
        for (Eigen::Index c = 0; c < C && shared; ++c) {
            const int cnt = rep.contingency(k, c);
            if (cnt < 1 || static_cast<double>(cnt) < threshold * size) shared = false;
        }
        rep.shared.push_back(shared);
    }

    const auto ratio = standardize(joint.raw, Normalization::mean_ratio);
    rep.feature_names = ratio.column_names;
    const auto d = ratio.cols();
    rep.per_city_means.assign(static_cast<std::size_t>(K),
                              std::vector<Eigen::VectorXd>(static_cast<std::size_t>(C), Eigen::VectorXd::Zero(d)));
    for (Eigen::Index i = 0; i < n; ++i) {
        rep.per_city_means[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]
                          [static_cast<std::size_t>(city_of[static_cast<std::size_t>(i)])] += ratio.values.row(i).transpose();
    }
    for (int k = 0; k < K; ++k) {
        for (Eigen::Index c = 0; c < C; ++c) {
            auto& v = rep.per_city_means[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
            const int cnt = rep.contingency(k, c);
            if (cnt == 0)
                v.setConstant(std::numeric_limits<double>::quiet_NaN());
            else
                v /= static_cast<double>(cnt);
        }
    }
    return rep;
}

}  // namespace urbanform
