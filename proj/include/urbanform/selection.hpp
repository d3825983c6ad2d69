#pragma once

/**
 * @file selection.hpp
 *
 * @brief Silhouette scores, the BIC sweep over K and the silhouette sweep over
 * grid sizes.
 */

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "features.hpp"
#include "geometry.hpp"
#include "gmm.hpp"
#include "ingest.hpp"

namespace urbanform {

struct SilhouetteBreakdown {
    std::vector<double> a;
    std::vector<double> b;
    std::vector<double> s;
    double overall = 0.0;
};

/**
 * Exact O(n^2) silhouette with Euclidean distances. Points in singleton
 * clusters score 0.
 */
inline SilhouetteBreakdown silhouette(const Eigen::MatrixXd& X, const std::vector<int>& labels) {
    const auto n = X.rows();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw ValidationError("label count differs from row count");
    std::map<int, int> dense;
    for (int l : labels) dense.emplace(l, 0);
    if (dense.size() < 2) throw ValidationError("silhouette undefined for one cluster");
    int next = 0;
    for (auto& [l, idx] : dense) idx = next++;
    const auto C = static_cast<Eigen::Index>(dense.size());
    std::vector<int> lab(static_cast<std::size_t>(n));
    Eigen::VectorXd sizes = Eigen::VectorXd::Zero(C);
    for (Eigen::Index i = 0; i < n; ++i) {
        lab[static_cast<std::size_t>(i)] = dense[labels[static_cast<std::size_t>(i)]];
        sizes(lab[static_cast<std::size_t>(i)]) += 1.0;
    }
    SilhouetteBreakdown out;
    out.a.resize(static_cast<std::size_t>(n));
    out.b.resize(static_cast<std::size_t>(n));
    out.s.resize(static_cast<std::size_t>(n));
    Eigen::VectorXd sums(C);
    for (Eigen::Index i = 0; i < n; ++i) {
        sums.setZero();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            sums(lab[static_cast<std::size_t>(j)]) += (X.row(i) - X.row(j)).norm();
        }
        const int own = lab[static_cast<std::size_t>(i)];
        const auto ui = static_cast<std::size_t>(i);
        double b = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < C; ++c) {
            if (c != own) b = std::min(b, sums(c) / sizes(c));
        }
        out.b[ui] = b;
        if (sizes(own) <= 1.0) {
            out.a[ui] = 0.0;
            out.s[ui] = 0.0;
            continue;
        }
        const double a = sums(own) / (sizes(own) - 1.0);
        out.a[ui] = a;
        const double denom = std::max(a, b);
        out.s[ui] = denom > 0.0 ? (b - a) / denom : 0.0;
    }
    double acc = 0.0;
    for (double v : out.s) acc += v;
    out.overall = acc / static_cast<double>(n);
    return out;
}

struct BicEntry {
    int K = 0;
    double bic = 0.0;
    double train_log_likelihood = 0.0;
    int converged_restarts = 0;
    bool failed = false;
};

struct BicCurve {
    std::vector<BicEntry> entries;
    int best_K = 0;
    /// Model at best_K.
    GmmModel best_model;
};

/// Picks the smallest K among the non-failed entries with minimal BIC.
inline int argmin_bic(const std::vector<BicEntry>& entries) {
    const BicEntry* best = nullptr;
    for (const auto& e : entries) {
        if (e.failed) continue;
        if (!best || e.bic < best->bic) best = &e;
    }
    if (!best) throw ComputeError("every K in the sweep failed");
    return best->K;
}

/**
 * Fits every K in [k_min, k_max] with the shared seed policy and returns the
 * BIC curve. A K whose restarts all fail is recorded as failed.
 */
inline BicCurve select_k(const Eigen::MatrixXd& X, int k_min, int k_max, GmmConfig base, unsigned threads = 1) {
    if (k_min < 1 || k_max < k_min) throw ValidationError("invalid K range");
    if (k_max > X.rows()) throw ValidationError("K range exceeds the row count");
    BicCurve curve;
    std::vector<std::optional<GmmModel>> models;
    for (int k = k_min; k <= k_max; ++k) {
        base.K = k;
        BicEntry e;
        e.K = k;
        try {
            auto rep = fit_report(X, base, threads);
            e.train_log_likelihood = rep.model.train_log_likelihood;
            e.bic = bic_value(parameter_count(k, X.cols(), base.covariance), X.rows(), e.train_log_likelihood);
            e.converged_restarts = rep.converged_restarts();
            models.emplace_back(std::move(rep.model));
        } catch (const ComputeError&) {
            e.failed = true;
            e.bic = std::numeric_limits<double>::quiet_NaN();
            e.train_log_likelihood = std::numeric_limits<double>::quiet_NaN();
            models.emplace_back(std::nullopt);
        }
        curve.entries.push_back(e);
    }
    curve.best_K = argmin_bic(curve.entries);
    curve.best_model = std::move(*models[static_cast<std::size_t>(curve.best_K - k_min)]);
    return curve;
}

inline BicCurve select_k(const FeatureMatrix& m, int k_min, int k_max, const GmmConfig& base, unsigned threads = 1) {
    auto curve = select_k(m.values, k_min, k_max, base, threads);
    curve.best_model.column_names = m.column_names;
    curve.best_model.normalization = m.normalization;
    curve.best_model.center = m.center;
    curve.best_model.scale = m.scale;
    return curve;
}

/// Clipped entities plus what is needed to grid and featurize them.
struct CityInputs {
    std::string city;
    EntitySet entities;
    Boundary boundary;
    Catalog catalog = builtin_catalog();
};

struct GridSweepEntry {
    double size_m = 0.0;
    int best_K = 0;
    double silhouette = std::numeric_limits<double>::quiet_NaN();
    std::size_t cell_count = 0;
    bool skipped = false;
    std::string note;
};

struct GridSweepResult {
    std::vector<GridSweepEntry> entries;
    double best_size = 0.0;
    std::vector<std::string> warnings;
};

/// Silhouette of the BIC-best model for one grid size.
inline GridSweepEntry evaluate_grid_size(const CityInputs& city, double size, int k_min, int k_max,
                                         const GmmConfig& base, unsigned threads) {
    GridSweepEntry e;
    e.size_m = size;
    std::optional<HexGrid> grid;
    try {
        grid.emplace(make_hexgrid(city.boundary, size));
    } catch (const ValidationError& err) {
        e.skipped = true;
        e.note = err.what();
        return e;
    }
    e.cell_count = grid->size();
    if (e.cell_count < 2 * static_cast<std::size_t>(k_max)) {
        e.skipped = true;
        e.note = "only " + std::to_string(e.cell_count) + " cells, need " + std::to_string(2 * k_max);
        return e;
    }
    const auto raw = compute_features(city.entities, *grid, city.catalog, city.city);
    const auto z = standardize(raw, Normalization::zscore);
    const auto curve = select_k(z.values, k_min, k_max, base, threads);
    e.best_K = curve.best_K;
    const auto labels = assign(curve.best_model, z.values);
    if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); })) {
        e.skipped = true;
        e.note = "single cluster; silhouette undefined";
        return e;
    }
    e.silhouette = silhouette(z.values, labels).overall;
    return e;
}

/**
 * For each candidate size: grid, featurize, z-score, choose K by BIC, then
 * score the BIC-best labeling by silhouette. The best size maximizes the
 * silhouette (ties to the smaller size). Sizes that are too coarse or give a
 * single cluster are skipped with a warning.
 */
inline GridSweepResult select_grid(const CityInputs& city, std::vector<double> sizes, int k_min, int k_max,
                                   const GmmConfig& base, unsigned threads = 1) {
    if (sizes.size() < 2) throw ValidationError("select_grid needs at least 2 candidate sizes");
    for (double s : sizes) {
        if (!(s > 0.0)) throw ValidationError("grid sizes must be positive");
    }
    std::sort(sizes.begin(), sizes.end());
    if (std::adjacent_find(sizes.begin(), sizes.end()) != sizes.end())
        throw ValidationError("duplicate grid size in sweep");
    GridSweepResult out;
    const GridSweepEntry* best = nullptr;
    for (double s : sizes) out.entries.push_back(evaluate_grid_size(city, s, k_min, k_max, base, threads));
    for (const auto& e : out.entries) {
        if (e.skipped) {
            out.warnings.push_back("grid size " + format_double(e.size_m) + " skipped: " + e.note);
            continue;
        }
        if (!best || e.silhouette > best->silhouette) best = &e;
    }
    if (!best) throw ComputeError("every grid size in the sweep was skipped");
    out.best_size = best->size_m;
    return out;
}

}  // namespace urbanform
