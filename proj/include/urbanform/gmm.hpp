#pragma once

/**
 * @file gmm.hpp
 *
 * @brief Gaussian mixture models fitted by Expectation-Maximization.
 *
 * Densities are evaluated in log space. Each restart draws its k-means++ seed
 * rows from an RNG stream derived from (seed, restart, attempt), so a fit is
 * bit-reproducible for any number of worker threads.
 */

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "error.hpp"
#include "features.hpp"

namespace urbanform {

enum class Covariance { diagonal, full };

inline std::string_view to_string(Covariance c) { return c == Covariance::diagonal ? "diagonal" : "full"; }

inline Covariance covariance_from_string(std::string_view s) {
    if (s == "diagonal") return Covariance::diagonal;
    if (s == "full") return Covariance::full;
    throw ValidationError("unknown covariance type '" + std::string(s) + "'");
}

struct GmmConfig {
    int K = 1;
    Covariance covariance = Covariance::diagonal;
    int max_iter = 500;
    /// Relative log-likelihood improvement below which a run stops.
    double tol = 1e-7;
    int n_restarts = 10;
    /// Added to every covariance diagonal after the M-step.
    double reg_var = 1e-6;
    std::uint64_t seed = 0;

    void validate(Eigen::Index rows) const {
        if (K < 1) throw ValidationError("K must be at least 1");
        if (max_iter < 1) throw ValidationError("max_iter must be positive");
        if (!(tol > 0.0)) throw ValidationError("tol must be positive");
        if (n_restarts < 1) throw ValidationError("n_restarts must be positive");
        if (!(reg_var > 0.0)) throw ValidationError("reg_var must be positive");
        if (K > rows) throw ValidationError("K = " + std::to_string(K) + " exceeds the row count " + std::to_string(rows));
    }
};

struct GmmModel {
    GmmConfig config;
    /// Length K.
    Eigen::VectorXd weights;
    /// K x d.
    Eigen::MatrixXd means;
    /// Diagonal models: K x d variances.
    Eigen::MatrixXd variances;
    /// Full models: K matrices, d x d.
    std::vector<Eigen::MatrixXd> covariances;
    double train_log_likelihood = -std::numeric_limits<double>::infinity();

    /// Feature space the model was trained in, when known.
    std::vector<std::string> column_names;
    Normalization normalization = Normalization::zscore;
    std::vector<double> center;
    std::vector<double> scale;

    int K() const { return static_cast<int>(weights.size()); }
    Eigen::Index d() const { return means.cols(); }
};

using Responsibilities = Eigen::MatrixXd;

/// Signals that a component lost all its mass or its covariance is unusable.
class ComponentCollapse : public ComputeError {
public:
    ComponentCollapse(const std::string& what, int component) : ComputeError(what), component_(component) {}
    int component() const noexcept { return component_; }

private:
    int component_;
};

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Per-component pieces of log N(x | mu, Sigma) that do not depend on x.
struct ComponentTerms {
    double log_norm = 0.0;          // -0.5 * (d log 2pi + log det Sigma)
    Eigen::RowVectorXd inv_var;     // diagonal
    Eigen::MatrixXd chol_lower;     // full: Sigma = L L^T
};

inline std::vector<ComponentTerms> component_terms(const GmmModel& m) {
    const auto d = static_cast<double>(m.d());
    std::vector<ComponentTerms> out(static_cast<std::size_t>(m.K()));
    for (int k = 0; k < m.K(); ++k) {
        auto& t = out[static_cast<std::size_t>(k)];
        if (m.config.covariance == Covariance::diagonal) {
            const Eigen::RowVectorXd var = m.variances.row(k);
            t.inv_var = var.cwiseInverse();
            t.log_norm = -0.5 * (d * kLog2Pi + var.array().log().sum());
        } else {
            Eigen::LLT<Eigen::MatrixXd> llt(m.covariances[static_cast<std::size_t>(k)]);
            if (llt.info() != Eigen::Success) throw ComponentCollapse("covariance not positive definite", k);
            t.chol_lower = llt.matrixL();
            t.log_norm = -0.5 * (d * kLog2Pi + 2.0 * t.chol_lower.diagonal().array().log().sum());
        }
    }
    return out;
}

/// n x K matrix of log(pi_k) + log N(x_n | mu_k, Sigma_k).
inline Eigen::MatrixXd weighted_log_density(const GmmModel& m, const Eigen::MatrixXd& X) {
    if (X.cols() != m.d()) throw ValidationError("matrix dimension differs from model dimension");
    const auto terms = component_terms(m);
    Eigen::MatrixXd out(X.rows(), m.K());
    for (int k = 0; k < m.K(); ++k) {
        const auto& t = terms[static_cast<std::size_t>(k)];
        const Eigen::MatrixXd diff = X.rowwise() - m.means.row(k);
        Eigen::VectorXd maha;
        if (m.config.covariance == Covariance::diagonal) {
            maha = (diff.array().square().rowwise() * t.inv_var.array()).rowwise().sum();
        } else {
            const Eigen::MatrixXd y = t.chol_lower.triangularView<Eigen::Lower>().solve(diff.transpose());
            maha = y.colwise().squaredNorm().transpose();
        }
        out.col(k) = (std::log(m.weights(k)) + t.log_norm) - 0.5 * maha.array();
    }
    return out;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    const double mx = row.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((row.array() - mx).exp().sum());
}

inline Responsibilities responsibilities_from(const Eigen::MatrixXd& logp, double* total_ll) {
    Responsibilities r(logp.rows(), logp.cols());
    double ll = 0.0;
    for (Eigen::Index n = 0; n < logp.rows(); ++n) {
        const double lse = log_sum_exp(logp.row(n));
        if (!std::isfinite(lse)) throw ComputeError("non-finite density at row " + std::to_string(n));
        r.row(n) = (logp.row(n).array() - lse).exp();
        ll += lse;
    }
    if (total_ll) *total_ll = ll;
    return r;
}

}  // namespace detail

/// Posterior component probabilities per row.
inline Responsibilities e_step(const GmmModel& model, const Eigen::MatrixXd& X) {
    return detail::responsibilities_from(detail::weighted_log_density(model, X), nullptr);
}

inline double log_likelihood(const GmmModel& model, const Eigen::MatrixXd& X) {
    const auto logp = detail::weighted_log_density(model, X);
    double ll = 0.0;
    for (Eigen::Index n = 0; n < logp.rows(); ++n) ll += detail::log_sum_exp(logp.row(n));
    return ll;
}

struct MStepResult {
    Eigen::VectorXd weights;
    Eigen::MatrixXd means;
    Eigen::MatrixXd variances;
    std::vector<Eigen::MatrixXd> covariances;
};

/// Weighted parameter updates. Throws ComponentCollapse when some N_k < 1e-10.
inline MStepResult m_step(const Eigen::MatrixXd& X, const Responsibilities& resp, const GmmConfig& config) {
    if (resp.rows() != X.rows()) throw ValidationError("responsibility rows differ from matrix rows");
    const auto K = resp.cols();
    const auto n = static_cast<double>(X.rows());
    const Eigen::RowVectorXd Nk = resp.colwise().sum();
    for (Eigen::Index k = 0; k < K; ++k) {
        if (!(Nk(k) >= 1e-10))
            throw ComponentCollapse("component " + std::to_string(k) + " collapsed", static_cast<int>(k));
    }
    MStepResult out;
    out.weights = (Nk / n).transpose();
    out.means = (resp.transpose() * X).array().colwise() / Nk.transpose().array();
    if (config.covariance == Covariance::diagonal) {
        out.variances.resize(K, X.cols());
        for (Eigen::Index k = 0; k < K; ++k) {
            const Eigen::MatrixXd diff = X.rowwise() - out.means.row(k);
            out.variances.row(k) = (diff.array().square().colwise() * resp.col(k).array()).colwise().sum() / Nk(k);
        }
        out.variances.array() += config.reg_var;
    } else {
        for (Eigen::Index k = 0; k < K; ++k) {
            const Eigen::MatrixXd diff = X.rowwise() - out.means.row(k);
            Eigen::MatrixXd cov = (diff.array().colwise() * resp.col(k).array()).matrix().transpose() * diff / Nk(k);
            cov = 0.5 * (cov + cov.transpose()).eval();
            cov.diagonal().array() += config.reg_var;
            Eigen::LLT<Eigen::MatrixXd> llt(cov);
            if (llt.info() != Eigen::Success)
                throw ComponentCollapse("component " + std::to_string(k) + " covariance not positive definite",
                                        static_cast<int>(k));
            out.covariances.push_back(std::move(cov));
        }
    }
    return out;
}

/// Number of free parameters used by BIC.
inline long long parameter_count(int K, Eigen::Index d, Covariance cov) {
    const long long k = K, dd = d;
    const long long per = cov == Covariance::diagonal ? dd : dd * (dd + 1) / 2;
    return (k - 1) + k * dd + k * per;
}

/// k ln N - 2 ln L.
inline double bic_value(long long params, Eigen::Index n_rows, double log_lik) {
    return static_cast<double>(params) * std::log(static_cast<double>(n_rows)) - 2.0 * log_lik;
}

inline double bic(const GmmModel& model, const Eigen::MatrixXd& X) {
    return bic_value(parameter_count(model.K(), model.d(), model.config.covariance), X.rows(),
                     log_likelihood(model, X));
}

/// argmax responsibility per row, ties to the smaller component index.
inline std::vector<int> labels_from(const Responsibilities& resp) {
    std::vector<int> labels(static_cast<std::size_t>(resp.rows()), 0);
    for (Eigen::Index n = 0; n < resp.rows(); ++n) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < resp.cols(); ++k) {
            if (resp(n, k) > resp(n, best)) best = k;
        }
        labels[static_cast<std::size_t>(n)] = static_cast<int>(best);
    }
    return labels;
}

inline std::vector<int> assign(const GmmModel& model, const Eigen::MatrixXd& X) {
    return labels_from(e_step(model, X));
}

// ---------------------------------------------------------------------------
// Fitting

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t restart, std::uint64_t attempt) {
    return splitmix64(splitmix64(splitmix64(seed) ^ restart) ^ (attempt * 0xd1b54a32d192ed03ULL));
}

/// Uniform doubles in [0, 1) from the top 53 bits; independent of the standard
/// library's distribution implementations.
class UniformStream {
public:
    explicit UniformStream(std::uint64_t seed) : engine_(seed) {}
    double next() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 engine_;
};

class InitFailure : public ComputeError {
public:
    using ComputeError::ComputeError;
};

/// k-means++ seeding: returns K distinct row indices.
inline std::vector<Eigen::Index> kmeanspp_rows(const Eigen::MatrixXd& X, int K, UniformStream& rng) {
    const auto n = X.rows();
    std::vector<Eigen::Index> chosen;
    auto first = static_cast<Eigen::Index>(rng.next() * static_cast<double>(n));
    chosen.push_back(std::min(first, n - 1));
    Eigen::VectorXd d2 = (X.rowwise() - X.row(chosen[0])).rowwise().squaredNorm();
    while (static_cast<int>(chosen.size()) < K) {
        const double total = d2.sum();
        if (!(total > 0.0)) throw InitFailure("fewer distinct rows than components");
        const double target = rng.next() * total;
        double acc = 0.0;
        Eigen::Index pick = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (d2(i) <= 0.0) continue;
            acc += d2(i);
            pick = i;
            if (acc > target) break;
        }
        chosen.push_back(pick);
        d2 = d2.cwiseMin((X.rowwise() - X.row(pick)).rowwise().squaredNorm());
    }
    return chosen;
}

/// One-hot responsibilities assigning each row to its nearest seed row.
inline Responsibilities nearest_seed_resp(const Eigen::MatrixXd& X, const std::vector<Eigen::Index>& seeds) {
    Responsibilities r = Responsibilities::Zero(X.rows(), static_cast<Eigen::Index>(seeds.size()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        Eigen::Index best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < seeds.size(); ++k) {
            const double dist = (X.row(i) - X.row(seeds[k])).squaredNorm();
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<Eigen::Index>(k);
            }
        }
        r(i, best) = 1.0;
    }
    return r;
}

inline void set_params(GmmModel& m, MStepResult&& p) {
    m.weights = std::move(p.weights);
    m.means = std::move(p.means);
    m.variances = std::move(p.variances);
    m.covariances = std::move(p.covariances);
}

}  // namespace detail

struct RunResult {
    GmmModel model;
    std::vector<double> log_likelihood_trace;
    int iterations = 0;
    bool converged = false;
};

/// One EM run from an initial responsibility matrix.
inline RunResult run_em(const Eigen::MatrixXd& X, const GmmConfig& config, const Responsibilities& init) {
    RunResult run;
    run.model.config = config;
    detail::set_params(run.model, m_step(X, init, config));
    auto logp = detail::weighted_log_density(run.model, X);
    double ll = 0.0;
    auto resp = detail::responsibilities_from(logp, &ll);
    run.log_likelihood_trace.push_back(ll);
    for (int it = 1; it <= config.max_iter; ++it) {
        detail::set_params(run.model, m_step(X, resp, config));
        logp = detail::weighted_log_density(run.model, X);
        double next = 0.0;
        resp = detail::responsibilities_from(logp, &next);
        run.log_likelihood_trace.push_back(next);
        run.iterations = it;
        const double improvement = next - ll;
        const double prev = ll;
        ll = next;
        if (improvement < config.tol * std::abs(prev)) {
            run.converged = true;
            break;
        }
    }
    run.model.train_log_likelihood = ll;
    return run;
}

struct RestartSummary {
    int restart = 0;
    int attempts = 0;
    bool failed = false;
    bool converged = false;
    int iterations = 0;
    double log_likelihood = -std::numeric_limits<double>::infinity();
    std::vector<double> log_likelihood_trace;
};

struct FitReport {
    GmmModel model;
    int best_restart = -1;
    std::vector<RestartSummary> restarts;

    int converged_restarts() const {
        return static_cast<int>(std::count_if(restarts.begin(), restarts.end(),
                                              [](const RestartSummary& r) { return !r.failed && r.converged; }));
    }
};

/// Single restart with collapse handling: up to n_restarts + 1 attempts, each
/// with its own deterministic stream.
inline std::pair<RestartSummary, std::optional<GmmModel>> fit_restart(const Eigen::MatrixXd& X, const GmmConfig& config,
                                                                      int restart) {
    RestartSummary s;
    s.restart = restart;
    for (int attempt = 0; attempt <= config.n_restarts; ++attempt) {
        s.attempts = attempt + 1;
        detail::UniformStream rng(detail::stream_seed(config.seed, static_cast<std::uint64_t>(restart),
                                                      static_cast<std::uint64_t>(attempt)));
        try {
            const auto seeds = detail::kmeanspp_rows(X, config.K, rng);
            auto run = run_em(X, config, detail::nearest_seed_resp(X, seeds));
            s.converged = run.converged;
            s.iterations = run.iterations;
            s.log_likelihood = run.model.train_log_likelihood;
            s.log_likelihood_trace = std::move(run.log_likelihood_trace);
            return {std::move(s), std::move(run.model)};
        } catch (const ComponentCollapse&) {
        } catch (const detail::InitFailure&) {
        }
    }
    s.failed = true;
    return {std::move(s), std::nullopt};
}

/**
 * Fits n_restarts independent EM runs and keeps the one with the highest final
 * log-likelihood (ties go to the lower restart index). Restarts are spread
 * over `threads` workers without affecting the result.
 */
inline FitReport fit_report(const Eigen::MatrixXd& X, const GmmConfig& config, unsigned threads = 1) {
    config.validate(X.rows());
    if (!X.allFinite()) throw ValidationError("feature matrix has non-finite entries");
    const auto n = static_cast<std::size_t>(config.n_restarts);
    std::vector<RestartSummary> summaries(n);
    std::vector<std::optional<GmmModel>> models(n);
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t r; (r = next.fetch_add(1)) < n;) {
            auto [s, m] = fit_restart(X, config, static_cast<int>(r));
            summaries[r] = std::move(s);
            models[r] = std::move(m);
        }
    };
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    FitReport report;
    for (std::size_t r = 0; r < n; ++r) {
        if (!models[r]) continue;
        if (report.best_restart < 0 ||
            models[r]->train_log_likelihood > models[static_cast<std::size_t>(report.best_restart)]->train_log_likelihood)
            report.best_restart = static_cast<int>(r);
    }
    report.restarts = std::move(summaries);
    if (report.best_restart < 0)
        throw ComputeError("all " + std::to_string(n) + " restarts failed for K = " + std::to_string(config.K));
    report.model = std::move(*models[static_cast<std::size_t>(report.best_restart)]);
    return report;
}

inline GmmModel fit(const Eigen::MatrixXd& X, const GmmConfig& config, unsigned threads = 1) {
    return fit_report(X, config, threads).model;
}

/// Fits on a standardized matrix and records its feature space in the model.
inline GmmModel fit(const FeatureMatrix& m, const GmmConfig& config, unsigned threads = 1) {
    auto model = fit(m.values, config, threads);
    model.column_names = m.column_names;
    model.normalization = m.normalization;
    model.center = m.center;
    model.scale = m.scale;
    return model;
}

// ---------------------------------------------------------------------------
// Model document

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::ordered_json config_to_json(const GmmConfig& c) {
    nlohmann::ordered_json j;
    j["K"] = c.K;
    j["covariance"] = to_string(c.covariance);
    j["max_iter"] = c.max_iter;
    j["tol"] = c.tol;
    j["n_restarts"] = c.n_restarts;
    j["reg_var"] = c.reg_var;
    j["seed"] = c.seed;
    return j;
}

inline GmmConfig config_from_json(const nlohmann::json& j) {
    GmmConfig c;
    c.K = j.at("K").get<int>();
    c.covariance = covariance_from_string(j.at("covariance").get<std::string>());
    c.max_iter = j.at("max_iter").get<int>();
    c.tol = j.at("tol").get<double>();
    c.n_restarts = j.at("n_restarts").get<int>();
    c.reg_var = j.at("reg_var").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

namespace detail {

inline nlohmann::ordered_json rows_to_json(const Eigen::MatrixXd& m) {
    auto out = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        auto row = nlohmann::ordered_json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        out.push_back(std::move(row));
    }
    return out;
}

inline Eigen::MatrixXd rows_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) throw ParseError("matrix row count mismatch");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw ParseError("matrix column count mismatch");
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

}  // namespace detail

inline nlohmann::ordered_json model_to_json(const GmmModel& m) {
    nlohmann::ordered_json j;
    j["format"] = "urbanform-gmm";
    j["version"] = kModelFormatVersion;
    j["config"] = config_to_json(m.config);
    j["d"] = m.d();
    j["columns"] = m.column_names;
    j["normalization"] = to_string(m.normalization);
    j["center"] = m.center;
    j["scale"] = m.scale;
    j["weights"] = std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size());
    j["means"] = detail::rows_to_json(m.means);
    if (m.config.covariance == Covariance::diagonal) {
        j["covariances"] = detail::rows_to_json(m.variances);
    } else {
        auto covs = nlohmann::ordered_json::array();
        for (const auto& c : m.covariances) covs.push_back(detail::rows_to_json(c));
        j["covariances"] = std::move(covs);
    }
    j["train_log_likelihood"] = m.train_log_likelihood;
    return j;
}

inline GmmModel model_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "urbanform-gmm") throw ParseError("not a urbanform-gmm document");
        if (j.at("version").get<int>() != kModelFormatVersion) throw ParseError("unsupported model version");
        GmmModel m;
        m.config = config_from_json(j.at("config"));
        const auto d = j.at("d").get<Eigen::Index>();
        const auto K = static_cast<Eigen::Index>(m.config.K);
        m.column_names = j.at("columns").get<std::vector<std::string>>();
        m.normalization = normalization_from_string(j.at("normalization").get<std::string>());
        m.center = j.at("center").get<std::vector<double>>();
        m.scale = j.at("scale").get<std::vector<double>>();
        const auto w = j.at("weights").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(w.size()) != K) throw ParseError("weights length differs from K");
        m.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), K);
        m.means = detail::rows_from_json(j.at("means"), K, d);
        if (m.config.covariance == Covariance::diagonal) {
            m.variances = detail::rows_from_json(j.at("covariances"), K, d);
        } else {
            const auto& covs = j.at("covariances");
            if (static_cast<Eigen::Index>(covs.size()) != K) throw ParseError("covariance count differs from K");
            for (const auto& c : covs) m.covariances.push_back(detail::rows_from_json(c, d, d));
        }
        m.train_log_likelihood = j.at("train_log_likelihood").get<double>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid model document: ") + e.what());
    }
}

inline void write_model_file(const std::filesystem::path& path, const GmmModel& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write model file " + path.string());
    out << model_to_json(m).dump(2) << '\n';
}

inline GmmModel read_model_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open model file " + path.string());
    try {
        return model_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("invalid model document: ") + e.what());
    }
}

}  // namespace urbanform
