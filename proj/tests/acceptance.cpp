// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any gating criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"

using namespace urbanform;
namespace ts = testsupport;

namespace {

constexpr double kMonotoneSlack = 1e-9;
constexpr double kSilhouetteTol = 1e-12;
constexpr double kAreaRelTol = 1e-9;
constexpr double kSpacingTol = 1e-6;
constexpr double kMomentTol = 1e-9;
constexpr double kWeightedAvgTol = 1e-6;
constexpr double kMeanTolSigma = 0.1;
constexpr double kMinAri = 0.99;

struct Outcome {
    bool pass = false;
    std::string detail;
    bool gating = true;
    bool skipped = false;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1
Outcome em_monotonicity() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(1001);
    int violations = 0, runs = 0;
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const int n = std::uniform_int_distribution<int>(50, 500)(rng);
        const int d = std::uniform_int_distribution<int>(2, 10)(rng);
        const int K = std::uniform_int_distribution<int>(1, 6)(rng);
        // Data from a random mixture so components have something to find.
        const int true_k = std::uniform_int_distribution<int>(1, 6)(rng);
        std::normal_distribution<double> g;
        Eigen::MatrixXd centers(true_k, d);
        for (int k = 0; k < true_k; ++k)
            for (int j = 0; j < d; ++j) centers(k, j) = 4.0 * g(rng);
        Eigen::MatrixXd X(n, d);
        for (int i = 0; i < n; ++i) {
            const int k = std::uniform_int_distribution<int>(0, true_k - 1)(rng);
            for (int j = 0; j < d; ++j) X(i, j) = centers(k, j) + g(rng);
        }
        GmmConfig c;
        c.K = K;
        c.n_restarts = 2;
        c.seed = rng();
        c.covariance = inst % 4 == 3 ? Covariance::full : Covariance::diagonal;
        const auto rep = fit_report(X, c);
        for (const auto& s : rep.restarts) {
            if (s.failed) continue;
            ++runs;
            for (std::size_t i = 1; i < s.log_likelihood_trace.size(); ++i) {
                const double drop = s.log_likelihood_trace[i - 1] - s.log_likelihood_trace[i];
                worst = std::max(worst, drop);
                if (drop > kMonotoneSlack) ++violations;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {violations == 0 && secs < 60.0,
            fmt("%d EM runs on 100 instances, %d decreases > 1e-9 (largest %.3g), %.1f s", runs, violations, worst, secs)};
}

// 2
Outcome planted_recovery() {
    int ok = 0;
    std::string per_seed;
    int raw_mean_ok = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto p = ts::planted_mixture(seed, 3, 200, 2, 10.0);
        GmmConfig c;
        c.K = 3;
        c.seed = seed;
        const auto m = fit(p.X, c);
        const double ari = ts::adjusted_rand_index(p.labels, assign(m, p.X));
        const auto truth = ts::group_means(p.X, p.labels, 3);
        const auto perm = ts::match_components(truth, m.means);
        double err = 0.0, raw_err = 0.0;
        const auto perm_raw = ts::match_components(p.means, m.means);
        for (int k = 0; k < 3; ++k) {
            err = std::max(err, (truth.row(k) - m.means.row(perm[static_cast<std::size_t>(k)])).norm() / p.sigma);
            raw_err = std::max(raw_err, (p.means.row(k) - m.means.row(perm_raw[static_cast<std::size_t>(k)])).norm() / p.sigma);
        }
        if (ari >= kMinAri && err <= kMeanTolSigma) ++ok;
        if (raw_err <= kMeanTolSigma) ++raw_mean_ok;
        per_seed += fmt(" %.3f/%.2g", ari, err);
    }
    return {ok >= 9, fmt("%d/10 seeds with ARI >= 0.99 and means within 0.1 sigma of the planted groups' means "
                         "(ARI/err:%s); vs generating means %d/10",
                         ok, per_seed.c_str(), raw_mean_ok)};
}

// 3
Outcome bic_selection() {
    int ok = 0;
    std::string picks;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto p = ts::planted_mixture(seed, 3, 200, 2, 10.0);
        GmmConfig c;
        c.seed = seed;
        const auto curve = select_k(p.X, 1, 6, c);
        if (curve.best_K == 3) ++ok;
        picks += " " + std::to_string(curve.best_K);
    }
    const double hand = bic_value(4, 10, -20.0);
    const double expect = 4.0 * std::log(10.0) + 40.0;
    const bool hand_ok = std::abs(hand - expect) <= 1e-9;
    return {ok >= 8 && hand_ok, fmt("best_K == 3 in %d/10 seeds (picks:%s); BIC(4,10,-20) = %.12f vs %.12f", ok,
                                    picks.c_str(), hand, expect)};
}

// 4
Outcome silhouette_oracle() {
    std::mt19937_64 rng(404);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const int n = std::uniform_int_distribution<int>(3, 100)(rng);
        const int d = std::uniform_int_distribution<int>(1, 6)(rng);
        const int C = std::uniform_int_distribution<int>(2, std::min(6, n))(rng);
        std::normal_distribution<double> g;
        Eigen::MatrixXd X(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) X(i, j) = g(rng);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i < C ? i : std::uniform_int_distribution<int>(0, C - 1)(rng);
        std::shuffle(labels.begin(), labels.end(), rng);
        worst = std::max(worst, std::abs(silhouette(X, labels).overall - ts::brute_silhouette(X, labels)));
    }
    Eigen::MatrixXd D(6, 3);
    D << 1, 2, 3, 1, 2, 3, 1, 2, 3, -4, 0, 9, -4, 0, 9, -4, 0, 9;
    const double dup = silhouette(D, {0, 0, 0, 1, 1, 1}).overall;
    return {worst <= kSilhouetteTol && dup == 1.0,
            fmt("max |impl - brute| = %.3g over 50 sets; coincident duplicates -> %.17g", worst, dup)};
}

// 5
Outcome hex_geometry() {
    const auto b = ts::square_boundary(46.52, 6.63, 3000.0, "square");
    const double size = 450.0;
    const auto grid = make_hexgrid(b, size);
    const double R = grid.layout().circumradius();
    std::mt19937_64 rng(505);
    std::uniform_real_distribution<double> u(-3200.0, 3200.0);
    int agree = 0;
    const int N = 10000;
    for (int i = 0; i < N; ++i) {
        const Point p{u(rng), u(rng)};
        std::optional<std::int64_t> brute;
        for (const auto& c : grid.cells()) {
            if (ts::in_flat_hexagon(p.x, p.y, c.center.x, c.center.y, R, 1e-9 * R) && (!brute || c.cell_id < *brute))
                brute = c.cell_id;
        }
        if (grid.locate(p) == brute) ++agree;
    }
    const double want = std::sqrt(3.0) / 2.0 * size * size;
    double worst_area = 0.0;
    for (const auto& c : grid.cells()) {
        double a = 0.0;
        for (std::size_t i = 0; i < 6; ++i)
            a += c.vertices[i].x * c.vertices[(i + 1) % 6].y - c.vertices[(i + 1) % 6].x * c.vertices[i].y;
        worst_area = std::max(worst_area, std::abs(0.5 * a - want) / want);
    }
    double worst_spacing = 0.0;
    int pairs = 0;
    for (const auto& c : grid.cells()) {
        for (const auto& d : kAxialNeighbors) {
            auto j = grid.index_of(cell_id_of({c.axial.q + d.q, c.axial.r + d.r}));
            if (!j) continue;
            const auto& o = grid.cells()[*j];
            worst_spacing = std::max(worst_spacing, std::abs(std::hypot(o.center.x - c.center.x, o.center.y - c.center.y) - size));
            ++pairs;
        }
    }
    return {agree == N && worst_area <= kAreaRelTol && worst_spacing <= kSpacingTol,
            fmt("locate agrees on %d/%d points; max rel area error %.3g; max spacing error %.3g m over %d pairs", agree, N,
                worst_area, worst_spacing, pairs)};
}

Entity walk_way(std::int64_t id, std::vector<std::int64_t> refs) {
    Entity e;
    e.id = id;
    e.kind = EntityKind::way;
    e.tags["highway"] = "footway";
    for (auto r : refs) e.coords.push_back({0.0001 * static_cast<double>(r), 0.0});
    e.node_refs = std::move(refs);
    return e;
}

// 6
Outcome degree_centrality_check() {
    EntitySet p3;
    p3.entities.push_back(walk_way(1, {1, 2, 3}));
    const auto c3 = degree_centrality(build_walk_network(p3));
    const bool p3_ok = c3.at(1) == 0.5 && c3.at(2) == 1.0 && c3.at(3) == 0.5;
    EntitySet k4;
    std::int64_t id = 1;
    for (std::int64_t a = 1; a <= 4; ++a)
        for (std::int64_t b = a + 1; b <= 4; ++b) k4.entities.push_back(walk_way(id++, {a, b}));
    bool k4_ok = true;
    for (const auto& [n, v] : degree_centrality(build_walk_network(k4))) k4_ok = k4_ok && v == 1.0;
    std::mt19937_64 rng(606);
    int sums_ok = 0;
    for (int t = 0; t < 100; ++t) {
        const int n = std::uniform_int_distribution<int>(2, 40)(rng);
        const int m = std::uniform_int_distribution<int>(1, 120)(rng);
        EntitySet set;
        std::set<std::pair<int, int>> edges;
        for (int i = 0; i < m; ++i) {
            const int len = std::uniform_int_distribution<int>(2, 4)(rng);
            std::vector<std::int64_t> refs;
            for (int k = 0; k < len; ++k) refs.push_back(std::uniform_int_distribution<int>(1, n)(rng));
            for (int k = 1; k < len; ++k) {
                if (refs[k - 1] != refs[k])
                    edges.emplace(static_cast<int>(std::min(refs[k - 1], refs[k])), static_cast<int>(std::max(refs[k - 1], refs[k])));
            }
            set.entities.push_back(walk_way(i + 1, std::move(refs)));
        }
        const auto g = build_walk_network(set);
        std::size_t deg = 0;
        for (auto d : g.degrees()) deg += d;
        if (deg == 2 * g.edge_count() && g.edge_count() == edges.size()) ++sums_ok;
    }
    return {p3_ok && k4_ok && sums_ok == 100,
            fmt("P3 %s, K4 %s, degree sum == 2|E| on %d/100 random graphs", p3_ok ? "ok" : "wrong", k4_ok ? "ok" : "wrong",
                sums_ok)};
}

// 7
Outcome feature_count_oracle() {
    const auto b = parse_boundary_geojson_file(ts::fixture("mini_city_boundary.geojson"));
    const auto set = clip_to_boundary(parse_osm_xml_file(ts::fixture("mini_city.osm")), b);
    int checked = 0, mismatched = 0;
    double nonzero = 0;
    for (double size : {150.0, 300.0, 450.0}) {
        const auto grid = make_hexgrid(b, size);
        for (const auto& f : builtin_catalog().features) {
            if (f.kind != FeatureSpec::Kind::count) continue;
            const auto col = count_feature(set, grid, f.selector, f.name);
            const auto oracle = ts::brute_counts(set, grid, f.selector);
            ++checked;
            if (col.values != oracle) ++mismatched;
            for (double v : oracle) nonzero += v;
        }
    }
    return {mismatched == 0 && nonzero > 0,
            fmt("%d selector/grid combinations, %d mismatches, %.0f total counted memberships", checked, mismatched,
                nonzero)};
}

// 8
Outcome normalization_invariants() {
    const auto b = parse_boundary_geojson_file(ts::fixture("mini_city_boundary.geojson"));
    const auto set = clip_to_boundary(parse_osm_xml_file(ts::fixture("mini_city.osm")), b);
    const auto raw = compute_features(set, make_hexgrid(b, 300.0), builtin_catalog(), "mini_city");
    const auto z = standardize(raw, Normalization::zscore);
    double zmean = 0, zvar = 0;
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        const double m = z.values.col(j).mean();
        zmean = std::max(zmean, std::abs(m));
        zvar = std::max(zvar, std::abs((z.values.col(j).array() - m).square().mean() - 1.0));
    }
    const auto r = standardize(raw, Normalization::mean_ratio);
    double rmean = 0;
    for (Eigen::Index j = 0; j < r.cols(); ++j) rmean = std::max(rmean, std::abs(r.values.col(j).mean() - 1.0));
    GmmConfig c;
    c.K = 4;
    c.seed = 42;
    const auto labels = assign(fit(z, c), z.values);
    const auto table = cluster_means(raw, labels, 4);
    const double wavg = (table.weighted_average().array() - 1.0).abs().maxCoeff();
    auto scaled = raw;
    for (Eigen::Index j = 0; j < raw.cols(); ++j)
        scaled.values.col(j) = raw.values.col(j).array() * (0.25 + 1.5 * static_cast<double>(j)) + 3.0 * static_cast<double>(j);
    const auto zs = standardize(scaled, Normalization::zscore);
    const auto labels_scaled = assign(fit(zs, c), zs.values);
    const bool same = labels == labels_scaled;
    return {zmean <= kMomentTol && zvar <= kMomentTol && rmean <= kMomentTol && wavg <= kWeightedAvgTol && same,
            fmt("zscore |mean| %.2g, |var-1| %.2g; mean_ratio |mean-1| %.2g; cluster table |avg-1| %.2g; labels under "
                "affine rescaling %s",
                zmean, zvar, rmean, wavg, same ? "identical" : "differ")};
}

// 9
Outcome determinism() {
    ts::TempDir dir("urbanform-accept");
    const auto cfg = read_run_config(ts::fixture("mini_city_run.json"));
    run_pipeline(cfg, dir / "t1a", 1);
    run_pipeline(cfg, dir / "t1b", 1);
    run_pipeline(cfg, dir / "t4", 4);
    run_pipeline(cfg, dir / "t8", 8);
    const auto ref = ts::tree_contents(dir / "t1a");
    int same = 0;
    for (const char* d : {"t1b", "t4", "t8"}) same += ts::tree_contents(dir / d) == ref;
    return {same == 3 && !ref.empty(),
            fmt("%zu files; repeat run and thread counts 4, 8 byte-identical: %d/3", ref.size(), same)};
}

// 10
struct SharingTrial {
    int per_city = 0;
    int worst_uniform = 0;
    bool exact = false;
};

int shared_for(const std::vector<FeatureMatrix>& raws, JoinMode mode, std::uint64_t seed,
               const std::vector<int>* planted = nullptr, bool* exact = nullptr) {
    CompareOptions opt;
    opt.mode = mode;
    opt.k = 4;
    opt.gmm.seed = seed;
    const auto res = compare_cities(raws, opt);
    if (planted && exact) {
        // Majority planted typology of each shared cluster.
        std::set<int> found;
        for (int k = 0; k < res.report.K; ++k) {
            if (!res.report.shared[static_cast<std::size_t>(k)]) continue;
            std::map<int, int> votes;
            for (std::size_t i = 0; i < res.labels.size(); ++i)
                if (res.labels[i] == k) ++votes[(*planted)[i]];
            found.insert(std::max_element(votes.begin(), votes.end(),
                                          [](const auto& a, const auto& b) { return a.second < b.second; })
                             ->first);
        }
        *exact = res.report.shared_count() == 2 && found == std::set<int>{0, 1};
    }
    return res.report.shared_count();
}

Outcome synthetic_sharing() {
    int ok = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto a = ts::make_synthetic_city("A", 46.5, 6.6, 3000.0, 500.0, {0, 1, 2}, 100 + seed, 1);
        const auto b = ts::make_synthetic_city("B", 40.0, -75.0, 7500.0, 1500.0, {0, 1, 3}, 200 + seed, 100000000);
        const auto a500 = ts::grid_synthetic_city(a, 500.0);
        const auto b1500 = ts::grid_synthetic_city(b, 1500.0);
        std::vector<int> planted = a500.planted;
        planted.insert(planted.end(), b1500.planted.begin(), b1500.planted.end());
        SharingTrial t;
        t.per_city = shared_for({a500.raw, b1500.raw}, JoinMode::per_city_grid, seed, &planted, &t.exact);
        const int u500 = shared_for({a500.raw, ts::grid_synthetic_city(b, 500.0).raw}, JoinMode::uniform_grid, seed);
        const int u1500 = shared_for({ts::grid_synthetic_city(a, 1500.0).raw, b1500.raw}, JoinMode::uniform_grid, seed);
        t.worst_uniform = std::min(u500, u1500);
        if (t.exact && t.per_city >= t.worst_uniform) ++ok;
        detail += fmt(" %d/%d/%d%s", t.per_city, u500, u1500, t.exact ? "" : "*");
    }
    return {ok >= 8, fmt("%d/10 seeds: per-city-grid finds exactly the 2 planted shared typologies and >= the worst "
                         "uniform grid (shared per-city/u500/u1500, * = planted set not matched):%s",
                         ok, detail.c_str())};
}

// 11
Outcome paper_parameter_smoke() {
    struct City {
        const char* env;
        const char* name;
        double size;
        // Published cluster count, shown for comparison only. Philadelphia's figure captions say 8; its table says 7.
        int published_k;
    };
    Outcome out;
    out.gating = false;
    std::string detail;
    bool any = false, all_ok = true;
    for (const City c : {City{"URBANFORM_LAUSANNE_CONFIG", "Lausanne", 450.0, 5},
                         City{"URBANFORM_PHILADELPHIA_CONFIG", "Philadelphia", 1500.0, 7}}) {
        const char* path = std::getenv(c.env);
        if (!path || !*path) {
            detail += std::string(" ") + c.name + ": no extract (" + c.env + " unset);";
            continue;
        }
        any = true;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            auto cfg = read_run_config(path);
            cfg.grid_size_m = c.size;
            cfg.sweep_sizes.clear();
            cfg.k.reset();
            cfg.k_min = 2;
            cfg.k_max = 12;
            if (!cfg.seed) cfg.seed = 42;
            ts::TempDir dir("urbanform-smoke");
            const auto res = run_pipeline(cfg, dir / "out", 4);
            const double secs = seconds_since(t0);
            bool low_cluster = true;
            if (std::string(c.name) == "Lausanne") {
                const auto raw = read_features_file(dir / "out" / "features.csv");
                const auto [rows, labels] = [&] {
                    std::ifstream in(dir / "out" / "labels.csv");
                    return read_labels_csv(in);
                }();
                const auto t = cluster_means(raw, labels, res.K);
                low_cluster = false;
                for (int k = 0; k < t.K(); ++k) low_cluster = low_cluster || (t.values.col(k).array() < 0.5).all();
            }
            const bool ok = res.K >= 2 && res.K <= 12 && low_cluster && secs < 1800.0;
            all_ok = all_ok && ok;
            detail += fmt(" %s: K=%d (published %d), %zu cells, low-value cluster %s, %.0f s;", c.name, res.K,
                          c.published_k, res.cell_count, low_cluster ? "present" : "absent", secs);
        } catch (const std::exception& e) {
            all_ok = false;
            detail += std::string(" ") + c.name + ": " + e.what() + ";";
        }
    }
    out.skipped = !any;
    out.pass = any && all_ok;
    out.detail = "informational;" + detail;
    return out;
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "EM monotonicity", em_monotonicity},
        {2, "planted-mixture recovery", planted_recovery},
        {3, "BIC selection", bic_selection},
        {4, "silhouette oracle", silhouette_oracle},
        {5, "hex geometry", hex_geometry},
        {6, "degree centrality", degree_centrality_check},
        {7, "feature-count oracle", feature_count_oracle},
        {8, "normalization invariants", normalization_invariants},
        {9, "determinism", determinism},
        {10, "synthetic cross-city sharing", synthetic_sharing},
        {11, "paper-parameter smoke runs", paper_parameter_smoke},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const char* tag = o.skipped ? "SKIP" : (o.pass ? "PASS" : "FAIL");
        std::cout << tag << "  criterion " << c.id << " (" << c.name << "): " << o.detail
                  << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
        if (!o.pass && !o.skipped && o.gating) ++failed;
    }
    std::cout << (failed == 0 ? "acceptance: all gating criteria passed" : "acceptance: " + std::to_string(failed) + " gating criteria failed")
              << std::endl;
    return failed == 0 ? 0 : 1;
}
