#pragma once

// Shared helpers for the unit and acceptance suites: planted data, independent
// oracles and synthetic cities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include <urbanform/urbanform.hpp>

namespace testsupport {

namespace fs = std::filesystem;

inline fs::path fixture(const std::string& name) { return fs::path(URBANFORM_FIXTURES) / name; }

class TempDir {
public:
    explicit TempDir(const std::string& tag = "urbanform") {
        std::string tmpl = (fs::temp_directory_path() / (tag + "-XXXXXX")).string();
        if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Relative path -> file contents for every regular file under `root`.
inline std::map<std::string, std::string> tree_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Planted Gaussian mixtures

struct Planted {
    Eigen::MatrixXd X;
    std::vector<int> labels;
    /// Generating means, K x d.
    Eigen::MatrixXd means;
    double sigma = 1.0;
};

/// K spherical blobs of `n_per` points each. Means sit on a ring of radius
/// `separation` * sigma / (2 sin(pi/K)), so adjacent means are `separation` sigmas apart.
inline Planted planted_mixture(std::uint64_t seed, int K, int n_per, int d, double separation, double sigma = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Planted p;
    p.sigma = sigma;
    p.means = Eigen::MatrixXd::Zero(K, d);
    const double radius = K > 1 ? separation * sigma / (2.0 * std::sin(urbanform::kPi / K)) : 0.0;
    for (int k = 0; k < K; ++k) {
        const double ang = 2.0 * urbanform::kPi * k / K;
        p.means(k, 0) = radius * std::cos(ang) + 3.0;
        if (d > 1) p.means(k, 1) = radius * std::sin(ang) - 2.0;
    }
    p.X.resize(static_cast<Eigen::Index>(K) * n_per, d);
    Eigen::Index row = 0;
    for (int k = 0; k < K; ++k) {
        for (int i = 0; i < n_per; ++i, ++row) {
            for (int j = 0; j < d; ++j) p.X(row, j) = p.means(k, j) + sigma * normal(rng);
            p.labels.push_back(k);
        }
    }
    return p;
}

/// Per-group sample means of X, K x d.
inline Eigen::MatrixXd group_means(const Eigen::MatrixXd& X, const std::vector<int>& labels, int K) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(K, X.cols());
    std::vector<double> n(static_cast<std::size_t>(K), 0.0);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        m.row(labels[static_cast<std::size_t>(i)]) += X.row(i);
        n[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] += 1.0;
    }
    for (int k = 0; k < K; ++k) m.row(k) /= n[static_cast<std::size_t>(k)];
    return m;
}

// ---------------------------------------------------------------------------
// Oracles

inline double choose2(double n) { return n * (n - 1.0) / 2.0; }

/// Hubert-Arabie adjusted Rand index from the contingency table.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    std::map<std::pair<int, int>, double> nij;
    std::map<int, double> ai, bj;
    for (std::size_t i = 0; i < a.size(); ++i) {
        nij[{a[i], b[i]}] += 1;
        ai[a[i]] += 1;
        bj[b[i]] += 1;
    }
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (const auto& [k, v] : nij) sum_ij += choose2(v);
    for (const auto& [k, v] : ai) sum_a += choose2(v);
    for (const auto& [k, v] : bj) sum_b += choose2(v);
    const double total = choose2(static_cast<double>(a.size()));
    const double expected = sum_a * sum_b / total;
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;
    return (sum_ij - expected) / (max_index - expected);
}

/// perm[k] = estimated component matched to true group k, minimizing the
/// summed Euclidean mean distance over all permutations.
inline std::vector<int> match_components(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est) {
    std::vector<int> perm(static_cast<std::size_t>(est.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best;
    double best_cost = INFINITY;
    do {
        double cost = 0;
        for (Eigen::Index k = 0; k < truth.rows(); ++k) cost += (truth.row(k) - est.row(perm[static_cast<std::size_t>(k)])).norm();
        if (cost < best_cost) {
            best_cost = cost;
            best.assign(perm.begin(), perm.begin() + truth.rows());
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

/// Straight-from-the-definition silhouette, written without the library's helpers.
inline double brute_silhouette(const Eigen::MatrixXd& X, const std::vector<int>& labels) {
    const std::size_t n = labels.size();
    std::set<int> clusters(labels.begin(), labels.end());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::map<int, std::pair<double, int>> acc;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double s = 0.0;
            for (Eigen::Index c = 0; c < X.cols(); ++c) {
                const double diff = X(static_cast<Eigen::Index>(i), c) - X(static_cast<Eigen::Index>(j), c);
                s += diff * diff;
            }
            auto& [sum, cnt] = acc[labels[j]];
            sum += std::sqrt(s);
            cnt += 1;
        }
        const int own = labels[i];
        if (acc[own].second == 0) continue;
        const double a = acc[own].first / acc[own].second;
        double b = INFINITY;
        for (int c : clusters) {
            if (c == own) continue;
            b = std::min(b, acc[c].first / acc[c].second);
        }
        const double m = std::max(a, b);
        total += m > 0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(n);
}

/// Independent point-in-hexagon: p inside the regular flat-top hexagon with
/// circumradius R at c, using its three slab constraints.
inline bool in_flat_hexagon(double px, double py, double cx, double cy, double R, double eps) {
    const double x = std::abs(px - cx);
    const double y = std::abs(py - cy);
    const double h = std::sqrt(3.0) / 2.0 * R;
    return y <= h + eps && std::sqrt(3.0) * x + y <= std::sqrt(3.0) * R + eps;
}

/// Independent segment/convex-polygon test (Cyrus-Beck clipping against a CCW polygon).
inline bool segment_hits_convex(const urbanform::Point& p, const urbanform::Point& q,
                                const std::array<urbanform::Point, 6>& poly, double eps) {
    double t0 = 0.0, t1 = 1.0;
    const double dx = q.x - p.x, dy = q.y - p.y;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const auto& a = poly[i];
        const auto& b = poly[(i + 1) % poly.size()];
        // Inward normal of a CCW edge.
        const double nx = -(b.y - a.y), ny = b.x - a.x;
        const double num = nx * (p.x - a.x) + ny * (p.y - a.y) + eps;
        const double den = nx * dx + ny * dy;
        if (den == 0.0) {
            if (num < 0.0) return false;
            continue;
        }
        const double t = -num / den;
        if (den > 0.0)
            t0 = std::max(t0, t);
        else
            t1 = std::min(t1, t);
        if (t0 > t1) return false;
    }
    return true;
}

/**
 * Brute-force per-cell counts for one selector: every matching entity is tested
 * against every cell. Nodes go to the smallest containing cell id; ways count
 * once in each cell any of their segments meets.
 */
inline std::vector<double> brute_counts(const urbanform::EntitySet& set, const urbanform::HexGrid& grid,
                                        const urbanform::TagSelector& sel) {
    std::vector<double> out(grid.size(), 0.0);
    const double R = grid.layout().circumradius();
    const double eps = 1e-9 * R;
    for (const auto& e : set.entities) {
        const auto it = e.tags.find(sel.key);
        if (it == e.tags.end() || (sel.value && it->second != *sel.value)) continue;
        std::vector<urbanform::Point> pts;
        for (const auto& c : e.coords) pts.push_back(urbanform::project(c, grid.frame()));
        if (e.kind == urbanform::EntityKind::node) {
            std::optional<std::size_t> best;
            for (std::size_t i = 0; i < grid.size(); ++i) {
                const auto& c = grid.cells()[i];
                if (in_flat_hexagon(pts[0].x, pts[0].y, c.center.x, c.center.y, R, eps) &&
                    (!best || c.cell_id < grid.cells()[*best].cell_id))
                    best = i;
            }
            if (best) out[*best] += 1.0;
            continue;
        }
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const auto& c = grid.cells()[i];
            for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
                if (segment_hits_convex(pts[s], pts[s + 1], c.vertices, eps)) {
                    out[i] += 1.0;
                    break;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic cities

inline urbanform::Boundary square_boundary(double lat, double lon, double half_m, std::string name) {
    urbanform::Boundary b;
    b.name = std::move(name);
    const double dlat = half_m / urbanform::kMetersPerDegLat;
    const double dlon = half_m / (urbanform::kMetersPerDegLat * std::cos(lat * urbanform::kPi / 180.0));
    b.rings.push_back({{lat - dlat, lon - dlon}, {lat - dlat, lon + dlon}, {lat + dlat, lon + dlon},
                       {lat + dlat, lon - dlon}, {lat - dlat, lon - dlon}});
    return b;
}

/// Expected per-native-cell counts for each planted typology (rows) and feature (cols).
inline Eigen::MatrixXd typology_profiles() {
    Eigen::MatrixXd p = Eigen::MatrixXd::Constant(4, 6, 1.0);
    p(0, 0) = p(0, 1) = 15.0;
    p(1, 2) = p(1, 3) = 15.0;
    p(2, 4) = 20.0;
    p(3, 5) = 20.0;
    return p;
}

inline urbanform::Catalog synthetic_catalog() {
    urbanform::Catalog c;
    for (int f = 0; f < 6; ++f) c.features.push_back(urbanform::detail::count_spec("amenity", "t" + std::to_string(f)));
    return c;
}

struct SyntheticCity {
    urbanform::CityInputs inputs;
    double native_size = 0.0;
    /// Planted typology per native cell id.
    std::map<std::int64_t, int> typology;
};

/**
 * Tessellates a square city at `native_size` and fills every cell with Poisson
 * counts from one of `allowed` typologies, placing points uniformly inside the
 * (slightly shrunk) cell.
 */
inline SyntheticCity make_synthetic_city(const std::string& name, double lat, double lon, double half_m,
                                         double native_size, const std::vector<int>& allowed, std::uint64_t seed,
                                         std::int64_t first_id = 1) {
    SyntheticCity city;
    city.native_size = native_size;
    auto boundary = square_boundary(lat, lon, half_m, name);
    const auto grid = urbanform::make_hexgrid(boundary, native_size);
    const auto profiles = typology_profiles();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double R = grid.layout().circumradius();
    urbanform::EntitySet set;
    set.source = "synthetic:" + name;
    std::int64_t id = first_id;
    for (const auto& cell : grid.cells()) {
        const int t = allowed[std::uniform_int_distribution<std::size_t>(0, allowed.size() - 1)(rng)];
        city.typology[cell.cell_id] = t;
        for (Eigen::Index f = 0; f < profiles.cols(); ++f) {
            const int n = std::poisson_distribution<int>(profiles(t, f))(rng);
            for (int i = 0; i < n; ++i) {
                urbanform::Point p;
                do {
                    p = {cell.center.x + R * u(rng), cell.center.y + R * u(rng)};
                } while (!in_flat_hexagon(p.x, p.y, cell.center.x, cell.center.y, 0.95 * R, 0.0));
                urbanform::Entity e;
                e.id = id++;
                e.kind = urbanform::EntityKind::node;
                e.tags["amenity"] = "t" + std::to_string(f);
                e.coords.push_back(urbanform::unproject(p, grid.frame()));
                set.entities.push_back(std::move(e));
            }
        }
    }
    city.inputs = {name, std::move(set), std::move(boundary), synthetic_catalog()};
    return city;
}

/// Raw feature matrix of a synthetic city at `size`, plus the planted typology
/// of each row's native cell (found by locating the row's cell center).
struct GriddedCity {
    urbanform::FeatureMatrix raw;
    std::vector<int> planted;
};

inline GriddedCity grid_synthetic_city(const SyntheticCity& c, double size) {
    const auto grid = urbanform::make_hexgrid(c.inputs.boundary, size);
    GriddedCity out;
    out.raw = urbanform::compute_features(c.inputs.entities, grid, c.inputs.catalog, c.inputs.city);
    const auto native = urbanform::make_hexgrid(c.inputs.boundary, c.native_size);
    for (const auto& cell : grid.cells()) {
        const auto ll = urbanform::unproject(cell.center, grid.frame());
        const auto id = native.locate(urbanform::project(ll, native.frame()));
        out.planted.push_back(id ? c.typology.at(*id) : -1);
    }
    return out;
}

}  // namespace testsupport
