#pragma once

// Plane geometry helpers shared by the ingest and geometry modules. Works on any
// coordinate pair; callers pass (lon, lat) in degrees or (x, y) in meters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace urbanform::detail {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// True when p lies on the closed segment [a, b], with a distance tolerance of eps.
inline bool on_segment(const Vec2& p, const Vec2& a, const Vec2& b, double eps) {
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    if (len == 0.0) return std::hypot(p.x - a.x, p.y - a.y) <= eps;
    if (std::abs(cross(a, b, p)) > eps * len) return false;
    return p.x >= std::min(a.x, b.x) - eps && p.x <= std::max(a.x, b.x) + eps &&
           p.y >= std::min(a.y, b.y) - eps && p.y <= std::max(a.y, b.y) + eps;
}

/// Even-odd ray casting over every ring; points on any edge count as inside.
/// Rings are closed (first point repeated last) or open; both work.
inline bool point_in_rings(const Vec2& p, std::span<const std::vector<Vec2>> rings, double eps) {
    bool inside = false;
    for (const auto& ring : rings) {
        const std::size_t n = ring.size();
        if (n < 2) continue;
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
            const Vec2& a = ring[i];
            const Vec2& b = ring[j];
            if (on_segment(p, a, b, eps)) return true;
            if ((a.y > p.y) != (b.y > p.y)) {
                const double xint = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if (p.x < xint) inside = !inside;
            }
        }
    }
    return inside;
}

/// Shoelace signed area; positive for counter-clockwise rings.
inline double signed_area(std::span<const Vec2> ring) {
    const std::size_t n = ring.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& a = ring[i];
        const Vec2& b = ring[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    return 0.5 * acc;
}

/// Area centroid of a simple ring. Falls back to the vertex mean for degenerate rings.
inline Vec2 ring_centroid(std::span<const Vec2> ring) {
    const std::size_t n = ring.size();
    if (n == 0) return {};
    // Shift to the first vertex to keep the products well conditioned.
    const Vec2 o = ring[0];
    double a2 = 0.0, cx = 0.0, cy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 p{ring[i].x - o.x, ring[i].y - o.y};
        const Vec2 q{ring[(i + 1) % n].x - o.x, ring[(i + 1) % n].y - o.y};
        const double w = p.x * q.y - q.x * p.y;
        a2 += w;
        cx += (p.x + q.x) * w;
        cy += (p.y + q.y) * w;
    }
    if (a2 == 0.0) {
        Vec2 m{};
        for (const auto& p : ring) {
            m.x += p.x;
            m.y += p.y;
        }
        return {m.x / static_cast<double>(n), m.y / static_cast<double>(n)};
    }
    return {o.x + cx / (3.0 * a2), o.y + cy / (3.0 * a2)};
}

/// Proper or touching intersection of segments [a, b] and [c, d].
inline bool segments_intersect(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    const double d1 = cross(c, d, a);
    const double d2 = cross(c, d, b);
    const double d3 = cross(a, b, c);
    const double d4 = cross(a, b, d);
    if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
        return true;
    return (d1 == 0 && on_segment(a, c, d, 0.0)) || (d2 == 0 && on_segment(b, c, d, 0.0)) ||
           (d3 == 0 && on_segment(c, a, b, 0.0)) || (d4 == 0 && on_segment(d, a, b, 0.0));
}

/// Checks a closed ring (first == last) for intersections between non-adjacent edges.
inline bool ring_self_intersects(std::span<const Vec2> ring) {
    const std::size_t edges = ring.size() < 2 ? 0 : ring.size() - 1;
    for (std::size_t i = 0; i < edges; ++i) {
        for (std::size_t j = i + 1; j < edges; ++j) {
            const bool adjacent = j == i + 1 || (i == 0 && j == edges - 1);
            if (adjacent) continue;
            if (segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1])) return true;
        }
    }
    return false;
}

}  // namespace urbanform::detail
