#pragma once

#include "anchorudf/common.hpp"

namespace audf {

// Closest point on segment [a, b] to p.
inline Vec3 closest_point_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
    Vec3 ab = b - a;
    double denom = ab.squared_norm();
    if (denom == 0.0) return a;
    double t = (p - a).dot(ab) / denom;
    t = std::clamp(t, 0.0, 1.0);
    return a + ab * t;
}

// Exact closest point on triangle (a, b, c) to p via the standard Voronoi
// region decomposition: the closest feature is a vertex, an edge, or the
// face interior. Degenerate (zero-area) triangles fall back to the best of
// the three edges.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                                      const Vec3& c) {
    Vec3 ab = b - a, ac = c - a, ap = p - a;
    double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return a;  // vertex region a

    Vec3 bp = p - b;
    double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return b;  // vertex region b

    double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        double denom = d1 - d3;
        if (denom == 0.0) return a;
        return a + ab * (d1 / denom);  // edge region ab
    }

    Vec3 cp = p - c;
    double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return c;  // vertex region c

    double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        double denom = d2 - d6;
        if (denom == 0.0) return a;
        return a + ac * (d2 / denom);  // edge region ac
    }

    double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        double denom = (d4 - d3) + (d5 - d6);
        if (denom == 0.0) return b;
        return b + (c - b) * ((d4 - d3) / denom);  // edge region bc
    }

    double denom = va + vb + vc;
    if (denom <= 0.0) {
        // Degenerate triangle: treat as segments.
        Vec3 best = closest_point_on_segment(p, a, b);
        double best_d2 = (p - best).squared_norm();
        Vec3 q = closest_point_on_segment(p, b, c);
        double d2q = (p - q).squared_norm();
        if (d2q < best_d2) { best = q; best_d2 = d2q; }
        q = closest_point_on_segment(p, a, c);
        if ((p - q).squared_norm() < best_d2) best = q;
        return best;
    }
    double inv = 1.0 / denom;
    return a + ab * (vb * inv) + ac * (vc * inv);  // face interior
}

}  // namespace audf
