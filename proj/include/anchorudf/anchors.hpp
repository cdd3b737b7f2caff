#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "anchorudf/common.hpp"
#include "anchorudf/rng.hpp"

namespace audf {

// K unordered 3D points summarizing a shape profile: either k-means targets
// computed from surface samples or the set predicted by the anchor head.
struct AnchorSet {
    std::vector<Vec3> points;

    std::size_t k() const { return points.size(); }
};

struct KMeansResult {
    AnchorSet anchors;
    int iterations = 0;
    // Sum of squared distances to assigned centers after each update step;
    // non-increasing by construction.
    std::vector<double> objective_history;
};

namespace detail {

inline std::size_t nearest_center(const Vec3& p, const std::vector<Vec3>& centers) {
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
        double d2 = (p - centers[c]).squared_norm();
        if (d2 < best_d2) { best_d2 = d2; best = c; }
    }
    return best;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ initialization. Deterministic per seed:
// assignments break ties toward the lower center index, center updates sum
// in point order, and empty clusters are reseeded to the point farthest from
// its assigned center. Terminates when no assignment changes or at max_iters.
inline KMeansResult kmeans_anchors(const std::vector<Vec3>& points, std::size_t k,
                                   int max_iters, std::uint64_t seed) {
    if (k < 1) throw std::invalid_argument("kmeans_anchors: k must be >= 1");
    if (points.size() < k)
        throw std::invalid_argument("kmeans_anchors: fewer points than clusters");

    const std::size_t n = points.size();
    Rng rng(seed);
    std::vector<Vec3> centers;
    centers.reserve(k);

    // k-means++ seeding: first center uniform, then D^2-weighted.
    centers.push_back(points[rng.below(n)]);
    std::vector<double> d2(n);
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& ctr : centers)
                best = std::min(best, (points[i] - ctr).squared_norm());
            d2[i] = best;
            total += best;
        }
        std::size_t pick;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) { pick = i; break; }
            }
        } else {
            pick = rng.below(n);  // all points coincide with existing centers
        }
        centers.push_back(points[pick]);
    }

    std::vector<std::size_t> assign(n, std::numeric_limits<std::size_t>::max());
    KMeansResult result;
    for (int iter = 0; iter < max_iters; ++iter) {
        std::vector<std::size_t> next(n);
        for (std::size_t i = 0; i < n; ++i) next[i] = detail::nearest_center(points[i], centers);
        bool changed = next != assign;
        assign = std::move(next);
        if (!changed) break;

        std::vector<Vec3> sums(k, Vec3{});
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums[assign[i]] += points[i];
            ++counts[assign[i]];
        }
        // Reseed empty clusters to the farthest point from its center.
        std::vector<bool> taken(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                centers[c] = sums[c] / static_cast<double>(counts[c]);
                continue;
            }
            double far_d2 = -1.0;
            std::size_t far_i = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (taken[i]) continue;
                double d = (points[i] - centers[assign[i]]).squared_norm();
                if (d > far_d2) { far_d2 = d; far_i = i; }
            }
            taken[far_i] = true;
            centers[c] = points[far_i];
        }

        double objective = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            objective += (points[i] - centers[detail::nearest_center(points[i], centers)]).squared_norm();
        result.objective_history.push_back(objective);
        result.iterations = iter + 1;
    }
    result.anchors.points = std::move(centers);
    return result;
}

// Symmetric sum of squared nearest-neighbor distances between two point
// sets (pure sum, no averaging). This is the anchor-regression loss; the
// evaluation-metric chamfer (metrics.hpp) uses a mean convention instead.
inline double chamfer_sq(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("chamfer_sq: empty point set");
    double total = 0.0;
    for (const auto& pa : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& pb : b) best = std::min(best, (pa - pb).squared_norm());
        total += best;
    }
    for (const auto& pb : b) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& pa : a) best = std::min(best, (pa - pb).squared_norm());
        total += best;
    }
    return total;
}

inline double chamfer_sq(const AnchorSet& a, const AnchorSet& b) {
    return chamfer_sq(a.points, b.points);
}

}  // namespace audf
