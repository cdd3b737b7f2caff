#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "anchorudf/bvh.hpp"
#include "anchorudf/common.hpp"
#include "anchorudf/model.hpp"
#include "anchorudf/parallel.hpp"
#include "anchorudf/rng.hpp"

namespace audf {

// A queryable distance field: value and (raw, unnormalized) spatial gradient.
using FieldSample = std::pair<double, Vec3>;
using FieldFn = std::function<FieldSample(const Vec3&)>;

inline FieldFn make_field(const FieldEvaluator& eval) {
    return [&eval](const Vec3& p) { return eval.value_and_grad(p); };
}

// Exact oracle as a field; the gradient is the unit direction away from the
// closest point (zero on the surface, where projection is a fixed point).
inline FieldFn make_exact_field(const SpatialIndex& index) {
    return [&index](const Vec3& p) -> FieldSample {
        ClosestHit hit = index.closest_point(p);
        Vec3 dir = hit.distance > kDirectionEpsilon ? (p - hit.q) / hit.distance : Vec3{};
        return {hit.distance, dir};
    };
}

struct ProjectedPoint {
    Vec3 p;
    bool ok = true;  // false if a zero gradient stalled the walk
};

// Iterates p <- p - f(p) * g(p)/|g(p)|. The printed update uses the raw
// gradient, which coincides for a true UDF (unit gradient); normalizing is
// the stable choice for learned fields.
template <typename Field>
ProjectedPoint project_point(Field&& field, Vec3 p, int steps) {
    for (int s = 0; s < steps; ++s) {
        auto [d, g] = field(p);
        double gn = g.norm();
        if (gn == 0.0) return {p, false};
        p -= g * (d / gn);
    }
    return {p, true};
}

// Spec-parity overload with separate value / gradient callables.
template <typename UdfFn, typename GradFn>
ProjectedPoint project_point(UdfFn&& udf, GradFn&& grad, const Vec3& p, int steps) {
    auto field = [&](const Vec3& q) -> FieldSample { return {udf(q), grad(q)}; };
    return project_point(field, p, steps);
}

struct ExtractConfig {
    std::size_t n_init = 20000;
    int steps = 5;
    double valid_distance = 0.007;
    std::size_t target_points = 100000;
    double jitter_sigma = 0.015;
    int max_rounds = 20;
    int threads = 0;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("ExtractConfig: steps must be >= 1");
        if (!(valid_distance > 0.0))
            throw std::invalid_argument("ExtractConfig: valid_distance must be > 0");
        if (!(jitter_sigma > 0.0))
            throw std::invalid_argument("ExtractConfig: jitter_sigma must be > 0");
        if (n_init < 1) throw std::invalid_argument("ExtractConfig: n_init must be >= 1");
    }
};

struct ExtractResult {
    std::vector<Vec3> points;
    int rounds = 0;
    bool shortfall = false;
    // Nearly everything passed the validity filter in round 1: the field is
    // likely identically (near-)zero rather than a distance function.
    bool degenerate = false;
    double min_udf_seen = std::numeric_limits<double>::infinity();
};

inline std::uint64_t mix_seed_extract(std::uint64_t seed, int round) {
    std::uint64_t x =
        seed ^ (0x0e78ac7ull + static_cast<std::uint64_t>(round) * 0x9e3779b97f4a7c15ull);
    return Rng::splitmix64(x);
}

/**
 * Dense point cloud extraction: seed uniform points in the normalized cube,
 * project each along the negative normalized gradient, keep points whose
 * final predicted distance is below valid_distance, then densify by
 * jittering kept points and re-projecting until target_points are collected
 * (or max_rounds is hit, flagged as a shortfall).
 *
 * Deterministic per seed: every candidate slot draws from substream
 * (seed, round, slot) and results are compacted in slot order.
 */
template <typename Field>
ExtractResult extract_dense_cloud(Field&& field, const ExtractConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ExtractResult result;
    std::vector<Vec3> kept;
    kept.reserve(cfg.target_points + cfg.n_init);

    for (int round = 0; round < cfg.max_rounds && kept.size() < cfg.target_points; ++round) {
        const std::size_t n = cfg.n_init;
        std::vector<Vec3> candidate(n);
        std::vector<double> final_udf(n);
        const std::size_t base_count = kept.size();
        parallel_blocks(
            n, 256,
            [&](std::size_t, std::size_t begin, std::size_t end) {
                for (std::size_t i = begin; i < end; ++i) {
                    Rng rng(mix_seed_extract(seed, round), i);
                    Vec3 p;
                    if (round == 0) {
                        p = rng.uniform_vec3(-0.5, 0.5);
                    } else {
                        p = kept[i % base_count] + rng.normal_vec3(cfg.jitter_sigma);
                    }
                    ProjectedPoint proj = project_point(field, p, cfg.steps);
                    candidate[i] = proj.p;
                    // A stalled walk (zero gradient) still gets filtered by
                    // its predicted value; an identically-zero field then
                    // keeps everything, which round 1 flags as degenerate.
                    final_udf[i] = field(proj.p).first;
                }
            },
            cfg.threads);

        std::size_t kept_this_round = 0;
        for (std::size_t i = 0; i < n && kept.size() < cfg.target_points; ++i) {
            result.min_udf_seen = std::min(result.min_udf_seen, final_udf[i]);
            if (final_udf[i] < cfg.valid_distance) {
                kept.push_back(candidate[i]);
                ++kept_this_round;
            }
        }
        result.rounds = round + 1;
        if (round == 0) {
            if (kept_this_round == 0)
                throw NumericError(
                    "extract_dense_cloud: no valid points after round 1 (min predicted udf " +
                    std::to_string(result.min_udf_seen) + ", valid distance " +
                    std::to_string(cfg.valid_distance) + ")");
            if (static_cast<double>(kept_this_round) > 0.9 * static_cast<double>(n))
                result.degenerate = true;
        }
    }
    result.shortfall = kept.size() < cfg.target_points;
    if (kept.size() > cfg.target_points) kept.resize(cfg.target_points);
    result.points = std::move(kept);
    return result;
}

}  // namespace audf
