#pragma once

// Shared test oracles. These deliberately re-derive results through
// independent code paths (exhaustive scans, naive loops, finite differences)
// rather than calling the implementation under test.

#include <functional>
#include <vector>

#include "anchorudf/anchorudf.hpp"

namespace testutil {

using audf::Vec3;

// Exhaustive per-triangle minimum; the oracle for index-accelerated queries.
inline audf::ClosestHit brute_force_closest(const audf::TriangleMesh& mesh, const Vec3& p) {
    audf::ClosestHit best;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < mesh.triangle_count(); ++t) {
        Vec3 q = audf::closest_point_on_triangle(p, mesh.triangle_vertex(t, 0),
                                                 mesh.triangle_vertex(t, 1),
                                                 mesh.triangle_vertex(t, 2));
        double d2 = (p - q).squared_norm();
        if (d2 < best_d2) {
            best_d2 = d2;
            best = {q, std::sqrt(d2), static_cast<int>(t)};
        }
    }
    best.distance = std::sqrt(best_d2);
    return best;
}

// Direct 3D convolution with the loop nesting inverted relative to the
// implementation (kernel taps outermost there, spatial gather here).
inline audf::Tensor naive_conv3d(const audf::Tensor& input, const audf::Tensor& kernel,
                                 const audf::Tensor& bias) {
    const std::size_t ci_n = input.shape()[0], r = input.shape()[1];
    const std::size_t co_n = kernel.shape()[0], k = kernel.shape()[2];
    const long p = static_cast<long>(k / 2);
    audf::Tensor out = audf::Tensor::zeros({co_n, r, r, r});
    double* o = out.mutable_data();
    auto in_at = [&](std::size_t c, long x, long y, long z) -> double {
        if (x < 0 || y < 0 || z < 0 || x >= static_cast<long>(r) || y >= static_cast<long>(r) ||
            z >= static_cast<long>(r))
            return 0.0;
        return input[((c * r + static_cast<std::size_t>(x)) * r + static_cast<std::size_t>(y)) * r +
                     static_cast<std::size_t>(z)];
    };
    std::size_t at = 0;
    for (std::size_t co = 0; co < co_n; ++co)
        for (long x = 0; x < static_cast<long>(r); ++x)
            for (long y = 0; y < static_cast<long>(r); ++y)
                for (long z = 0; z < static_cast<long>(r); ++z, ++at) {
                    double acc = bias.defined() ? bias[co] : 0.0;
                    for (std::size_t ci = 0; ci < ci_n; ++ci)
                        for (long dx = 0; dx < static_cast<long>(k); ++dx)
                            for (long dy = 0; dy < static_cast<long>(k); ++dy)
                                for (long dz = 0; dz < static_cast<long>(k); ++dz)
                                    acc += kernel[(((co * ci_n + ci) * k + dx) * k + dy) * k + dz] *
                                           in_at(ci, x + dx - p, y + dy - p, z + dz - p);
                    o[at] = acc;
                }
    return out;
}

// Central finite differences over every entry of a leaf tensor, given a
// scalar-valued rebuild function that re-runs the whole forward pass with a
// perturbed copy of the leaf.
inline std::vector<double> fd_gradient(const std::function<double(const audf::Tensor&)>& eval,
                                       const audf::Tensor& leaf, double h = 1e-5) {
    std::vector<double> grad(leaf.size());
    for (std::size_t i = 0; i < leaf.size(); ++i) {
        audf::Tensor hi = leaf.clone();
        hi.mutable_data()[i] += h;
        audf::Tensor lo = leaf.clone();
        lo.mutable_data()[i] -= h;
        grad[i] = (eval(hi) - eval(lo)) / (2.0 * h);
    }
    return grad;
}

// Max relative mismatch between two gradient vectors, with an absolute floor
// so near-zero entries do not blow up the ratio.
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                            double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

inline audf::Tensor random_tensor(audf::Tensor::Shape shape, audf::Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
    audf::Tensor t = audf::Tensor::zeros(std::move(shape));
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = rng.uniform(lo, hi);
    return t;
}

// Small fully-specified fixture meshes.
inline audf::TriangleMesh unit_quad_patch() {
    return audf::make_synthetic(audf::SyntheticKind::patch, 2, {});
}

inline audf::TriangleMesh normalized_hemisphere(int res = 32) {
    audf::TriangleMesh mesh =
        audf::make_synthetic(audf::SyntheticKind::hemisphere, res, {});
    return audf::normalize_mesh(mesh).first;
}

}  // namespace testutil
