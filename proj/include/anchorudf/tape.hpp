#pragma once

#include <algorithm>
#include <cassert>
#include <functional>
#include <limits>
#include <vector>

#include "anchorudf/common.hpp"
#include "anchorudf/parallel.hpp"
#include "anchorudf/tensor.hpp"

namespace audf {

struct NodeRef {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/**
 * Define-by-run reverse-mode autodiff over dense double tensors.
 *
 * A tape is rebuilt per forward pass. Nodes are appended in topological
 * order, so backward() is a single reverse sweep that visits each node once.
 * Gradient accumulation order is fixed by construction order, which keeps
 * results bitwise reproducible.
 *
 * First-order only: spatial-gradient objectives are built from central
 * finite differences of ordinary forward passes (fd_spatial_grad), which
 * stay differentiable with respect to parameters by plain reverse mode.
 */
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // --- leaves ----------------------------------------------------------

    NodeRef param(Tensor value) { return {push(std::move(value), true)}; }
    NodeRef constant(Tensor value) { return {push(std::move(value), false)}; }

    const Tensor& value(NodeRef r) const { return nodes_[r.id].value; }

    // Gradient of the last backward() target w.r.t. this node (zeros if the
    // node was never touched).
    Tensor grad(NodeRef r) const {
        const Node& n = nodes_[r.id];
        Tensor g = Tensor::zeros(n.value.shape());
        if (!n.grad.empty())
            std::copy(n.grad.begin(), n.grad.end(), g.mutable_data());
        return g;
    }

    bool grad_touched(NodeRef r) const { return nodes_[r.id].touched; }

    // Raw gradient buffer (empty unless the node requires grad). Same length
    // as the node value; valid after backward().
    const std::vector<double>& raw_grad(NodeRef r) const { return nodes_[r.id].grad; }

    std::size_t node_count() const { return nodes_.size(); }

    // --- elementwise and reductions ---------------------------------------

    NodeRef add(NodeRef a, NodeRef b) {
        const Tensor &va = val(a), &vb = val(b);
        require(va.same_shape(vb), "add: shape mismatch");
        Tensor out = Tensor::zeros(va.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < va.size(); ++i) o[i] = va[i] + vb[i];
        int id = push_op(std::move(out), {a, b});
        set_backward(id, [this, id, a, b] {
            const auto& g = nodes_[id].grad;
            if (double* ga = grad_target(a))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (double* gb = grad_target(b))
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        });
        return {id};
    }

    NodeRef add_n(const std::vector<NodeRef>& xs) {
        require(!xs.empty(), "add_n: empty list");
        const Tensor& v0 = val(xs[0]);
        Tensor out = v0.clone();
        double* o = out.mutable_data();
        for (std::size_t k = 1; k < xs.size(); ++k) {
            const Tensor& vk = val(xs[k]);
            require(vk.same_shape(v0), "add_n: shape mismatch");
            for (std::size_t i = 0; i < vk.size(); ++i) o[i] += vk[i];
        }
        int id = push_op(std::move(out), xs);
        auto parents = xs;
        set_backward(id, [this, id, parents] {
            const auto& g = nodes_[id].grad;
            for (NodeRef p : parents)
                if (double* gp = grad_target(p))
                    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        });
        return {id};
    }

    NodeRef sub(NodeRef a, NodeRef b) {
        const Tensor &va = val(a), &vb = val(b);
        require(va.same_shape(vb), "sub: shape mismatch");
        Tensor out = Tensor::zeros(va.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < va.size(); ++i) o[i] = va[i] - vb[i];
        int id = push_op(std::move(out), {a, b});
        set_backward(id, [this, id, a, b] {
            const auto& g = nodes_[id].grad;
            if (double* ga = grad_target(a))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (double* gb = grad_target(b))
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        });
        return {id};
    }

    NodeRef mul(NodeRef a, NodeRef b) {
        const Tensor &va = val(a), &vb = val(b);
        require(va.same_shape(vb), "mul: shape mismatch");
        Tensor out = Tensor::zeros(va.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < va.size(); ++i) o[i] = va[i] * vb[i];
        int id = push_op(std::move(out), {a, b});
        set_backward(id, [this, id, a, b] {
            const auto& g = nodes_[id].grad;
            const Tensor &va2 = val(a), &vb2 = val(b);
            if (double* ga = grad_target(a))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
            if (double* gb = grad_target(b))
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va2[i];
        });
        return {id};
    }

    // y = m*x + c, elementwise with scalar constants.
    NodeRef affine(NodeRef x, double m, double c) {
        const Tensor& vx = val(x);
        Tensor out = Tensor::zeros(vx.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < vx.size(); ++i) o[i] = m * vx[i] + c;
        int id = push_op(std::move(out), {x});
        set_backward(id, [this, id, x, m] {
            const auto& g = nodes_[id].grad;
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += m * g[i];
        });
        return {id};
    }

    NodeRef scale(NodeRef x, double m) { return affine(x, m, 0.0); }

    NodeRef relu(NodeRef x) {
        const Tensor& vx = val(x);
        Tensor out = Tensor::zeros(vx.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < vx.size(); ++i) o[i] = vx[i] > 0.0 ? vx[i] : 0.0;
        int id = push_op(std::move(out), {x});
        set_backward(id, [this, id, x] {
            const auto& g = nodes_[id].grad;
            const Tensor& vx2 = val(x);
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (vx2[i] > 0.0) gx[i] += g[i];  // subgradient 0 at 0
        });
        return {id};
    }

    NodeRef abs(NodeRef x) {
        const Tensor& vx = val(x);
        Tensor out = Tensor::zeros(vx.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < vx.size(); ++i) o[i] = std::abs(vx[i]);
        int id = push_op(std::move(out), {x});
        set_backward(id, [this, id, x] {
            const auto& g = nodes_[id].grad;
            const Tensor& vx2 = val(x);
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (vx2[i] > 0.0) gx[i] += g[i];
                    else if (vx2[i] < 0.0) gx[i] -= g[i];
                }
        });
        return {id};
    }

    // Elementwise min(x, c). Ties route the gradient to x.
    NodeRef min_const(NodeRef x, double c) {
        const Tensor& vx = val(x);
        Tensor out = Tensor::zeros(vx.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < vx.size(); ++i) o[i] = std::min(vx[i], c);
        int id = push_op(std::move(out), {x});
        set_backward(id, [this, id, x, c] {
            const auto& g = nodes_[id].grad;
            const Tensor& vx2 = val(x);
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (vx2[i] <= c) gx[i] += g[i];
        });
        return {id};
    }

    // Elementwise max(x, c). Ties route the gradient to x.
    NodeRef max_const(NodeRef x, double c) {
        const Tensor& vx = val(x);
        Tensor out = Tensor::zeros(vx.shape());
        double* o = out.mutable_data();
        for (std::size_t i = 0; i < vx.size(); ++i) o[i] = std::max(vx[i], c);
        int id = push_op(std::move(out), {x});
        set_backward(id, [this, id, x, c] {
            const auto& g = nodes_[id].grad;
            const Tensor& vx2 = val(x);
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (vx2[i] >= c) gx[i] += g[i];
        });
        return {id};
    }

    NodeRef concat(const std::vector<NodeRef>& parts) {
        require(!parts.empty(), "concat: empty list");
        std::size_t total = 0;
        for (NodeRef p : parts) total += val(p).size();
        Tensor out = Tensor::zeros({total});
        double* o = out.mutable_data();
        std::size_t at = 0;
        for (NodeRef p : parts) {
            const Tensor& vp = val(p);
            std::copy(vp.data(), vp.data() + vp.size(), o + at);
            at += vp.size();
        }
        int id = push_op(std::move(out), parts);
        auto parents = parts;
        set_backward(id, [this, id, parents] {
            const auto& g = nodes_[id].grad;
            std::size_t at2 = 0;
            for (NodeRef p : parents) {
                std::size_t len = val(p).size();
                if (double* gp = grad_target(p))
                    for (std::size_t i = 0; i < len; ++i) gp[i] += g[at2 + i];
                at2 += len;
            }
        });
        return {id};
    }

    NodeRef slice(NodeRef x, std::size_t offset, std::size_t len) {
        const Tensor& vx = val(x);
        require(offset + len <= vx.size(), "slice: out of range");
        Tensor out = Tensor::zeros({len});
        double* o = out.mutable_data();
        std::copy(vx.data() + offset, vx.data() + offset + len, o);
        int id = push_op(std::move(out), {x});
        set_backward(id, [this, id, x, offset, len] {
            const auto& g = nodes_[id].grad;
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < len; ++i) gx[offset + i] += g[i];
        });
        return {id};
    }

    NodeRef sum(NodeRef x) {
        const Tensor& vx = val(x);
        double s = 0.0;
        for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
        int id = push_op(Tensor::scalar(s), {x});
        set_backward(id, [this, id, x] {
            double g = nodes_[id].grad[0];
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < val(x).size(); ++i) gx[i] += g;
        });
        return {id};
    }

    NodeRef mean(NodeRef x) {
        const Tensor& vx = val(x);
        require(vx.size() > 0, "mean: empty tensor");
        return scale(sum(x), 1.0 / static_cast<double>(vx.size()));
    }

    NodeRef dot(NodeRef a, NodeRef b) {
        const Tensor &va = val(a), &vb = val(b);
        require(va.same_shape(vb), "dot: shape mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * vb[i];
        int id = push_op(Tensor::scalar(s), {a, b});
        set_backward(id, [this, id, a, b] {
            double g = nodes_[id].grad[0];
            const Tensor &va2 = val(a), &vb2 = val(b);
            if (double* ga = grad_target(a))
                for (std::size_t i = 0; i < va2.size(); ++i) ga[i] += g * vb2[i];
            if (double* gb = grad_target(b))
                for (std::size_t i = 0; i < vb2.size(); ++i) gb[i] += g * va2[i];
        });
        return {id};
    }

    NodeRef l2norm(NodeRef x) {
        const Tensor& vx = val(x);
        double s = 0.0;
        for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i] * vx[i];
        double norm = std::sqrt(s);
        int id = push_op(Tensor::scalar(norm), {x});
        set_backward(id, [this, id, x, norm] {
            if (norm == 0.0) return;  // subgradient 0 at the origin
            double g = nodes_[id].grad[0];
            const Tensor& vx2 = val(x);
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < vx2.size(); ++i) gx[i] += g * vx2[i] / norm;
        });
        return {id};
    }

    // cos(u, v) as a scalar; defined as 0 (with zero gradient) when either
    // vector has zero magnitude, so 1 - cos penalizes degenerate gradients.
    NodeRef cosine_similarity(NodeRef u, NodeRef v) {
        const Tensor &vu = val(u), &vv = val(v);
        require(vu.same_shape(vv), "cosine_similarity: shape mismatch");
        double uu = 0.0, vv2 = 0.0, uv = 0.0;
        for (std::size_t i = 0; i < vu.size(); ++i) {
            uu += vu[i] * vu[i];
            vv2 += vv[i] * vv[i];
            uv += vu[i] * vv[i];
        }
        double nu = std::sqrt(uu), nv = std::sqrt(vv2);
        bool degenerate = nu == 0.0 || nv == 0.0;
        double cosv = degenerate ? 0.0 : uv / (nu * nv);
        int id = push_op(Tensor::scalar(cosv), {u, v});
        set_backward(id, [this, id, u, v, nu, nv, cosv, degenerate] {
            if (degenerate) return;
            double g = nodes_[id].grad[0];
            const Tensor &vu2 = val(u), &vv3 = val(v);
            if (double* gu = grad_target(u))
                for (std::size_t i = 0; i < vu2.size(); ++i)
                    gu[i] += g * (vv3[i] / (nu * nv) - cosv * vu2[i] / (nu * nu));
            if (double* gv = grad_target(v))
                for (std::size_t i = 0; i < vv3.size(); ++i)
                    gv[i] += g * (vu2[i] / (nu * nv) - cosv * vv3[i] / (nv * nv));
        });
        return {id};
    }

    // --- linear algebra ----------------------------------------------------

    // y = W x (+ b). W: [m, n] row-major, x: [n], b: [m] or invalid.
    NodeRef linear(NodeRef w, NodeRef x, NodeRef b = {}) {
        const Tensor &vw = val(w), &vx = val(x);
        require(vw.rank() == 2, "linear: weight must be rank 2");
        const std::size_t m = vw.shape()[0], n = vw.shape()[1];
        require(vx.size() == n, "linear: input size mismatch");
        if (b.valid()) require(val(b).size() == m, "linear: bias size mismatch");
        Tensor out = Tensor::zeros({m});
        double* o = out.mutable_data();
        const double* W = vw.data();
        const double* X = vx.data();
        for (std::size_t i = 0; i < m; ++i) {
            double acc = b.valid() ? val(b)[i] : 0.0;
            const double* row = W + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += row[j] * X[j];
            o[i] = acc;
        }
        std::vector<NodeRef> parents = b.valid() ? std::vector<NodeRef>{w, x, b}
                                                 : std::vector<NodeRef>{w, x};
        int id = push_op(std::move(out), parents);
        set_backward(id, [this, id, w, x, b, m, n] {
            const auto& g = nodes_[id].grad;
            const double* W = val(w).data();
            const double* X = val(x).data();
            if (double* gw = grad_target(w))
                for (std::size_t i = 0; i < m; ++i) {
                    double gi = g[i];
                    if (gi == 0.0) continue;
                    double* row = gw + i * n;
                    for (std::size_t j = 0; j < n; ++j) row[j] += gi * X[j];
                }
            if (double* gx = grad_target(x))
                for (std::size_t i = 0; i < m; ++i) {
                    double gi = g[i];
                    if (gi == 0.0) continue;
                    const double* row = W + i * n;
                    for (std::size_t j = 0; j < n; ++j) gx[j] += gi * row[j];
                }
            if (b.valid())
                if (double* gb = grad_target(b))
                    for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
        });
        return {id};
    }

    // --- spatial ops --------------------------------------------------------

    // 3D convolution, stride 1, odd kernel, zero padding that preserves the
    // spatial resolution. input: [Cin, R, R, R], kernel: [Cout, Cin, k, k, k],
    // bias: [Cout] or invalid. Parallelism splits over output/input channels,
    // each summed in fixed order, so results do not depend on thread count.
    NodeRef conv3d(NodeRef input, NodeRef kernel, NodeRef bias = {}, int threads = 1) {
        const Tensor &vin = val(input), &vk = val(kernel);
        require(vin.rank() == 4, "conv3d: input must be [C,R,R,R]");
        require(vk.rank() == 5, "conv3d: kernel must be [Co,Ci,k,k,k]");
        const std::size_t ci_n = vin.shape()[0], r = vin.shape()[1];
        require(vin.shape()[2] == r && vin.shape()[3] == r, "conv3d: input grid must be cubic");
        const std::size_t co_n = vk.shape()[0], k = vk.shape()[2];
        require(vk.shape()[1] == ci_n, "conv3d: channel mismatch");
        require(vk.shape()[3] == k && vk.shape()[4] == k && k % 2 == 1,
                "conv3d: kernel must be cubic with odd size");
        if (bias.valid()) require(val(bias).size() == co_n, "conv3d: bias size mismatch");
        const long p = static_cast<long>(k / 2);
        const long R = static_cast<long>(r);

        Tensor out = Tensor::zeros({co_n, r, r, r});
        {
            double* o = out.mutable_data();
            const double* in = vin.data();
            const double* kw = vk.data();
            const std::size_t plane = r * r * r;
            parallel_blocks(
                co_n, 1,
                [&](std::size_t, std::size_t co, std::size_t) {
                    double* oc = o + co * plane;
                    if (bias.valid()) {
                        double bv = val(bias)[co];
                        for (std::size_t i = 0; i < plane; ++i) oc[i] = bv;
                    }
                    for (std::size_t ci = 0; ci < ci_n; ++ci) {
                        const double* icp = in + ci * plane;
                        for (long dx = 0; dx < static_cast<long>(k); ++dx)
                            for (long dy = 0; dy < static_cast<long>(k); ++dy)
                                for (long dz = 0; dz < static_cast<long>(k); ++dz) {
                                    double w = kw[(((co * ci_n + ci) * k + dx) * k + dy) * k + dz];
                                    if (w == 0.0) continue;
                                    accumulate_shifted(oc, icp, R, dx - p, dy - p, dz - p, w);
                                }
                    }
                },
                threads);
        }
        std::vector<NodeRef> parents = bias.valid()
                                           ? std::vector<NodeRef>{input, kernel, bias}
                                           : std::vector<NodeRef>{input, kernel};
        int id = push_op(std::move(out), parents);
        set_backward(id, [this, id, input, kernel, bias, ci_n, co_n, k, R, threads] {
            const auto& g = nodes_[id].grad;
            const std::size_t plane = static_cast<std::size_t>(R) * R * R;
            const long p = static_cast<long>(k / 2);
            const double* kw = val(kernel).data();
            const double* in = val(input).data();

            if (double* gin = grad_target(input)) {
                // gIn[ci] += sum_co corr(gOut[co], flipped K[co,ci])
                parallel_blocks(
                    ci_n, 1,
                    [&](std::size_t, std::size_t ci, std::size_t) {
                        double* gic = gin + ci * plane;
                        for (std::size_t co = 0; co < co_n; ++co) {
                            const double* goc = g.data() + co * plane;
                            for (long dx = 0; dx < static_cast<long>(k); ++dx)
                                for (long dy = 0; dy < static_cast<long>(k); ++dy)
                                    for (long dz = 0; dz < static_cast<long>(k); ++dz) {
                                        double w = kw[(((co * ci_n + ci) * k + dx) * k + dy) * k + dz];
                                        if (w == 0.0) continue;
                                        accumulate_shifted(gic, goc, R, p - dx, p - dy, p - dz, w);
                                    }
                        }
                    },
                    threads);
            }
            if (double* gk = grad_target(kernel)) {
                parallel_blocks(
                    co_n, 1,
                    [&](std::size_t, std::size_t co, std::size_t) {
                        const double* goc = g.data() + co * plane;
                        for (std::size_t ci = 0; ci < ci_n; ++ci) {
                            const double* icp = in + ci * plane;
                            for (long dx = 0; dx < static_cast<long>(k); ++dx)
                                for (long dy = 0; dy < static_cast<long>(k); ++dy)
                                    for (long dz = 0; dz < static_cast<long>(k); ++dz)
                                        gk[(((co * ci_n + ci) * k + dx) * k + dy) * k + dz] +=
                                            correlate_shifted(goc, icp, R, dx - p, dy - p, dz - p);
                        }
                    },
                    threads);
            }
            if (bias.valid())
                if (double* gb = grad_target(bias))
                    for (std::size_t co = 0; co < co_n; ++co) {
                        const double* goc = g.data() + co * plane;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) acc += goc[i];
                        gb[co] += acc;
                    }
        });
        return {id};
    }

    // Trilinear sample of a cell-centered feature grid over [-0.5, 0.5]^3.
    // grid: [C, R, R, R], point: [3]. Differentiable w.r.t. grid values and
    // the point; coordinates are clamped to the cell-center hull, where the
    // point gradient is zero on the clamped axis.
    NodeRef trilinear(NodeRef grid, NodeRef point) {
        const Tensor &vg = val(grid), &vp = val(point);
        require(vg.rank() == 4, "trilinear: grid must be [C,R,R,R]");
        require(vp.size() == 3, "trilinear: point must have 3 coordinates");
        const std::size_t c_n = vg.shape()[0], r = vg.shape()[1];
        require(vg.shape()[2] == r && vg.shape()[3] == r, "trilinear: grid must be cubic");
        require(r >= 2, "trilinear: grid resolution must be >= 2");

        long i0[3];
        double f[3];
        bool clamped[3];
        for (int a = 0; a < 3; ++a) {
            double u = (vp[a] + 0.5) * static_cast<double>(r) - 0.5;
            clamped[a] = u <= 0.0 || u >= static_cast<double>(r - 1);
            u = std::clamp(u, 0.0, static_cast<double>(r - 1));
            long lo = std::min(static_cast<long>(u), static_cast<long>(r) - 2);
            lo = std::max(lo, 0l);
            i0[a] = lo;
            f[a] = u - static_cast<double>(lo);
        }

        Tensor out = Tensor::zeros({c_n});
        double* o = out.mutable_data();
        const double* gdat = vg.data();
        const std::size_t plane = r * r * r;
        auto cell = [r](long x, long y, long z) {
            return (static_cast<std::size_t>(x) * r + static_cast<std::size_t>(y)) * r +
                   static_cast<std::size_t>(z);
        };
        double w[8];
        std::size_t idx[8];
        for (int corner = 0; corner < 8; ++corner) {
            int bx = corner >> 2 & 1, by = corner >> 1 & 1, bz = corner & 1;
            w[corner] = (bx ? f[0] : 1.0 - f[0]) * (by ? f[1] : 1.0 - f[1]) *
                        (bz ? f[2] : 1.0 - f[2]);
            idx[corner] = cell(i0[0] + bx, i0[1] + by, i0[2] + bz);
        }
        for (std::size_t c = 0; c < c_n; ++c) {
            const double* gc = gdat + c * plane;
            double acc = 0.0;
            for (int corner = 0; corner < 8; ++corner) acc += w[corner] * gc[idx[corner]];
            o[c] = acc;
        }

        struct Saved {
            double f[3];
            bool clamped[3];
            std::size_t idx[8];
        } saved;
        std::copy(std::begin(f), std::end(f), saved.f);
        std::copy(std::begin(clamped), std::end(clamped), saved.clamped);
        std::copy(std::begin(idx), std::end(idx), saved.idx);

        int id = push_op(std::move(out), {grid, point});
        set_backward(id, [this, id, grid, point, saved, c_n, r, plane] {
            const auto& g = nodes_[id].grad;
            const double* gdat2 = val(grid).data();
            double w2[8];
            for (int corner = 0; corner < 8; ++corner) {
                int bx = corner >> 2 & 1, by = corner >> 1 & 1, bz = corner & 1;
                w2[corner] = (bx ? saved.f[0] : 1.0 - saved.f[0]) *
                             (by ? saved.f[1] : 1.0 - saved.f[1]) *
                             (bz ? saved.f[2] : 1.0 - saved.f[2]);
            }
            if (double* gg = grad_target(grid))
                for (std::size_t c = 0; c < c_n; ++c) {
                    double gc = g[c];
                    if (gc == 0.0) continue;
                    double* plane_g = gg + c * plane;
                    for (int corner = 0; corner < 8; ++corner)
                        plane_g[saved.idx[corner]] += gc * w2[corner];
                }
            if (double* gp = grad_target(point)) {
                // d w_corner / d f_axis, then chain du/dp = r.
                for (int axis = 0; axis < 3; ++axis) {
                    if (saved.clamped[axis]) continue;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < c_n; ++c) {
                        double gc = g[c];
                        if (gc == 0.0) continue;
                        const double* plane_v = gdat2 + c * plane;
                        for (int corner = 0; corner < 8; ++corner) {
                            int bits[3] = {corner >> 2 & 1, corner >> 1 & 1, corner & 1};
                            double dwd = 1.0;
                            for (int a = 0; a < 3; ++a) {
                                if (a == axis)
                                    dwd *= bits[a] ? 1.0 : -1.0;
                                else
                                    dwd *= bits[a] ? saved.f[a] : 1.0 - saved.f[a];
                            }
                            acc += gc * dwd * plane_v[saved.idx[corner]];
                        }
                    }
                    gp[axis] += acc * static_cast<double>(r);
                }
            }
        });
        return {id};
    }

    // Bilinear sample of a texel-centered feature map. map: [C, H, W],
    // uv: [2] in [0,1]^2 (clamped). Differentiable w.r.t. map and uv.
    NodeRef bilinear(NodeRef map, NodeRef uv) {
        const Tensor &vm = val(map), &vuv = val(uv);
        require(vm.rank() == 3, "bilinear: map must be [C,H,W]");
        require(vuv.size() == 2, "bilinear: uv must have 2 coordinates");
        const std::size_t c_n = vm.shape()[0], h = vm.shape()[1], wdt = vm.shape()[2];

        // u indexes width, v indexes height.
        double cont[2] = {vuv[0] * static_cast<double>(wdt) - 0.5,
                          vuv[1] * static_cast<double>(h) - 0.5};
        const double lim[2] = {static_cast<double>(wdt - 1), static_cast<double>(h - 1)};
        long i0[2];
        double f[2];
        bool clamped[2];
        for (int a = 0; a < 2; ++a) {
            clamped[a] = cont[a] <= 0.0 || cont[a] >= lim[a];
            double u = std::clamp(cont[a], 0.0, lim[a]);
            long lo = std::max(0l, std::min(static_cast<long>(u), static_cast<long>(lim[a]) - 1));
            if (lim[a] == 0.0) lo = 0;
            i0[a] = lo;
            f[a] = u - static_cast<double>(lo);
        }
        auto texel = [h, wdt](std::size_t c, long y, long x) {
            return (c * h + static_cast<std::size_t>(y)) * wdt + static_cast<std::size_t>(x);
        };
        long x1 = std::min<long>(i0[0] + 1, static_cast<long>(wdt) - 1);
        long y1 = std::min<long>(i0[1] + 1, static_cast<long>(h) - 1);

        Tensor out = Tensor::zeros({c_n});
        double* o = out.mutable_data();
        const double* m = vm.data();
        for (std::size_t c = 0; c < c_n; ++c) {
            double v00 = m[texel(c, i0[1], i0[0])], v01 = m[texel(c, i0[1], x1)];
            double v10 = m[texel(c, y1, i0[0])], v11 = m[texel(c, y1, x1)];
            o[c] = (1.0 - f[1]) * ((1.0 - f[0]) * v00 + f[0] * v01) +
                   f[1] * ((1.0 - f[0]) * v10 + f[0] * v11);
        }

        struct Saved {
            long i0[2], x1, y1;
            double f[2];
            bool clamped[2];
        } saved{{i0[0], i0[1]}, x1, y1, {f[0], f[1]}, {clamped[0], clamped[1]}};

        int id = push_op(std::move(out), {map, uv});
        set_backward(id, [this, id, map, uv, saved, c_n, h, wdt] {
            const auto& g = nodes_[id].grad;
            auto texel = [h, wdt](std::size_t c, long y, long x) {
                return (c * h + static_cast<std::size_t>(y)) * wdt + static_cast<std::size_t>(x);
            };
            const double fx = saved.f[0], fy = saved.f[1];
            if (double* gm = grad_target(map))
                for (std::size_t c = 0; c < c_n; ++c) {
                    double gc = g[c];
                    if (gc == 0.0) continue;
                    gm[texel(c, saved.i0[1], saved.i0[0])] += gc * (1.0 - fy) * (1.0 - fx);
                    gm[texel(c, saved.i0[1], saved.x1)] += gc * (1.0 - fy) * fx;
                    gm[texel(c, saved.y1, saved.i0[0])] += gc * fy * (1.0 - fx);
                    gm[texel(c, saved.y1, saved.x1)] += gc * fy * fx;
                }
            if (double* guv = grad_target(uv)) {
                const double* m2 = val(map).data();
                double du = 0.0, dv = 0.0;
                for (std::size_t c = 0; c < c_n; ++c) {
                    double gc = g[c];
                    if (gc == 0.0) continue;
                    double v00 = m2[texel(c, saved.i0[1], saved.i0[0])];
                    double v01 = m2[texel(c, saved.i0[1], saved.x1)];
                    double v10 = m2[texel(c, saved.y1, saved.i0[0])];
                    double v11 = m2[texel(c, saved.y1, saved.x1)];
                    du += gc * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dv += gc * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                if (!saved.clamped[0]) guv[0] += du * static_cast<double>(wdt);
                if (!saved.clamped[1]) guv[1] += dv * static_cast<double>(h);
            }
        });
        return {id};
    }

    // Symmetric sum of squared nearest-neighbor distances from a predicted
    // [K*3] point tensor to a fixed target set (and back). Matches are
    // computed forward and reused as the (piecewise-constant) subgradient
    // correspondence.
    NodeRef chamfer_to(NodeRef pred, const std::vector<Vec3>& targets) {
        const Tensor& vp = val(pred);
        require(vp.size() % 3 == 0 && vp.size() > 0, "chamfer_to: pred must be K*3");
        require(!targets.empty(), "chamfer_to: empty target set");
        const std::size_t kk = vp.size() / 3;
        auto point = [&vp](std::size_t i) {
            return Vec3{vp[3 * i], vp[3 * i + 1], vp[3 * i + 2]};
        };
        std::vector<std::size_t> fwd_match(kk), rev_match(targets.size());
        double total = 0.0;
        for (std::size_t i = 0; i < kk; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < targets.size(); ++j) {
                double d2 = (point(i) - targets[j]).squared_norm();
                if (d2 < best) { best = d2; fwd_match[i] = j; }
            }
            total += best;
        }
        for (std::size_t j = 0; j < targets.size(); ++j) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < kk; ++i) {
                double d2 = (point(i) - targets[j]).squared_norm();
                if (d2 < best) { best = d2; rev_match[j] = i; }
            }
            total += best;
        }
        int id = push_op(Tensor::scalar(total), {pred});
        set_backward(id, [this, id, pred, targets, fwd_match, rev_match, kk] {
            double g = nodes_[id].grad[0];
            const Tensor& vp2 = val(pred);
            double* gp = grad_target(pred);
            if (!gp) return;
            auto point = [&vp2](std::size_t i) {
                return Vec3{vp2[3 * i], vp2[3 * i + 1], vp2[3 * i + 2]};
            };
            for (std::size_t i = 0; i < kk; ++i) {
                Vec3 d = (point(i) - targets[fwd_match[i]]) * (2.0 * g);
                gp[3 * i] += d.x; gp[3 * i + 1] += d.y; gp[3 * i + 2] += d.z;
            }
            for (std::size_t j = 0; j < targets.size(); ++j) {
                std::size_t i = rev_match[j];
                Vec3 d = (point(i) - targets[j]) * (2.0 * g);
                gp[3 * i] += d.x; gp[3 * i + 1] += d.y; gp[3 * i + 2] += d.z;
            }
        });
        return {id};
    }

    // --- backward -----------------------------------------------------------

    void backward(NodeRef output) {
        require(val(output).size() == 1, "backward: output must be scalar");
        backward_seeded(output, Tensor::scalar(1.0));
    }

    // Reverse sweep seeded with d(loss)/d(node) = seed; used to chain
    // gradients across separately-built tapes.
    void backward_seeded(NodeRef output, const Tensor& seed) {
        Node& out = nodes_[output.id];
        require(seed.size() == out.value.size(), "backward_seeded: seed shape mismatch");
        if (!out.requires_grad) return;
        for (std::size_t i = 0; i < seed.size(); ++i) out.grad[i] += seed[i];
        out.touched = true;
        for (int id = output.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.touched && n.backward_fn) n.backward_fn();
        }
    }

  private:
    struct Node {
        Tensor value;
        std::vector<double> grad;  // allocated iff requires_grad
        bool requires_grad = false;
        bool touched = false;
        std::function<void()> backward_fn;
    };

    const Tensor& val(NodeRef r) const {
        require(r.valid() && r.id < static_cast<int>(nodes_.size()), "invalid node ref");
        return nodes_[r.id].value;
    }

    static void require(bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(msg);
    }

    int push(Tensor value, bool requires_grad) {
#ifndef NDEBUG
        if (!value.all_finite()) throw NumericError("tape: non-finite tensor value");
#endif
        Node n;
        n.requires_grad = requires_grad;
        if (requires_grad) n.grad.assign(value.size(), 0.0);
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_op(Tensor value, const std::vector<NodeRef>& parents) {
        bool rg = false;
        for (NodeRef p : parents) rg = rg || nodes_[p.id].requires_grad;
        return push(std::move(value), rg);
    }

    void set_backward(int id, std::function<void()> fn) {
        if (nodes_[id].requires_grad) nodes_[id].backward_fn = std::move(fn);
    }

    // Gradient buffer of a parent, or nullptr if it does not require grad.
    double* grad_target(NodeRef r) {
        Node& n = nodes_[r.id];
        if (!n.requires_grad) return nullptr;
        n.touched = true;
        return n.grad.data();
    }

    // dst[x,y,z] += w * src[x+ox, y+oy, z+oz] over the valid overlap of two
    // R^3 slabs; the inner z loop is contiguous.
    static void accumulate_shifted(double* dst, const double* src, long R, long ox, long oy,
                                   long oz, double w) {
        const long x0 = std::max(0l, -ox), x1 = std::min(R, R - ox);
        const long y0 = std::max(0l, -oy), y1 = std::min(R, R - oy);
        const long z0 = std::max(0l, -oz), z1 = std::min(R, R - oz);
        for (long x = x0; x < x1; ++x)
            for (long y = y0; y < y1; ++y) {
                double* drow = dst + (x * R + y) * R;
                const double* srow = src + ((x + ox) * R + (y + oy)) * R + oz;
                for (long z = z0; z < z1; ++z) drow[z] += w * srow[z];
            }
    }

    // sum over x,y,z of a[x,y,z] * b[x+ox, y+oy, z+oz] over the valid overlap.
    static double correlate_shifted(const double* a, const double* b, long R, long ox, long oy,
                                    long oz) {
        const long x0 = std::max(0l, -ox), x1 = std::min(R, R - ox);
        const long y0 = std::max(0l, -oy), y1 = std::min(R, R - oy);
        const long z0 = std::max(0l, -oz), z1 = std::min(R, R - oz);
        double acc = 0.0;
        for (long x = x0; x < x1; ++x)
            for (long y = y0; y < y1; ++y) {
                const double* arow = a + (x * R + y) * R;
                const double* brow = b + ((x + ox) * R + (y + oy)) * R + oz;
                for (long z = z0; z < z1; ++z) acc += arow[z] * brow[z];
            }
        return acc;
    }

    std::vector<Node> nodes_;
};

// Central-difference spatial gradient of a scalar field: each component is
// (f(p + h e_i) - f(p - h e_i)) / 2h. Exact on linear fields, O(h^2) on
// smooth ones.
template <typename F>
Vec3 fd_spatial_grad(F&& f, const Vec3& p, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("fd_spatial_grad: h must be > 0");
    Vec3 g;
    for (int i = 0; i < 3; ++i) {
        Vec3 hi = p, lo = p;
        hi[i] += h;
        lo[i] -= h;
        g[i] = (f(hi) - f(lo)) / (2.0 * h);
    }
    return g;
}

}  // namespace audf
