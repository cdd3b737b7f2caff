#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "anchorudf/anchors.hpp"
#include "anchorudf/common.hpp"
#include "anchorudf/rng.hpp"
#include "anchorudf/tape.hpp"
#include "anchorudf/tensor.hpp"

namespace audf {

enum class ConditioningMode { latent_code, pixel_aligned };

inline std::string to_string(ConditioningMode m) {
    return m == ConditioningMode::latent_code ? "latent_code" : "pixel_aligned";
}

inline ConditioningMode conditioning_mode_from_string(const std::string& s) {
    if (s == "latent_code") return ConditioningMode::latent_code;
    if (s == "pixel_aligned") return ConditioningMode::pixel_aligned;
    throw std::invalid_argument("unknown conditioning mode: " + s);
}

// Orthographic projection of normalized cube coordinates to [0,1]^2 image
// coordinates: drops one axis, keeps the other two in (u, v) order.
struct CameraProjection {
    int drop_axis = 2;
    double scale = 1.0;

    std::pair<int, int> kept_axes() const {
        switch (drop_axis) {
            case 0: return {1, 2};
            case 1: return {0, 2};
            default: return {0, 1};
        }
    }

    std::pair<double, double> project(const Vec3& p) const {
        auto [au, av] = kept_axes();
        return {scale * (p[au] + 0.5), scale * (p[av] + 0.5)};
    }
};

struct ModelConfig {
    std::size_t k_anchors = 600;
    std::size_t grid_res = 32;
    // conv_channels[0] is the (binary) input channel count; the back entry is
    // the position-feature width c_pos.
    std::vector<std::size_t> conv_channels = {1, 8, 16, 16};
    std::size_t conv_kernel = 3;
    ConditioningMode conditioning = ConditioningMode::latent_code;
    std::size_t latent_dim = 64;
    std::size_t image_size = 64;      // pixel_aligned map is image_size^2
    std::size_t image_channels = 16;
    std::size_t decoder_layers = 6;
    std::size_t decoder_hidden = 256;
    std::size_t decoder_skip_layer = 3;  // input block re-concatenated here (1-based)
    std::size_t anchor_hidden = 256;
    double delta = 0.2;
    bool use_predicted_anchors_in_training = false;
    CameraProjection projection;

    std::size_t c_pos() const { return conv_channels.back(); }
    std::size_t conditioning_dim() const {
        return conditioning == ConditioningMode::latent_code ? latent_dim : image_channels;
    }
    std::size_t decoder_input_dim() const { return conditioning_dim() + c_pos() + 3; }

    void validate() const {
        if (grid_res < 4) throw std::invalid_argument("ModelConfig: grid_res must be >= 4");
        if (k_anchors < 1) throw std::invalid_argument("ModelConfig: k_anchors must be >= 1");
        if (conv_channels.size() < 2 || conv_channels.front() != 1)
            throw std::invalid_argument("ModelConfig: conv_channels must start at 1");
        if (conv_kernel % 2 != 1) throw std::invalid_argument("ModelConfig: odd kernel required");
        if (decoder_layers < 2) throw std::invalid_argument("ModelConfig: need >= 2 decoder layers");
        if (decoder_skip_layer < 2 || decoder_skip_layer >= decoder_layers)
            throw std::invalid_argument("ModelConfig: skip layer must be interior");
        if (!(delta > 0.0)) throw std::invalid_argument("ModelConfig: delta must be > 0");
    }
};

// All learnable quantities shared across shapes. Per-shape conditioning
// tensors (latent code / feature map) live alongside each shape.
struct ModelParams {
    std::vector<Tensor> conv_kernels;  // [Cout, Cin, k, k, k] per layer
    std::vector<Tensor> conv_biases;   // [Cout]
    Tensor anchor_w1, anchor_b1;       // conditioning -> hidden
    Tensor anchor_w2, anchor_b2;       // hidden -> K*3
    std::vector<Tensor> decoder_w, decoder_b;

    // Fixed traversal order; drives optimizer state and checkpoint layout.
    template <typename Fn>
    void for_each(Fn&& fn) {
        for (std::size_t l = 0; l < conv_kernels.size(); ++l) {
            fn("conv" + std::to_string(l) + ".weight", conv_kernels[l]);
            fn("conv" + std::to_string(l) + ".bias", conv_biases[l]);
        }
        fn("anchor.w1", anchor_w1);
        fn("anchor.b1", anchor_b1);
        fn("anchor.w2", anchor_w2);
        fn("anchor.b2", anchor_b2);
        for (std::size_t l = 0; l < decoder_w.size(); ++l) {
            fn("decoder" + std::to_string(l) + ".weight", decoder_w[l]);
            fn("decoder" + std::to_string(l) + ".bias", decoder_b[l]);
        }
    }

    static std::size_t decoder_layer_input(const ModelConfig& cfg, std::size_t layer) {
        if (layer == 0) return cfg.decoder_input_dim();
        std::size_t in = cfg.decoder_hidden;
        if (layer + 1 == cfg.decoder_skip_layer) in += cfg.decoder_input_dim();
        return in;
    }

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelParams p;
        Rng rng(seed, 0x6d6f64656cull);  // distinct stream per purpose
        auto uniform_tensor = [&rng](Tensor::Shape shape, std::size_t fan_in) {
            Tensor t = Tensor::zeros(std::move(shape));
            double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            double* d = t.mutable_data();
            for (std::size_t i = 0; i < t.size(); ++i) d[i] = rng.uniform(-bound, bound);
            return t;
        };
        const std::size_t k = cfg.conv_kernel;
        for (std::size_t l = 0; l + 1 < cfg.conv_channels.size(); ++l) {
            std::size_t ci = cfg.conv_channels[l], co = cfg.conv_channels[l + 1];
            std::size_t fan = ci * k * k * k;
            p.conv_kernels.push_back(uniform_tensor({co, ci, k, k, k}, fan));
            p.conv_biases.push_back(uniform_tensor({co}, fan));
        }
        const std::size_t cond = cfg.conditioning_dim();
        p.anchor_w1 = uniform_tensor({cfg.anchor_hidden, cond}, cond);
        p.anchor_b1 = uniform_tensor({cfg.anchor_hidden}, cond);
        p.anchor_w2 = uniform_tensor({cfg.k_anchors * 3, cfg.anchor_hidden}, cfg.anchor_hidden);
        p.anchor_b2 = uniform_tensor({cfg.k_anchors * 3}, cfg.anchor_hidden);
        for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
            std::size_t in = decoder_layer_input(cfg, l);
            std::size_t out = l + 1 == cfg.decoder_layers ? 1 : cfg.decoder_hidden;
            p.decoder_w.push_back(uniform_tensor({out, in}, in));
            p.decoder_b.push_back(uniform_tensor({out}, in));
        }
        return p;
    }
};

// Per-shape conditioning: a free latent code or a learnable feature map.
inline Tensor init_conditioning(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed, 0x636f6465ull);
    Tensor t = cfg.conditioning == ConditioningMode::latent_code
                   ? Tensor::zeros({cfg.latent_dim})
                   : Tensor::zeros({cfg.image_channels, cfg.image_size, cfg.image_size});
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = rng.normal(0.01);
    return t;
}

// Binary occupancy of anchor points over the normalized cube [-0.5, 0.5]^3.
// Out-of-cube anchors land in the nearest boundary cell. Not differentiable
// w.r.t. anchor positions by construction.
inline Tensor voxelize_anchors(const std::vector<Vec3>& anchors, std::size_t res) {
    Tensor grid = Tensor::zeros({1, res, res, res});
    double* g = grid.mutable_data();
    const long r = static_cast<long>(res);
    for (const Vec3& a : anchors) {
        long ix[3];
        for (int axis = 0; axis < 3; ++axis) {
            long i = static_cast<long>(std::floor((a[axis] + 0.5) * static_cast<double>(res)));
            ix[axis] = std::clamp(i, 0l, r - 1);
        }
        g[(static_cast<std::size_t>(ix[0]) * res + ix[1]) * res + ix[2]] = 1.0;
    }
    return grid;
}

inline Tensor voxelize_anchors(const AnchorSet& anchors, std::size_t res) {
    return voxelize_anchors(anchors.points, res);
}

// Tape subgraph for the point encoder: stride-1 zero-padded convolutions
// with ReLU between layers and none after the last.
inline NodeRef build_encoder(Tape& tape, const ModelConfig& cfg,
                             const std::vector<NodeRef>& kernels,
                             const std::vector<NodeRef>& biases, NodeRef grid, int threads = 1) {
    NodeRef h = grid;
    for (std::size_t l = 0; l < kernels.size(); ++l) {
        h = tape.conv3d(h, kernels[l], biases[l], threads);
        if (l + 1 < kernels.size()) h = tape.relu(h);
    }
    return h;
}

// Feature grid as a plain tensor (no gradients tracked).
inline Tensor compute_feature_grid(const ModelConfig& cfg, const ModelParams& params,
                                   const Tensor& density, int threads = 1) {
    Tape tape;
    std::vector<NodeRef> ks, bs;
    for (std::size_t l = 0; l < params.conv_kernels.size(); ++l) {
        ks.push_back(tape.constant(params.conv_kernels[l]));
        bs.push_back(tape.constant(params.conv_biases[l]));
    }
    NodeRef out = build_encoder(tape, cfg, ks, bs, tape.constant(density), threads);
    return tape.value(out).clone();
}

// Value-only samplers (shared weight math with the tape primitives).
inline std::vector<double> trilinear_sample(const Tensor& grid, const Vec3& p) {
    Tape tape;
    NodeRef out = tape.trilinear(tape.constant(grid), tape.constant(Tensor::vec3(p)));
    const Tensor& v = tape.value(out);
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline std::vector<double> bilinear_sample(const Tensor& map, double u, double v) {
    Tape tape;
    NodeRef out = tape.bilinear(tape.constant(map), tape.constant(Tensor::from({2}, {u, v})));
    const Tensor& t = tape.value(out);
    return std::vector<double>(t.data(), t.data() + t.size());
}

// Mean pool a [C,H,W] map to [C]; used as the anchor-head input in
// pixel_aligned mode.
inline Tensor mean_pool_map(const Tensor& map) {
    const std::size_t c_n = map.shape()[0], hw = map.shape()[1] * map.shape()[2];
    Tensor out = Tensor::zeros({c_n});
    double* o = out.mutable_data();
    for (std::size_t c = 0; c < c_n; ++c) {
        double acc = 0.0;
        const double* m = map.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += m[i];
        o[c] = acc / static_cast<double>(hw);
    }
    return out;
}

// Tape subgraph for the anchor head. The conditioning input is detached
// (constant), so the regression loss trains only the head weights.
struct AnchorHeadNodes {
    NodeRef w1, b1, w2, b2;
    NodeRef output;  // [K*3]
};

inline AnchorHeadNodes build_anchor_head(Tape& tape, const ModelConfig& cfg,
                                         const ModelParams& params, const Tensor& conditioning,
                                         bool trainable = true) {
    Tensor cond_vec = conditioning.rank() == 3 ? mean_pool_map(conditioning) : conditioning;
    AnchorHeadNodes nodes;
    nodes.w1 = trainable ? tape.param(params.anchor_w1) : tape.constant(params.anchor_w1);
    nodes.b1 = trainable ? tape.param(params.anchor_b1) : tape.constant(params.anchor_b1);
    nodes.w2 = trainable ? tape.param(params.anchor_w2) : tape.constant(params.anchor_w2);
    nodes.b2 = trainable ? tape.param(params.anchor_b2) : tape.constant(params.anchor_b2);
    NodeRef h = tape.relu(tape.linear(nodes.w1, tape.constant(cond_vec), nodes.b1));
    nodes.output = tape.linear(nodes.w2, h, nodes.b2);
    return nodes;
}

inline AnchorSet predict_anchors(const ModelConfig& cfg, const ModelParams& params,
                                 const Tensor& conditioning) {
    Tape tape;
    AnchorHeadNodes head = build_anchor_head(tape, cfg, params, conditioning, false);
    const Tensor& out = tape.value(head.output);
    AnchorSet set;
    set.points.reserve(cfg.k_anchors);
    for (std::size_t i = 0; i < cfg.k_anchors; ++i)
        set.points.push_back({out[3 * i], out[3 * i + 1], out[3 * i + 2]});
    return set;
}

// Leaves of one decoder evaluation context inside a tape. The feature grid
// and conditioning may be params (training) or constants (inference /
// frozen-encoder fine-tuning).
struct DecoderNodes {
    NodeRef feature_grid;               // [c_pos, R, R, R]
    NodeRef conditioning;               // [D] latent or [C,H,W] map
    std::vector<NodeRef> w, b;          // decoder layers
};

inline DecoderNodes make_decoder_nodes(Tape& tape, const ModelParams& params,
                                       const Tensor& feature_grid, const Tensor& conditioning,
                                       bool decoder_trainable, bool grid_trainable,
                                       bool conditioning_trainable) {
    DecoderNodes n;
    n.feature_grid = grid_trainable ? tape.param(feature_grid) : tape.constant(feature_grid);
    n.conditioning =
        conditioning_trainable ? tape.param(conditioning) : tape.constant(conditioning);
    for (std::size_t l = 0; l < params.decoder_w.size(); ++l) {
        n.w.push_back(decoder_trainable ? tape.param(params.decoder_w[l])
                                        : tape.constant(params.decoder_w[l]));
        n.b.push_back(decoder_trainable ? tape.param(params.decoder_b[l])
                                        : tape.constant(params.decoder_b[l]));
    }
    return n;
}

// Full distance-function forward for one query point: concatenates the
// conditioning features, trilinearly-sampled position features and the raw
// coordinates, then runs the skip decoder. Final ReLU keeps the output in
// the UDF codomain (>= 0).
inline NodeRef build_forward(Tape& tape, const ModelConfig& cfg, const DecoderNodes& nodes,
                             NodeRef p_node) {
    NodeRef phi_pos = tape.trilinear(nodes.feature_grid, p_node);
    NodeRef cond_feat;
    if (cfg.conditioning == ConditioningMode::latent_code) {
        cond_feat = nodes.conditioning;
    } else {
        auto [au, av] = cfg.projection.kept_axes();
        NodeRef pu = tape.slice(p_node, static_cast<std::size_t>(au), 1);
        NodeRef pv = tape.slice(p_node, static_cast<std::size_t>(av), 1);
        NodeRef uv = tape.concat({tape.affine(pu, cfg.projection.scale, 0.5 * cfg.projection.scale),
                                  tape.affine(pv, cfg.projection.scale, 0.5 * cfg.projection.scale)});
        cond_feat = tape.bilinear(nodes.conditioning, uv);
    }
    NodeRef x0 = tape.concat({cond_feat, phi_pos, p_node});
    NodeRef h = x0;
    for (std::size_t l = 0; l < nodes.w.size(); ++l) {
        if (l + 1 == cfg.decoder_skip_layer) h = tape.concat({h, x0});
        h = tape.linear(nodes.w[l], h, nodes.b[l]);
        h = tape.relu(h);  // hidden activations and the final non-negativity
    }
    return h;  // [1]
}

/**
 * Read-only evaluator for a conditioned distance field: value and exact
 * reverse-mode spatial gradient per query point, with a hand-rolled backward
 * pass over the fixed decoder structure (no tape allocation). Safe for
 * concurrent use from multiple threads.
 *
 * Matches the tape forward bit-for-bit and the tape input gradient up to
 * summation order (see tests).
 */
class FieldEvaluator {
  public:
    FieldEvaluator(const ModelConfig& cfg, const ModelParams& params, Tensor feature_grid,
                   Tensor conditioning)
        : cfg_(cfg), params_(params), grid_(std::move(feature_grid)),
          conditioning_(std::move(conditioning)) {
        if (cfg_.conditioning == ConditioningMode::latent_code) {
            cond_vec_.assign(conditioning_.data(), conditioning_.data() + conditioning_.size());
        }
    }

    double value(const Vec3& p) const {
        Workspace ws;
        return forward(p, ws);
    }

    std::pair<double, Vec3> value_and_grad(const Vec3& p) const {
        Workspace ws;
        double v = forward(p, ws);
        return {v, backward_to_point(p, ws)};
    }

    double operator()(const Vec3& p) const { return value(p); }

    const Tensor& feature_grid() const { return grid_; }

  private:
    struct TriSample {
        std::size_t idx[8];
        double w[8];
        double f[3];
        bool clamped[3];
    };

    struct BiSample {
        std::size_t idx[4];
        double wgt[4];
        double f[2];
        bool clamped[2];
        int axes[2];
    };

    struct Workspace {
        std::vector<double> x0;
        std::vector<std::vector<double>> pre;  // pre-activation per layer
        TriSample tri;
        BiSample bi;
    };

    TriSample sample_grid(const Vec3& p, std::vector<double>& phi) const {
        const std::size_t c_n = grid_.shape()[0], r = grid_.shape()[1];
        TriSample s;
        long i0[3];
        for (int a = 0; a < 3; ++a) {
            double u = (p[a] + 0.5) * static_cast<double>(r) - 0.5;
            s.clamped[a] = u <= 0.0 || u >= static_cast<double>(r - 1);
            u = std::clamp(u, 0.0, static_cast<double>(r - 1));
            long lo = std::max(0l, std::min(static_cast<long>(u), static_cast<long>(r) - 2));
            i0[a] = lo;
            s.f[a] = u - static_cast<double>(lo);
        }
        for (int corner = 0; corner < 8; ++corner) {
            int bx = corner >> 2 & 1, by = corner >> 1 & 1, bz = corner & 1;
            s.w[corner] = (bx ? s.f[0] : 1.0 - s.f[0]) * (by ? s.f[1] : 1.0 - s.f[1]) *
                          (bz ? s.f[2] : 1.0 - s.f[2]);
            s.idx[corner] = (static_cast<std::size_t>(i0[0] + bx) * r +
                             static_cast<std::size_t>(i0[1] + by)) *
                                r +
                            static_cast<std::size_t>(i0[2] + bz);
        }
        const std::size_t plane = r * r * r;
        phi.resize(c_n);
        for (std::size_t c = 0; c < c_n; ++c) {
            const double* gc = grid_.data() + c * plane;
            double acc = 0.0;
            for (int corner = 0; corner < 8; ++corner) acc += s.w[corner] * gc[s.idx[corner]];
            phi[c] = acc;
        }
        return s;
    }

    BiSample sample_map(const Vec3& p, std::vector<double>& feat) const {
        const std::size_t c_n = conditioning_.shape()[0], hh = conditioning_.shape()[1],
                          ww = conditioning_.shape()[2];
        auto [au, av] = cfg_.projection.kept_axes();
        auto [u, v] = cfg_.projection.project(p);
        BiSample s;
        s.axes[0] = au;
        s.axes[1] = av;
        double cont[2] = {u * static_cast<double>(ww) - 0.5, v * static_cast<double>(hh) - 0.5};
        const double lim[2] = {static_cast<double>(ww - 1), static_cast<double>(hh - 1)};
        long i0[2];
        for (int a = 0; a < 2; ++a) {
            s.clamped[a] = cont[a] <= 0.0 || cont[a] >= lim[a];
            double t = std::clamp(cont[a], 0.0, lim[a]);
            long lo = std::max(0l, std::min(static_cast<long>(t), static_cast<long>(lim[a]) - 1));
            if (lim[a] == 0.0) lo = 0;
            i0[a] = lo;
            s.f[a] = t - static_cast<double>(lo);
        }
        long x1 = std::min<long>(i0[0] + 1, static_cast<long>(ww) - 1);
        long y1 = std::min<long>(i0[1] + 1, static_cast<long>(hh) - 1);
        auto texel = [hh, ww](std::size_t c, long y, long x) {
            return (c * hh + static_cast<std::size_t>(y)) * ww + static_cast<std::size_t>(x);
        };
        s.idx[0] = texel(0, i0[1], i0[0]);
        s.idx[1] = texel(0, i0[1], x1);
        s.idx[2] = texel(0, y1, i0[0]);
        s.idx[3] = texel(0, y1, x1);
        s.wgt[0] = (1.0 - s.f[1]) * (1.0 - s.f[0]);
        s.wgt[1] = (1.0 - s.f[1]) * s.f[0];
        s.wgt[2] = s.f[1] * (1.0 - s.f[0]);
        s.wgt[3] = s.f[1] * s.f[0];
        const std::size_t page = hh * ww;
        feat.resize(c_n);
        for (std::size_t c = 0; c < c_n; ++c) {
            const double* m = conditioning_.data() + c * page;
            feat[c] = s.wgt[0] * m[s.idx[0]] + s.wgt[1] * m[s.idx[1]] + s.wgt[2] * m[s.idx[2]] +
                      s.wgt[3] * m[s.idx[3]];
        }
        return s;
    }

    double forward(const Vec3& p, Workspace& ws) const {
        std::vector<double> phi_pos;
        ws.tri = sample_grid(p, phi_pos);
        std::vector<double> cond_feat;
        if (cfg_.conditioning == ConditioningMode::latent_code)
            cond_feat = cond_vec_;
        else
            ws.bi = sample_map(p, cond_feat);
        ws.x0.clear();
        ws.x0.insert(ws.x0.end(), cond_feat.begin(), cond_feat.end());
        ws.x0.insert(ws.x0.end(), phi_pos.begin(), phi_pos.end());
        ws.x0.push_back(p.x);
        ws.x0.push_back(p.y);
        ws.x0.push_back(p.z);

        const std::size_t layers = params_.decoder_w.size();
        ws.pre.assign(layers, {});
        std::vector<double> h = ws.x0;
        for (std::size_t l = 0; l < layers; ++l) {
            if (l + 1 == cfg_.decoder_skip_layer) h.insert(h.end(), ws.x0.begin(), ws.x0.end());
            const Tensor& w = params_.decoder_w[l];
            const Tensor& b = params_.decoder_b[l];
            const std::size_t m = w.shape()[0], n = w.shape()[1];
            std::vector<double>& pre = ws.pre[l];
            pre.resize(m);
            const double* W = w.data();
            for (std::size_t i = 0; i < m; ++i) {
                double acc = b[i];
                const double* row = W + i * n;
                for (std::size_t j = 0; j < n; ++j) acc += row[j] * h[j];
                pre[i] = acc;
            }
            h.resize(m);
            for (std::size_t i = 0; i < m; ++i) h[i] = pre[i] > 0.0 ? pre[i] : 0.0;
        }
        return h[0];
    }

    // Reverse pass for d(output)/d(p) only; parameters are fixed.
    Vec3 backward_to_point(const Vec3& p, const Workspace& ws) const {
        const std::size_t layers = params_.decoder_w.size();
        const std::size_t in_dim = ws.x0.size();
        std::vector<double> gh{ws.pre[layers - 1][0] > 0.0 ? 1.0 : 0.0};
        std::vector<double> gx0(in_dim, 0.0);
        for (std::size_t li = layers; li-- > 0;) {
            const Tensor& w = params_.decoder_w[li];
            const std::size_t m = w.shape()[0], n = w.shape()[1];
            // relu mask (skip for the topmost seed, already masked)
            if (li + 1 < layers)
                for (std::size_t i = 0; i < m; ++i)
                    if (ws.pre[li][i] <= 0.0) gh[i] = 0.0;
            std::vector<double> gin(n, 0.0);
            const double* W = w.data();
            for (std::size_t i = 0; i < m; ++i) {
                double gi = gh[i];
                if (gi == 0.0) continue;
                const double* row = W + i * n;
                for (std::size_t j = 0; j < n; ++j) gin[j] += gi * row[j];
            }
            if (li + 1 == cfg_.decoder_skip_layer) {
                // gin = [g_h_prev (n - in_dim) | g_x0 (in_dim)]
                for (std::size_t j = 0; j < in_dim; ++j) gx0[j] += gin[n - in_dim + j];
                gin.resize(n - in_dim);
            }
            if (li == 0) {
                for (std::size_t j = 0; j < gin.size(); ++j) gx0[j] += gin[j];
            } else {
                gh = std::move(gin);
            }
        }

        Vec3 gp{gx0[in_dim - 3], gx0[in_dim - 2], gx0[in_dim - 1]};
        const std::size_t cond_n = cfg_.conditioning_dim();
        // position features -> p through the trilinear weights
        {
            const std::size_t c_n = grid_.shape()[0], r = grid_.shape()[1];
            const std::size_t plane = r * r * r;
            const TriSample& s = ws.tri;
            for (int axis = 0; axis < 3; ++axis) {
                if (s.clamped[axis]) continue;
                double acc = 0.0;
                for (std::size_t c = 0; c < c_n; ++c) {
                    double gc = gx0[cond_n + c];
                    if (gc == 0.0) continue;
                    const double* plane_v = grid_.data() + c * plane;
                    for (int corner = 0; corner < 8; ++corner) {
                        int bits[3] = {corner >> 2 & 1, corner >> 1 & 1, corner & 1};
                        double dwd = 1.0;
                        for (int a = 0; a < 3; ++a) {
                            if (a == axis)
                                dwd *= bits[a] ? 1.0 : -1.0;
                            else
                                dwd *= bits[a] ? s.f[a] : 1.0 - s.f[a];
                        }
                        acc += gc * dwd * plane_v[s.idx[corner]];
                    }
                }
                gp[axis] += acc * static_cast<double>(r);
            }
        }
        // image features -> p through the bilinear weights and projection
        if (cfg_.conditioning == ConditioningMode::pixel_aligned) {
            const BiSample& s = ws.bi;
            const std::size_t c_n = conditioning_.shape()[0];
            const std::size_t page = conditioning_.shape()[1] * conditioning_.shape()[2];
            double du = 0.0, dv = 0.0;
            const double fx = s.f[0], fy = s.f[1];
            for (std::size_t c = 0; c < c_n; ++c) {
                double gc = gx0[c];
                if (gc == 0.0) continue;
                const double* m = conditioning_.data() + c * page;
                double v00 = m[s.idx[0]], v01 = m[s.idx[1]], v10 = m[s.idx[2]], v11 = m[s.idx[3]];
                du += gc * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                dv += gc * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            const double w_scale = static_cast<double>(conditioning_.shape()[2]);
            const double h_scale = static_cast<double>(conditioning_.shape()[1]);
            if (!s.clamped[0]) gp[s.axes[0]] += du * w_scale * cfg_.projection.scale;
            if (!s.clamped[1]) gp[s.axes[1]] += dv * h_scale * cfg_.projection.scale;
        }
        return gp;
    }

    ModelConfig cfg_;
    const ModelParams& params_;
    Tensor grid_;
    Tensor conditioning_;
    std::vector<double> cond_vec_;
};

// Tape-based forward value / spatial gradient, used by tests and anywhere
// a one-off evaluation is clearer than building a FieldEvaluator.
inline double forward_value(const ModelConfig& cfg, const ModelParams& params,
                            const Tensor& feature_grid, const Tensor& conditioning,
                            const Vec3& p) {
    Tape tape;
    DecoderNodes nodes = make_decoder_nodes(tape, params, feature_grid, conditioning, false,
                                            false, false);
    return tape.value(build_forward(tape, cfg, nodes, tape.constant(Tensor::vec3(p)))).item();
}

inline Vec3 spatial_grad(const ModelConfig& cfg, const ModelParams& params,
                         const Tensor& feature_grid, const Tensor& conditioning, const Vec3& p) {
    Tape tape;
    DecoderNodes nodes = make_decoder_nodes(tape, params, feature_grid, conditioning, false,
                                            false, false);
    NodeRef p_node = tape.param(Tensor::vec3(p));
    NodeRef out = build_forward(tape, cfg, nodes, p_node);
    tape.backward(out);
    return tape.grad(p_node).to_vec3();
}

}  // namespace audf
