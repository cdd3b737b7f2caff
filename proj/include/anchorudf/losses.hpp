#pragma once

#include <cmath>
#include <vector>

#include "anchorudf/anchors.hpp"
#include "anchorudf/model.hpp"
#include "anchorudf/sampling.hpp"
#include "anchorudf/tape.hpp"

namespace audf {

// --- value-only forms (logging, tests, constructed counterexamples) -------

// Clamped L1 distance loss, pure sum over the batch:
// sum_i |min(pred_i, delta) - min(raw_i, delta)|.
inline double loss_udf_value(const std::vector<double>& preds,
                             const std::vector<TrainingSample>& samples, double delta) {
    if (preds.size() != samples.size())
        throw std::invalid_argument("loss_udf_value: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        total += std::abs(std::min(preds[i], delta) - std::min(samples[i].udf_raw, delta));
    return total;
}

// Anchor regression loss: squared-sum chamfer between predicted and target
// anchor sets.
inline double loss_ap_value(const AnchorSet& predicted, const AnchorSet& target) {
    return chamfer_sq(predicted, target);
}

// Gradient-direction alignment per point: 1 - cos(numeric spatial gradient,
// ground-truth direction). A zero-magnitude numeric gradient counts as
// cos = 0, i.e. full loss 1.
template <typename F>
double loss_gda_value(F&& field, const std::vector<TrainingSample>& samples, double h) {
    double total = 0.0;
    for (const auto& s : samples) {
        Vec3 g = fd_spatial_grad(field, s.p, h);
        double gn = g.norm();
        double cosv = 0.0;
        if (gn > 0.0) cosv = g.dot(s.dir) / gn;  // dir is unit-norm
        total += 1.0 - cosv;
    }
    return total;
}

struct LossParts {
    double udf = 0.0;
    double ap = 0.0;
    double gda = 0.0;
};

// L_total = L_UDF + lambda1 * L_AP + lambda2 * L_GDA.
inline double total_loss(const LossParts& parts, double lambda1, double lambda2) {
    return parts.udf + lambda1 * parts.ap + lambda2 * parts.gda;
}

// --- tape builders ---------------------------------------------------------

// |min(pred, delta) - min(raw, delta)| for one point.
inline NodeRef build_loss_udf_point(Tape& tape, NodeRef pred, double udf_raw, double delta) {
    NodeRef clamped = tape.min_const(pred, delta);
    NodeRef target = tape.constant(Tensor::scalar(std::min(udf_raw, delta)));
    return tape.abs(tape.sub(clamped, target));
}

// 1 - cos(g, dir) where g is the central-difference spatial gradient of the
// decoder output, built from six ordinary forward passes so the whole term
// stays first-order differentiable w.r.t. parameters.
inline NodeRef build_loss_gda_point(Tape& tape, const ModelConfig& cfg, const DecoderNodes& nodes,
                                    const Vec3& p, const Vec3& dir, double h) {
    std::vector<NodeRef> components;
    components.reserve(3);
    for (int axis = 0; axis < 3; ++axis) {
        Vec3 hi = p, lo = p;
        hi[axis] += h;
        lo[axis] -= h;
        NodeRef f_hi = build_forward(tape, cfg, nodes, tape.constant(Tensor::vec3(hi)));
        NodeRef f_lo = build_forward(tape, cfg, nodes, tape.constant(Tensor::vec3(lo)));
        components.push_back(tape.scale(tape.sub(f_hi, f_lo), 1.0 / (2.0 * h)));
    }
    NodeRef g = tape.concat(components);
    NodeRef cosv = tape.cosine_similarity(g, tape.constant(Tensor::vec3(dir)));
    return tape.affine(cosv, -1.0, 1.0);
}

// Mean cosine between the model's exact spatial gradient and the oracle
// direction over samples whose true distance lies in [band_lo, band_hi].
inline double mean_cosine_alignment(const FieldEvaluator& field,
                                    const std::vector<TrainingSample>& samples, double band_lo,
                                    double band_hi, std::size_t max_points = 0) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& s : samples) {
        if (s.udf_raw < band_lo || s.udf_raw > band_hi) continue;
        auto [v, g] = field.value_and_grad(s.p);
        (void)v;
        double gn = g.norm();
        acc += gn > 0.0 ? g.dot(s.dir) / gn : 0.0;
        ++n;
        if (max_points > 0 && n >= max_points) break;
    }
    return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace audf
