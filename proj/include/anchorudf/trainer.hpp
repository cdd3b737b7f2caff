#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "anchorudf/checkpoint.hpp"
#include "anchorudf/losses.hpp"
#include "anchorudf/model.hpp"
#include "anchorudf/optimizer.hpp"
#include "anchorudf/parallel.hpp"
#include "anchorudf/sampling.hpp"

namespace audf {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t i = 0) {
    std::uint64_t x = seed ^ (tag * 0x9e3779b97f4a7c15ull) ^ (i * 0xd1b54a32d192ed03ull);
    return Rng::splitmix64(x);
}

/**
 * Two-phase training loop. Phase 1 optimizes the clamped distance loss plus
 * the anchor regression loss for all parameters. From gda_start_epoch on
 * (and only if lambda2 > 0) the gradient-direction term joins, and with
 * freeze_encoders_during_gda only the decoder and per-shape conditioning
 * keep learning; the conv encoder and anchor head stay fixed.
 *
 * Determinism: every random draw comes from a (seed, purpose, index)
 * substream, per-step gradients reduce over fixed-size point blocks in block
 * order, and the optimizer walks parameters in a fixed name order. Two runs
 * with the same seed produce bitwise-identical checkpoints for any thread
 * count, and resuming from a checkpoint continues an uninterrupted
 * trajectory exactly.
 */
class Trainer {
  public:
    Trainer(ModelConfig mcfg, TrainConfig tcfg, std::vector<TrainingSet> sets,
            std::vector<AnchorSet> anchor_targets, std::vector<std::string> mesh_ids)
        : mcfg_(std::move(mcfg)), tcfg_(tcfg), sets_(std::move(sets)),
          optimizer_(0.99, 1e-8) {
        mcfg_.validate();
        tcfg_.validate();
        if (sets_.empty()) throw std::invalid_argument("Trainer: no training sets");
        if (anchor_targets.size() != sets_.size() || mesh_ids.size() != sets_.size())
            throw std::invalid_argument("Trainer: inputs misaligned");
        params_ = ModelParams::init(mcfg_, tcfg_.seed);
        for (std::size_t i = 0; i < sets_.size(); ++i) {
            ShapeEntry e;
            e.mesh_id = std::move(mesh_ids[i]);
            e.anchor_targets = std::move(anchor_targets[i]);
            e.conditioning = init_conditioning(mcfg_, mix_seed(tcfg_.seed, kSeedConditioning, i));
            shapes_.push_back(std::move(e));
        }
        density_cache_.resize(sets_.size());
        frozen_grid_cache_.resize(sets_.size());
    }

    static Trainer resume(const Checkpoint& ckpt, std::vector<TrainingSet> sets) {
        if (sets.size() != ckpt.shapes.size())
            throw std::invalid_argument("Trainer::resume: training-set count mismatch");
        Trainer t(ckpt, std::move(sets));
        return t;
    }

    const ModelParams& params() const { return params_; }
    const std::vector<ShapeEntry>& shapes() const { return shapes_; }
    const std::vector<EpochStats>& history() const { return history_; }
    std::size_t epochs_completed() const { return epochs_completed_; }
    const ModelConfig& model_config() const { return mcfg_; }
    const TrainConfig& train_config() const { return tcfg_; }

    // Runs the remaining epochs. The callback fires after each epoch with
    // stats and wall time; it may write checkpoints/CSV rows.
    void run(const std::function<void(std::size_t, const EpochStats&, double)>& on_epoch = {}) {
        for (std::size_t epoch = epochs_completed_; epoch < tcfg_.epochs; ++epoch) {
            auto t0 = std::chrono::steady_clock::now();
            EpochStats stats = run_epoch(epoch);
            double seconds = std::chrono::duration<double>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count();
            history_.push_back(stats);
            epochs_completed_ = epoch + 1;
            if (on_epoch) on_epoch(epoch, stats, seconds);
        }
    }

    Checkpoint make_checkpoint() const {
        Checkpoint ckpt;
        ckpt.model = mcfg_;
        ckpt.train = tcfg_;
        ckpt.seed = tcfg_.seed;
        ckpt.epochs_completed = epochs_completed_;
        ckpt.history = history_;
        ckpt.params = params_;
        ckpt.shapes = shapes_;
        for (const auto& [name, values] : optimizer_.state())
            ckpt.optimizer_state.emplace_back(name, values);
        return ckpt;
    }

    // Evaluator for a trained shape, with anchors from the head (inference
    // behavior) or from the k-means targets.
    FieldEvaluator make_evaluator(std::size_t shape_index, bool use_predicted_anchors) const {
        const ShapeEntry& shape = shapes_[shape_index];
        AnchorSet anchors = use_predicted_anchors
                                ? predict_anchors(mcfg_, params_, shape.conditioning)
                                : shape.anchor_targets;
        Tensor density = voxelize_anchors(anchors, mcfg_.grid_res);
        Tensor grid = compute_feature_grid(mcfg_, params_, density, resolve_threads(tcfg_.threads));
        return FieldEvaluator(mcfg_, params_, std::move(grid), shape.conditioning);
    }

  private:
    static constexpr std::uint64_t kSeedConditioning = 0xc0de;
    static constexpr std::uint64_t kSeedBatches = 0xba7c;

    Trainer(const Checkpoint& ckpt, std::vector<TrainingSet> sets)
        : mcfg_(ckpt.model), tcfg_(ckpt.train), sets_(std::move(sets)), params_(ckpt.params),
          shapes_(ckpt.shapes), history_(ckpt.history),
          epochs_completed_(ckpt.epochs_completed), optimizer_(0.99, 1e-8) {
        for (const auto& [name, values] : ckpt.optimizer_state)
            optimizer_.restore(name, values);
        density_cache_.resize(sets_.size());
        frozen_grid_cache_.resize(sets_.size());
    }

    bool gda_active(std::size_t epoch) const {
        return tcfg_.lambda2 > 0.0 && epoch >= tcfg_.resolved_gda_start();
    }

    bool encoders_frozen(std::size_t epoch) const {
        return gda_active(epoch) && tcfg_.freeze_encoders_during_gda;
    }

    double epoch_lr(std::size_t epoch) const {
        return epoch >= tcfg_.resolved_lr_decay_epoch() ? tcfg_.lr * tcfg_.lr_decay_factor
                                                        : tcfg_.lr;
    }

    // Named gradient buffers in a fixed order (decoder, conv, head, then
    // per-shape conditioning), so the optimizer walk is reproducible.
    struct StepGrads {
        std::vector<std::pair<std::string, std::vector<double>>> entries;
        std::vector<std::size_t> index_of_shape_cond;

        std::vector<double>& buffer(const std::string& name, std::size_t size) {
            for (auto& [n, buf] : entries)
                if (n == name) return buf;
            entries.emplace_back(name, std::vector<double>(size, 0.0));
            return entries.back().second;
        }
    };

    struct BlockResult {
        std::vector<std::vector<double>> decoder_w, decoder_b;
        std::vector<double> conditioning;
        std::vector<double> grid;
        double udf_sum = 0.0;
        double gda_sum = 0.0;
        std::size_t gda_count = 0;
    };

    struct EpochAccum {
        double udf_sum = 0.0;
        std::size_t udf_count = 0;
        double ap_sum = 0.0;
        std::size_t ap_count = 0;
        double gda_sum = 0.0;
        std::size_t gda_count = 0;
    };

    // One shape's contribution to a step: backward over its point batch plus
    // (when trainable) the anchor head; accumulates into grads.
    void shape_step(std::size_t shape_index, const std::vector<std::size_t>& batch,
                    bool gda_on, bool frozen, StepGrads& grads, EpochAccum& accum) {
        const ShapeEntry& shape = shapes_[shape_index];
        const TrainingSet& set = sets_[shape_index];
        const double delta = mcfg_.delta;
        const double gda_band = tcfg_.resolved_gda_band(delta);
        const int threads = resolve_threads(tcfg_.threads);

        // Anchor source and density grid (constant per shape unless the head
        // feeds the grid and keeps training).
        Tensor density;
        if (mcfg_.use_predicted_anchors_in_training && !frozen) {
            density = voxelize_anchors(predict_anchors(mcfg_, params_, shape.conditioning),
                                       mcfg_.grid_res);
        } else {
            if (!density_cache_[shape_index].defined()) {
                AnchorSet anchors = mcfg_.use_predicted_anchors_in_training
                                        ? predict_anchors(mcfg_, params_, shape.conditioning)
                                        : shape.anchor_targets;
                density_cache_[shape_index] = voxelize_anchors(anchors, mcfg_.grid_res);
            }
            density = density_cache_[shape_index];
        }

        // Feature grid: through a conv tape when the encoder is training,
        // from the frozen cache otherwise.
        Tensor grid_value;
        std::unique_ptr<Tape> conv_tape;
        std::vector<NodeRef> conv_k, conv_b;
        NodeRef grid_node;
        if (frozen) {
            if (!frozen_grid_cache_[shape_index].defined())
                frozen_grid_cache_[shape_index] =
                    compute_feature_grid(mcfg_, params_, density, threads);
            grid_value = frozen_grid_cache_[shape_index];
        } else {
            conv_tape = std::make_unique<Tape>();
            for (std::size_t l = 0; l < params_.conv_kernels.size(); ++l) {
                conv_k.push_back(conv_tape->param(params_.conv_kernels[l]));
                conv_b.push_back(conv_tape->param(params_.conv_biases[l]));
            }
            grid_node = build_encoder(*conv_tape, mcfg_, conv_k, conv_b,
                                      conv_tape->constant(density), threads);
            grid_value = conv_tape->value(grid_node);
        }

        // Point blocks: independent tapes, reduced in block order.
        const std::size_t block_size = 64;
        const std::size_t n_blocks = (batch.size() + block_size - 1) / block_size;
        std::vector<BlockResult> blocks(n_blocks);
        parallel_blocks(
            batch.size(), block_size,
            [&](std::size_t bi, std::size_t begin, std::size_t end) {
                Tape tape;
                DecoderNodes nodes =
                    make_decoder_nodes(tape, params_, grid_value, shape.conditioning,
                                       /*decoder_trainable=*/true, /*grid_trainable=*/!frozen,
                                       /*conditioning_trainable=*/true);
                std::vector<NodeRef> losses;
                losses.reserve(end - begin);
                BlockResult& out = blocks[bi];
                for (std::size_t i = begin; i < end; ++i) {
                    const TrainingSample& s = set.samples[batch[i]];
                    NodeRef pred =
                        build_forward(tape, mcfg_, nodes, tape.constant(Tensor::vec3(s.p)));
                    NodeRef point_loss = build_loss_udf_point(tape, pred, s.udf_raw, delta);
                    out.udf_sum += tape.value(point_loss).item();
                    if (gda_on && s.udf_raw <= gda_band) {
                        NodeRef gda =
                            build_loss_gda_point(tape, mcfg_, nodes, s.p, s.dir, tcfg_.gda_fd_step);
                        out.gda_sum += tape.value(gda).item();
                        ++out.gda_count;
                        point_loss = tape.add(point_loss, tape.scale(gda, tcfg_.lambda2));
                    }
                    losses.push_back(point_loss);
                }
                tape.backward(tape.add_n(losses));
                for (std::size_t l = 0; l < nodes.w.size(); ++l) {
                    out.decoder_w.push_back(tape.raw_grad(nodes.w[l]));
                    out.decoder_b.push_back(tape.raw_grad(nodes.b[l]));
                }
                out.conditioning = tape.raw_grad(nodes.conditioning);
                if (!frozen) out.grid = tape.raw_grad(nodes.feature_grid);
            },
            threads);

        // Ordered reduction.
        auto add_into = [](std::vector<double>& dst, const std::vector<double>& src) {
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        std::vector<double> grid_grad(frozen ? 0 : grid_value.size(), 0.0);
        for (std::size_t bi = 0; bi < n_blocks; ++bi) {
            BlockResult& blk = blocks[bi];
            for (std::size_t l = 0; l < params_.decoder_w.size(); ++l) {
                add_into(grads.buffer("decoder" + std::to_string(l) + ".weight",
                                      params_.decoder_w[l].size()),
                         blk.decoder_w[l]);
                add_into(grads.buffer("decoder" + std::to_string(l) + ".bias",
                                      params_.decoder_b[l].size()),
                         blk.decoder_b[l]);
            }
            add_into(grads.buffer("shape" + std::to_string(shape_index) + ".conditioning",
                                  shape.conditioning.size()),
                     blk.conditioning);
            if (!frozen) add_into(grid_grad, blk.grid);
            accum.udf_sum += blk.udf_sum;
            accum.gda_sum += blk.gda_sum;
            accum.gda_count += blk.gda_count;
        }
        accum.udf_count += batch.size();

        if (!frozen) {
            Tensor seed = Tensor::zeros(grid_value.shape());
            std::copy(grid_grad.begin(), grid_grad.end(), seed.mutable_data());
            conv_tape->backward_seeded(grid_node, seed);
            for (std::size_t l = 0; l < params_.conv_kernels.size(); ++l) {
                add_into(grads.buffer("conv" + std::to_string(l) + ".weight",
                                      params_.conv_kernels[l].size()),
                         conv_tape->raw_grad(conv_k[l]));
                add_into(grads.buffer("conv" + std::to_string(l) + ".bias",
                                      params_.conv_biases[l].size()),
                         conv_tape->raw_grad(conv_b[l]));
            }
        }

        // Anchor regression loss; trains only the head (conditioning input is
        // detached inside build_anchor_head).
        if (!frozen) {
            Tape tape;
            AnchorHeadNodes head =
                build_anchor_head(tape, mcfg_, params_, shape.conditioning, true);
            NodeRef lap = tape.chamfer_to(head.output, shape.anchor_targets.points);
            accum.ap_sum += tape.value(lap).item();
            ++accum.ap_count;
            tape.backward(tape.scale(lap, tcfg_.lambda1));
            add_into(grads.buffer("anchor.w1", params_.anchor_w1.size()), tape.raw_grad(head.w1));
            add_into(grads.buffer("anchor.b1", params_.anchor_b1.size()), tape.raw_grad(head.b1));
            add_into(grads.buffer("anchor.w2", params_.anchor_w2.size()), tape.raw_grad(head.w2));
            add_into(grads.buffer("anchor.b2", params_.anchor_b2.size()), tape.raw_grad(head.b2));
        } else {
            accum.ap_sum +=
                loss_ap_value(predict_anchors(mcfg_, params_, shape.conditioning),
                              shape.anchor_targets);
            ++accum.ap_count;
        }
    }

    void apply_step(StepGrads& grads, double lr) {
        // Fixed walk: model params in for_each order, then shape conditioning.
        params_.for_each([&](const std::string& name, Tensor& t) {
            for (auto& [gname, buf] : grads.entries)
                if (gname == name) {
                    optimizer_.step(name, t, buf.data(), lr);
                    return;
                }
        });
        for (std::size_t i = 0; i < shapes_.size(); ++i) {
            std::string name = "shape" + std::to_string(i) + ".conditioning";
            for (auto& [gname, buf] : grads.entries)
                if (gname == name) {
                    optimizer_.step(name, shapes_[i].conditioning, buf.data(), lr);
                    break;
                }
        }
    }

    EpochStats run_epoch(std::size_t epoch) {
        const bool gda_on = gda_active(epoch);
        const bool frozen = encoders_frozen(epoch);
        const double lr = epoch_lr(epoch);
        if (!frozen)
            for (auto& g : frozen_grid_cache_) g = Tensor();  // params still moving

        // Per-shape epoch batches.
        std::vector<std::vector<std::vector<std::size_t>>> batches(sets_.size());
        std::size_t max_batches = 0;
        for (std::size_t i = 0; i < sets_.size(); ++i) {
            BatchIterator it(sets_[i].samples.size(), tcfg_.point_batch,
                             mix_seed(tcfg_.seed, kSeedBatches, i));
            batches[i] = it.epoch(epoch);
            max_batches = std::max(max_batches, batches[i].size());
        }

        EpochAccum accum;
        for (std::size_t b = 0; b < max_batches; ++b) {
            for (std::size_t group = 0; group < sets_.size(); group += tcfg_.shapes_per_step) {
                StepGrads grads;
                bool any = false;
                for (std::size_t s = group;
                     s < std::min(sets_.size(), group + tcfg_.shapes_per_step); ++s) {
                    if (b >= batches[s].size()) continue;
                    shape_step(s, batches[s][b], gda_on, frozen, grads, accum);
                    any = true;
                }
                if (!any) continue;
                check_finite(grads, epoch, b);
                apply_step(grads, lr);
            }
        }

        EpochStats stats;
        stats.loss_udf_mean = accum.udf_count ? accum.udf_sum / accum.udf_count : 0.0;
        stats.loss_ap = accum.ap_count ? accum.ap_sum / accum.ap_count : 0.0;
        stats.loss_gda_mean = accum.gda_count ? accum.gda_sum / accum.gda_count : 0.0;
        stats.mean_cos = epoch_mean_cos();
        if (!std::isfinite(stats.loss_udf_mean) || !std::isfinite(stats.loss_ap) ||
            !std::isfinite(stats.loss_gda_mean))
            throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                               " (udf=" + std::to_string(stats.loss_udf_mean) +
                               ", ap=" + std::to_string(stats.loss_ap) +
                               ", gda=" + std::to_string(stats.loss_gda_mean) + ")");
        return stats;
    }

    void check_finite(const StepGrads& grads, std::size_t epoch, std::size_t step) const {
        for (const auto& [name, buf] : grads.entries)
            for (double v : buf)
                if (!std::isfinite(v))
                    throw NumericError("fit: non-finite gradient for " + name + " at epoch " +
                                       std::to_string(epoch) + " step " + std::to_string(step));
    }

    // Alignment probe on a fixed subset of shape 0, for the metrics log.
    double epoch_mean_cos() {
        FieldEvaluator field = make_evaluator(0, mcfg_.use_predicted_anchors_in_training);
        return mean_cosine_alignment(field, sets_[0].samples, 0.005, 0.1, 256);
    }

    ModelConfig mcfg_;
    TrainConfig tcfg_;
    std::vector<TrainingSet> sets_;
    ModelParams params_;
    std::vector<ShapeEntry> shapes_;
    std::vector<EpochStats> history_;
    std::size_t epochs_completed_ = 0;
    RmsProp optimizer_;
    std::vector<Tensor> density_cache_;
    std::vector<Tensor> frozen_grid_cache_;
};

}  // namespace audf
