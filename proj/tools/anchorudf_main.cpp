// anchorudf: command-line pipeline around the anchored-UDF library.
// Subcommands: synth, sample, fit, extract, eval, ablate-anchors.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anchorudf/anchorudf.hpp"

namespace {

using namespace audf;

SamplingMixture parse_mixture(const std::string& spec) {
    if (spec.empty()) return SamplingMixture::defaults();
    SamplingMixture m;
    std::istringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw CLI::ValidationError("--mixture", "expected fraction:sigma pairs");
        m.components.push_back(
            {std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
    }
    m.validate();
    return m;
}

std::vector<std::size_t> parse_k_list(const std::string& spec) {
    std::vector<std::size_t> ks;
    std::istringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) ks.push_back(std::stoul(item));
    if (ks.empty()) throw CLI::ValidationError("--k-list", "no anchor counts given");
    return ks;
}

struct FitOptions {
    std::vector<std::string> mesh_paths;
    std::vector<std::string> set_paths;
    std::string out_path = "model.ckpt";
    std::string metrics_path;
    std::string resume_path;
    ModelConfig model;
    TrainConfig train;
    std::size_t n_samples = 5000;
    std::size_t kmeans_samples = 30000;
    int kmeans_iters = 100;
    std::string mixture_spec;
    bool no_freeze = false;
    std::string conditioning = "latent_code";
};

void add_fit_options(CLI::App* cmd, FitOptions& o) {
    cmd->add_option("--mesh", o.mesh_paths, "ground-truth OBJ mesh(es), one per shape");
    cmd->add_option("--set", o.set_paths, "precomputed training-set file(s), one per shape");
    cmd->add_option("--out", o.out_path, "checkpoint output path");
    cmd->add_option("--metrics", o.metrics_path, "per-epoch metrics CSV path");
    cmd->add_option("--resume", o.resume_path, "checkpoint to resume from");
    cmd->add_option("--anchors", o.model.k_anchors, "anchor point count");
    cmd->add_option("--grid-res", o.model.grid_res, "anchor voxel grid resolution");
    cmd->add_option("--latent-dim", o.model.latent_dim, "latent code dimension");
    cmd->add_option("--conditioning", o.conditioning, "latent_code or pixel_aligned");
    cmd->add_option("--delta", o.model.delta, "UDF clamp value");
    cmd->add_option("--lambda1", o.train.lambda1, "anchor loss weight");
    cmd->add_option("--lambda2", o.train.lambda2, "gradient-direction loss weight");
    cmd->add_option("--lr", o.train.lr, "learning rate");
    cmd->add_option("--epochs", o.train.epochs, "epoch count");
    cmd->add_option("--batch", o.train.point_batch, "points per batch");
    cmd->add_option("--gda-start", o.train.gda_start_epoch,
                    "epoch at which the gradient-direction loss joins");
    cmd->add_option("--lr-decay-epoch", o.train.lr_decay_epoch, "epoch of the x0.1 lr decay");
    cmd->add_option("--gda-step", o.train.gda_fd_step, "finite-difference step for the GDA loss");
    cmd->add_option("--gda-band", o.train.gda_max_distance,
                    "max true distance of samples entering the GDA loss (default: delta)");
    cmd->add_flag("--no-freeze", o.no_freeze, "keep training encoders during the GDA phase");
    cmd->add_option("--samples", o.n_samples, "training samples per shape (when fitting a mesh)");
    cmd->add_option("--kmeans-samples", o.kmeans_samples, "surface samples for anchor targets");
    cmd->add_option("--mixture", o.mixture_spec, "sampling mixture fraction:sigma[,...]");
    cmd->add_option("--seed", o.train.seed, "random seed");
    cmd->add_option("--threads", o.train.threads, "worker threads (0 = hardware)");
    cmd->set_config("--config");
}

// Builds per-shape training sets and anchor targets. A mesh input samples
// everything fresh; a set file recovers exact surface points through the
// projection identity p - udf_raw * dir.
void prepare_shapes(const FitOptions& o, std::vector<TrainingSet>& sets,
                    std::vector<AnchorSet>& targets, std::vector<std::string>& ids) {
    const SamplingMixture mixture = parse_mixture(o.mixture_spec);
    if (o.mesh_paths.empty() && o.set_paths.empty())
        throw CLI::ValidationError("fit", "need --mesh and/or --set");
    if (!o.mesh_paths.empty() && !o.set_paths.empty() &&
        o.mesh_paths.size() != o.set_paths.size())
        throw CLI::ValidationError("fit", "--mesh and --set counts differ");

    const std::size_t n_shapes = std::max(o.mesh_paths.size(), o.set_paths.size());
    for (std::size_t i = 0; i < n_shapes; ++i) {
        std::uint64_t shape_seed = mix_seed(o.train.seed, 0x5a5a, i);
        TrainingSet set;
        std::vector<Vec3> surface_points;
        std::string id;
        if (i < o.mesh_paths.size()) {
            TriangleMesh mesh = load_obj(o.mesh_paths[i]);
            auto [normalized, tf] = normalize_mesh(mesh);
            (void)tf;
            SpatialIndex index(normalized);
            if (i < o.set_paths.size()) {
                set = load_training_set(o.set_paths[i]);
            } else {
                GenerateOptions gen;
                gen.threads = o.train.threads;
                set = generate_training_set(index, normalized, o.n_samples, mixture,
                                            o.model.delta, shape_seed, gen);
                set.mesh_id = o.mesh_paths[i];
            }
            auto samples = sample_surface(normalized, o.kmeans_samples, mix_seed(shape_seed, 0xa));
            surface_points.reserve(samples.size());
            for (const auto& s : samples) surface_points.push_back(s.point);
            id = o.mesh_paths[i];
        } else {
            set = load_training_set(o.set_paths[i]);
            surface_points.reserve(set.samples.size());
            for (const auto& s : set.samples)
                surface_points.push_back(s.p - s.dir * s.udf_raw);
            id = set.mesh_id.empty() ? o.set_paths[i] : set.mesh_id;
        }
        if (surface_points.size() < o.model.k_anchors)
            throw DataError("fit: not enough surface points for k-means (k=" +
                            std::to_string(o.model.k_anchors) + ")");
        KMeansResult km = kmeans_anchors(surface_points, o.model.k_anchors, o.kmeans_iters,
                                         mix_seed(shape_seed, 0xb));
        sets.push_back(std::move(set));
        targets.push_back(std::move(km.anchors));
        ids.push_back(std::move(id));
    }
}

void prepare_shapes_for_resume(const FitOptions& o, const Checkpoint& ckpt,
                               std::vector<TrainingSet>& sets);

int run_fit(FitOptions& o) {
    o.model.conditioning = conditioning_mode_from_string(o.conditioning);
    o.train.freeze_encoders_during_gda = !o.no_freeze;

    std::vector<TrainingSet> sets;
    std::vector<AnchorSet> targets;
    std::vector<std::string> ids;

    std::ofstream metrics;
    if (!o.metrics_path.empty()) {
        metrics.open(o.metrics_path);
        if (!metrics) throw DataError("cannot open metrics CSV: " + o.metrics_path);
        metrics << "epoch,loss_udf,loss_ap,loss_gda,mean_cos,seconds\n";
    }

    auto make_trainer = [&]() -> Trainer {
        if (!o.resume_path.empty()) {
            Checkpoint ckpt = load_checkpoint(o.resume_path);
            prepare_shapes_for_resume(o, ckpt, sets);
            return Trainer::resume(ckpt, std::move(sets));
        }
        prepare_shapes(o, sets, targets, ids);
        return Trainer(o.model, o.train, std::move(sets), std::move(targets), std::move(ids));
    };
    Trainer trainer = make_trainer();

    trainer.run([&](std::size_t epoch, const EpochStats& stats, double seconds) {
        std::printf("epoch %zu  udf %.6f  ap %.6f  gda %.6f  cos %.4f  (%.1fs)\n", epoch,
                    stats.loss_udf_mean, stats.loss_ap, stats.loss_gda_mean, stats.mean_cos,
                    seconds);
        std::fflush(stdout);
        if (metrics.is_open()) {
            char line[256];
            std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.3f\n", epoch,
                          stats.loss_udf_mean, stats.loss_ap, stats.loss_gda_mean, stats.mean_cos,
                          seconds);
            metrics << line;
            metrics.flush();
        }
        save_checkpoint(trainer.make_checkpoint(), o.out_path);
    });
    save_checkpoint(trainer.make_checkpoint(), o.out_path);
    std::printf("checkpoint written: %s\n", o.out_path.c_str());
    return 0;
}

// Resume needs training sets aligned with the checkpoint's shapes; they are
// regenerated from the same inputs (deterministic per seed) or reloaded.
void prepare_shapes_for_resume(const FitOptions& o, const Checkpoint& ckpt,
                               std::vector<TrainingSet>& sets) {
    FitOptions replay = o;
    replay.train = ckpt.train;
    replay.model = ckpt.model;
    std::vector<AnchorSet> targets;
    std::vector<std::string> ids;
    prepare_shapes(replay, sets, targets, ids);
    if (sets.size() != ckpt.shapes.size())
        throw DataError("resume: shape count mismatch with checkpoint");
}

struct ExtractOptions {
    std::string ckpt_path;
    std::string out_path = "cloud.ply";
    ExtractConfig cfg;
    std::uint64_t seed = 42;
    std::size_t shape = 0;
    std::string anchors_from = "predicted";
};

int run_extract(ExtractOptions& o) {
    Checkpoint ckpt = load_checkpoint(o.ckpt_path);
    if (o.shape >= ckpt.shapes.size()) throw DataError("extract: shape index out of range");
    const ShapeEntry& shape = ckpt.shapes[o.shape];
    AnchorSet anchors = o.anchors_from == "target"
                            ? shape.anchor_targets
                            : predict_anchors(ckpt.model, ckpt.params, shape.conditioning);
    Tensor density = voxelize_anchors(anchors, ckpt.model.grid_res);
    Tensor grid = compute_feature_grid(ckpt.model, ckpt.params, density,
                                       resolve_threads(o.cfg.threads));
    FieldEvaluator field(ckpt.model, ckpt.params, std::move(grid), shape.conditioning);
    ExtractResult result = extract_dense_cloud(make_field(field), o.cfg, o.seed);
    save_ply(result.points, o.out_path);
    std::printf("extracted %zu points in %d rounds -> %s\n", result.points.size(), result.rounds,
                o.out_path.c_str());
    if (result.degenerate)
        std::fprintf(stderr, "warning: degenerate field (nearly all round-1 points valid)\n");
    if (result.shortfall)
        std::fprintf(stderr, "warning: shortfall, %zu of %zu requested points\n",
                     result.points.size(), o.cfg.target_points);
    return 0;
}

struct EvalOptions {
    std::string pred_path;
    std::string gt_path;
    std::string csv_path;
    std::size_t gt_samples = 50000;
    std::uint64_t seed = 42;
    bool no_normalize = false;
};

int run_eval(EvalOptions& o) {
    std::vector<Vec3> pred = load_ply(o.pred_path);
    TriangleMesh gt = load_obj(o.gt_path);
    if (!o.no_normalize) gt = normalize_mesh(gt).first;
    SpatialIndex index(gt);
    auto samples = sample_surface(gt, o.gt_samples, o.seed);
    std::vector<Vec3> gt_cloud;
    gt_cloud.reserve(samples.size());
    for (const auto& s : samples) gt_cloud.push_back(s.point);

    double chamfer = chamfer_eval(pred, gt_cloud);
    double p2s_val = p2s(pred, index);
    std::printf("%-10s %14s %14s\n", "metric", "value", "value_x1e3");
    std::printf("%-10s %14.8f %14.5f\n", "chamfer", chamfer, chamfer * 1e3);
    std::printf("%-10s %14.8f %14.5f\n", "p2s", p2s_val, p2s_val * 1e3);
    if (!o.csv_path.empty()) {
        std::ofstream csv(o.csv_path);
        if (!csv) throw DataError("cannot open CSV: " + o.csv_path);
        csv << "chamfer,p2s,chamfer_x1e3,p2s_x1e3\n";
        char line[256];
        std::snprintf(line, sizeof line, "%.17g,%.17g,%.6f,%.6f\n", chamfer, p2s_val,
                      chamfer * 1e3, p2s_val * 1e3);
        csv << line;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"anchored unsigned distance functions: synthesis, training, extraction"};
    app.require_subcommand(1);

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "generate a normalized synthetic open surface");
    std::string synth_kind = "hemisphere";
    int synth_res = 32;
    SyntheticParams synth_params;
    std::string synth_out = "shape.obj";
    bool synth_no_normalize = false;
    synth->add_option("--kind", synth_kind, "sphere, hemisphere, patch or open_cylinder");
    synth->add_option("--res", synth_res, "resolution (>= 2)");
    synth->add_option("--radius", synth_params.radius, "radius");
    synth->add_option("--height", synth_params.height, "cylinder height");
    synth->add_option("--size-x", synth_params.size_x, "patch x size");
    synth->add_option("--size-y", synth_params.size_y, "patch y size");
    synth->add_option("--out", synth_out, "output OBJ path");
    synth->add_flag("--no-normalize", synth_no_normalize, "keep raw model units");
    synth->set_config("--config");

    // --- sample ---
    auto* sample = app.add_subcommand("sample", "generate a training-set file from a mesh");
    std::string sample_mesh, sample_out = "train.set";
    std::size_t sample_n = 5000;
    double sample_delta = 0.2;
    std::string sample_mixture;
    std::uint64_t sample_seed = 42;
    int sample_threads = 0;
    bool sample_no_normalize = false;
    sample->add_option("--mesh", sample_mesh, "input OBJ mesh")->required();
    sample->add_option("--out", sample_out, "output training-set path");
    sample->add_option("--n", sample_n, "sample count");
    sample->add_option("--delta", sample_delta, "UDF clamp value");
    sample->add_option("--mixture", sample_mixture, "fraction:sigma[,...]");
    sample->add_option("--seed", sample_seed, "random seed");
    sample->add_option("--threads", sample_threads, "worker threads");
    sample->add_flag("--no-normalize", sample_no_normalize, "skip mesh normalization");
    sample->set_config("--config");

    // --- fit ---
    auto* fit = app.add_subcommand("fit", "train the anchored distance model");
    FitOptions fit_opts;
    add_fit_options(fit, fit_opts);

    // --- extract ---
    auto* extract = app.add_subcommand("extract", "project a dense point cloud from a checkpoint");
    ExtractOptions ex_opts;
    extract->add_option("--ckpt", ex_opts.ckpt_path, "checkpoint path")->required();
    extract->add_option("--out", ex_opts.out_path, "output PLY path");
    extract->add_option("--steps", ex_opts.cfg.steps, "projection steps");
    extract->add_option("--valid", ex_opts.cfg.valid_distance, "valid distance filter");
    extract->add_option("--n-init", ex_opts.cfg.n_init, "initial candidate count");
    extract->add_option("--target", ex_opts.cfg.target_points, "output point count");
    extract->add_option("--jitter", ex_opts.cfg.jitter_sigma, "densification jitter sigma");
    extract->add_option("--rounds", ex_opts.cfg.max_rounds, "max densification rounds");
    extract->add_option("--seed", ex_opts.seed, "random seed");
    extract->add_option("--shape", ex_opts.shape, "shape index in the checkpoint");
    extract->add_option("--anchors-from", ex_opts.anchors_from, "predicted or target");
    extract->add_option("--threads", ex_opts.cfg.threads, "worker threads");
    extract->set_config("--config");

    // --- eval ---
    auto* evalc = app.add_subcommand("eval", "chamfer / point-to-surface metrics");
    EvalOptions ev_opts;
    evalc->add_option("--pred", ev_opts.pred_path, "predicted PLY cloud")->required();
    evalc->add_option("--gt", ev_opts.gt_path, "ground-truth OBJ mesh")->required();
    evalc->add_option("--gt-samples", ev_opts.gt_samples, "surface samples for the gt cloud");
    evalc->add_option("--seed", ev_opts.seed, "random seed");
    evalc->add_option("--csv", ev_opts.csv_path, "CSV output path");
    evalc->add_flag("--no-normalize", ev_opts.no_normalize, "evaluate in raw gt units");
    evalc->set_config("--config");

    // --- ablate-anchors ---
    auto* ablate = app.add_subcommand("ablate-anchors", "anchor-count sweep: fit+extract+eval");
    FitOptions ab_fit;
    std::string ab_klist = "100,300,600,900";
    std::string ab_out = "ablation.csv";
    ExtractOptions ab_ex;
    std::size_t ab_gt_samples = 50000;
    add_fit_options(ablate, ab_fit);
    ablate->add_option("--k-list", ab_klist, "comma-separated anchor counts");
    ablate->add_option("--ablation-out", ab_out, "ablation CSV path");
    ablate->add_option("--extract-target", ab_ex.cfg.target_points, "points per extraction");
    ablate->add_option("--extract-n-init", ab_ex.cfg.n_init, "initial candidates per extraction");
    ablate->add_option("--steps", ab_ex.cfg.steps, "projection steps");
    ablate->add_option("--valid", ab_ex.cfg.valid_distance, "valid distance filter");
    ablate->add_option("--gt-samples", ab_gt_samples, "surface samples for the gt cloud");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) {
            TriangleMesh mesh = make_synthetic(synthetic_kind_from_string(synth_kind), synth_res,
                                               synth_params);
            if (!synth_no_normalize) mesh = normalize_mesh(mesh).first;
            save_obj(mesh, synth_out);
            std::printf("wrote %s: %zu vertices, %zu triangles, %zu boundary edges\n",
                        synth_out.c_str(), mesh.vertex_count(), mesh.triangle_count(),
                        count_boundary_edges(mesh));
            return 0;
        }
        if (sample->parsed()) {
            TriangleMesh mesh = load_obj(sample_mesh);
            if (!sample_no_normalize) mesh = normalize_mesh(mesh).first;
            SpatialIndex index(mesh);
            GenerateOptions gen;
            gen.threads = sample_threads;
            TrainingSet set = generate_training_set(index, mesh, sample_n,
                                                    parse_mixture(sample_mixture), sample_delta,
                                                    sample_seed, gen);
            set.mesh_id = sample_mesh;
            save_training_set(set, sample_out);
            std::printf("wrote %s: %zu samples, delta %.3f\n", sample_out.c_str(),
                        set.samples.size(), set.delta);
            return 0;
        }
        if (fit->parsed()) return run_fit(fit_opts);
        if (extract->parsed()) return run_extract(ex_opts);
        if (evalc->parsed()) return run_eval(ev_opts);
        if (ablate->parsed()) {
            std::ofstream csv(ab_out);
            if (!csv) throw DataError("cannot open ablation CSV: " + ab_out);
            csv << "k,chamfer,p2s,chamfer_x1e3,p2s_x1e3\n";
            for (std::size_t k : parse_k_list(ab_klist)) {
                FitOptions run = ab_fit;
                run.model.k_anchors = k;
                std::string stem = ab_out + ".k" + std::to_string(k);
                run.out_path = stem + ".ckpt";
                run.metrics_path.clear();
                std::printf("== anchors k=%zu ==\n", k);
                run_fit(run);

                ExtractOptions ex = ab_ex;
                ex.ckpt_path = run.out_path;
                ex.out_path = stem + ".ply";
                ex.seed = run.train.seed;
                ex.cfg.threads = run.train.threads;
                run_extract(ex);

                std::vector<Vec3> pred = load_ply(ex.out_path);
                if (run.mesh_paths.empty())
                    throw DataError("ablate-anchors: needs --mesh for evaluation");
                TriangleMesh gt = normalize_mesh(load_obj(run.mesh_paths[0])).first;
                SpatialIndex index(gt);
                auto surf = sample_surface(gt, ab_gt_samples, run.train.seed);
                std::vector<Vec3> gt_cloud;
                gt_cloud.reserve(surf.size());
                for (const auto& s : surf) gt_cloud.push_back(s.point);
                double chamfer = chamfer_eval(pred, gt_cloud);
                double p2s_val = p2s(pred, index);
                char line[256];
                std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.6f,%.6f\n", k, chamfer,
                              p2s_val, chamfer * 1e3, p2s_val * 1e3);
                csv << line;
                csv.flush();
                std::printf("k=%zu chamfer %.8f p2s %.8f\n", k, chamfer, p2s_val);
            }
            return 0;
        }
    } catch (const CLI::Error& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    }
    return 0;
}
