#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace audf;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.k_anchors = 30;
    cfg.grid_res = 8;
    cfg.conv_channels = {1, 4, 8};
    cfg.latent_dim = 16;
    cfg.decoder_layers = 6;
    cfg.decoder_hidden = 48;
    cfg.decoder_skip_layer = 3;
    cfg.anchor_hidden = 32;
    return cfg;
}

struct Fixture {
    TriangleMesh mesh;
    TrainingSet set;
    AnchorSet targets;

    static Fixture make(std::size_t n_samples = 600, std::uint64_t seed = 42) {
        Fixture f;
        f.mesh = testutil::normalized_hemisphere(16);
        SpatialIndex index(f.mesh);
        f.set = generate_training_set(index, f.mesh, n_samples, SamplingMixture::defaults(), 0.2,
                                      seed);
        auto surface = sample_surface(f.mesh, 3000, seed + 1);
        std::vector<Vec3> pts;
        for (const auto& s : surface) pts.push_back(s.point);
        f.targets = kmeans_anchors(pts, 30, 50, seed + 2).anchors;
        return f;
    }
};

TrainConfig tiny_train(std::size_t epochs, double lambda2 = 0.02) {
    TrainConfig cfg;
    cfg.lr = 1e-3;  // unit-test scale; the production default stays 5e-5
    cfg.point_batch = 200;
    cfg.epochs = epochs;
    cfg.lambda2 = lambda2;
    cfg.gda_start_epoch = epochs > 2 ? epochs - 2 : 0;
    cfg.lr_decay_epoch = epochs;  // no decay inside these short runs
    cfg.seed = 7;
    cfg.threads = 2;
    return cfg;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("loss_udf_value arithmetic") {
    std::vector<TrainingSample> samples(1);
    SECTION("equal predictions give zero") {
        samples[0].udf_raw = 0.1;
        CHECK(loss_udf_value({0.1}, samples, 0.2) == 0.0);
    }
    SECTION("both beyond delta clamp to zero") {
        samples[0].udf_raw = 0.35;
        CHECK(loss_udf_value({0.5}, samples, 0.2) == 0.0);
    }
    SECTION("plain L1 inside the band") {
        samples[0].udf_raw = 0.10;
        CHECK(loss_udf_value({0.05}, samples, 0.2) == Catch::Approx(0.05));
    }
}

TEST_CASE("clamped loss: zero value and zero gradients when both sides exceed delta") {
    ModelConfig cfg = tiny_model();
    ModelParams params = ModelParams::init(cfg, 5);
    // Final layer: zero weights, bias 0.5 -> every prediction is 0.5 > delta.
    {
        Tensor& w = params.decoder_w.back();
        std::fill(w.mutable_data(), w.mutable_data() + w.size(), 0.0);
        Tensor& b = params.decoder_b.back();
        b.mutable_data()[0] = 0.5;
    }
    Tensor cond = init_conditioning(cfg, 6);
    Tensor density = voxelize_anchors(std::vector<Vec3>{{0, 0, 0}}, cfg.grid_res);

    Tape conv_tape;
    std::vector<NodeRef> ks, bs;
    for (std::size_t l = 0; l < params.conv_kernels.size(); ++l) {
        ks.push_back(conv_tape.param(params.conv_kernels[l]));
        bs.push_back(conv_tape.param(params.conv_biases[l]));
    }
    NodeRef grid_node = build_encoder(conv_tape, cfg, ks, bs, conv_tape.constant(density));

    Tape tape;
    DecoderNodes nodes = make_decoder_nodes(tape, params, conv_tape.value(grid_node), cond,
                                            true, true, true);
    Rng rng(8);
    std::vector<NodeRef> losses;
    for (int i = 0; i < 16; ++i) {
        NodeRef pred = build_forward(tape, cfg, nodes,
                                     tape.constant(Tensor::vec3(rng.uniform_vec3(-0.4, 0.4))));
        CHECK(tape.value(pred).item() == 0.5);
        losses.push_back(build_loss_udf_point(tape, pred, rng.uniform(0.25, 0.6), cfg.delta));
    }
    NodeRef total = tape.add_n(losses);
    CHECK(tape.value(total).item() == 0.0);
    tape.backward(total);

    auto all_zero = [](const std::vector<double>& g) {
        for (double v : g)
            if (v != 0.0) return false;
        return true;
    };
    for (std::size_t l = 0; l < nodes.w.size(); ++l) {
        CHECK(all_zero(tape.raw_grad(nodes.w[l])));
        CHECK(all_zero(tape.raw_grad(nodes.b[l])));
    }
    CHECK(all_zero(tape.raw_grad(nodes.conditioning)));
    CHECK(all_zero(tape.raw_grad(nodes.feature_grid)));

    Tensor seed = Tensor::zeros(conv_tape.value(grid_node).shape());
    conv_tape.backward_seeded(grid_node, seed);
    for (std::size_t l = 0; l < ks.size(); ++l) CHECK(all_zero(conv_tape.raw_grad(ks[l])));
}

TEST_CASE("loss_gda_value behavior") {
    std::vector<TrainingSample> samples(3);
    for (int i = 0; i < 3; ++i) {
        samples[i].p = {0.1 * i, 0.05, 0.3};
        samples[i].dir = {0, 0, 1};
        samples[i].udf_raw = 0.3;
    }
    SECTION("perfectly aligned field gives ~0") {
        auto f = [](const Vec3& p) { return p.z; };  // gradient (0,0,1)
        CHECK(loss_gda_value(f, samples, 1e-3) <= 1e-12);
    }
    SECTION("anti-aligned field gives 2 per point") {
        auto f = [](const Vec3& p) { return -p.z; };
        CHECK(loss_gda_value(f, samples, 1e-3) == Catch::Approx(6.0));
    }
    SECTION("zero-gradient field counts cos as 0, loss 1 per point") {
        auto f = [](const Vec3&) { return 0.25; };
        CHECK(loss_gda_value(f, samples, 1e-3) == Catch::Approx(3.0));
    }
    SECTION("scaling the field does not change the loss") {
        auto f = [](const Vec3& p) { return std::abs(p.z) + 0.2 * p.x; };
        auto f_scaled = [&](const Vec3& p) { return 3.7 * f(p); };
        CHECK(loss_gda_value(f, samples, 1e-3) ==
              Catch::Approx(loss_gda_value(f_scaled, samples, 1e-3)).epsilon(1e-12));
    }
}

TEST_CASE("swapped-prediction counterexample: distance loss small, direction loss positive") {
    // True surface: the z=0 plane. Samples sit near p0 = (0,0,0.05); the
    // constructed field swaps the predictions of the two neighbors, flipping
    // its spatial gradient while keeping the clamped L1 error tiny.
    const double eps = 0.002;
    TrainingSample p1, p2;
    p1.p = {0, 0, 0.05 - eps};
    p1.udf_raw = 0.05 - eps;
    p1.dir = {0, 0, 1};
    p2.p = {0, 0, 0.05 + eps};
    p2.udf_raw = 0.05 + eps;
    p2.dir = {0, 0, 1};

    auto swapped = [](const Vec3& p) { return 0.05 - (p.z - 0.05); };
    CHECK(swapped(p1.p) == Catch::Approx(p2.udf_raw));
    CHECK(swapped(p2.p) == Catch::Approx(p1.udf_raw));

    std::vector<TrainingSample> samples = {p1, p2};
    double udf = loss_udf_value({swapped(p1.p), swapped(p2.p)}, samples, 0.2);
    CHECK(udf == Catch::Approx(4.0 * eps));
    CHECK(udf < 0.01);

    TrainingSample p0;
    p0.p = {0, 0, 0.05};
    p0.udf_raw = 0.05;
    p0.dir = {0, 0, 1};
    double gda = loss_gda_value(swapped, {p0, p1, p2}, 1e-4);
    CHECK(gda == Catch::Approx(6.0));  // 1 - cos = 2 per point
    CHECK(gda > 0.0);
}

TEST_CASE("total_loss weighting") {
    LossParts parts{0.5, 0.25, 2.0};
    CHECK(total_loss(parts, 0.0, 0.0) == 0.5);
    CHECK(total_loss(parts, 1.0, 0.02) == Catch::Approx(0.5 + 0.25 + 0.04));
    CHECK(total_loss({0, 0, 0}, 1.0, 0.02) == 0.0);
}

TEST_CASE("tape GDA term equals the value-form loss") {
    ModelConfig cfg = tiny_model();
    ModelParams params = ModelParams::init(cfg, 15);
    Tensor cond = init_conditioning(cfg, 16);
    Tensor grid = compute_feature_grid(
        cfg, params, voxelize_anchors(std::vector<Vec3>{{0.1, 0, 0}}, cfg.grid_res));
    FieldEvaluator field(cfg, params, grid, cond);

    TrainingSample s;
    s.p = {0.12, -0.3, 0.21};
    s.dir = Vec3{0.3, -0.5, 0.81}.normalized();
    s.udf_raw = 0.1;
    const double h = 1e-3;

    Tape tape;
    DecoderNodes nodes = make_decoder_nodes(tape, params, grid, cond, false, false, false);
    NodeRef gda = build_loss_gda_point(tape, cfg, nodes, s.p, s.dir, h);
    double via_value = loss_gda_value([&](const Vec3& p) { return field.value(p); }, {s}, h);
    CHECK(tape.value(gda).item() == Catch::Approx(via_value).epsilon(1e-12));
}

TEST_CASE("rmsprop") {
    SECTION("zero gradient leaves parameters unchanged and decays v") {
        RmsProp opt;
        Tensor p = Tensor::from({2}, {1.0, -2.0});
        std::vector<double> g1 = {1.0, 1.0};
        opt.step("p", p, g1.data(), 0.0);  // lr 0: builds state v = 0.01*g^2
        double v_before = opt.state().at("p")[0];
        std::vector<double> zero = {0.0, 0.0};
        Tensor p_before = p.clone();
        opt.step("p", p, zero.data(), 0.1);
        CHECK(p[0] == p_before[0]);
        CHECK(p[1] == p_before[1]);
        CHECK(opt.state().at("p")[0] == Catch::Approx(0.99 * v_before));
    }
    SECTION("constant gradient converges to lr-sized steps") {
        RmsProp opt;
        Tensor p = Tensor::scalar(0.0);
        std::vector<double> g = {1.0};
        const double lr = 1e-3;
        double prev = 0.0;
        double step = 0.0;
        for (int i = 0; i < 2000; ++i) {
            prev = p.data()[0];
            opt.step("p", p, g.data(), lr);
            step = std::abs(p.data()[0] - prev);
        }
        CHECK(step == Catch::Approx(lr).epsilon(1e-4));
    }
    SECTION("two runs are bitwise identical") {
        auto run = [] {
            RmsProp opt;
            Tensor p = Tensor::from({3}, {0.5, -0.25, 1.0});
            Rng rng(3);
            for (int i = 0; i < 100; ++i) {
                std::vector<double> g = {rng.normal(), rng.normal(), rng.normal()};
                opt.step("p", p, g.data(), 1e-2);
            }
            return std::vector<double>(p.data(), p.data() + 3);
        };
        CHECK(run() == run());
    }
}

TEST_CASE("checkpoints round-trip bitwise") {
    Fixture f = Fixture::make(300);
    Trainer trainer(tiny_model(), tiny_train(2), {f.set}, {f.targets}, {"fixture"});
    trainer.run();
    Checkpoint ckpt = trainer.make_checkpoint();

    std::string p1 = tmp_path("ckpt_a.bin");
    std::string p2 = tmp_path("ckpt_b.bin");
    save_checkpoint(ckpt, p1);
    Checkpoint loaded = load_checkpoint(p1);
    save_checkpoint(loaded, p2);
    CHECK(file_bytes(p1) == file_bytes(p2));
    CHECK(loaded.epochs_completed == 2);
    CHECK(loaded.shapes.size() == 1);
    CHECK(loaded.shapes[0].mesh_id == "fixture");
    CHECK(loaded.shapes[0].anchor_targets.k() == f.targets.k());
}

TEST_CASE("training reduces the distance loss on a hemisphere") {
    Fixture f = Fixture::make(600);
    TrainConfig tcfg = tiny_train(25, 0.0);
    Trainer trainer(tiny_model(), tcfg, {f.set}, {f.targets}, {"fixture"});
    trainer.run();
    const auto& hist = trainer.history();
    REQUIRE(hist.size() == 25);
    CHECK(hist.back().loss_udf_mean < 0.5 * hist.front().loss_udf_mean);

    SECTION("anchor prediction improves on its initialization") {
        ModelParams fresh = ModelParams::init(tiny_model(), tcfg.seed);
        Tensor fresh_cond = init_conditioning(tiny_model(), mix_seed(tcfg.seed, 0xc0de, 0));
        double before = loss_ap_value(predict_anchors(tiny_model(), fresh, fresh_cond), f.targets);
        double after = loss_ap_value(
            predict_anchors(tiny_model(), trainer.params(), trainer.shapes()[0].conditioning),
            f.targets);
        CHECK(after < before);
    }
}

TEST_CASE("phase-1 trajectories are identical until the GDA epoch") {
    Fixture f = Fixture::make(300);
    TrainConfig base = tiny_train(4, 0.0);
    base.gda_start_epoch = 4;

    TrainConfig with_gda = base;
    with_gda.lambda2 = 0.02;

    Trainer a(tiny_model(), base, {f.set}, {f.targets}, {"fixture"});
    a.run();
    Trainer b(tiny_model(), with_gda, {f.set}, {f.targets}, {"fixture"});
    b.run();

    // Both stopped right at the phase boundary: identical bytes.
    std::string pa = tmp_path("phase_a.bin"), pb = tmp_path("phase_b.bin");
    Checkpoint ca = a.make_checkpoint();
    Checkpoint cb = b.make_checkpoint();
    cb.train.lambda2 = ca.train.lambda2;  // configs differ by design; compare states
    save_checkpoint(ca, pa);
    save_checkpoint(cb, pb);
    CHECK(file_bytes(pa) == file_bytes(pb));
}

TEST_CASE("phase 2 freezes the conv encoder and anchor head") {
    Fixture f = Fixture::make(300);
    TrainConfig phase1_only = tiny_train(3, 0.02);
    phase1_only.gda_start_epoch = 3;
    TrainConfig through_phase2 = tiny_train(5, 0.02);
    through_phase2.gda_start_epoch = 3;

    Trainer a(tiny_model(), phase1_only, {f.set}, {f.targets}, {"fixture"});
    a.run();
    Trainer b(tiny_model(), through_phase2, {f.set}, {f.targets}, {"fixture"});
    b.run();

    // Conv and head bytes unchanged by the two phase-2 epochs.
    for (std::size_t l = 0; l < a.params().conv_kernels.size(); ++l) {
        const Tensor& ka = a.params().conv_kernels[l];
        const Tensor& kb = b.params().conv_kernels[l];
        for (std::size_t i = 0; i < ka.size(); ++i) REQUIRE(ka[i] == kb[i]);
    }
    for (std::size_t i = 0; i < a.params().anchor_w1.size(); ++i)
        REQUIRE(a.params().anchor_w1[i] == b.params().anchor_w1[i]);

    // The decoder kept training.
    bool decoder_moved = false;
    const Tensor& da = a.params().decoder_w[0];
    const Tensor& db = b.params().decoder_w[0];
    for (std::size_t i = 0; i < da.size() && !decoder_moved; ++i)
        decoder_moved = da[i] != db[i];
    CHECK(decoder_moved);
}

TEST_CASE("anchor loss trains only the head") {
    Fixture f = Fixture::make(200);
    TrainConfig with_ap = tiny_train(1, 0.0);
    TrainConfig without_ap = with_ap;
    without_ap.lambda1 = 0.0;

    Trainer a(tiny_model(), with_ap, {f.set}, {f.targets}, {"fixture"});
    a.run();
    Trainer b(tiny_model(), without_ap, {f.set}, {f.targets}, {"fixture"});
    b.run();

    // Conditioning and decoder updates are untouched by lambda1.
    const Tensor& ca = a.shapes()[0].conditioning;
    const Tensor& cb = b.shapes()[0].conditioning;
    for (std::size_t i = 0; i < ca.size(); ++i) REQUIRE(ca[i] == cb[i]);
    const Tensor& da = a.params().decoder_w[2];
    const Tensor& db = b.params().decoder_w[2];
    for (std::size_t i = 0; i < da.size(); ++i) REQUIRE(da[i] == db[i]);

    // The head, by contrast, only moves when lambda1 > 0.
    bool head_moved = false;
    const Tensor& ha = a.params().anchor_w2;
    const Tensor& hb = b.params().anchor_w2;
    for (std::size_t i = 0; i < ha.size() && !head_moved; ++i) head_moved = ha[i] != hb[i];
    CHECK(head_moved);
}

TEST_CASE("training is independent of the thread count") {
    Fixture f = Fixture::make(300);
    TrainConfig t1 = tiny_train(2);
    t1.threads = 1;
    TrainConfig t2 = tiny_train(2);
    t2.threads = 2;

    Trainer a(tiny_model(), t1, {f.set}, {f.targets}, {"fixture"});
    a.run();
    Trainer b(tiny_model(), t2, {f.set}, {f.targets}, {"fixture"});
    b.run();

    std::string pa = tmp_path("thr_a.bin"), pb = tmp_path("thr_b.bin");
    Checkpoint ca = a.make_checkpoint();
    ca.train.threads = 0;
    Checkpoint cb = b.make_checkpoint();
    cb.train.threads = 0;
    save_checkpoint(ca, pa);
    save_checkpoint(cb, pb);
    CHECK(file_bytes(pa) == file_bytes(pb));
}

TEST_CASE("resume continues bitwise identically") {
    Fixture f = Fixture::make(300);
    TrainConfig full = tiny_train(5);
    full.gda_start_epoch = 3;
    full.lr_decay_epoch = 4;

    Trainer straight(tiny_model(), full, {f.set}, {f.targets}, {"fixture"});
    straight.run();

    TrainConfig first_leg = full;
    first_leg.epochs = 2;
    Trainer partial(tiny_model(), first_leg, {f.set}, {f.targets}, {"fixture"});
    partial.run();
    Checkpoint mid = partial.make_checkpoint();
    std::string mid_path = tmp_path("resume_mid.bin");
    save_checkpoint(mid, mid_path);

    Checkpoint reloaded = load_checkpoint(mid_path);
    reloaded.train.epochs = 5;  // extend to the full schedule
    Trainer resumed = Trainer::resume(reloaded, {f.set});
    resumed.run();

    std::string pa = tmp_path("resume_a.bin"), pb = tmp_path("resume_b.bin");
    save_checkpoint(straight.make_checkpoint(), pa);
    save_checkpoint(resumed.make_checkpoint(), pb);
    CHECK(file_bytes(pa) == file_bytes(pb));
}

TEST_CASE("non-finite losses abort with a numeric failure") {
    Fixture f = Fixture::make(100);
    TrainConfig blowup = tiny_train(4, 0.0);
    blowup.lr = 1e300;
    Trainer trainer(tiny_model(), blowup, {f.set}, {f.targets}, {"fixture"});
    CHECK_THROWS_AS(trainer.run(), NumericError);
}

TEST_CASE("train config validation") {
    TrainConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    TrainConfig neg;
    neg.lambda1 = -1.0;
    CHECK_THROWS_AS(neg.validate(), std::invalid_argument);
    CHECK_NOTHROW(TrainConfig{}.validate());
}
