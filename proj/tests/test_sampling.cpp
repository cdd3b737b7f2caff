#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "helpers.hpp"

using namespace audf;

TEST_CASE("mixture component counts are exact under largest remainder") {
    SamplingMixture mix = SamplingMixture::defaults();
    auto counts = mix.counts(5000);
    REQUIRE(counts.size() == 3);
    CHECK(counts[0] == 50);
    CHECK(counts[1] == 2450);
    CHECK(counts[2] == 2500);

    auto odd = mix.counts(333);
    CHECK(odd[0] + odd[1] + odd[2] == 333);
}

TEST_CASE("mixture validation") {
    SamplingMixture bad_sum{{{0.5, 0.1}, {0.4, 0.1}}};
    CHECK_THROWS_AS(bad_sum.validate(), std::invalid_argument);
    SamplingMixture bad_sigma{{{1.0, 0.0}}};
    CHECK_THROWS_AS(bad_sigma.validate(), std::invalid_argument);
    CHECK_NOTHROW(SamplingMixture::defaults().validate());
}

TEST_CASE("generate_training_set: invariants on the normalized hemisphere") {
    TriangleMesh mesh = testutil::normalized_hemisphere(24);
    SpatialIndex index(mesh);
    TrainingSet set = generate_training_set(index, mesh, 5000, SamplingMixture::defaults(), 0.2, 42);

    REQUIRE(set.samples.size() == 5000);
    CHECK(set.delta == 0.2);

    SECTION("clamp identity and direction norms") {
        for (const auto& s : set.samples) {
            CHECK(s.udf_clamped == std::min(s.udf_raw, 0.2));
            CHECK(s.udf_raw > kDirectionEpsilon);
            CHECK(std::abs(s.dir.norm() - 1.0) <= 1e-9);
        }
    }
    SECTION("projection identity: p - udf_raw * dir lands on the surface") {
        for (std::size_t i = 0; i < set.samples.size(); i += 17) {
            const auto& s = set.samples[i];
            Vec3 landed = s.p - s.dir * s.udf_raw;
            CHECK(udf_exact(index, landed) <= 1e-9);
        }
    }
    SECTION("near-surface mass: >45% of samples closer than 0.01") {
        std::size_t close = 0;
        for (const auto& s : set.samples) close += s.udf_raw < 0.01 ? 1 : 0;
        CHECK(static_cast<double>(close) / 5000.0 > 0.45);
    }
    SECTION("determinism and parallel-schedule independence") {
        GenerateOptions serial;
        serial.threads = 1;
        GenerateOptions parallel;
        parallel.threads = 4;
        TrainingSet a = generate_training_set(index, mesh, 512, SamplingMixture::defaults(), 0.2,
                                              9, serial);
        TrainingSet b = generate_training_set(index, mesh, 512, SamplingMixture::defaults(), 0.2,
                                              9, parallel);
        for (std::size_t i = 0; i < a.samples.size(); ++i) {
            CHECK(a.samples[i].p == b.samples[i].p);
            CHECK(a.samples[i].udf_raw == b.samples[i].udf_raw);
        }
    }
}

TEST_CASE("clamp applies beyond delta") {
    // A displaced point 0.35 from the surface must store udf_clamped == 0.2.
    TriangleMesh mesh = testutil::unit_quad_patch();
    SpatialIndex index(mesh);
    SamplingMixture far_mixture{{{1.0, 0.35}}};
    TrainingSet set = generate_training_set(index, mesh, 2000, far_mixture, 0.2, 4);
    bool saw_clamped = false;
    for (const auto& s : set.samples) {
        if (s.udf_raw > 0.2) {
            saw_clamped = true;
            CHECK(s.udf_clamped == 0.2);
        }
    }
    CHECK(saw_clamped);
}

TEST_CASE("zero-noise limit with the distance gate disabled") {
    TriangleMesh mesh = testutil::unit_quad_patch();
    SpatialIndex index(mesh);
    SamplingMixture zeroish{{{1.0, 1e-300}}};
    GenerateOptions opts;
    opts.min_distance = -1.0;  // test harness only
    TrainingSet set = generate_training_set(index, mesh, 64, zeroish, 0.2, 8, opts);
    for (const auto& s : set.samples) CHECK(s.udf_raw <= 1e-12);
}

TEST_CASE("training-set files round-trip") {
    TriangleMesh mesh = testutil::normalized_hemisphere(12);
    SpatialIndex index(mesh);
    TrainingSet set = generate_training_set(index, mesh, 257, SamplingMixture::defaults(), 0.2, 3);
    set.mesh_id = "hemisphere-fixture";

    std::string path = (std::filesystem::temp_directory_path() / "set_roundtrip.bin").string();
    save_training_set(set, path);
    TrainingSet back = load_training_set(path);
    REQUIRE(back.samples.size() == set.samples.size());
    CHECK(back.delta == set.delta);
    CHECK(back.seed == set.seed);
    CHECK(back.mesh_id == set.mesh_id);
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
        CHECK(back.samples[i].p == set.samples[i].p);
        CHECK(back.samples[i].udf_raw == set.samples[i].udf_raw);
        CHECK(back.samples[i].udf_clamped == set.samples[i].udf_clamped);
        CHECK(back.samples[i].dir == set.samples[i].dir);
    }

    SECTION("truncated file raises a data error") {
        std::string broken = (std::filesystem::temp_directory_path() / "set_broken.bin").string();
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(broken, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(load_training_set(broken), DataError);
    }
}

TEST_CASE("batch iterator partitions every epoch permutation") {
    BatchIterator it(10, 4, 77);
    auto batches = it.epoch(0);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size() == 4);
    CHECK(batches[1].size() == 4);
    CHECK(batches[2].size() == 2);

    std::set<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    CHECK(seen.size() == 10);

    SECTION("same seed, same order") {
        BatchIterator again(10, 4, 77);
        CHECK(again.epoch(0) == batches);
    }
    SECTION("different epochs use different permutations") {
        auto e1 = it.epoch(1);
        std::vector<std::size_t> flat0, flat1;
        for (const auto& b : batches) flat0.insert(flat0.end(), b.begin(), b.end());
        for (const auto& b : e1) flat1.insert(flat1.end(), b.begin(), b.end());
        CHECK(flat0 != flat1);
    }
}
