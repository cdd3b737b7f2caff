#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace audf;

namespace {

// Analytic unit-sphere UDF with its exact gradient.
FieldSample sphere_field(const Vec3& p) {
    double r = p.norm();
    double d = std::abs(r - 1.0);
    if (r == 0.0) return {1.0, {0, 0, 0}};
    Vec3 g = p / r * (r > 1.0 ? 1.0 : -1.0);
    return {d, g};
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("project_point on the analytic sphere") {
    SECTION("one step from (0,0,2) lands on (0,0,1)") {
        ProjectedPoint out = project_point(sphere_field, Vec3{0, 0, 2}, 1);
        CHECK(out.ok);
        CHECK((out.p - Vec3{0, 0, 1}).norm() <= 1e-9);
    }
    SECTION("surface points are fixed points") {
        Vec3 on{0, 1, 0};
        ProjectedPoint out = project_point(sphere_field, on, 5);
        CHECK((out.p - on).norm() <= 1e-15);
    }
    SECTION("split value/gradient overload agrees") {
        auto udf = [](const Vec3& p) { return sphere_field(p).first; };
        auto grad = [](const Vec3& p) { return sphere_field(p).second; };
        ProjectedPoint a = project_point(sphere_field, Vec3{0.3, -1.4, 0.2}, 3);
        ProjectedPoint b = project_point(udf, grad, Vec3{0.3, -1.4, 0.2}, 3);
        CHECK((a.p - b.p).norm() == 0.0);
    }
    SECTION("zero gradient stalls and flags") {
        auto flat = [](const Vec3&) -> FieldSample { return {0.5, {0, 0, 0}}; };
        ProjectedPoint out = project_point(flat, Vec3{0.1, 0.2, 0.3}, 5);
        CHECK_FALSE(out.ok);
        CHECK((out.p - Vec3{0.1, 0.2, 0.3}).norm() == 0.0);
    }
}

TEST_CASE("exact-oracle projection is a one-step exact solve") {
    TriangleMesh mesh = testutil::normalized_hemisphere(24);
    SpatialIndex index(mesh);
    FieldFn field = make_exact_field(index);
    Rng rng(5);
    int tested = 0;
    while (tested < 1000) {
        Vec3 p = rng.uniform_vec3(-0.5, 0.5);
        if (udf_exact(index, p) <= kDirectionEpsilon) continue;
        ProjectedPoint out = project_point(field, p, 1);
        CHECK(udf_exact(index, out.p) <= 1e-9);
        ++tested;
    }
}

TEST_CASE("exact-oracle distance never increases across projection steps") {
    TriangleMesh mesh = testutil::normalized_hemisphere(16);
    SpatialIndex index(mesh);
    FieldFn field = make_exact_field(index);
    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        Vec3 p = rng.uniform_vec3(-0.5, 0.5);
        double prev = udf_exact(index, p);
        for (int s = 0; s < 5; ++s) {
            p = project_point(field, p, 1).p;
            double now = udf_exact(index, p);
            CHECK(now <= prev + 1e-12);
            prev = now;
        }
    }
}

TEST_CASE("extract_dense_cloud with the exact hemisphere oracle") {
    TriangleMesh mesh = testutil::normalized_hemisphere(24);
    SpatialIndex index(mesh);
    FieldFn field = make_exact_field(index);

    ExtractConfig cfg;
    cfg.n_init = 4000;
    cfg.target_points = 10000;
    cfg.valid_distance = 0.007;
    cfg.max_rounds = 10;
    ExtractResult result = extract_dense_cloud(field, cfg, 42);

    REQUIRE(!result.points.empty());
    CHECK_FALSE(result.degenerate);
    SECTION("every output point lies within valid distance of the true surface") {
        for (const Vec3& p : result.points) CHECK(udf_exact(index, p) < cfg.valid_distance);
    }
    SECTION("the boundary stays open: nothing extracted below the rim plane") {
        double min_z = mesh.bounds().lo.z;
        for (const Vec3& p : result.points) CHECK(p.z >= min_z - cfg.valid_distance);
    }
    SECTION("densification reaches the target or flags a shortfall") {
        CHECK((result.points.size() == cfg.target_points || result.shortfall));
    }
    SECTION("determinism across runs and thread counts") {
        ExtractConfig c1 = cfg;
        c1.threads = 1;
        ExtractConfig c4 = cfg;
        c4.threads = 4;
        ExtractResult a = extract_dense_cloud(field, c1, 7);
        ExtractResult b = extract_dense_cloud(field, c4, 7);
        REQUIRE(a.points.size() == b.points.size());
        for (std::size_t i = 0; i < a.points.size(); ++i) CHECK(a.points[i] == b.points[i]);
    }
}

TEST_CASE("identically-zero fields are flagged degenerate") {
    auto zero_field = [](const Vec3&) -> FieldSample { return {0.0, {0, 0, 0}}; };
    ExtractConfig cfg;
    cfg.n_init = 500;
    cfg.target_points = 400;
    ExtractResult result = extract_dense_cloud(zero_field, cfg, 1);
    CHECK(result.degenerate);
    CHECK(result.points.size() == cfg.target_points);
}

TEST_CASE("a field that never dips below the valid distance raises a numeric failure") {
    auto far_field = [](const Vec3& p) -> FieldSample { return {0.5, {0, 0, 1}}; };
    ExtractConfig cfg;
    cfg.n_init = 100;
    CHECK_THROWS_AS(extract_dense_cloud(far_field, cfg, 1), NumericError);
}

TEST_CASE("PLY files round-trip bitwise") {
    Rng rng(9);
    std::vector<Vec3> cloud;
    for (int i = 0; i < 257; ++i) cloud.push_back(rng.uniform_vec3(-1, 1));
    std::string p1 = tmp_path("cloud_a.ply");
    std::string p2 = tmp_path("cloud_b.ply");
    save_ply(cloud, p1);
    std::vector<Vec3> back = load_ply(p1);
    REQUIRE(back.size() == cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(back[i] == cloud[i]);
    save_ply(back, p2);

    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
    std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
    CHECK(bytes_a == bytes_b);

    SECTION("empty clouds are valid") {
        std::string pe = tmp_path("cloud_empty.ply");
        save_ply({}, pe);
        CHECK(load_ply(pe).empty());
    }
    SECTION("truncated files raise a parse error") {
        std::string pt = tmp_path("cloud_trunc.ply");
        std::ofstream out(pt, std::ios::binary);
        out.write(bytes_a.data(), static_cast<std::streamsize>(bytes_a.size() - 16));
        out.close();
        CHECK_THROWS_AS(load_ply(pt), DataError);
    }
    SECTION("garbage headers raise a parse error") {
        std::string pg = tmp_path("cloud_garbage.ply");
        std::ofstream out(pg);
        out << "not a ply\n";
        out.close();
        CHECK_THROWS_AS(load_ply(pg), DataError);
    }
}
