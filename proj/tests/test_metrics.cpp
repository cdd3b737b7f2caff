#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace audf;

namespace {

double brute_nearest_sq(const Vec3& q, const std::vector<Vec3>& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& p : pts) best = std::min(best, (q - p).squared_norm());
    return best;
}

double brute_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double sa = 0.0, sb = 0.0;
    for (const Vec3& p : a) sa += brute_nearest_sq(p, b);
    for (const Vec3& p : b) sb += brute_nearest_sq(p, a);
    return 0.5 * (sa / a.size() + sb / b.size());
}

}  // namespace

TEST_CASE("kd-tree nearest neighbors equal brute force") {
    Rng rng(3);
    for (std::size_t n : {1ul, 9ul, 200ul, 2000ul}) {
        std::vector<Vec3> pts;
        for (std::size_t i = 0; i < n; ++i) pts.push_back(rng.uniform_vec3(-1, 1));
        PointKdTree tree(pts);
        for (int q = 0; q < 200; ++q) {
            Vec3 query = rng.uniform_vec3(-1.5, 1.5);
            CHECK(tree.nearest_squared(query) == brute_nearest_sq(query, pts));
        }
    }
}

TEST_CASE("chamfer_eval") {
    SECTION("identical clouds give zero") {
        Rng rng(5);
        std::vector<Vec3> cloud;
        for (int i = 0; i < 100; ++i) cloud.push_back(rng.uniform_vec3(-1, 1));
        CHECK(chamfer_eval(cloud, cloud) == 0.0);
    }
    SECTION("single points one unit apart give 1") {
        CHECK(chamfer_eval({{0, 0, 0}}, {{1, 0, 0}}) == 1.0);
    }
    SECTION("random 200 vs 200 equals the exhaustive double loop") {
        Rng rng(7);
        std::vector<Vec3> a, b;
        for (int i = 0; i < 200; ++i) {
            a.push_back(rng.uniform_vec3(-1, 1));
            b.push_back(rng.uniform_vec3(-1, 1));
        }
        CHECK(chamfer_eval(a, b) == Catch::Approx(brute_chamfer(a, b)).epsilon(1e-14));
        CHECK(chamfer_eval(a, b) == chamfer_eval(b, a));
    }
    SECTION("empty inputs are rejected") {
        CHECK_THROWS_AS(chamfer_eval({}, {{0, 0, 0}}), std::invalid_argument);
    }
}

TEST_CASE("p2s") {
    TriangleMesh patch = testutil::unit_quad_patch();
    SpatialIndex index(patch);

    SECTION("points sampled on the surface give zero") {
        auto samples = sample_surface(patch, 500, 9);
        std::vector<Vec3> cloud;
        for (const auto& s : samples) cloud.push_back(s.point);
        CHECK(p2s(cloud, index) <= 1e-9);
    }
    SECTION("a single offset point gives its distance") {
        CHECK(p2s({{0.5, 0.5, 0.33}}, index) == Catch::Approx(0.33));
    }
    SECTION("random clouds match the brute-force per-triangle average") {
        TriangleMesh mesh = testutil::normalized_hemisphere(12);
        SpatialIndex hemi(mesh);
        Rng rng(11);
        std::vector<Vec3> cloud;
        for (int i = 0; i < 300; ++i) cloud.push_back(rng.uniform_vec3(-0.7, 0.7));
        double expected = 0.0;
        for (const Vec3& p : cloud)
            expected += testutil::brute_force_closest(mesh, p).distance;
        expected /= static_cast<double>(cloud.size());
        CHECK(p2s(cloud, hemi) == Catch::Approx(expected).epsilon(1e-12));
    }
    SECTION("empty clouds are rejected") {
        CHECK_THROWS_AS(p2s({}, index), std::invalid_argument);
    }
}
