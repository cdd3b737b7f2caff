#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace audf;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    std::string path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream out(path);
    out << content;
    return path;
}

}  // namespace

TEST_CASE("load_obj reads a minimal file") {
    std::string path = write_temp("minimal.obj",
                                  "v 0 0 0\n"
                                  "v 1 0 0\n"
                                  "v 0 1 0\n"
                                  "f 1 2 3\n");
    TriangleMesh mesh = load_obj(path);
    REQUIRE(mesh.vertex_count() == 3);
    REQUIRE(mesh.triangle_count() == 1);
    CHECK(mesh.triangles[0] == std::array<int, 3>{0, 1, 2});
}

TEST_CASE("load_obj fan-triangulates quads") {
    std::string path = write_temp("quad.obj",
                                  "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                                  "f 1 2 3 4\n");
    TriangleMesh mesh = load_obj(path);
    REQUIRE(mesh.triangle_count() == 2);
    CHECK(mesh.triangles[0] == std::array<int, 3>{0, 1, 2});
    CHECK(mesh.triangles[1] == std::array<int, 3>{0, 2, 3});
}

TEST_CASE("load_obj reports out-of-range indices with the line number") {
    std::string path = write_temp("bad_index.obj",
                                  "v 0 0 0\nv 1 0 0\nv 0 1 0\n"
                                  "f 1 2 9\n");
    try {
        load_obj(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        std::string msg = e.what();
        CHECK(msg.find(":4") != std::string::npos);
        CHECK(msg.find("9") != std::string::npos);
    }
}

TEST_CASE("load_obj handles slash-form faces and ignores other records") {
    std::string path = write_temp("slashes.obj",
                                  "vn 0 0 1\nvt 0 0\n"
                                  "v 0 0 0\nv 1 0 0\nv 0 1 0\n"
                                  "f 1/1/1 2/1/1 3//1\n");
    TriangleMesh mesh = load_obj(path);
    REQUIRE(mesh.triangle_count() == 1);
}

TEST_CASE("load_obj drops zero-area triangles unless asked to keep them") {
    std::string path = write_temp("degenerate.obj",
                                  "v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\n"
                                  "f 1 2 3\n"   // collinear
                                  "f 1 2 4\n");
    TriangleMesh dropped = load_obj(path);
    CHECK(dropped.triangle_count() == 1);
    ObjLoadOptions keep;
    keep.keep_degenerate = true;
    TriangleMesh kept = load_obj(path, keep);
    CHECK(kept.triangle_count() == 2);

    // Distance queries treat the kept degenerate as a segment.
    SpatialIndex index(kept);
    ClosestHit hit = index.closest_point({1.5, -1.0, 0.0});
    CHECK(hit.distance == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("save_obj round-trips through load_obj") {
    TriangleMesh mesh = testutil::normalized_hemisphere(8);
    std::string path = (std::filesystem::temp_directory_path() / "roundtrip.obj").string();
    save_obj(mesh, path);
    TriangleMesh back = load_obj(path);
    REQUIRE(back.vertex_count() == mesh.vertex_count());
    REQUIRE(back.triangle_count() == mesh.triangle_count());
    for (std::size_t i = 0; i < mesh.vertex_count(); ++i)
        CHECK((back.vertices[i] - mesh.vertices[i]).norm() == 0.0);
}

TEST_CASE("synthetic surfaces have the expected boundary structure") {
    CHECK(count_boundary_edges(make_synthetic(SyntheticKind::sphere, 16, {})) == 0);
    CHECK(count_boundary_edges(make_synthetic(SyntheticKind::hemisphere, 16, {})) > 0);
    CHECK(count_boundary_edges(make_synthetic(SyntheticKind::open_cylinder, 8, {})) > 0);

    TriangleMesh patch = make_synthetic(SyntheticKind::patch, 2, {});
    CHECK(patch.triangle_count() == 2);
    CHECK(count_boundary_edges(patch) == 4);

    CHECK_THROWS_AS(make_synthetic(SyntheticKind::patch, 1, {}), std::invalid_argument);
}

TEST_CASE("normalize_mesh centers and scales to a unit bounding box") {
    TriangleMesh cube;
    cube.vertices = {{0, 0, 0}, {2, 0, 0}, {0, 2, 0}, {0, 0, 2}, {2, 2, 2}};
    cube.triangles = {{0, 1, 2}};
    auto [normalized, tf] = normalize_mesh(cube);
    CHECK(tf.scale == Catch::Approx(0.5));
    Aabb box = normalized.bounds();
    CHECK(box.lo.x == Catch::Approx(-0.5));
    CHECK(box.hi.x == Catch::Approx(0.5));

    SECTION("inverse transform restores the input") {
        for (std::size_t i = 0; i < cube.vertices.size(); ++i) {
            Vec3 back = tf.invert(normalized.vertices[i]);
            CHECK((back - cube.vertices[i]).norm() <= 1e-12 * (1.0 + cube.vertices[i].norm()));
        }
    }

    SECTION("already-normalized input gets an identity-equivalent transform") {
        auto [again, tf2] = normalize_mesh(normalized);
        CHECK(tf2.scale == Catch::Approx(1.0));
        CHECK(tf2.center.norm() == Catch::Approx(0.0).margin(1e-15));
        for (std::size_t i = 0; i < again.vertices.size(); ++i)
            CHECK((again.vertices[i] - normalized.vertices[i]).norm() <= 1e-15);
    }

    SECTION("zero-extent mesh is rejected") {
        TriangleMesh point;
        point.vertices = {{1, 1, 1}};
        CHECK_THROWS_AS(normalize_mesh(point), std::invalid_argument);
        CHECK_THROWS_AS(normalize_mesh(TriangleMesh{}), std::invalid_argument);
    }
}

TEST_CASE("SpatialIndex: single triangle gives a single leaf") {
    TriangleMesh mesh;
    mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    mesh.triangles = {{0, 1, 2}};
    SpatialIndex index(mesh);
    CHECK(index.node_count() == 1);
}

TEST_CASE("SpatialIndex matches exhaustive search on random meshes") {
    Rng rng(7);
    TriangleMesh mesh;
    for (int t = 0; t < 200; ++t) {
        int base = static_cast<int>(mesh.vertices.size());
        Vec3 a = rng.uniform_vec3(-1, 1);
        mesh.vertices.push_back(a);
        mesh.vertices.push_back(a + rng.uniform_vec3(-0.3, 0.3));
        mesh.vertices.push_back(a + rng.uniform_vec3(-0.3, 0.3));
        mesh.triangles.push_back({base, base + 1, base + 2});
    }
    SpatialIndex index(mesh);
    for (int i = 0; i < 1000; ++i) {
        Vec3 p = rng.uniform_vec3(-2, 2);
        ClosestHit fast = index.closest_point(p);
        ClosestHit brute = testutil::brute_force_closest(mesh, p);
        double scale = std::max(1e-30, brute.distance);
        CHECK(std::abs(fast.distance - brute.distance) / scale <= 1e-12);
    }
}

TEST_CASE("SpatialIndex accepts duplicated triangles") {
    TriangleMesh mesh;
    mesh.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    mesh.triangles = {{0, 1, 2}, {0, 1, 2}, {0, 1, 2}};
    SpatialIndex index(mesh);
    CHECK(index.closest_point({0.2, 0.2, 0.5}).distance == Catch::Approx(0.5));
}

TEST_CASE("closest_point: exact cases") {
    TriangleMesh mesh = testutil::unit_quad_patch();  // z = 0 plane, [0,1]^2
    SpatialIndex index(mesh);

    SECTION("point on the surface has distance zero") {
        ClosestHit hit = index.closest_point({0.3, 0.4, 0.0});
        CHECK(hit.distance <= 1e-15);
        CHECK((hit.q - Vec3{0.3, 0.4, 0.0}).norm() <= 1e-15);
    }
    SECTION("interior projection hits the plane") {
        ClosestHit hit = index.closest_point({0.25, 0.5, 0.75});
        CHECK(hit.distance == Catch::Approx(0.75));
        CHECK((hit.q - Vec3{0.25, 0.5, 0.0}).norm() <= 1e-15);
    }
    SECTION("edge and vertex regions") {
        CHECK(index.closest_point({-1.0, 0.5, 0.0}).distance == Catch::Approx(1.0));
        CHECK(index.closest_point({-3.0, -4.0, 0.0}).distance == Catch::Approx(5.0));
    }
    SECTION("non-finite query is rejected") {
        CHECK_THROWS_AS(
            index.closest_point({std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0}),
            std::invalid_argument);
    }
}

TEST_CASE("closest_point agrees with the analytic sphere distance") {
    TriangleMesh sphere = make_synthetic(SyntheticKind::sphere, 64, {});
    SpatialIndex index(sphere);

    ClosestHit top = index.closest_point({0, 0, 2});
    CHECK(top.distance == Catch::Approx(1.0).margin(2e-3));
    CHECK((top.q - Vec3{0, 0, 1}).norm() <= 1e-9);  // pole vertex is exact

    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        Vec3 p = rng.uniform_vec3(-1.8, 1.8);
        double analytic = std::abs(p.norm() - 1.0);
        CHECK(std::abs(index.closest_point(p).distance - analytic) <= 2e-3);
    }
}

TEST_CASE("udf_exact and grad_dir_exact") {
    TriangleMesh patch = testutil::unit_quad_patch();
    SpatialIndex index(patch);

    SECTION("height above an interior point gives the plane normal") {
        CHECK(udf_exact(index, {0.5, 0.5, 0.25}) == Catch::Approx(0.25));
        Vec3 dir = grad_dir_exact(index, {0.5, 0.5, 0.25});
        CHECK((dir - Vec3{0, 0, 1}).norm() <= 1e-12);
    }
    SECTION("on-surface direction is an error") {
        CHECK_THROWS_AS(grad_dir_exact(index, {0.5, 0.5, 0.0}), NumericError);
    }
    SECTION("directions are unit length whenever defined") {
        Rng rng(13);
        for (int i = 0; i < 200; ++i) {
            Vec3 p = rng.uniform_vec3(-1, 1);
            if (udf_exact(index, p) <= kDirectionEpsilon) continue;
            CHECK(std::abs(grad_dir_exact(index, p).norm() - 1.0) <= 1e-9);
        }
    }
    SECTION("sphere direction matches sign(|p|-1) * p/|p|") {
        TriangleMesh sphere = make_synthetic(SyntheticKind::sphere, 64, {});
        SpatialIndex sphere_index(sphere);
        Rng rng(17);
        int tested = 0;
        while (tested < 100) {
            Vec3 p = rng.uniform_vec3(-1.8, 1.8);
            if (std::abs(p.norm() - 1.0) < 0.05 || p.norm() < 0.05) continue;
            Vec3 expected = p.normalized() * (p.norm() > 1.0 ? 1.0 : -1.0);
            CHECK((grad_dir_exact(sphere_index, p) - expected).norm() <= 5e-2);
            ++tested;
        }
    }
}

TEST_CASE("udf_exact is zero exactly on triangles and 1-Lipschitz") {
    TriangleMesh mesh = testutil::normalized_hemisphere(16);
    SpatialIndex index(mesh);
    Rng rng(19);

    for (int i = 0; i < 100; ++i) {
        std::size_t t = rng.below(mesh.triangle_count());
        double u = rng.uniform(), v = rng.uniform() * (1.0 - u);
        Vec3 on = mesh.triangle_vertex(t, 0) * (1.0 - u - v) + mesh.triangle_vertex(t, 1) * u +
                  mesh.triangle_vertex(t, 2) * v;
        CHECK(udf_exact(index, on) <= 1e-12);
    }
    for (int i = 0; i < 200; ++i) {
        Vec3 a = rng.uniform_vec3(-1, 1), b = rng.uniform_vec3(-1, 1);
        CHECK(std::abs(udf_exact(index, a) - udf_exact(index, b)) <= (a - b).norm() + 1e-12);
    }
}

TEST_CASE("sample_surface honors areas and seeds") {
    SECTION("single triangle containment") {
        TriangleMesh tri;
        tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
        tri.triangles = {{0, 1, 2}};
        auto samples = sample_surface(tri, 100, 3);
        for (const auto& s : samples) {
            CHECK(s.point.z == 0.0);
            CHECK(s.point.x >= -1e-12);
            CHECK(s.point.y >= -1e-12);
            CHECK(s.point.x + s.point.y <= 1.0 + 1e-12);
            CHECK(s.triangle_id == 0);
        }
    }
    SECTION("two triangles with 1:3 areas get 1:3 sample counts within 3 sigma") {
        TriangleMesh two;
        two.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 2, 0},      // area 1
                        {3, 0, 0}, {6, 0, 0}, {3, 2, 0}};     // area 3
        two.triangles = {{0, 1, 2}, {3, 4, 5}};
        auto samples = sample_surface(two, 40000, 5);
        std::size_t first = 0;
        for (const auto& s : samples) first += s.triangle_id == 0 ? 1 : 0;
        double sigma = std::sqrt(40000 * 0.25 * 0.75);
        CHECK(std::abs(static_cast<double>(first) - 10000.0) <= 3.0 * sigma);
    }
    SECTION("same seed reproduces the point set") {
        TriangleMesh mesh = testutil::normalized_hemisphere(8);
        auto a = sample_surface(mesh, 500, 21);
        auto b = sample_surface(mesh, 500, 21);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].point == b[i].point);
    }
    SECTION("zero-area mesh is rejected") {
        TriangleMesh degenerate;
        degenerate.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
        degenerate.triangles = {{0, 1, 2}};
        CHECK_THROWS_AS(sample_surface(degenerate, 10, 1), std::invalid_argument);
    }
}
