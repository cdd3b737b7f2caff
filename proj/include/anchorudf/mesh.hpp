#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "anchorudf/common.hpp"
#include "anchorudf/rng.hpp"

namespace audf {

// Indexed triangle soup. May be open (boundary edges allowed); duplicated
// triangles are legal.
struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;

    std::size_t vertex_count() const { return vertices.size(); }
    std::size_t triangle_count() const { return triangles.size(); }
    bool empty() const { return vertices.empty(); }

    Vec3 triangle_vertex(std::size_t t, int corner) const {
        return vertices[static_cast<std::size_t>(triangles[t][corner])];
    }

    double triangle_area(std::size_t t) const {
        Vec3 a = triangle_vertex(t, 0), b = triangle_vertex(t, 1), c = triangle_vertex(t, 2);
        return 0.5 * (b - a).cross(c - a).norm();
    }

    double total_area() const {
        double s = 0.0;
        for (std::size_t t = 0; t < triangles.size(); ++t) s += triangle_area(t);
        return s;
    }

    Aabb bounds() const {
        Aabb box;
        for (const auto& v : vertices) box.expand(v);
        return box;
    }
};

// Edges incident to exactly one triangle. Open surfaces have some; closed
// ones have none.
inline std::size_t count_boundary_edges(const TriangleMesh& mesh) {
    std::map<std::pair<int, int>, int> incidence;
    for (const auto& tri : mesh.triangles) {
        for (int e = 0; e < 3; ++e) {
            int a = tri[e], b = tri[(e + 1) % 3];
            if (a > b) std::swap(a, b);
            ++incidence[{a, b}];
        }
    }
    std::size_t n = 0;
    for (const auto& [edge, count] : incidence)
        if (count == 1) ++n;
    return n;
}

struct ObjLoadOptions {
    // Zero-area triangles are dropped on load unless kept explicitly; distance
    // queries then treat them as segments/points.
    bool keep_degenerate = false;
};

namespace detail {

inline bool is_degenerate(const Vec3& a, const Vec3& b, const Vec3& c) {
    return (b - a).cross(c - a).squared_norm() == 0.0;
}

inline int resolve_obj_index(long idx, std::size_t vertex_count, const std::string& path,
                             std::size_t line_no) {
    long resolved = idx >= 0 ? idx : static_cast<long>(vertex_count) + idx + 1;
    if (resolved < 1 || resolved > static_cast<long>(vertex_count)) {
        throw DataError(path + ":" + std::to_string(line_no) + ": vertex index " +
                        std::to_string(idx) + " out of range (have " +
                        std::to_string(vertex_count) + " vertices)");
    }
    return static_cast<int>(resolved - 1);
}

}  // namespace detail

// ASCII OBJ loader. Reads `v` and `f` records; normals, texcoords and
// materials are ignored. Faces with more than three vertices are
// fan-triangulated around the first vertex.
inline TriangleMesh load_obj(const std::string& path, const ObjLoadOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open OBJ file: " + path);

    TriangleMesh mesh;
    std::string line;
    std::size_t line_no = 0;
    std::size_t dropped = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x >> v.y >> v.z))
                throw DataError(path + ":" + std::to_string(line_no) + ": malformed vertex record");
            mesh.vertices.push_back(v);
        } else if (tag == "f") {
            std::vector<int> corners;
            std::string item;
            while (ls >> item) {
                // Face entries look like i, i/t, i//n or i/t/n.
                std::size_t slash = item.find('/');
                std::string head = slash == std::string::npos ? item : item.substr(0, slash);
                long idx = 0;
                try {
                    std::size_t used = 0;
                    idx = std::stol(head, &used);
                    if (used != head.size()) throw std::invalid_argument(head);
                } catch (const std::exception&) {
                    throw DataError(path + ":" + std::to_string(line_no) +
                                    ": malformed face entry '" + item + "'");
                }
                corners.push_back(detail::resolve_obj_index(idx, mesh.vertices.size(), path, line_no));
            }
            if (corners.size() < 3)
                throw DataError(path + ":" + std::to_string(line_no) + ": face with fewer than 3 vertices");
            for (std::size_t k = 1; k + 1 < corners.size(); ++k) {
                std::array<int, 3> tri{corners[0], corners[k], corners[k + 1]};
                if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2])
                    throw DataError(path + ":" + std::to_string(line_no) +
                                    ": triangle with repeated vertex indices");
                if (!opts.keep_degenerate &&
                    detail::is_degenerate(mesh.vertices[tri[0]], mesh.vertices[tri[1]],
                                          mesh.vertices[tri[2]])) {
                    ++dropped;
                    continue;
                }
                mesh.triangles.push_back(tri);
            }
        }
        // other tags (vn, vt, usemtl, o, g, s, ...) are ignored
    }
    (void)dropped;
    return mesh;
}

inline void save_obj(const TriangleMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open OBJ file for writing: " + path);
    char buf[128];
    for (const auto& v : mesh.vertices) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
        out << buf;
    }
    for (const auto& t : mesh.triangles)
        out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
    if (!out) throw DataError("failed writing OBJ file: " + path);
}

enum class SyntheticKind { sphere, hemisphere, patch, open_cylinder };

inline SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "sphere") return SyntheticKind::sphere;
    if (s == "hemisphere") return SyntheticKind::hemisphere;
    if (s == "patch") return SyntheticKind::patch;
    if (s == "open_cylinder") return SyntheticKind::open_cylinder;
    throw std::invalid_argument("unknown synthetic kind: " + s);
}

struct SyntheticParams {
    double radius = 1.0;   // sphere, hemisphere, open_cylinder
    double height = 1.0;   // open_cylinder
    double size_x = 1.0;   // patch
    double size_y = 1.0;   // patch
};

namespace detail {

constexpr double kPi = 3.141592653589793238462643383279502884;

// Latitude/longitude triangulation. stacks = polar subdivisions down to
// max_polar, slices = azimuthal subdivisions. Open at the last ring unless
// max_polar == pi (full sphere, sealed with the bottom pole).
inline TriangleMesh lat_long_surface(double radius, int stacks, int slices, double max_polar) {
    TriangleMesh mesh;
    const bool full = max_polar >= kPi - 1e-12;
    mesh.vertices.push_back({0.0, 0.0, radius});  // top pole
    const int ring_count = full ? stacks - 1 : stacks;
    for (int r = 1; r <= ring_count; ++r) {
        double theta = max_polar * r / stacks;
        for (int s = 0; s < slices; ++s) {
            double phi = 2.0 * kPi * s / slices;
            mesh.vertices.push_back({radius * std::sin(theta) * std::cos(phi),
                                     radius * std::sin(theta) * std::sin(phi),
                                     radius * std::cos(theta)});
        }
    }
    auto ring_vertex = [&](int r, int s) { return 1 + (r - 1) * slices + (s % slices); };
    for (int s = 0; s < slices; ++s)
        mesh.triangles.push_back({0, ring_vertex(1, s), ring_vertex(1, s + 1)});
    for (int r = 1; r < ring_count; ++r) {
        for (int s = 0; s < slices; ++s) {
            int a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
            int c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
            mesh.triangles.push_back({a, c, d});
            mesh.triangles.push_back({a, d, b});
        }
    }
    if (full) {
        int bottom = static_cast<int>(mesh.vertices.size());
        mesh.vertices.push_back({0.0, 0.0, -radius});
        for (int s = 0; s < slices; ++s)
            mesh.triangles.push_back({bottom, ring_vertex(ring_count, s + 1), ring_vertex(ring_count, s)});
    }
    return mesh;
}

}  // namespace detail

// Desk-scale stand-ins for open surfaces: everything except `sphere` has
// boundary edges by construction. `resolution` is vertices-per-side for the
// patch and polar subdivisions otherwise; must be >= 2.
inline TriangleMesh make_synthetic(SyntheticKind kind, int resolution,
                                   const SyntheticParams& params = {}) {
    if (resolution < 2) throw std::invalid_argument("make_synthetic: resolution must be >= 2");
    switch (kind) {
        case SyntheticKind::sphere:
            return detail::lat_long_surface(params.radius, resolution, 2 * resolution, detail::kPi);
        case SyntheticKind::hemisphere:
            return detail::lat_long_surface(params.radius, resolution, 2 * resolution,
                                            detail::kPi / 2.0);
        case SyntheticKind::patch: {
            TriangleMesh mesh;
            const int n = resolution;
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < n; ++i)
                    mesh.vertices.push_back({params.size_x * i / (n - 1),
                                             params.size_y * j / (n - 1), 0.0});
            auto vid = [n](int i, int j) { return j * n + i; };
            for (int j = 0; j + 1 < n; ++j) {
                for (int i = 0; i + 1 < n; ++i) {
                    mesh.triangles.push_back({vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)});
                    mesh.triangles.push_back({vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)});
                }
            }
            return mesh;
        }
        case SyntheticKind::open_cylinder: {
            TriangleMesh mesh;
            const int rings = resolution;
            const int slices = 2 * resolution;
            for (int r = 0; r < rings; ++r) {
                double z = params.height * (static_cast<double>(r) / (rings - 1) - 0.5);
                for (int s = 0; s < slices; ++s) {
                    double phi = 2.0 * detail::kPi * s / slices;
                    mesh.vertices.push_back(
                        {params.radius * std::cos(phi), params.radius * std::sin(phi), z});
                }
            }
            auto vid = [slices](int r, int s) { return r * slices + (s % slices); };
            for (int r = 0; r + 1 < rings; ++r) {
                for (int s = 0; s < slices; ++s) {
                    int a = vid(r, s), b = vid(r, s + 1);
                    int c = vid(r + 1, s), d = vid(r + 1, s + 1);
                    mesh.triangles.push_back({a, b, d});
                    mesh.triangles.push_back({a, d, c});
                }
            }
            return mesh;
        }
    }
    throw std::invalid_argument("make_synthetic: unknown kind");
}

// Maps normalized coordinates back to the original frame:
// original = normalized / scale + center.
struct NormalizeTransform {
    double scale = 1.0;  // applied as (v - center) * scale
    Vec3 center{0.0, 0.0, 0.0};

    Vec3 apply(const Vec3& v) const { return (v - center) * scale; }
    Vec3 invert(const Vec3& v) const { return v / scale + center; }
};

// Centers the mesh at its bounding-box center and scales uniformly so the
// longest bounding-box edge equals 1. The distance-band constants used
// throughout (delta, sigmas, valid distance) assume this frame.
inline std::pair<TriangleMesh, NormalizeTransform> normalize_mesh(const TriangleMesh& mesh) {
    if (mesh.vertices.empty()) throw std::invalid_argument("normalize_mesh: empty mesh");
    Aabb box = mesh.bounds();
    Vec3 ext = box.extent();
    double longest = std::max({ext.x, ext.y, ext.z});
    if (!(longest > 0.0)) throw std::invalid_argument("normalize_mesh: mesh has zero extent");
    NormalizeTransform tf{1.0 / longest, box.center()};
    TriangleMesh out = mesh;
    for (auto& v : out.vertices) v = tf.apply(v);
    return {std::move(out), tf};
}

struct SurfaceSample {
    Vec3 point;
    int triangle_id = 0;
};

// Cumulative-area table for area-weighted triangle selection.
class AreaTable {
  public:
    explicit AreaTable(const TriangleMesh& mesh) {
        cumulative_.reserve(mesh.triangle_count());
        double acc = 0.0;
        for (std::size_t t = 0; t < mesh.triangle_count(); ++t) {
            acc += mesh.triangle_area(t);
            cumulative_.push_back(acc);
        }
        total_ = acc;
    }

    double total_area() const { return total_; }

    int pick(double u01) const {
        double target = u01 * total_;
        auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), target);
        if (it == cumulative_.end()) --it;
        return static_cast<int>(it - cumulative_.begin());
    }

  private:
    std::vector<double> cumulative_;
    double total_ = 0.0;
};

inline Vec3 sample_point_in_triangle(const TriangleMesh& mesh, int t, Rng& rng) {
    Vec3 a = mesh.triangle_vertex(t, 0), b = mesh.triangle_vertex(t, 1),
         c = mesh.triangle_vertex(t, 2);
    double su = std::sqrt(rng.uniform());
    double v = rng.uniform();
    return a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v);
}

// Area-weighted surface sampling, uniform within each triangle. Each sample
// slot derives its own RNG substream, so the output is a pure function of
// (mesh, n, seed) regardless of evaluation order.
inline std::vector<SurfaceSample> sample_surface(const TriangleMesh& mesh, std::size_t n,
                                                 std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_surface: n must be >= 1");
    AreaTable table(mesh);
    if (!(table.total_area() > 0.0)) throw std::invalid_argument("sample_surface: zero-area mesh");
    std::vector<SurfaceSample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, i);
        int t = table.pick(rng.uniform());
        out[i] = {sample_point_in_triangle(mesh, t, rng), t};
    }
    return out;
}

}  // namespace audf
