#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "anchorudf/closest_point.hpp"
#include "anchorudf/common.hpp"
#include "anchorudf/mesh.hpp"

namespace audf {

struct ClosestHit {
    Vec3 q;                // closest point on the surface
    double distance = 0.0; // |p - q|
    int triangle_id = -1;
};

/**
 * Bounding volume hierarchy over a triangle mesh, answering exact
 * closest-point / unsigned-distance queries. This is the ground-truth oracle
 * for everything downstream, so queries return exactly the per-triangle
 * minimum (same arithmetic as an exhaustive scan).
 *
 * Binary tree, median split on the longest centroid axis, leaves hold at
 * most 4 triangles. Immutable after construction; concurrent read-only
 * queries are safe.
 */
class SpatialIndex {
  public:
    explicit SpatialIndex(const TriangleMesh& mesh) : mesh_(&mesh) {
        if (mesh.triangle_count() == 0)
            throw std::invalid_argument("SpatialIndex: mesh has no triangles");
        const std::size_t n = mesh.triangle_count();
        tri_order_.resize(n);
        std::iota(tri_order_.begin(), tri_order_.end(), 0);
        centroids_.resize(n);
        tri_boxes_.resize(n);
        for (std::size_t t = 0; t < n; ++t) {
            Aabb box;
            for (int c = 0; c < 3; ++c) box.expand(mesh.triangle_vertex(t, c));
            tri_boxes_[t] = box;
            centroids_[t] = box.center();
        }
        nodes_.reserve(2 * n / kLeafSize + 2);
        build(0, n);
        centroids_.clear();
        centroids_.shrink_to_fit();
    }

    const TriangleMesh& mesh() const { return *mesh_; }

    ClosestHit closest_point(const Vec3& p) const {
        if (!p.finite()) throw std::invalid_argument("closest_point: non-finite query point");
        ClosestHit best;
        best.distance = std::numeric_limits<double>::infinity();
        double best_d2 = std::numeric_limits<double>::infinity();
        // Explicit stack, near child first.
        int stack[64];
        int top = 0;
        stack[top++] = 0;
        while (top > 0) {
            int ni = stack[--top];
            const Node& node = nodes_[ni];
            if (node.box.squared_distance(p) >= best_d2) continue;
            if (node.count > 0) {
                for (int i = 0; i < node.count; ++i) {
                    int t = tri_order_[node.first + i];
                    Vec3 q = closest_point_on_triangle(p, mesh_->triangle_vertex(t, 0),
                                                       mesh_->triangle_vertex(t, 1),
                                                       mesh_->triangle_vertex(t, 2));
                    double d2 = (p - q).squared_norm();
                    if (d2 < best_d2) {
                        best_d2 = d2;
                        best = {q, 0.0, t};
                    }
                }
            } else {
                int l = node.left, r = node.right;
                double dl = nodes_[l].box.squared_distance(p);
                double dr = nodes_[r].box.squared_distance(p);
                if (dl > dr) { std::swap(l, r); std::swap(dl, dr); }
                if (dr < best_d2) stack[top++] = r;
                if (dl < best_d2) stack[top++] = l;
            }
        }
        best.distance = std::sqrt(best_d2);
        return best;
    }

    std::size_t node_count() const { return nodes_.size(); }

  private:
    static constexpr int kLeafSize = 4;

    struct Node {
        Aabb box;
        int left = -1, right = -1;  // internal nodes
        int first = 0, count = 0;   // leaves (count > 0)
    };

    int build(std::size_t begin, std::size_t end) {
        int index = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        Aabb box;
        for (std::size_t i = begin; i < end; ++i) box.expand(tri_boxes_[tri_order_[i]]);
        nodes_[index].box = box;
        if (end - begin <= kLeafSize) {
            nodes_[index].first = static_cast<int>(begin);
            nodes_[index].count = static_cast<int>(end - begin);
            return index;
        }
        Aabb cbox;
        for (std::size_t i = begin; i < end; ++i) cbox.expand(centroids_[tri_order_[i]]);
        Vec3 ext = cbox.extent();
        int axis = 0;
        if (ext.y > ext.x) axis = 1;
        if (ext.z > ext[axis]) axis = 2;
        std::size_t mid = (begin + end) / 2;
        // Total order (centroid, id) keeps the split deterministic even with
        // equal centroids.
        std::nth_element(tri_order_.begin() + begin, tri_order_.begin() + mid,
                         tri_order_.begin() + end, [&](std::size_t a, std::size_t b) {
                             double ca = centroids_[a][axis], cb = centroids_[b][axis];
                             return ca < cb || (ca == cb && a < b);
                         });
        int left = build(begin, mid);
        int right = build(mid, end);
        nodes_[index].left = left;
        nodes_[index].right = right;
        return index;
    }

    const TriangleMesh* mesh_;
    std::vector<Node> nodes_;
    std::vector<std::size_t> tri_order_;
    std::vector<Vec3> centroids_;
    std::vector<Aabb> tri_boxes_;
};

inline double udf_exact(const SpatialIndex& index, const Vec3& p) {
    return index.closest_point(p).distance;
}

// Unit direction (p - q)/|p - q| of steepest distance increase. Undefined
// within kDirectionEpsilon of the surface.
inline Vec3 grad_dir_exact(const SpatialIndex& index, const Vec3& p) {
    ClosestHit hit = index.closest_point(p);
    if (hit.distance <= kDirectionEpsilon)
        throw NumericError("grad_dir_exact: query point is on (or too close to) the surface");
    return (p - hit.q) / hit.distance;
}

}  // namespace audf
