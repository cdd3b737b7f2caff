#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "anchorudf/bvh.hpp"
#include "anchorudf/common.hpp"

namespace audf {

// Static kd-tree over points for nearest-neighbor queries. Median split on
// the widest axis, leaves of up to 8 points.
class PointKdTree {
  public:
    explicit PointKdTree(std::vector<Vec3> points) : points_(std::move(points)) {
        if (points_.empty()) throw std::invalid_argument("PointKdTree: empty point set");
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), 0);
        nodes_.reserve(2 * points_.size() / kLeaf + 2);
        build(0, points_.size());
    }

    double nearest_squared(const Vec3& q) const {
        double best = std::numeric_limits<double>::infinity();
        search(0, q, best);
        return best;
    }

  private:
    static constexpr std::size_t kLeaf = 8;

    struct Node {
        Aabb box;
        int left = -1, right = -1;
        std::size_t first = 0, count = 0;
    };

    int build(std::size_t begin, std::size_t end) {
        int id = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        Aabb box;
        for (std::size_t i = begin; i < end; ++i) box.expand(points_[order_[i]]);
        nodes_[id].box = box;
        if (end - begin <= kLeaf) {
            nodes_[id].first = begin;
            nodes_[id].count = end - begin;
            return id;
        }
        Vec3 ext = box.extent();
        int axis = 0;
        if (ext.y > ext.x) axis = 1;
        if (ext.z > ext[axis]) axis = 2;
        std::size_t mid = (begin + end) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](std::size_t a, std::size_t b) {
                             double pa = points_[a][axis], pb = points_[b][axis];
                             return pa < pb || (pa == pb && a < b);
                         });
        int l = build(begin, mid);
        int r = build(mid, end);
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    void search(int id, const Vec3& q, double& best) const {
        const Node& node = nodes_[id];
        if (node.box.squared_distance(q) >= best) return;
        if (node.count > 0) {
            for (std::size_t i = 0; i < node.count; ++i) {
                double d2 = (q - points_[order_[node.first + i]]).squared_norm();
                best = std::min(best, d2);
            }
            return;
        }
        double dl = nodes_[node.left].box.squared_distance(q);
        double dr = nodes_[node.right].box.squared_distance(q);
        if (dl <= dr) {
            search(node.left, q, best);
            search(node.right, q, best);
        } else {
            search(node.right, q, best);
            search(node.left, q, best);
        }
    }

    std::vector<Vec3> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
};

// Evaluation chamfer: symmetric mean of squared nearest-neighbor distances,
// 0.5 * (mean_pred min + mean_gt min). Distinct from the sum-form anchor
// loss; a mean stays comparable across cloud sizes.
inline double chamfer_eval(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
    if (pred.empty() || gt.empty()) throw std::invalid_argument("chamfer_eval: empty point cloud");
    PointKdTree pred_tree(pred);
    PointKdTree gt_tree(gt);
    double sum_pg = 0.0;
    for (const Vec3& p : pred) sum_pg += gt_tree.nearest_squared(p);
    double sum_gp = 0.0;
    for (const Vec3& g : gt) sum_gp += pred_tree.nearest_squared(g);
    return 0.5 * (sum_pg / static_cast<double>(pred.size()) +
                  sum_gp / static_cast<double>(gt.size()));
}

// Mean exact point-to-surface distance of a cloud against a mesh oracle.
inline double p2s(const std::vector<Vec3>& pred, const SpatialIndex& gt_index) {
    if (pred.empty()) throw std::invalid_argument("p2s: empty point cloud");
    double sum = 0.0;
    for (const Vec3& p : pred) sum += gt_index.closest_point(p).distance;
    return sum / static_cast<double>(pred.size());
}

}  // namespace audf
