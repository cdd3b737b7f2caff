#pragma once

#include <cassert>
#include <memory>
#include <numeric>
#include <vector>

#include "anchorudf/common.hpp"

namespace audf {

// Dense row-major tensor of 64-bit floats. Copies share storage (the
// autodiff tape leaves reference parameter tensors without copying);
// mutable_data() detaches when shared, so writers never alias readers.
class Tensor {
  public:
    using Shape = std::vector<std::size_t>;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(count(t.shape_), 0.0);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (count(shape) != values.size())
            throw std::invalid_argument("Tensor::from: shape/value count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor vec3(const Vec3& v) { return from({3}, {v.x, v.y, v.z}); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t rank() const { return shape_.size(); }

    const double* data() const { return data_->data(); }
    double operator[](std::size_t i) const { return (*data_)[i]; }

    double* mutable_data() {
        assert(data_);
        if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
        return data_->data();
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Vec3 to_vec3() const {
        assert(size() == 3);
        return {(*data_)[0], (*data_)[1], (*data_)[2]};
    }

    double item() const {
        assert(size() == 1);
        return (*data_)[0];
    }

    static std::size_t count(const Shape& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

  private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

}  // namespace audf
