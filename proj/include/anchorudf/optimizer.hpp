#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "anchorudf/tensor.hpp"

namespace audf {

// RMSprop: v <- rho*v + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(v)+eps).
// State is keyed by parameter name and serialized with checkpoints so a
// resumed run continues bitwise identically.
class RmsProp {
  public:
    explicit RmsProp(double rho = 0.99, double eps = 1e-8) : rho_(rho), eps_(eps) {}

    double rho() const { return rho_; }
    double eps() const { return eps_; }

    void step(const std::string& name, Tensor& param, const double* grad, double lr) {
        auto [it, inserted] = state_.try_emplace(name);
        std::vector<double>& v = it->second;
        if (inserted) v.assign(param.size(), 0.0);
        if (v.size() != param.size())
            throw std::invalid_argument("RmsProp: state/param size mismatch for " + name);
        double* theta = param.mutable_data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            double g = grad[i];
            v[i] = rho_ * v[i] + (1.0 - rho_) * g * g;
            theta[i] -= lr * g / (std::sqrt(v[i]) + eps_);
        }
    }

    // Serialization hooks (fixed name order comes from the caller).
    const std::map<std::string, std::vector<double>>& state() const { return state_; }
    void restore(const std::string& name, std::vector<double> values) {
        state_[name] = std::move(values);
    }

  private:
    double rho_;
    double eps_;
    std::map<std::string, std::vector<double>> state_;
};

}  // namespace audf
