#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cola/error.hpp"
#include "cola/tensor.hpp"

namespace cola {

enum class OptimizerKind { sgd, adam };

/// Gradient-descent optimizer over a fixed, ordered list of parameters.
/// Adam moments are matched to parameters by position, so the same list
/// (in the same order) must be passed to every step.
class Optimizer {
 public:
  static Optimizer sgd(double learning_rate) {
    return Optimizer(OptimizerKind::sgd, learning_rate, 0.0, 0.0, 0.0);
  }

  static Optimizer adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                        double epsilon = 1e-8) {
    return Optimizer(OptimizerKind::adam, learning_rate, beta1, beta2, epsilon);
  }

  OptimizerKind kind() const noexcept { return kind_; }
  double learning_rate() const noexcept { return lr_; }
  std::uint64_t step_count() const noexcept { return steps_; }

  /// Applies one update from the accumulated gradients, then zeroes them.
  void step(std::span<Tensor> params) {
    for (const Tensor& p : params) {
      if (!p.has_grad()) {
        throw StateError("optimizer step: parameter " + shape_string(p.shape()) +
                         " has no accumulated gradient");
      }
    }
    if (kind_ == OptimizerKind::adam) {
      if (first_.empty()) {
        first_.resize(params.size());
        second_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
          first_[i].assign(params[i].size(), 0.0);
          second_[i].assign(params[i].size(), 0.0);
        }
      }
      if (first_.size() != params.size()) {
        throw StateError("optimizer step: parameter list changed size");
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (first_[i].size() != params[i].size()) {
          throw StateError("optimizer step: moment shape mismatch at parameter " +
                           std::to_string(i));
        }
      }
    }
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      auto value = p.data();
      auto grad = p.grad();
      if (kind_ == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < value.size(); ++j) value[j] -= lr_ * grad[j];
      } else {
        const double t = static_cast<double>(steps_);
        const double c1 = 1.0 - std::pow(beta1_, t);
        const double c2 = 1.0 - std::pow(beta2_, t);
        auto& m = first_[i];
        auto& v = second_[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
          m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
          v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
          const double m_hat = m[j] / c1;
          const double v_hat = v[j] / c2;
          value[j] -= lr_ * m_hat / (std::sqrt(v_hat) + epsilon_);
        }
      }
      p.zero_grad();
    }
  }

 private:
  Optimizer(OptimizerKind kind, double lr, double beta1, double beta2, double epsilon)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
      throw ArgumentError("learning rate must be finite and non-negative");
    }
  }

  OptimizerKind kind_;
  double lr_;
  double beta1_;
  double beta2_;
  double epsilon_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace cola
