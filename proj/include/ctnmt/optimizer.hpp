#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctnmt/tensor.hpp"

namespace ctnmt {

// Inverse-square-root schedule with linear warmup: d^-0.5 * min(t^-0.5, t * warmup^-1.5).
inline double nmt_rate(std::size_t t, std::size_t d_model, std::size_t warmup) {
  if (t == 0) throw std::domain_error("nmt_rate: step counter starts at 1");
  if (warmup == 0) throw std::domain_error("nmt_rate: warmup must be positive");
  const double td = static_cast<double>(t);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(td, -0.5), td * std::pow(static_cast<double>(warmup), -1.5));
}

enum class UpdateRule { adam, sgd };

struct OptimizerOptions {
  UpdateRule rule = UpdateRule::adam;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;  // global gradient norm threshold; <= 0 disables clipping
};

// Disjoint partition of the trainable parameters into the pre-trained LM group and the
// NMT group.
template <typename T>
struct ParamGroups {
  std::vector<NamedTensor<T>> lm;
  std::vector<NamedTensor<T>> nmt;

  std::vector<NamedTensor<T>> all() const {
    auto out = nmt;
    out.insert(out.end(), lm.begin(), lm.end());
    return out;
  }

  // Throws unless the groups are disjoint and, when `trainables` is given, cover exactly it.
  void validate(const std::vector<NamedTensor<T>>* trainables = nullptr) const {
    std::set<const void*> seen;
    std::set<std::string> names;
    for (const auto& p : all()) {
      if (!seen.insert(p.tensor.node().get()).second || !names.insert(p.name).second) {
        throw std::logic_error("parameter '" + p.name + "' appears in more than one group slot");
      }
      if (!p.tensor.requires_grad()) {
        throw std::logic_error("parameter '" + p.name + "' is grouped but not trainable");
      }
    }
    if (trainables) {
      std::set<const void*> expected;
      for (const auto& p : *trainables) {
        expected.insert(p.tensor.node().get());
        if (!seen.count(p.tensor.node().get())) {
          throw std::logic_error("trainable parameter '" + p.name + "' is in no group");
        }
      }
      if (expected.size() != seen.size()) throw std::logic_error("groups hold non-trainable extras");
    }
  }
};

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the norm before.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& tensors, double max_norm) {
  double sq = 0.0;
  for (auto& t : tensors) {
    for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& t : tensors) {
      for (T& g : t.grad()) g *= factor;
    }
  }
  return norm;
}

// Two-group optimizer: every parameter of a group moves with that group's rate.
// Adam (bias-corrected) by default; plain SGD for exactness checks.
template <typename T>
class Optimizer {
 public:
  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
  };

  Optimizer(ParamGroups<T> groups, OptimizerOptions options,
            const std::vector<NamedTensor<T>>* trainables = nullptr)
      : groups_(std::move(groups)), options_(options) {
    groups_.validate(trainables);
    for (const auto& p : groups_.all()) {
      moments_[p.name] = {std::vector<T>(p.tensor.numel(), T(0)), std::vector<T>(p.tensor.numel(), T(0))};
    }
  }

  // One update; gradients are consumed and cleared. Returns the pre-clipping gradient norm.
  double step(double eta_nmt, double eta_lm) {
    std::vector<Tensor<T>> all;
    for (const auto& p : groups_.all()) {
      if (!p.tensor.has_grad()) {
        throw std::logic_error("optimizer: no gradient for trainable parameter '" + p.name + "'");
      }
      all.push_back(p.tensor);
    }
    const double norm = clip_grad_norm(all, options_.clip_norm);
    ++t_;
    for (auto& p : groups_.nmt) update(p, eta_nmt);
    for (auto& p : groups_.lm) update(p, eta_lm);
    for (auto& t : all) t.zero_grad();
    return norm;
  }

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  const ParamGroups<T>& groups() const { return groups_; }
  const OptimizerOptions& options() const { return options_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  void update(NamedTensor<T>& p, double lr) {
    auto values = p.tensor.data();
    auto grads = p.tensor.grad();
    if (options_.rule == UpdateRule::sgd) {
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = static_cast<T>(values[i] - lr * grads[i]);
      }
      return;
    }
    auto& m = moments_.at(p.name);
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      const double m1 = b1 * m.first[i] + (1.0 - b1) * g;
      const double m2 = b2 * m.second[i] + (1.0 - b2) * g * g;
      m.first[i] = static_cast<T>(m1);
      m.second[i] = static_cast<T>(m2);
      const double delta = lr * (m1 / c1) / (std::sqrt(m2 / c2) + options_.eps);
      values[i] = static_cast<T>(values[i] - delta);
    }
  }

  ParamGroups<T> groups_;
  OptimizerOptions options_;
  std::map<std::string, Moments> moments_;
  std::size_t t_ = 0;
};

}  // namespace ctnmt
