#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include "ctnmt/errors.hpp"
#include "ctnmt/layers.hpp"

namespace ctnmt {

// How the LM parameter group's rate relates to the NMT rate.
enum class LmRegime {
  fine_tune,  // eta_lm = eta_nmt
  slow,       // eta_lm = 0.01 * eta_nmt
  scheduled,  // eta_lm = rho(t) * eta_nmt
  frozen,     // eta_lm = 0
};

inline LmRegime parse_lm_regime(std::string_view text) {
  if (text == "1" || text == "fine-tune") return LmRegime::fine_tune;
  if (text == "0.01" || text == "slow") return LmRegime::slow;
  if (text == "sched" || text == "scheduled") return LmRegime::scheduled;
  if (text == "0" || text == "frozen") return LmRegime::frozen;
  throw ConfigError("unknown lm regime '" + std::string(text) + "' (expected 1, 0.01, sched or 0)");
}

inline std::string to_string(LmRegime r) {
  switch (r) {
    case LmRegime::fine_tune: return "1";
    case LmRegime::slow: return "0.01";
    case LmRegime::scheduled: return "sched";
    case LmRegime::frozen: return "0";
  }
  return "?";
}

struct FusionConfig {
  double alpha = 0.9;
  std::size_t student_tap_layer = 0;  // 0 selects the top encoder layer
  int teacher_tap_layer = -1;         // -1 selects the second-to-last teacher layer
  bool use_ad = false;
  bool use_ds = false;
  bool use_schedule = false;
  std::size_t t_prime = 0;  // 0 selects 10% of total steps
  std::size_t t_total = 0;  // 0 selects 20% of total steps
  LmRegime lm_regime = LmRegime::frozen;

  std::size_t student_layer(std::size_t nmt_layers) const {
    return student_tap_layer ? student_tap_layer : nmt_layers;
  }
  std::size_t teacher_layer(std::size_t teacher_layers) const {
    return teacher_tap_layer < 0 ? teacher_layers - 1 : static_cast<std::size_t>(teacher_tap_layer);
  }
  LmRegime effective_regime() const { return use_schedule ? LmRegime::scheduled : lm_regime; }

  // The teacher's features enter the encoder input (gated or averaged).
  bool feeds_teacher() const { return use_ds || use_schedule; }
  bool needs_teacher() const { return use_ad || feeds_teacher(); }

  // Fills proportional schedule defaults from the total number of training steps.
  void resolve(std::size_t total_steps) {
    if (t_prime == 0) t_prime = std::max<std::size_t>(1, total_steps / 10);
    if (t_total == 0) t_total = std::max<std::size_t>(t_prime + 1, total_steps / 5);
  }

  void validate(std::size_t nmt_layers, std::size_t teacher_layers) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("fusion.alpha must lie in [0,1]");
    if (t_prime >= t_total) throw ConfigError("fusion.T_prime must be smaller than fusion.T");
    if (student_tap_layer > nmt_layers) {
      throw ConfigError("fusion.student_tap_layer " + std::to_string(student_tap_layer) +
                        " exceeds encoder depth " + std::to_string(nmt_layers));
    }
    if (teacher_tap_layer >= 0 && static_cast<std::size_t>(teacher_tap_layer) > teacher_layers) {
      throw ConfigError("fusion.teacher_tap_layer exceeds teacher depth");
    }
  }
};

// g = sigmoid(h_lm W + h_nmt U + b), all in the NMT parameter group.
template <typename T>
struct SwitchGate {
  Tensor<T> w;
  Tensor<T> u;
  Tensor<T> b;
};

// Slanted-triangular multiplier: t/T' up to T', linear decay to 0 at T, 0 afterwards.
inline double rho(double t, double t_prime, double t_total) {
  if (t <= t_prime) return t / t_prime;
  if (t <= t_total) return 1.0 - (t - t_prime) / (t_total - t_prime);
  return 0.0;
}

inline double lm_learning_rate(std::size_t t, double eta_nmt, LmRegime regime, std::size_t t_prime,
                               std::size_t t_total) {
  switch (regime) {
    case LmRegime::fine_tune: return eta_nmt;
    case LmRegime::slow: return 0.01 * eta_nmt;
    case LmRegime::scheduled:
      return rho(static_cast<double>(t), static_cast<double>(t_prime), static_cast<double>(t_total)) * eta_nmt;
    case LmRegime::frozen: return 0.0;
  }
  throw ConfigError("unknown lm regime");
}

// L_kd: masked mean squared distance between the student state and the (constant) teacher.
template <typename T>
Tensor<T> asymptotic_distillation_loss(const Tensor<T>& teacher_projected, const Tensor<T>& student_state,
                                       std::span<const std::uint8_t> mask) {
  if (teacher_projected.shape() != student_state.shape()) {
    throw DimensionError("distillation: teacher " + shape_str(teacher_projected.shape()) +
                         " and student " + shape_str(student_state.shape()) + " lengths differ");
  }
  return mse(student_state, teacher_projected.requires_grad() ? teacher_projected.detach() : teacher_projected,
             mask);
}

// alpha * L_nmt + (1 - alpha) * L_kd.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& l_nmt, const Tensor<T>& l_kd, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::domain_error("combined_loss: alpha outside [0,1]");
  return add(scale(l_nmt, static_cast<T>(alpha)), scale(l_kd, static_cast<T>(1.0 - alpha)));
}

// h = g * h_lm + (1 - g) * h_nmt with the per-token, per-dimension gate g.
template <typename T>
Tensor<T> dynamic_switch(const Tensor<T>& h_lm, const Tensor<T>& h_nmt, const SwitchGate<T>& gate) {
  if (h_lm.shape() != h_nmt.shape()) {
    throw DimensionError("dynamic_switch: " + shape_str(h_lm.shape()) + " vs " + shape_str(h_nmt.shape()));
  }
  auto g = sigmoid(add(add(matmul(h_lm, gate.w), matmul(h_nmt, gate.u)), gate.b));
  return add(mul(g, h_lm), mul(affine(g, T(-1), T(1)), h_nmt));
}

// Fixed g = 0.5 combination (average pooling).
template <typename T>
Tensor<T> average_fusion(const Tensor<T>& h_lm, const Tensor<T>& h_nmt) {
  if (h_lm.shape() != h_nmt.shape()) {
    throw DimensionError("average_fusion: " + shape_str(h_lm.shape()) + " vs " + shape_str(h_nmt.shape()));
  }
  return add(scale(h_lm, T(0.5)), scale(h_nmt, T(0.5)));
}

// Teacher-to-student projection plus switch gate. Projection starts at identity when widths
// agree, orthogonal otherwise; the gate starts at zero (g = 0.5 everywhere).
template <typename T>
class FusionLayer {
 public:
  FusionLayer(std::size_t d_teacher, std::size_t d_model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    projection_ = projection_params_.add(
        "fusion.projection", {d_teacher, d_model},
        d_teacher == d_model ? init::identity(d_model) : init::orthogonal(d_teacher, d_model, rng));
    gate_.w = gate_params_.add("fusion.gate.w", {d_model, d_model}, init::constant(d_model * d_model, 0.0));
    gate_.u = gate_params_.add("fusion.gate.u", {d_model, d_model}, init::constant(d_model * d_model, 0.0));
    gate_.b = gate_params_.add("fusion.gate.b", {d_model}, init::constant(d_model, 0.0));
  }

  Tensor<T> project(const Tensor<T>& h_teacher) const { return matmul(h_teacher, projection_); }
  const SwitchGate<T>& gate() const { return gate_; }
  SwitchGate<T>& gate() { return gate_; }
  ParamSet<T>& projection_params() { return projection_params_; }
  ParamSet<T>& gate_params() { return gate_params_; }
  const ParamSet<T>& projection_params() const { return projection_params_; }
  const ParamSet<T>& gate_params() const { return gate_params_; }

 private:
  ParamSet<T> projection_params_;
  ParamSet<T> gate_params_;
  Tensor<T> projection_;
  SwitchGate<T> gate_;
};

}  // namespace ctnmt
