#pragma once

#include <optional>
#include <vector>

#include "fadet/attack.hpp"
#include "fadet/detector.hpp"

namespace fadet {

// Spatially average-pooled mid-layer descriptor, one C-vector per image.
struct FeatureProjection {
  Tensor vectors;  // N x C
};

struct AlignmentWeights {
  double beta = 0.0;   // self-supervised term
  double gamma = 0.0;  // knowledge-distilled term

  void validate() const {
    if (beta < 0.0 || gamma < 0.0) throw UserError("alignment weights must be non-negative");
  }
  bool enabled() const { return beta > 0.0 || gamma > 0.0; }
};

// Average-pool projection of an N x C x H x W feature map.
inline Var project(const Var& mid_feature) { return global_avg_pool(mid_feature); }

inline FeatureProjection project(const Tensor& mid_feature) {
  return FeatureProjection{global_avg_pool(Var::constant(mid_feature)).value()};
}

// Per-row cosine similarity; values in [-1, 1] with zero-norm rows guarded.
inline Var cos_sim(const Var& a, const Var& b) { return cosine_rows(a, b); }

inline std::vector<double> cos_sim(const Tensor& a, const Tensor& b) {
  Tensor v = cosine_rows(Var::constant(a), Var::constant(b)).value();
  return std::vector<double>(v.data(), v.data() + v.numel());
}

namespace detail {

inline Var one_minus_cos_mean(const Var& adv_mid, const Var& target_mid) {
  if (!adv_mid.value().same_shape(target_mid.value()))
    throw UserError("alignment: feature shape mismatch between branches");
  return mean_all(rsub_scalar(1.0f, cosine_rows(project(adv_mid), project(target_mid))));
}

}  // namespace detail

// Self-supervised feature alignment: 1 - cos between the projected
// adversarial features and the projected clean features of the same
// network. The clean side enters as a detached tensor, so no gradient ever
// flows through it (stop-grad).
inline Var ssfa_loss(const Var& student_adv_mid, const Tensor& student_clean_mid_detached) {
  return detail::one_minus_cos_mean(student_adv_mid, Var::constant(student_clean_mid_detached));
}

// Knowledge-distilled feature alignment: same form, target features come
// from a frozen teacher's clean pass. A channel-count mismatch means the
// teacher and student taps are incompatible.
inline Var kdfa_loss(const Var& student_adv_mid, const Var& teacher_clean_mid) {
  if (student_adv_mid.value().dim(1) != teacher_clean_mid.value().dim(1))
    throw UserError("kdfa: teacher/student tap channel mismatch");
  return detail::one_minus_cos_mean(student_adv_mid, teacher_clean_mid);
}

inline Var kdfa_loss(const Var& student_adv_mid, const Tensor& teacher_clean_mid) {
  return kdfa_loss(student_adv_mid, Var::constant(teacher_clean_mid));
}

// beta * SSFA + gamma * KDFA. Terms with zero weight are skipped entirely,
// so (0, 0) contributes nothing to values or gradients.
inline Var alignment_loss(const Var& adv_mid, const Tensor& clean_mid_detached, const Var& teacher_mid,
                          const AlignmentWeights& weights) {
  weights.validate();
  std::vector<Var> terms;
  std::vector<float> coeffs;
  if (weights.beta > 0.0) {
    terms.push_back(ssfa_loss(adv_mid, clean_mid_detached));
    coeffs.push_back(static_cast<float>(weights.beta));
  }
  if (weights.gamma > 0.0) {
    terms.push_back(kdfa_loss(adv_mid, teacher_mid));
    coeffs.push_back(static_cast<float>(weights.gamma));
  }
  if (terms.empty()) return Var::constant(Tensor::zeros({1}));
  return linear_combo(terms, coeffs);
}

namespace detail {

inline double sample_l2(const Tensor& t, int n) {
  int64_t per = t.numel() / t.dim(0);
  const float* p = t.data() + static_cast<int64_t>(n) * per;
  double acc = 0.0;
  for (int64_t i = 0; i < per; ++i) acc += static_cast<double>(p[i]) * p[i];
  return std::sqrt(acc);
}

inline double sample_l2_diff(const Tensor& a, const Tensor& b, int n) {
  int64_t per = a.numel() / a.dim(0);
  const float* pa = a.data() + static_cast<int64_t>(n) * per;
  const float* pb = b.data() + static_cast<int64_t>(n) * per;
  double acc = 0.0;
  for (int64_t i = 0; i < per; ++i) {
    double d = static_cast<double>(pa[i]) - pb[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Empirical mid-layer sensitivity: mean over the batch of
// ||f_mid(x) - f_mid(x_adv)||_2 / ||x - x_adv||_2, a lower witness of the
// layerwise stability product. Measurement only; parameters are untouched.
// Samples with zero perturbation are excluded; if none remain the result is
// undefined (nullopt).
inline std::optional<double> mid_layer_sensitivity(Detector& det, const ImageBatch& batch,
                                                   const AttackConfig& cfg) {
  cfg.validate();
  AdversarialBatch adv = pgd_attack(det, batch, cfg);

  ParamFreezeGuard freeze(det.parameters());
  Tensor clean_mid = det.forward_train_pixels(batch.pixels, batch.annotations, false).mid_feature.value();
  Tensor adv_mid = det.forward_train_pixels(adv.pixels, batch.annotations, false).mid_feature.value();

  int N = batch.size();
  double acc = 0.0;
  int valid = 0;
  for (int n = 0; n < N; ++n) {
    double dx = detail::sample_l2_diff(batch.pixels, adv.pixels, n);
    if (dx == 0.0) {
      warnf("mid_layer_sensitivity: sample %d has zero perturbation, excluded", n);
      continue;
    }
    acc += detail::sample_l2_diff(clean_mid, adv_mid, n) / dx;
    ++valid;
  }
  if (valid == 0) {
    warnf("mid_layer_sensitivity: no perturbed samples, ratio undefined");
    return std::nullopt;
  }
  return acc / static_cast<double>(valid);
}

}  // namespace fadet
