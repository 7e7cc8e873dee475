#pragma once

#include <string>
#include <vector>

#include "fadet/detector.hpp"

namespace fadet {

// L-inf attack budget: k signed-gradient steps of size epsilon/steps unless
// step_size overrides, projected back into the budget ball and [0,1].
struct AttackConfig {
  float epsilon = 0.03f;
  int steps = 1;
  float step_size = 0.0f;  // 0 = use epsilon / steps
  bool random_init = false;
  static constexpr bool targeted = false;

  float step() const { return step_size > 0.0f ? step_size : epsilon / static_cast<float>(steps); }

  void validate() const {
    if (epsilon < 0.0f) throw UserError("attack config: epsilon must be >= 0");
    if (steps < 1) throw UserError("attack config: steps must be >= 1");
    if (step_size < 0.0f) throw UserError("attack config: step_size must be >= 0");
  }
};

struct AdversarialBatch {
  Tensor pixels;
  Tensor source_pixels;
  std::vector<Annotation> annotations;
  AttackConfig config;

  void check_budget() const {
    for (int64_t i = 0; i < pixels.numel(); ++i) {
      float d = std::fabs(pixels[i] - source_pixels[i]);
      if (d > config.epsilon + 1e-6f) throw std::runtime_error("adversarial batch violates L-inf budget");
      if (pixels[i] < 0.0f || pixels[i] > 1.0f) throw std::runtime_error("adversarial pixel outside [0,1]");
    }
  }
};

namespace detail {

// Count of projected updates applied; tests instrument step-count behavior.
inline int64_t& pgd_iteration_count() {
  static thread_local int64_t n = 0;
  return n;
}

inline float sign3(float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); }

inline Tensor project_step(const Tensor& x_cur, const Tensor& input_grad, const Tensor& x0, float step,
                           float epsilon) {
  Tensor out = x_cur;
  for (int64_t i = 0; i < out.numel(); ++i) {
    float v = x_cur[i] + step * sign3(input_grad[i]);
    v = std::min(x0[i] + epsilon, std::max(x0[i] - epsilon, v));  // budget ball
    v = std::min(1.0f, std::max(0.0f, v));                        // pixel range
    out[i] = v;
  }
  return out;
}

// One PGD iteration against the current parameters. The caller controls
// whether parameter gradients are computed (they never alter the input
// gradient, only whether dW buffers fill).
inline Tensor pgd_iteration(Detector& det, const Tensor& x_cur, const Tensor& x0,
                            const std::vector<Annotation>& annotations, const AttackConfig& cfg,
                            TappedForward* tf_out = nullptr) {
  TappedForward tf = det.forward_train_pixels(x_cur, annotations, true);
  backward(tf.total_loss);
  const Tensor& g = tf.input.grad();
  if (!g.all_finite())
    throw std::runtime_error("pgd_attack: non-finite input gradient (loss=" +
                             std::to_string(tf.total_loss.value()[0]) + ")");
  Tensor next = project_step(x_cur, g, x0, cfg.step(), cfg.epsilon);
  ++pgd_iteration_count();
  if (tf_out) *tf_out = std::move(tf);
  return next;
}

}  // namespace detail

// k-step projected gradient descent on the detector's training loss.
// Parameters are left untouched; with random_init=false the result is a
// pure function of (parameters, batch, config).
inline AdversarialBatch pgd_attack(Detector& det, const ImageBatch& batch, const AttackConfig& cfg,
                                   uint64_t init_seed = 0) {
  cfg.validate();
  AdversarialBatch adv;
  adv.source_pixels = batch.pixels;
  adv.annotations = batch.annotations;
  adv.config = cfg;
  if (cfg.epsilon == 0.0f) {
    adv.pixels = batch.pixels;
    return adv;
  }
  Tensor x = batch.pixels;
  if (cfg.random_init) {
    Rng rng(derive_seed(init_seed, "pgd-random-init"));
    for (int64_t i = 0; i < x.numel(); ++i) {
      float v = x[i] + static_cast<float>(rng.uniform(-cfg.epsilon, cfg.epsilon));
      x[i] = std::min(1.0f, std::max(0.0f, v));
    }
  }
  ParamFreezeGuard freeze(det.parameters());
  for (int t = 0; t < cfg.steps; ++t) x = detail::pgd_iteration(det, x, batch.pixels, batch.annotations, cfg);
  adv.pixels = std::move(x);
  return adv;
}

// Single signed-gradient step with the full budget: PGD-1.
inline AdversarialBatch fgsm_attack(Detector& det, const ImageBatch& batch, float epsilon) {
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.steps = 1;
  cfg.step_size = 0.0f;
  cfg.random_init = false;
  return pgd_attack(det, batch, cfg);
}

// First PGD iteration with gradient reuse: the forward/backward pass on the
// clean input serves three purposes at once — it yields (a) the first
// adversarial iterate, (b) the clean mid-layer features cached for SSFA
// (detached: no graph is kept), and (c) the clean-loss parameter gradients,
// scaled by alpha, for reuse in the outer update. Saves the separate clean
// pass a naive implementation would run per training step.
struct FirstStepResult {
  Tensor adv_pixels;
  Tensor clean_mid_detached;
  LossTerms clean_terms;
  double clean_total = 0.0;
  std::vector<Tensor> param_grad_contribution;  // alpha * d(clean loss)/d(theta)
};

inline FirstStepResult first_step_with_reuse(Detector& det, const ImageBatch& batch, const AttackConfig& cfg,
                                             float alpha) {
  cfg.validate();
  if (cfg.random_init) throw UserError("first_step_with_reuse requires random_init=false");
  auto params = det.parameters();
  for (auto& p : params)
    if (!p.requires_grad()) throw UserError("first_step_with_reuse: detector must be trainable");

  TappedForward tf;
  Tensor next = detail::pgd_iteration(det, batch.pixels, batch.pixels, batch.annotations, cfg, &tf);

  FirstStepResult r;
  r.adv_pixels = std::move(next);
  r.clean_mid_detached = tf.mid_feature.value();
  r.clean_terms = tf.loss_terms;
  r.clean_total = tf.total_loss.value()[0];
  r.param_grad_contribution.reserve(params.size());
  for (auto& p : params) {
    Tensor g = p.grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] *= alpha;
    r.param_grad_contribution.push_back(std::move(g));
    p.zero_grad();  // leave the detector's accumulators untouched
  }
  return r;
}

// Runs PGD iterations [1, cfg.steps) after first_step_with_reuse produced
// the first iterate. Parameters stay frozen.
inline Tensor continue_pgd(Detector& det, const Tensor& first_iterate, const Tensor& clean_pixels,
                           const std::vector<Annotation>& annotations, const AttackConfig& cfg) {
  Tensor x = first_iterate;
  if (cfg.steps <= 1) return x;
  ParamFreezeGuard freeze(det.parameters());
  for (int t = 1; t < cfg.steps; ++t) x = detail::pgd_iteration(det, x, clean_pixels, annotations, cfg);
  return x;
}

}  // namespace fadet
