#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fadet/alignment.hpp"
#include "fadet/attack.hpp"
#include "fadet/checkpoint.hpp"
#include "fadet/dataset.hpp"
#include "fadet/detector.hpp"

namespace fadet {

struct TrainConfig {
  double alpha = 0.5;           // clean-loss mixing weight of the outer objective
  AttackConfig attack{0.01f, 1, 0.0f, false};
  AlignmentWeights weights{0.0, 0.0};
  std::string teacher_checkpoint;  // optional; required when gamma > 0 at the CLI level
  int epochs = 15;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 1;

  void validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw UserError("train config: alpha must be in [0,1]");
    attack.validate();
    weights.validate();
    if (epochs < 1) throw UserError("train config: epochs must be >= 1");
    if (batch_size < 1) throw UserError("train config: batch_size must be >= 1");
    if (lr <= 0.0) throw UserError("train config: lr must be positive");
  }
};

struct StepMetrics {
  int64_t step = 0;
  double adv_det = 0.0;
  double clean_det = 0.0;
  double ssfa = 0.0;
  double kdfa = 0.0;
  double lr = 0.0;
  double total = 0.0;  // (1-a)*adv + a*clean + b*ssfa + g*kdfa, in that order
};

using MetricsSink = std::function<void(const StepMetrics&)>;

struct TrainState {
  int64_t step = 0;
  int epoch = 0;
  int batch_in_epoch = 0;
  StepMetrics last;
};

// Raised when the loss goes non-finite; the detector has been restored to
// the last epoch-boundary snapshot by the time this propagates.
struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

enum class TrainMode { Standard, Adversarial, FeatureAligned };

// Runs the three training regimes over one shared step implementation:
//   Standard:       min  l(f(x), y)
//   Adversarial:    min  (1-a) * max_d l(f(x+d), y) + a * l(f(x), y)
//   FeatureAligned: adversarial + b * SSFA + g * KDFA on the mid features
// Zero-weight terms are skipped outright, so FeatureAligned with b=g=0
// takes the exact instruction path of Adversarial, and alpha=1 reduces every
// mode to the standard updates, keeping parameter trajectories bit-identical
// under a fixed seed.
class Trainer {
 public:
  Trainer(ToyDetector& det, const Dataset& dataset, TrainConfig cfg, TrainMode mode,
          Detector* teacher = nullptr, MetricsSink sink = nullptr)
      : det_(det),
        dataset_(dataset),
        cfg_(std::move(cfg)),
        mode_(mode),
        teacher_(teacher),
        sink_(std::move(sink)),
        iterator_(dataset, cfg_.batch_size, cfg_.seed) {
    cfg_.validate();
    if (mode_ == TrainMode::Adversarial && cfg_.weights.enabled())
      throw UserError("train_adversarial requires beta = gamma = 0");
    if (mode_ == TrainMode::FeatureAligned && cfg_.weights.gamma > 0.0) {
      if (!teacher_) throw UserError("feature-aligned training with gamma > 0 requires a teacher");
      int tap = det_.config().tap_index();
      int student_ch = det_.config().backbone_channels[static_cast<size_t>(tap)];
      int teacher_tap = teacher_->config().tap_index();
      int teacher_ch = teacher_->config().backbone_channels[static_cast<size_t>(teacher_tap)];
      if (student_ch != teacher_ch)
        throw UserError("teacher/student tap channel mismatch (" + std::to_string(teacher_ch) + " vs " +
                        std::to_string(student_ch) + ")");
    }
    opt_ = Adam(det_.parameters(), static_cast<float>(cfg_.lr));
    snapshot();
  }

  TrainState& state() { return state_; }
  const TrainConfig& config() const { return cfg_; }
  Adam& optimizer() { return opt_; }

  // Runs the remaining epochs (cfg.epochs total, counted from state).
  void train() {
    while (state_.epoch < cfg_.epochs) {
      auto batches = iterator_.epoch_indices(state_.epoch);
      for (size_t b = static_cast<size_t>(state_.batch_in_epoch); b < batches.size(); ++b) {
        step_batch(iterator_.make_batch(batches[b]));
        state_.batch_in_epoch = static_cast<int>(b) + 1;
      }
      state_.epoch += 1;
      state_.batch_in_epoch = 0;
      snapshot();
    }
  }

  // One optimizer step on one batch.
  void step_batch(const ImageBatch& batch) {
    opt_.zero_grad();
    StepMetrics m;
    m.step = state_.step;
    m.lr = opt_.lr();
    try {
      if (mode_ == TrainMode::Standard) {
        TappedForward tf = det_.forward_train(batch, false);
        backward(tf.total_loss);
        m.clean_det = tf.total_loss.value()[0];
        m.total = m.clean_det;
      } else {
        step_adversarial(batch, m);
      }
    } catch (const UserError&) {
      throw;  // configuration problem, not divergence
    } catch (const std::runtime_error& e) {
      restore_snapshot();
      throw TrainingDiverged(std::string("training diverged at step ") + std::to_string(state_.step) + ": " +
                             e.what());
    }
    opt_.step();
    state_.step += 1;
    state_.last = m;
    if (sink_) sink_(m);
  }

  void save_checkpoint(const std::string& path, json extra_meta = json::object()) const {
    Checkpoint ckpt;
    ckpt.meta = std::move(extra_meta);
    ckpt.meta["detector_config"] = detector_config_to_json(det_.config());
    ckpt.meta["train"] = {{"step", state_.step},
                          {"epoch", state_.epoch},
                          {"batch_in_epoch", state_.batch_in_epoch},
                          {"adam_t", opt_.step_count()},
                          {"seed", cfg_.seed},
                          {"mode", static_cast<int>(mode_)}};
    auto named = det_.named_parameters();
    for (auto& [name, p] : named) ckpt.tensors.emplace_back(name, p.value());
    for (size_t i = 0; i < named.size(); ++i) {
      ckpt.tensors.emplace_back("opt.m." + named[i].first, opt_.moment1()[i]);
      ckpt.tensors.emplace_back("opt.v." + named[i].first, opt_.moment2()[i]);
    }
    write_checkpoint(path, ckpt);
  }

  // Restores parameters, optimizer state and loop counters; training then
  // continues the exact saved trajectory.
  void restore(const Checkpoint& ckpt) {
    load_detector_params(ckpt, det_);
    auto named = det_.named_parameters();
    for (size_t i = 0; i < named.size(); ++i) {
      const Tensor* m = ckpt.find("opt.m." + named[i].first);
      const Tensor* v = ckpt.find("opt.v." + named[i].first);
      if (!m || !v) throw UserError("checkpoint missing optimizer state for " + named[i].first);
      opt_.moment1()[i] = *m;
      opt_.moment2()[i] = *v;
    }
    const json& t = ckpt.meta.at("train");
    opt_.set_step_count(t.at("adam_t").get<int64_t>());
    state_.step = t.at("step").get<int64_t>();
    state_.epoch = t.at("epoch").get<int>();
    state_.batch_in_epoch = t.at("batch_in_epoch").get<int>();
    snapshot();
  }

 private:
  void step_adversarial(const ImageBatch& batch, StepMetrics& m) {
    float alpha = static_cast<float>(cfg_.alpha);
    float adv_w = static_cast<float>(1.0 - cfg_.alpha);
    float beta = static_cast<float>(cfg_.weights.beta);
    float gamma = static_cast<float>(cfg_.weights.gamma);
    bool need_adv = adv_w > 0.0f || beta > 0.0f || gamma > 0.0f;

    // First PGD iteration doubles as the clean pass: parameter gradients and
    // the mid feature are reused instead of running a separate clean forward.
    FirstStepResult first = first_step_with_reuse(det_, batch, cfg_.attack, alpha);
    m.clean_det = first.clean_total;

    auto params = det_.parameters();
    for (size_t i = 0; i < params.size(); ++i) params[i].grad() = first.param_grad_contribution[i];

    if (need_adv) {
      Tensor adv_pixels = continue_pgd(det_, first.adv_pixels, batch.pixels, batch.annotations, cfg_.attack);
      TappedForward adv_tf = det_.forward_train_pixels(adv_pixels, batch.annotations, false);
      m.adv_det = adv_tf.total_loss.value()[0];

      std::vector<Var> terms;
      std::vector<float> coeffs;
      if (adv_w > 0.0f) {
        terms.push_back(adv_tf.total_loss);
        coeffs.push_back(adv_w);
      }
      if (beta > 0.0f) {
        Var ssfa = ssfa_loss(adv_tf.mid_feature, first.clean_mid_detached);
        m.ssfa = ssfa.value()[0];
        terms.push_back(ssfa);
        coeffs.push_back(beta);
      }
      if (gamma > 0.0f) {
        TappedForward teacher_tf = teacher_->forward_train_pixels(batch.pixels, batch.annotations, false);
        Var kdfa = kdfa_loss(adv_tf.mid_feature, teacher_tf.mid_feature);
        m.kdfa = kdfa.value()[0];
        terms.push_back(kdfa);
        coeffs.push_back(gamma);
      }
      if (!terms.empty()) backward(linear_combo(terms, coeffs));
    }
    m.total = adv_w * m.adv_det;
    m.total += alpha * m.clean_det;
    m.total += beta * m.ssfa;
    m.total += gamma * m.kdfa;
    if (!std::isfinite(m.total)) throw std::runtime_error("non-finite objective");
  }

  void snapshot() {
    snap_params_.clear();
    for (auto& p : det_.parameters()) snap_params_.push_back(p.value());
    snap_m_ = opt_.moment1();
    snap_v_ = opt_.moment2();
    snap_t_ = opt_.step_count();
  }

  void restore_snapshot() {
    auto params = det_.parameters();
    for (size_t i = 0; i < params.size(); ++i) params[i].value() = snap_params_[i];
    opt_.moment1() = snap_m_;
    opt_.moment2() = snap_v_;
    opt_.set_step_count(snap_t_);
  }

  ToyDetector& det_;
  const Dataset& dataset_;
  TrainConfig cfg_;
  TrainMode mode_;
  Detector* teacher_;
  MetricsSink sink_;
  BatchIterator iterator_;
  Adam opt_;
  TrainState state_;
  std::vector<Tensor> snap_params_, snap_m_, snap_v_;
  int64_t snap_t_ = 0;
};

// Clean training; the result doubles as the KDFA teacher / fine-tune init.
inline TrainState train_standard(ToyDetector& det, const Dataset& ds, TrainConfig cfg, MetricsSink sink = {}) {
  Trainer t(det, ds, std::move(cfg), TrainMode::Standard, nullptr, std::move(sink));
  t.train();
  return t.state();
}

// Vanilla mixed adversarial training (no alignment terms).
inline TrainState train_adversarial(ToyDetector& det, const Dataset& ds, TrainConfig cfg,
                                    MetricsSink sink = {}) {
  Trainer t(det, ds, std::move(cfg), TrainMode::Adversarial, nullptr, std::move(sink));
  t.train();
  return t.state();
}

// Adversarial training with SSFA/KDFA feature alignment.
inline TrainState train_feature_aligned(ToyDetector& det, const Dataset& ds, TrainConfig cfg,
                                        Detector* teacher, MetricsSink sink = {}) {
  Trainer t(det, ds, std::move(cfg), TrainMode::FeatureAligned, teacher, std::move(sink));
  t.train();
  return t.state();
}

}  // namespace fadet
