#pragma once

#include <string>
#include <vector>

#include "fadet/autograd.hpp"

namespace fadet {

struct Conv2dLayer {
  Var w, b;
  int stride = 1;
  int pad = 0;

  Conv2dLayer() = default;

  Conv2dLayer(int cin, int cout, int k, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    Tensor wt({cout, cin, k, k});
    float std = std::sqrt(2.0f / static_cast<float>(cin * k * k));
    wt.fill_normal(rng, 0.0f, std);
    w = Var::leaf(std::move(wt), true);
    b = Var::leaf(Tensor::zeros({cout}), true);
  }

  Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct GroupNormLayer {
  Var gamma, beta;
  int groups = 1;

  GroupNormLayer() = default;

  GroupNormLayer(int channels, int groups_) : groups(groups_) {
    gamma = Var::leaf(Tensor::full({channels}, 1.0f), true);
    beta = Var::leaf(Tensor::zeros({channels}), true);
  }

  Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

// Adam with bias correction. Parameter order is fixed at construction and
// must match across runs for bit-identical trajectories.
class Adam {
 public:
  Adam() = default;

  Adam(std::vector<Var> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.push_back(Tensor::zeros(p.value().shape()));
      v_.push_back(Tensor::zeros(p.value().shape()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k].value();
      Tensor& g = params_[k].grad();
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (int64_t i = 0; i < p.numel(); ++i) {
        m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
        float mhat = m[i] / bc1;
        float vhat = v[i] / bc2;
        p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }
  int64_t step_count() const { return t_; }

  // Serialization access; slot k corresponds to params()[k].
  std::vector<Tensor>& moment1() { return m_; }
  std::vector<Tensor>& moment2() { return v_; }
  const std::vector<Tensor>& moment1() const { return m_; }
  const std::vector<Tensor>& moment2() const { return v_; }
  void set_step_count(int64_t t) { t_ = t; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  float lr_ = 1e-3f;
  float beta1_ = 0.9f, beta2_ = 0.999f, eps_ = 1e-8f;
  int64_t t_ = 0;
};

// Temporarily clears requires_grad on a parameter set (attack inner loops,
// inference passes). Restores previous flags on destruction.
class ParamFreezeGuard {
 public:
  explicit ParamFreezeGuard(std::vector<Var> params) : params_(std::move(params)) {
    saved_.reserve(params_.size());
    for (auto& p : params_) {
      saved_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~ParamFreezeGuard() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
  }
  ParamFreezeGuard(const ParamFreezeGuard&) = delete;
  ParamFreezeGuard& operator=(const ParamFreezeGuard&) = delete;

 private:
  std::vector<Var> params_;
  std::vector<bool> saved_;
};

}  // namespace fadet
