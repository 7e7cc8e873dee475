#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "fadet/tensor.hpp"

namespace fadet {

// Reverse-mode autodiff over Tensor. Graphs are built eagerly by the op
// functions below and freed when the last Var handle goes away. Parameters
// are long-lived leaves whose gradients accumulate across backward() calls
// until zeroed. All kernels are single-threaded with fixed accumulation
// order, so repeated runs are bit-identical.

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(value.shape());
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  Tensor& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.numel() > 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  const std::shared_ptr<Node>& node() const { return node_; }

  void zero_grad() {
    if (node_->grad.numel() > 0) node_->grad.fill(0.0f);
  }

  // Leaf copy of the current value, disconnected from this graph.
  Var detach() const { return leaf(node_->value, false); }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents.reserve(parents.size());
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Var(std::move(n));
}

inline void topo_sort(Node* root, std::vector<Node*>& order) {
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Backpropagates from a scalar root. Gradients accumulate into every
// reachable node with requires_grad set.
inline void backward(const Var& root, float seed = 1.0f) {
  if (root.value().numel() != 1) throw std::runtime_error("backward: root must be scalar");
  if (!root.requires_grad()) return;  // nothing reachable wants gradients
  std::vector<Node*> order;
  detail::topo_sort(root.node().get(), order);
  root.node()->ensure_grad();
  root.node()->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise / scalar ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) throw std::runtime_error("add: shape mismatch");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node* p = self.parents[static_cast<size_t>(k)].get();
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) throw std::runtime_error("mul: shape mismatch");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Var scale(const Var& a, float s) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return detail::make_op(std::move(out), {a}, [s](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] += s * self.grad[i];
  });
}

// c - a, used for (1 - cos_sim).
inline Var rsub_scalar(float c, const Var& a) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = c - out[i];
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] -= self.grad[i];
  });
}

// sum_i coeffs[i] * terms[i]; all terms must share a shape. Accumulates in
// argument order, which the trainer relies on for exact loss bookkeeping.
inline Var linear_combo(const std::vector<Var>& terms, const std::vector<float>& coeffs) {
  if (terms.empty() || terms.size() != coeffs.size())
    throw std::runtime_error("linear_combo: bad arity");
  Tensor out = Tensor::zeros(terms[0].value().shape());
  for (size_t k = 0; k < terms.size(); ++k) {
    if (!terms[k].value().same_shape(out)) throw std::runtime_error("linear_combo: shape mismatch");
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += coeffs[k] * terms[k].value()[i];
  }
  std::vector<float> cs = coeffs;
  return detail::make_op(std::move(out), std::vector<Var>(terms), [cs](Node& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      Node* p = self.parents[k].get();
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] += cs[k] * self.grad[i];
    }
  });
}

inline Var leaky_relu(const Var& a, float slope) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0f ? out[i] : slope * out[i];
  return detail::make_op(std::move(out), {a}, [slope](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      p->grad[i] += self.grad[i] * (p->value[i] > 0.0f ? 1.0f : slope);
  });
}

inline Var relu(const Var& a) { return leaky_relu(a, 0.0f); }

inline float stable_sigmoid(float x) {
  if (x >= 0.0f) {
    float e = std::exp(-x);
    return 1.0f / (1.0f + e);
  }
  float e = std::exp(x);
  return e / (1.0f + e);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      float y = self.value[i];
      p->grad[i] += self.grad[i] * y * (1.0f - y);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out({1});
  double acc = 0.0;
  for (int64_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
  out[0] = static_cast<float>(acc);
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    float g = self.grad[0];
    for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] += g;
  });
}

inline Var mean_all(const Var& a) {
  int64_t n = a.value().numel();
  if (n == 0) throw std::runtime_error("mean_all: empty tensor");
  Tensor out({1});
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += a.value()[i];
  out[0] = static_cast<float>(acc / static_cast<double>(n));
  float inv_n = 1.0f / static_cast<float>(n);
  return detail::make_op(std::move(out), {a}, [inv_n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    float g = self.grad[0] * inv_n;
    for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Copies channels [c0, c1) of an NCHW tensor.
inline Var slice_channels(const Var& x, int c0, int c1) {
  const Tensor& v = x.value();
  if (v.ndim() != 4) throw std::runtime_error("slice_channels: expected NCHW");
  int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::runtime_error("slice_channels: bad range");
  Tensor out({N, c1 - c0, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = c0; c < c1; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) out.at(n, c - c0, h, w) = v.at(n, c, h, w);
  return detail::make_op(std::move(out), {x}, [c0](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    int N = self.value.dim(0), Cs = self.value.dim(1), H = self.value.dim(2), W = self.value.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Cs; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) p->grad.at(n, c + c0, h, w) += self.grad.at(n, c, h, w);
  });
}

// N x C x H x W  ->  N x C spatial mean.
inline Var global_avg_pool(const Var& x) {
  const Tensor& v = x.value();
  if (v.ndim() != 4) throw std::runtime_error("global_avg_pool: expected NCHW");
  int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  if (H < 1 || W < 1) throw std::runtime_error("global_avg_pool: empty spatial dims");
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) acc += v.at(n, c, h, w);
      out.at2(n, c) = static_cast<float>(acc / (static_cast<double>(H) * W));
    }
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    int N = p->value.dim(0), C = p->value.dim(1), H = p->value.dim(2), W = p->value.dim(3);
    float inv = 1.0f / static_cast<float>(H * W);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        float g = self.grad.at2(n, c) * inv;
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) p->grad.at(n, c, h, w) += g;
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution and normalization
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.ndim() != 4 || wv.ndim() != 4) throw std::runtime_error("conv2d: expected 4-d tensors");
  int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != Cin) throw std::runtime_error("conv2d: channel mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw std::runtime_error("conv2d: output would be empty");
  Tensor out({N, Cout, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          float acc = b.value()[co];
          for (int ci = 0; ci < Cin; ++ci)
            for (int i = 0; i < kh; ++i) {
              int ih = oh * stride - pad + i;
              if (ih < 0 || ih >= H) continue;
              for (int j = 0; j < kw; ++j) {
                int iw = ow * stride - pad + j;
                if (iw < 0 || iw >= W) continue;
                acc += xv.at(n, ci, ih, iw) * wv.at(co, ci, i, j);
              }
            }
          out.at(n, co, oh, ow) = acc;
        }
  return detail::make_op(std::move(out), {x, w, b}, [stride, pad](Node& self) {
    Node* px = self.parents[0].get();
    Node* pw = self.parents[1].get();
    Node* pb = self.parents[2].get();
    const Tensor& xv = px->value;
    const Tensor& wv = pw->value;
    int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    int Ho = self.value.dim(2), Wo = self.value.dim(3);
    bool need_x = px->requires_grad, need_w = pw->requires_grad, need_b = pb->requires_grad;
    if (need_x) px->ensure_grad();
    if (need_w) pw->ensure_grad();
    if (need_b) pb->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Cout; ++co)
        for (int oh = 0; oh < Ho; ++oh)
          for (int ow = 0; ow < Wo; ++ow) {
            float g = self.grad.at(n, co, oh, ow);
            if (g == 0.0f) continue;
            if (need_b) pb->grad[co] += g;
            for (int ci = 0; ci < Cin; ++ci)
              for (int i = 0; i < kh; ++i) {
                int ih = oh * stride - pad + i;
                if (ih < 0 || ih >= H) continue;
                for (int j = 0; j < kw; ++j) {
                  int iw = ow * stride - pad + j;
                  if (iw < 0 || iw >= W) continue;
                  if (need_x) px->grad.at(n, ci, ih, iw) += g * wv.at(co, ci, i, j);
                  if (need_w) pw->grad.at(co, ci, i, j) += g * xv.at(n, ci, ih, iw);
                }
              }
          }
  });
}

// GroupNorm over (channels-per-group, H, W) per sample, affine per channel.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw std::runtime_error("group_norm: expected NCHW");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (C % groups != 0) throw std::runtime_error("group_norm: channels not divisible by groups");
  int cg = C / groups;
  int64_t m = static_cast<int64_t>(cg) * H * W;
  Tensor out({N, C, H, W});
  // Stash per-(n,g) statistics for backward.
  auto stats = std::make_shared<Tensor>(Tensor::zeros({N, groups, 2}));
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < groups; ++g) {
      double mean = 0.0;
      for (int c = g * cg; c < (g + 1) * cg; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) mean += xv.at(n, c, h, w);
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (int c = g * cg; c < (g + 1) * cg; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            double d = xv.at(n, c, h, w) - mean;
            var += d * d;
          }
      var /= static_cast<double>(m);
      float inv_std = static_cast<float>(1.0 / std::sqrt(var + eps));
      stats->at3(n, g, 0) = static_cast<float>(mean);
      stats->at3(n, g, 1) = inv_std;
      for (int c = g * cg; c < (g + 1) * cg; ++c) {
        float ga = gamma.value()[c], be = beta.value()[c];
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            float xh = (xv.at(n, c, h, w) - static_cast<float>(mean)) * inv_std;
            out.at(n, c, h, w) = ga * xh + be;
          }
      }
    }
  return detail::make_op(std::move(out), {x, gamma, beta}, [groups, stats](Node& self) {
    Node* px = self.parents[0].get();
    Node* pg = self.parents[1].get();
    Node* pb = self.parents[2].get();
    const Tensor& xv = px->value;
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int cg = C / groups;
    int64_t m = static_cast<int64_t>(cg) * H * W;
    bool need_x = px->requires_grad, need_g = pg->requires_grad, need_b = pb->requires_grad;
    if (need_x) px->ensure_grad();
    if (need_g) pg->ensure_grad();
    if (need_b) pb->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int g = 0; g < groups; ++g) {
        float mean = stats->at3(n, g, 0);
        float inv_std = stats->at3(n, g, 1);
        if (need_g || need_b) {
          for (int c = g * cg; c < (g + 1) * cg; ++c) {
            double dga = 0.0, dbe = 0.0;
            for (int h = 0; h < H; ++h)
              for (int w = 0; w < W; ++w) {
                float dy = self.grad.at(n, c, h, w);
                float xh = (xv.at(n, c, h, w) - mean) * inv_std;
                dga += dy * xh;
                dbe += dy;
              }
            if (need_g) pg->grad[c] += static_cast<float>(dga);
            if (need_b) pb->grad[c] += static_cast<float>(dbe);
          }
        }
        if (need_x) {
          // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int c = g * cg; c < (g + 1) * cg; ++c) {
            float ga = pg->value[c];
            for (int h = 0; h < H; ++h)
              for (int w = 0; w < W; ++w) {
                float dxh = self.grad.at(n, c, h, w) * ga;
                float xh = (xv.at(n, c, h, w) - mean) * inv_std;
                sum_dxh += dxh;
                sum_dxh_xh += static_cast<double>(dxh) * xh;
              }
          }
          float mean_dxh = static_cast<float>(sum_dxh / static_cast<double>(m));
          float mean_dxh_xh = static_cast<float>(sum_dxh_xh / static_cast<double>(m));
          for (int c = g * cg; c < (g + 1) * cg; ++c) {
            float ga = pg->value[c];
            for (int h = 0; h < H; ++h)
              for (int w = 0; w < W; ++w) {
                float dxh = self.grad.at(n, c, h, w) * ga;
                float xh = (xv.at(n, c, h, w) - mean) * inv_std;
                px->grad.at(n, c, h, w) += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
              }
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

// Mean binary cross-entropy with logits over every element.
inline Var bce_logits_mean(const Var& logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (!z.same_shape(targets)) throw std::runtime_error("bce_logits_mean: shape mismatch");
  int64_t n = z.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    float zi = z[i], t = targets[i];
    // max(z,0) - z*t + log1p(exp(-|z|))
    acc += std::max(zi, 0.0f) - zi * t + std::log1p(std::exp(-std::fabs(zi)));
  }
  Tensor out({1});
  out[0] = static_cast<float>(acc / static_cast<double>(n));
  Tensor tgt = targets;
  return detail::make_op(std::move(out), {logits}, [tgt](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    int64_t n = p->value.numel();
    float g = self.grad[0] / static_cast<float>(n);
    for (int64_t i = 0; i < n; ++i) p->grad[i] += g * (stable_sigmoid(p->value[i]) - tgt[i]);
  });
}

// Softmax cross-entropy over channel dim of an N x K x H x W map, averaged
// over cells where mask != 0. Targets hold the class index per cell.
// A zero mask yields a constant 0 with no gradient.
inline Var softmax_ce_masked_mean(const Var& logits, const Tensor& target_idx, const Tensor& mask) {
  const Tensor& z = logits.value();
  if (z.ndim() != 4) throw std::runtime_error("softmax_ce_masked_mean: expected NKHW");
  int N = z.dim(0), K = z.dim(1), H = z.dim(2), W = z.dim(3);
  int64_t count = 0;
  double acc = 0.0;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        if (mask.at(n, 0, h, w) == 0.0f) continue;
        ++count;
        float zmax = z.at(n, 0, h, w);
        for (int k = 1; k < K; ++k) zmax = std::max(zmax, z.at(n, k, h, w));
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(z.at(n, k, h, w) - zmax);
        int tk = static_cast<int>(target_idx.at(n, 0, h, w));
        acc += std::log(se) + zmax - z.at(n, tk, h, w);
      }
  Tensor out({1});
  out[0] = count > 0 ? static_cast<float>(acc / static_cast<double>(count)) : 0.0f;
  if (count == 0) return Var::constant(std::move(out));
  Tensor tgt = target_idx, msk = mask;
  int64_t cnt = count;
  return detail::make_op(std::move(out), {logits}, [tgt, msk, cnt](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const Tensor& z = p->value;
    int N = z.dim(0), K = z.dim(1), H = z.dim(2), W = z.dim(3);
    float g = self.grad[0] / static_cast<float>(cnt);
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          if (msk.at(n, 0, h, w) == 0.0f) continue;
          float zmax = z.at(n, 0, h, w);
          for (int k = 1; k < K; ++k) zmax = std::max(zmax, z.at(n, k, h, w));
          double se = 0.0;
          for (int k = 0; k < K; ++k) se += std::exp(z.at(n, k, h, w) - zmax);
          int tk = static_cast<int>(tgt.at(n, 0, h, w));
          for (int k = 0; k < K; ++k) {
            float soft = static_cast<float>(std::exp(z.at(n, k, h, w) - zmax) / se);
            p->grad.at(n, k, h, w) += g * (soft - (k == tk ? 1.0f : 0.0f));
          }
        }
  });
}

inline float smooth_l1(float d) { return std::fabs(d) < 1.0f ? 0.5f * d * d : std::fabs(d) - 0.5f; }
inline float smooth_l1_grad(float d) { return std::fabs(d) < 1.0f ? d : (d > 0.0f ? 1.0f : -1.0f); }

// Box regression loss on an N x 4 x H x W head. Channels 0,1 pass through a
// sigmoid (cell-relative center), channels 2,3 are raw log-size offsets.
// Per positive cell the four smooth-L1 terms are summed; the result is the
// mean over positive cells (constant 0 when there are none).
inline Var box_loss_masked_mean(const Var& box_head, const Tensor& targets, const Tensor& mask) {
  const Tensor& z = box_head.value();
  if (z.ndim() != 4 || z.dim(1) != 4) throw std::runtime_error("box_loss: expected Nx4xHxW");
  int N = z.dim(0), H = z.dim(2), W = z.dim(3);
  int64_t count = 0;
  double acc = 0.0;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        if (mask.at(n, 0, h, w) == 0.0f) continue;
        ++count;
        for (int c = 0; c < 4; ++c) {
          float pred = z.at(n, c, h, w);
          if (c < 2) pred = stable_sigmoid(pred);
          acc += smooth_l1(pred - targets.at(n, c, h, w));
        }
      }
  Tensor out({1});
  out[0] = count > 0 ? static_cast<float>(acc / static_cast<double>(count)) : 0.0f;
  if (count == 0) return Var::constant(std::move(out));
  Tensor tgt = targets, msk = mask;
  int64_t cnt = count;
  return detail::make_op(std::move(out), {box_head}, [tgt, msk, cnt](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const Tensor& z = p->value;
    int N = z.dim(0), H = z.dim(2), W = z.dim(3);
    float g = self.grad[0] / static_cast<float>(cnt);
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          if (msk.at(n, 0, h, w) == 0.0f) continue;
          for (int c = 0; c < 4; ++c) {
            float raw = z.at(n, c, h, w);
            if (c < 2) {
              float s = stable_sigmoid(raw);
              p->grad.at(n, c, h, w) += g * smooth_l1_grad(s - tgt.at(n, c, h, w)) * s * (1.0f - s);
            } else {
              p->grad.at(n, c, h, w) += g * smooth_l1_grad(raw - tgt.at(n, c, h, w));
            }
          }
        }
  });
}

// Row-wise cosine similarity of two N x C inputs -> N values. Each norm in
// the denominator carries a +1e-8 guard so zero-norm rows stay finite.
inline Var cosine_rows(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!av.same_shape(bv) || av.ndim() != 2) throw std::runtime_error("cosine_rows: expected matching NxC");
  int N = av.dim(0), C = av.dim(1);
  constexpr float kNormEps = 1e-8f;
  Tensor out({N});
  auto aux = std::make_shared<Tensor>(Tensor::zeros({N, 3}));  // dot, |a|, |b|
  for (int n = 0; n < N; ++n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int c = 0; c < C; ++c) {
      double x = av.at2(n, c), y = bv.at2(n, c);
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    float fa = static_cast<float>(std::sqrt(na));
    float fb = static_cast<float>(std::sqrt(nb));
    aux->at2(n, 0) = static_cast<float>(dot);
    aux->at2(n, 1) = fa;
    aux->at2(n, 2) = fb;
    out[n] = static_cast<float>(dot) / ((fa + kNormEps) * (fb + kNormEps));
  }
  return detail::make_op(std::move(out), {a, b}, [aux](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    const Tensor& av = pa->value;
    const Tensor& bv = pb->value;
    int N = av.dim(0), C = av.dim(1);
    constexpr float kNormEps = 1e-8f;
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (int n = 0; n < N; ++n) {
      float g = self.grad[n];
      if (g == 0.0f) continue;
      float dot = aux->at2(n, 0);
      float na = aux->at2(n, 1), nb = aux->at2(n, 2);
      float p = na + kNormEps, q = nb + kNormEps;
      float inv_pq = 1.0f / (p * q);
      // d cos / d a_i = b_i/(p q) - dot * (a_i/|a|) / (p^2 q); |a| guarded for the unit direction
      float na_div = std::max(na, 1e-12f), nb_div = std::max(nb, 1e-12f);
      for (int c = 0; c < C; ++c) {
        float x = av.at2(n, c), y = bv.at2(n, c);
        if (pa->requires_grad)
          pa->grad.at2(n, c) += g * (y * inv_pq - dot * (x / na_div) / (p * p * q));
        if (pb->requires_grad)
          pb->grad.at2(n, c) += g * (x * inv_pq - dot * (y / nb_div) / (p * q * q));
      }
    }
  });
}

}  // namespace fadet
