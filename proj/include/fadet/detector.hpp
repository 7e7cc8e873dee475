#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fadet/dataset.hpp"
#include "fadet/nn.hpp"

namespace fadet {

struct DetectorConfig {
  int num_classes = 3;
  int stride = 16;                                      // cumulative backbone stride
  std::vector<int> backbone_channels = {8, 16, 16, 32, 32};
  int mid_tap = -1;                                     // backbone block index; -1 = last

  bool operator==(const DetectorConfig&) const = default;

  int blocks() const { return static_cast<int>(backbone_channels.size()); }

  int tap_index() const { return mid_tap < 0 ? blocks() - 1 : mid_tap; }

  float anchor_px() const { return 2.0f * static_cast<float>(stride); }

  void validate() const {
    if (num_classes < 1) throw UserError("detector config: num_classes must be >= 1");
    if (backbone_channels.empty()) throw UserError("detector config: backbone_channels empty");
    int s = stride, twos = 0;
    while (s > 1 && s % 2 == 0) {
      s /= 2;
      ++twos;
    }
    if (s != 1) throw UserError("detector config: stride must be a power of two");
    if (twos > blocks()) throw UserError("detector config: stride too large for block count");
    for (int c : backbone_channels)
      if (c % 4 != 0) throw UserError("detector config: channel widths must be divisible by 4");
    if (tap_index() < 0 || tap_index() >= blocks()) throw UserError("detector config: mid_tap out of range");
  }

  // Per-block stride: the first log2(stride) blocks downsample by 2.
  std::vector<int> block_strides() const {
    int s = stride, twos = 0;
    while (s > 1) {
      s /= 2;
      ++twos;
    }
    std::vector<int> out(static_cast<size_t>(blocks()), 1);
    for (int i = 0; i < twos; ++i) out[static_cast<size_t>(i)] = 2;
    return out;
  }
};

struct Detection {
  Box box;
  int class_id = 0;
  float confidence = 0.0f;
};

struct LossTerms {
  double objectness = 0.0;
  double classification = 0.0;
  double localization = 0.0;
};

// Output bundle of a training-mode forward pass: the scalar multi-task loss,
// its decomposition, and the feature map captured at the configured tap.
// `input` is the pixel leaf the graph was built on, so callers can read
// input gradients after backward().
struct TappedForward {
  Var input;
  Var total_loss;
  LossTerms loss_terms;
  Var mid_feature;
  Var head;  // raw (1 + num_classes + 4)-channel map
};

// Detector contract: training-mode forward with a feature tap, inference
// decoding, and frozen cloning for teachers. External full-scale detectors
// can implement this to reuse the attack/training/eval stack.
class Detector {
 public:
  virtual ~Detector() = default;

  virtual const DetectorConfig& config() const = 0;

  virtual TappedForward forward_train(const ImageBatch& batch, bool input_requires_grad = true) = 0;
  virtual TappedForward forward_train_pixels(const Tensor& pixels, const std::vector<Annotation>& annotations,
                                             bool input_requires_grad = true) = 0;

  virtual std::vector<std::vector<Detection>> forward_infer(const ImageBatch& batch, float conf_threshold,
                                                            float nms_iou) = 0;

  virtual std::unique_ptr<Detector> clone_frozen() const = 0;

  virtual std::vector<Var> parameters() const = 0;
  virtual std::vector<std::pair<std::string, Var>> named_parameters() const = 0;
};

namespace detail {

inline double box_iou(const Box& a, const Box& b) {
  float ix0 = std::max(a.xmin, b.xmin), iy0 = std::max(a.ymin, b.ymin);
  float ix1 = std::min(a.xmax, b.xmax), iy1 = std::min(a.ymax, b.ymax);
  double inter = std::max(0.0f, ix1 - ix0) * static_cast<double>(std::max(0.0f, iy1 - iy0));
  double uni = a.area() + static_cast<double>(b.area()) - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

// Greedy per-class NMS; input must be sorted by descending confidence.
inline std::vector<Detection> nms_per_class(const std::vector<Detection>& sorted, float nms_iou) {
  std::vector<Detection> kept;
  for (const auto& d : sorted) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == d.class_id && box_iou(k.box, d.box) > nms_iou) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace detail

// Five-block conv backbone (3x3 conv + GroupNorm + leaky ReLU), single-scale
// dense head predicting per-cell objectness, class scores and box offsets.
class ToyDetector : public Detector {
 public:
  ToyDetector(DetectorConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(init_seed, "detector-init"));
    auto strides = cfg_.block_strides();
    int cin = 3;
    for (int i = 0; i < cfg_.blocks(); ++i) {
      int cout = cfg_.backbone_channels[static_cast<size_t>(i)];
      convs_.emplace_back(cin, cout, 3, strides[static_cast<size_t>(i)], 1, rng);
      norms_.emplace_back(cout, cout / 4);
      cin = cout;
    }
    head_ = Conv2dLayer(cin, 1 + cfg_.num_classes + 4, 1, 1, 0, rng);
  }

  const DetectorConfig& config() const override { return cfg_; }

  TappedForward forward_train(const ImageBatch& batch, bool input_requires_grad = true) override {
    return forward_train_pixels(batch.pixels, batch.annotations, input_requires_grad);
  }

  TappedForward forward_train_pixels(const Tensor& pixels, const std::vector<Annotation>& annotations,
                                     bool input_requires_grad = true) override {
    TappedForward tf = forward_raw(pixels, input_requires_grad);
    int K = cfg_.num_classes;
    Tensor obj_target, cls_idx, box_target, pos_mask;
    build_targets(annotations, tf.head.value().dim(2), tf.head.value().dim(3), obj_target, cls_idx,
                  box_target, pos_mask);
    Var obj = bce_logits_mean(slice_channels(tf.head, 0, 1), obj_target);
    Var cls = softmax_ce_masked_mean(slice_channels(tf.head, 1, 1 + K), cls_idx, pos_mask);
    Var loc = box_loss_masked_mean(slice_channels(tf.head, 1 + K, 1 + K + 4), box_target, pos_mask);
    tf.total_loss = linear_combo({obj, cls, loc}, {1.0f, 1.0f, 1.0f});
    tf.loss_terms = {static_cast<double>(obj.value()[0]), static_cast<double>(cls.value()[0]),
                     static_cast<double>(loc.value()[0])};
    if (!std::isfinite(tf.total_loss.value()[0]))
      throw std::runtime_error("detector forward produced a non-finite loss");
    return tf;
  }

  // Backbone + head without loss; used by inference, attacks and Grad-CAM.
  TappedForward forward_raw(const Tensor& pixels, bool input_requires_grad) {
    if (pixels.ndim() != 4 || pixels.dim(1) != 3) throw UserError("detector: expected Nx3xHxW pixels");
    if (pixels.dim(2) % cfg_.stride != 0 || pixels.dim(3) % cfg_.stride != 0)
      throw UserError("detector: image dims must be divisible by stride " + std::to_string(cfg_.stride));
    float lo = 0.0f, hi = 1.0f;
    for (int64_t i = 0; i < pixels.numel(); ++i) {
      lo = std::min(lo, pixels[i]);
      hi = std::max(hi, pixels[i]);
    }
    if (lo < -0.02f || hi > 1.02f) throw UserError("detector: pixels outside [0,1] range");

    TappedForward tf;
    tf.input = Var::leaf(pixels, input_requires_grad);
    Var x = tf.input;
    for (int i = 0; i < cfg_.blocks(); ++i) {
      x = leaky_relu(norms_[static_cast<size_t>(i)](convs_[static_cast<size_t>(i)](x)), 0.1f);
      if (i == cfg_.tap_index()) tf.mid_feature = x;
    }
    tf.head = head_(x);
    return tf;
  }

  std::vector<std::vector<Detection>> forward_infer(const ImageBatch& batch, float conf_threshold,
                                                    float nms_iou) override {
    ParamFreezeGuard freeze(parameters());
    TappedForward tf = forward_raw(batch.pixels, false);
    const Tensor& head = tf.head.value();
    int N = head.dim(0), K = cfg_.num_classes, Hc = head.dim(2), Wc = head.dim(3);
    float img_w = static_cast<float>(batch.width()), img_h = static_cast<float>(batch.height());
    std::vector<std::vector<Detection>> out(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
      std::vector<Detection> dets;
      for (int i = 0; i < Hc; ++i)
        for (int j = 0; j < Wc; ++j) {
          float obj_p = stable_sigmoid(head.at(n, 0, i, j));
          int best_k = 0;
          float zmax = head.at(n, 1, i, j);
          for (int k = 1; k < K; ++k)
            if (head.at(n, 1 + k, i, j) > zmax) {
              zmax = head.at(n, 1 + k, i, j);
              best_k = k;
            }
          double se = 0.0;
          for (int k = 0; k < K; ++k) se += std::exp(head.at(n, 1 + k, i, j) - zmax);
          float p_cls = static_cast<float>(1.0 / se);
          float conf = obj_p * p_cls;
          if (conf < conf_threshold) continue;
          Box box = decode_box(head, n, i, j, K, img_w, img_h);
          if (!(box.xmin < box.xmax && box.ymin < box.ymax)) continue;
          dets.push_back(Detection{box, best_k, conf});
        }
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
      out[static_cast<size_t>(n)] = detail::nms_per_class(dets, nms_iou);
    }
    return out;
  }

  std::unique_ptr<Detector> clone_frozen() const override {
    auto copy = std::make_unique<ToyDetector>(*this);
    for (auto& [name, p] : copy->named_parameters()) {
      Var frozen = Var::leaf(p.value(), false);  // deep copy, no shared storage
      copy->replace_param(name, frozen);
    }
    return copy;
  }

  std::vector<Var> parameters() const override {
    std::vector<Var> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Var>> named_parameters() const override {
    std::vector<std::pair<std::string, Var>> out;
    for (size_t i = 0; i < convs_.size(); ++i) {
      std::string base = "backbone." + std::to_string(i);
      out.emplace_back(base + ".conv.w", convs_[i].w);
      out.emplace_back(base + ".conv.b", convs_[i].b);
      out.emplace_back(base + ".gn.gamma", norms_[i].gamma);
      out.emplace_back(base + ".gn.beta", norms_[i].beta);
    }
    out.emplace_back("head.w", head_.w);
    out.emplace_back("head.b", head_.b);
    return out;
  }

  // Overwrites a named parameter's Var handle (checkpoint load, freezing).
  void replace_param(const std::string& name, const Var& v) {
    auto set = [&](Var& slot) {
      if (!slot.value().same_shape(v.value()))
        throw UserError("checkpoint parameter shape mismatch for " + name);
      slot = v;
    };
    for (size_t i = 0; i < convs_.size(); ++i) {
      std::string base = "backbone." + std::to_string(i);
      if (name == base + ".conv.w") return set(convs_[i].w);
      if (name == base + ".conv.b") return set(convs_[i].b);
      if (name == base + ".gn.gamma") return set(norms_[i].gamma);
      if (name == base + ".gn.beta") return set(norms_[i].beta);
    }
    if (name == "head.w") return set(head_.w);
    if (name == "head.b") return set(head_.b);
    throw UserError("unknown parameter name: " + name);
  }

  // Cell/offset encoding used by the head. Exposed for tests that build
  // head activations by hand and for target construction.
  Box decode_box(const Tensor& head, int n, int i, int j, int K, float img_w, float img_h) const {
    float s = static_cast<float>(cfg_.stride);
    float cx = (static_cast<float>(j) + stable_sigmoid(head.at(n, 1 + K, i, j))) * s;
    float cy = (static_cast<float>(i) + stable_sigmoid(head.at(n, 1 + K + 1, i, j))) * s;
    float tw = std::clamp(head.at(n, 1 + K + 2, i, j), -4.0f, 4.0f);
    float th = std::clamp(head.at(n, 1 + K + 3, i, j), -4.0f, 4.0f);
    float w = cfg_.anchor_px() * std::exp(tw);
    float h = cfg_.anchor_px() * std::exp(th);
    Box b{cx - 0.5f * w, cy - 0.5f * h, cx + 0.5f * w, cy + 0.5f * h};
    b.xmin = std::max(0.0f, b.xmin);
    b.ymin = std::max(0.0f, b.ymin);
    b.xmax = std::min(img_w, b.xmax);
    b.ymax = std::min(img_h, b.ymax);
    return b;
  }

  void build_targets(const std::vector<Annotation>& annotations, int Hc, int Wc, Tensor& obj_target,
                     Tensor& cls_idx, Tensor& box_target, Tensor& pos_mask) const {
    int N = static_cast<int>(annotations.size());
    float s = static_cast<float>(cfg_.stride);
    obj_target = Tensor::zeros({N, 1, Hc, Wc});
    cls_idx = Tensor::zeros({N, 1, Hc, Wc});
    box_target = Tensor::zeros({N, 4, Hc, Wc});
    pos_mask = Tensor::zeros({N, 1, Hc, Wc});
    for (int n = 0; n < N; ++n) {
      const Annotation& ann = annotations[static_cast<size_t>(n)];
      for (size_t k = 0; k < ann.boxes.size(); ++k) {
        const Box& b = ann.boxes[k];
        int j = std::clamp(static_cast<int>(b.cx() / s), 0, Wc - 1);
        int i = std::clamp(static_cast<int>(b.cy() / s), 0, Hc - 1);
        if (pos_mask.at(n, 0, i, j) != 0.0f) continue;  // first box claims the cell
        pos_mask.at(n, 0, i, j) = 1.0f;
        obj_target.at(n, 0, i, j) = 1.0f;
        cls_idx.at(n, 0, i, j) = static_cast<float>(ann.class_ids[k]);
        box_target.at(n, 0, i, j) = b.cx() / s - static_cast<float>(j);
        box_target.at(n, 1, i, j) = b.cy() / s - static_cast<float>(i);
        box_target.at(n, 2, i, j) = std::log(b.width() / cfg_.anchor_px());
        box_target.at(n, 3, i, j) = std::log(b.height() / cfg_.anchor_px());
      }
    }
  }

 private:
  DetectorConfig cfg_;
  std::vector<Conv2dLayer> convs_;
  std::vector<GroupNormLayer> norms_;
  Conv2dLayer head_;
};

}  // namespace fadet
