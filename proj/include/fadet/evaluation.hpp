#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fadet/attack.hpp"
#include "fadet/detector.hpp"

namespace fadet {

struct EvalConfig {
  float attack_epsilon = 0.03f;
  std::vector<int> attack_steps_list = {1, 3, 5, 10};
  double iou_threshold = 0.5;
  float conf_threshold = 0.05f;
  float nms_iou = 0.5f;
  int batch_size = 8;

  void validate() const {
    if (attack_steps_list.empty()) throw UserError("eval config: attack_steps_list must be non-empty");
    for (int k : attack_steps_list)
      if (k < 1) throw UserError("eval config: attack steps must be positive");
    if (attack_epsilon < 0.0f) throw UserError("eval config: attack_epsilon must be >= 0");
    if (batch_size < 1) throw UserError("eval config: batch_size must be >= 1");
  }
};

inline double iou(const Box& a, const Box& b) { return detail::box_iou(a, b); }

struct APResult {
  std::map<int, double> per_class;  // classes with >= 1 ground-truth instance
  std::optional<double> mAP;        // nullopt when no class has ground truth
};

// COCO-style AP at a single IoU threshold with 101-point interpolation.
// Detections are matched greedily in descending confidence order (stable:
// confidence ties keep input order); each matches the unmatched ground-truth
// box of highest IoU >= threshold in its image, IoU ties breaking toward the
// lower ground-truth index.
inline APResult average_precision(const std::vector<std::vector<Detection>>& detections_per_image,
                                  const std::vector<Annotation>& annotations, double iou_threshold) {
  if (detections_per_image.size() != annotations.size())
    throw std::runtime_error("average_precision: detections/annotations size mismatch");
  int num_images = static_cast<int>(annotations.size());

  int max_class = -1;
  for (const auto& ann : annotations)
    for (int c : ann.class_ids) max_class = std::max(max_class, c);
  for (const auto& dets : detections_per_image)
    for (const auto& d : dets) max_class = std::max(max_class, d.class_id);

  APResult result;
  if (max_class < 0) return result;

  for (int cls = 0; cls <= max_class; ++cls) {
    int64_t total_gt = 0;
    for (const auto& ann : annotations)
      for (int c : ann.class_ids)
        if (c == cls) ++total_gt;
    if (total_gt == 0) continue;  // classes without ground truth are excluded

    struct Rec {
      float conf;
      int image;
      Box box;
    };
    std::vector<Rec> recs;
    for (int im = 0; im < num_images; ++im)
      for (const auto& d : detections_per_image[static_cast<size_t>(im)])
        if (d.class_id == cls) recs.push_back({d.confidence, im, d.box});
    std::stable_sort(recs.begin(), recs.end(), [](const Rec& a, const Rec& b) { return a.conf > b.conf; });

    std::vector<std::vector<bool>> gt_matched(static_cast<size_t>(num_images));
    for (int im = 0; im < num_images; ++im)
      gt_matched[static_cast<size_t>(im)].assign(annotations[static_cast<size_t>(im)].boxes.size(), false);

    std::vector<double> precision, recall;
    int64_t tp = 0, fp = 0;
    for (const auto& r : recs) {
      const Annotation& ann = annotations[static_cast<size_t>(r.image)];
      int best = -1;
      double best_iou = -1.0;
      for (size_t g = 0; g < ann.boxes.size(); ++g) {
        if (ann.class_ids[g] != cls || gt_matched[static_cast<size_t>(r.image)][g]) continue;
        double v = iou(r.box, ann.boxes[g]);
        if (v >= iou_threshold && v > best_iou) {  // strict >: IoU ties keep the lower index
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        gt_matched[static_cast<size_t>(r.image)][static_cast<size_t>(best)] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }

    // 101-point interpolated area: mean over r in {0, 0.01, ..., 1} of the
    // max precision among points with recall >= r.
    double ap = 0.0;
    if (!precision.empty()) {
      std::vector<double> envelope(precision.size());
      double running = 0.0;
      for (size_t i = precision.size(); i-- > 0;) {
        running = std::max(running, precision[i]);
        envelope[i] = running;
      }
      double acc = 0.0;
      for (int ri = 0; ri <= 100; ++ri) {
        double r = static_cast<double>(ri) / 100.0;
        size_t lo = std::lower_bound(recall.begin(), recall.end(), r) - recall.begin();
        if (lo < recall.size()) acc += envelope[lo];
      }
      ap = acc / 101.0;
    }
    result.per_class[cls] = ap;
  }

  if (!result.per_class.empty()) {
    double acc = 0.0;
    for (const auto& [cls, ap] : result.per_class) acc += ap;
    result.mAP = acc / static_cast<double>(result.per_class.size());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<int>> eval_batches(size_t n, int batch_size) {
  std::vector<std::vector<int>> out;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch_size)) {
    std::vector<int> idx;
    for (size_t j = i; j < std::min(n, i + static_cast<size_t>(batch_size)); ++j)
      idx.push_back(static_cast<int>(j));
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace detail

// Runs inference over the whole dataset in insertion order. When attack is
// non-null every batch is perturbed white-box against `det` first.
inline std::vector<std::vector<Detection>> collect_detections(Detector& det, const Dataset& ds,
                                                              const EvalConfig& cfg,
                                                              const AttackConfig* attack = nullptr) {
  std::vector<std::vector<Detection>> all;
  for (const auto& idx : detail::eval_batches(ds.size(), cfg.batch_size)) {
    ImageBatch batch = assemble_batch(ds, idx);
    if (attack) {
      AdversarialBatch adv = pgd_attack(det, batch, *attack);
      batch.pixels = std::move(adv.pixels);
    }
    auto dets = det.forward_infer(batch, cfg.conf_threshold, cfg.nms_iou);
    for (auto& d : dets) all.push_back(std::move(d));
  }
  return all;
}

inline std::vector<Annotation> dataset_annotations(const Dataset& ds) {
  std::vector<Annotation> anns;
  for (const auto& s : ds.samples) anns.push_back(s.annotation);
  return anns;
}

inline std::optional<double> evaluate_clean(Detector& det, const Dataset& ds, const EvalConfig& cfg) {
  cfg.validate();
  auto dets = collect_detections(det, ds, cfg);
  return average_precision(dets, dataset_annotations(ds), cfg.iou_threshold).mAP;
}

struct AdvEvalResult {
  std::vector<std::pair<int, double>> ap_per_step;  // (k, AP) in configured order
  double adv_ap = 0.0;
};

inline AdvEvalResult evaluate_adversarial(Detector& det, const Dataset& ds, const EvalConfig& cfg) {
  cfg.validate();
  auto anns = dataset_annotations(ds);
  AdvEvalResult res;
  double acc = 0.0;
  for (int k : cfg.attack_steps_list) {
    AttackConfig atk;
    atk.epsilon = cfg.attack_epsilon;
    atk.steps = k;
    atk.step_size = 0.0f;  // epsilon / k per definition
    auto dets = collect_detections(det, ds, cfg, &atk);
    auto ap = average_precision(dets, anns, cfg.iou_threshold).mAP;
    double v = ap.value_or(0.0);
    res.ap_per_step.emplace_back(k, v);
    acc += v;
  }
  res.adv_ap = acc / static_cast<double>(cfg.attack_steps_list.size());
  return res;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalReport {
  double clean_ap = 0.0;
  std::vector<std::pair<int, double>> adv_ap_per_step;
  double adv_ap = 0.0;
  double ac_ap = 0.0;
  json metadata = json::object();
};

inline EvalReport compose_report(double clean_ap, const std::vector<std::pair<int, double>>& adv_ap_per_step,
                                 json metadata = json::object()) {
  EvalReport r;
  r.clean_ap = clean_ap;
  r.adv_ap_per_step = adv_ap_per_step;
  double acc = 0.0;
  for (const auto& [k, ap] : adv_ap_per_step) acc += ap;
  r.adv_ap = acc / static_cast<double>(adv_ap_per_step.size());
  r.ac_ap = (clean_ap + r.adv_ap) / 2.0;
  r.metadata = std::move(metadata);
  return r;
}

inline double round_decimals(double x, int places) {
  double f = std::pow(10.0, places);
  return std::round(x * f) / f;
}

inline json report_to_json(const EvalReport& r) {
  json steps = json::object();
  for (const auto& [k, ap] : r.adv_ap_per_step) steps["pgd" + std::to_string(k)] = ap;
  return {{"clean_ap", r.clean_ap},
          {"adv_ap_per_step", steps},
          {"adv_ap", r.adv_ap},
          {"ac_ap", r.ac_ap},
          {"metadata", r.metadata}};
}

// One header line + one data row: clean_ap, ap_pgd<k>..., adv_ap, ac_ap.
inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream head, row;
  head << "clean_ap";
  row.precision(6);
  row << std::fixed << r.clean_ap;
  for (const auto& [k, ap] : r.adv_ap_per_step) {
    head << ",ap_pgd" << k;
    row << "," << ap;
  }
  head << ",adv_ap,ac_ap";
  row << "," << r.adv_ap << "," << r.ac_ap;
  return head.str() + "\n" + row.str() + "\n";
}

// COCO results-format dump of detections for cross-tool checks.
inline json detections_to_coco_json(const Dataset& ds, const std::vector<std::vector<Detection>>& dets) {
  json out = json::array();
  for (size_t i = 0; i < ds.samples.size(); ++i)
    for (const auto& d : dets[i]) {
      out.push_back({{"image_id", ds.samples[i].image_id},
                     {"category_id", d.class_id + 1},
                     {"bbox", {d.box.xmin, d.box.ymin, d.box.width(), d.box.height()}},
                     {"score", d.confidence}});
    }
  return out;
}

}  // namespace fadet
