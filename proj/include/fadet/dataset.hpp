#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fadet/image.hpp"
#include "fadet/tensor.hpp"

namespace fadet {

using json = nlohmann::json;

struct Box {
  float xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  float width() const { return xmax - xmin; }
  float height() const { return ymax - ymin; }
  float area() const { return std::max(0.0f, width()) * std::max(0.0f, height()); }
  float cx() const { return 0.5f * (xmin + xmax); }
  float cy() const { return 0.5f * (ymin + ymax); }
};

struct Annotation {
  int image_id = 0;
  std::vector<Box> boxes;
  std::vector<int> class_ids;

  void validate(int image_w, int image_h) const {
    if (boxes.size() != class_ids.size()) throw UserError("annotation: boxes/class_ids length mismatch");
    for (const Box& b : boxes) {
      if (!(b.xmin < b.xmax && b.ymin < b.ymax)) throw UserError("annotation: degenerate box");
      if (b.xmin < 0 || b.ymin < 0 || b.xmax > static_cast<float>(image_w) || b.ymax > static_cast<float>(image_h))
        throw UserError("annotation: box outside image bounds");
    }
  }
};

// One batch of images with ground truth; pixels are NCHW in [0,1].
struct ImageBatch {
  Tensor pixels;
  std::vector<Annotation> annotations;

  int size() const { return pixels.dim(0); }
  int height() const { return pixels.dim(2); }
  int width() const { return pixels.dim(3); }
};

struct Sample {
  int image_id = 0;
  Tensor pixels;  // CHW
  Annotation annotation;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  size_t size() const { return samples.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names = {"circle", "square", "triangle"};
  return names;
}

struct ShapesDatasetSpec {
  int num_images = 100;
  int image_size = 96;
  int min_shapes = 1;
  int max_shapes = 3;
  int min_shape_px = 16;
  int max_shape_px = 40;
  float background_lo = 0.10f;  // per-pixel gray level range
  float background_hi = 0.50f;
  uint64_t seed = 7;

  void validate() const {
    if (num_images < 1) throw UserError("shapes spec: num_images must be >= 1");
    if (image_size < 16) throw UserError("shapes spec: image_size must be >= 16");
    if (min_shapes < 1 || max_shapes < min_shapes) throw UserError("shapes spec: bad shapes_per_image range");
    if (min_shape_px < 4 || max_shape_px < min_shape_px) throw UserError("shapes spec: bad shape size range");
    if (max_shape_px > image_size - 2) throw UserError("shapes spec: shapes larger than image");
    if (background_lo < 0.0f || background_hi > 1.0f || background_lo > background_hi)
      throw UserError("shapes spec: background range must satisfy 0 <= lo <= hi <= 1");
  }
};

namespace detail {

// Saturated fill colors, one channel dominant per class; far from the gray
// background so a pixel test can recover shape masks from rendered images.
inline Rgb shape_color(int class_id) {
  switch (class_id) {
    case 0: return {230, 26, 26};
    case 1: return {26, 230, 26};
    default: return {26, 26, 230};
  }
}

struct PlacedShape {
  int class_id;
  int bx0, by0, bx1, by1;  // tight mask bbox, inclusive pixel coords
};

// Rasterizes one shape into mask (size x size local box at x0,y0).
inline std::vector<uint8_t> shape_mask(int class_id, int size) {
  std::vector<uint8_t> mask(static_cast<size_t>(size) * size, 0);
  float c = 0.5f * static_cast<float>(size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float px = static_cast<float>(x) + 0.5f - c;
      float py = static_cast<float>(y) + 0.5f - c;
      bool in = false;
      if (class_id == 0) {
        in = px * px + py * py <= c * c;
      } else if (class_id == 1) {
        in = true;  // square fills the box
      } else {
        // upright triangle, apex centered at the top, base along the bottom
        float depth = static_cast<float>(y) + 0.5f;
        in = std::fabs(px) <= 0.5f * depth;
      }
      if (in) mask[static_cast<size_t>(y) * size + x] = 1;
    }
  return mask;
}

inline bool boxes_intersect(int a0, int a1, int a2, int a3, int b0, int b1, int b2, int b3) {
  return !(a2 < b0 || b2 < a0 || a3 < b1 || b3 < a1);
}

}  // namespace detail

// Renders image `index` of the dataset described by `spec`, fully determined
// by (spec.seed, index). Returns the image plus its annotation.
inline std::pair<ImageU8, Annotation> render_shapes_image(const ShapesDatasetSpec& spec, int index) {
  Rng rng(derive_seed(spec.seed, "shapes-image", static_cast<uint64_t>(index)));
  int S = spec.image_size;
  ImageU8 img(S, S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      auto g = static_cast<unsigned char>(
          std::lround(rng.uniform(spec.background_lo, spec.background_hi) * 255.0));
      img.set(x, y, g, g, g);
    }

  int want = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  std::vector<detail::PlacedShape> placed;
  Annotation ann;
  ann.image_id = index;
  for (int s = 0; s < want; ++s) {
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      int cls = rng.uniform_int(0, 2);
      int size = rng.uniform_int(spec.min_shape_px, spec.max_shape_px);
      int x0 = rng.uniform_int(1, S - size - 1);
      int y0 = rng.uniform_int(1, S - size - 1);
      auto mask = detail::shape_mask(cls, size);
      int bx0 = size, by0 = size, bx1 = -1, by1 = -1;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (mask[static_cast<size_t>(y) * size + x]) {
            bx0 = std::min(bx0, x);
            by0 = std::min(by0, y);
            bx1 = std::max(bx1, x);
            by1 = std::max(by1, y);
          }
      if (bx1 < 0) continue;
      detail::PlacedShape cand{cls, x0 + bx0, y0 + by0, x0 + bx1, y0 + by1};
      bool clash = false;
      for (const auto& p : placed)
        if (detail::boxes_intersect(cand.bx0 - 2, cand.by0 - 2, cand.bx1 + 2, cand.by1 + 2, p.bx0, p.by0,
                                    p.bx1, p.by1)) {
          clash = true;
          break;
        }
      if (clash) continue;
      Rgb col = detail::shape_color(cls);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (mask[static_cast<size_t>(y) * size + x]) img.set(x0 + x, y0 + y, col.r, col.g, col.b);
      placed.push_back(cand);
      ann.boxes.push_back(Box{static_cast<float>(cand.bx0), static_cast<float>(cand.by0),
                              static_cast<float>(cand.bx1 + 1), static_cast<float>(cand.by1 + 1)});
      ann.class_ids.push_back(cls);
      ok = true;
    }
    if (!ok) warnf("shapes generator: no room for shape %d in image %d, skipping", s, index);
  }
  ann.validate(S, S);
  return {std::move(img), std::move(ann)};
}

inline Dataset generate_shapes_in_memory(const ShapesDatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.class_names = shape_class_names();
  for (int i = 0; i < spec.num_images; ++i) {
    auto [img, ann] = render_shapes_image(spec, i);
    ds.samples.push_back(Sample{i, image_to_chw(img), std::move(ann)});
  }
  return ds;
}

namespace detail {

inline std::string image_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06d.png", index);
  return buf;
}

}  // namespace detail

// Writes images/ + annotations.json under out_dir. Deterministic in spec.
inline void generate_shapes(const ShapesDatasetSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw UserError("cannot create dataset directory: " + out_dir);

  json images = json::array();
  json annotations = json::array();
  int ann_id = 1;
  for (int i = 0; i < spec.num_images; ++i) {
    auto [img, ann] = render_shapes_image(spec, i);
    std::string name = detail::image_file_name(i);
    write_png((fs::path(out_dir) / "images" / name).string(), img);
    images.push_back({{"id", i}, {"file_name", name}, {"width", spec.image_size}, {"height", spec.image_size}});
    for (size_t k = 0; k < ann.boxes.size(); ++k) {
      const Box& b = ann.boxes[k];
      int x = static_cast<int>(b.xmin), y = static_cast<int>(b.ymin);
      int w = static_cast<int>(b.xmax - b.xmin), h = static_cast<int>(b.ymax - b.ymin);
      annotations.push_back({{"id", ann_id++},
                             {"image_id", i},
                             {"category_id", ann.class_ids[k] + 1},
                             {"bbox", {x, y, w, h}},
                             {"area", w * h},
                             {"iscrowd", 0}});
    }
  }
  json categories = json::array();
  for (size_t c = 0; c < shape_class_names().size(); ++c)
    categories.push_back({{"id", static_cast<int>(c) + 1}, {"name", shape_class_names()[c]}});
  json root = {{"images", images}, {"annotations", annotations}, {"categories", categories}};

  std::ofstream out(fs::path(out_dir) / "annotations.json");
  if (!out) throw UserError("cannot write annotations.json under " + out_dir);
  out << root.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// COCO-JSON loader
// ---------------------------------------------------------------------------

// Loads a COCO-format annotation file; images are resolved against
// <json dir>/images/<file_name>. Boxes convert from (x, y, w, h) to corner
// form. Boxes with nonpositive extent are dropped with a warning.
inline Dataset load_coco_json(const std::string& annotations_path) {
  namespace fs = std::filesystem;
  std::ifstream in(annotations_path);
  if (!in) throw UserError("cannot open annotations file: " + annotations_path);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw UserError(std::string("malformed COCO JSON: ") + e.what());
  }
  if (!root.contains("images") || !root.contains("annotations") || !root.contains("categories"))
    throw UserError("COCO JSON missing images/annotations/categories arrays");

  // category_id -> contiguous class index, ordered by ascending id
  std::vector<std::pair<int, std::string>> cats;
  for (const auto& c : root["categories"]) cats.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
  std::sort(cats.begin(), cats.end());
  std::vector<std::string> class_names;
  std::vector<std::pair<int, int>> cat_to_idx;
  for (size_t i = 0; i < cats.size(); ++i) {
    class_names.push_back(cats[i].second);
    cat_to_idx.emplace_back(cats[i].first, static_cast<int>(i));
  }
  auto class_index = [&](int cat_id) {
    for (auto& [id, idx] : cat_to_idx)
      if (id == cat_id) return idx;
    throw UserError("annotation references unknown category id " + std::to_string(cat_id));
  };

  fs::path image_dir = fs::path(annotations_path).parent_path() / "images";

  Dataset ds;
  ds.class_names = std::move(class_names);
  std::vector<int> image_ids;
  for (const auto& im : root["images"]) {
    int id = im.at("id").get<int>();
    std::string file = im.at("file_name").get<std::string>();
    fs::path p = image_dir / file;
    if (!fs::exists(p)) throw UserError("missing image file: " + p.string());
    ImageU8 img = read_png(p.string());
    Annotation ann;
    ann.image_id = id;
    ds.samples.push_back(Sample{id, image_to_chw(img), std::move(ann)});
    image_ids.push_back(id);
  }
  auto sample_of = [&](int image_id) -> Sample* {
    for (size_t i = 0; i < image_ids.size(); ++i)
      if (image_ids[i] == image_id) return &ds.samples[i];
    return nullptr;
  };

  for (const auto& a : root["annotations"]) {
    int image_id = a.at("image_id").get<int>();
    Sample* s = sample_of(image_id);
    if (!s) {
      warnf("annotation %d references unknown image %d, skipping", a.value("id", -1), image_id);
      continue;
    }
    auto bbox = a.at("bbox");
    double x = bbox.at(0).get<double>(), y = bbox.at(1).get<double>();
    double w = bbox.at(2).get<double>(), h = bbox.at(3).get<double>();
    if (w <= 0.0 || h <= 0.0) {
      warnf("annotation %d has nonpositive extent (w=%g h=%g), skipping", a.value("id", -1), w, h);
      continue;
    }
    s->annotation.boxes.push_back(Box{static_cast<float>(x), static_cast<float>(y),
                                      static_cast<float>(x + w), static_cast<float>(y + h)});
    s->annotation.class_ids.push_back(class_index(a.at("category_id").get<int>()));
  }
  for (auto& s : ds.samples) s.annotation.validate(s.pixels.dim(2), s.pixels.dim(1));
  return ds;
}

inline Dataset load_dataset_dir(const std::string& dataset_dir) {
  return load_coco_json((std::filesystem::path(dataset_dir) / "annotations.json").string());
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline ImageBatch assemble_batch(const Dataset& ds, const std::vector<int>& indices) {
  if (indices.empty()) throw std::runtime_error("assemble_batch: empty index list");
  const Tensor& first = ds.samples[static_cast<size_t>(indices[0])].pixels;
  int C = first.dim(0), H = first.dim(1), W = first.dim(2);
  ImageBatch batch;
  batch.pixels = Tensor({static_cast<int>(indices.size()), C, H, W});
  for (size_t n = 0; n < indices.size(); ++n) {
    const Sample& s = ds.samples[static_cast<size_t>(indices[n])];
    if (s.pixels.dim(0) != C || s.pixels.dim(1) != H || s.pixels.dim(2) != W)
      throw UserError("assemble_batch: mixed image sizes in one batch");
    const float* src = s.pixels.data();
    float* dst = batch.pixels.data() + static_cast<int64_t>(n) * C * H * W;
    std::copy(src, src + static_cast<int64_t>(C) * H * W, dst);
    batch.annotations.push_back(s.annotation);
  }
  return batch;
}

// Deterministic epoch batching. With a shuffle seed, epoch e uses the
// permutation derived from (seed, e); without one the insertion order is
// kept. The last partial batch is always kept.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, std::optional<uint64_t> shuffle_seed)
      : ds_(ds), batch_size_(batch_size), shuffle_seed_(shuffle_seed) {
    if (batch_size < 1) throw UserError("batch_size must be >= 1");
    if (ds.samples.empty()) throw UserError("empty dataset");
  }

  std::vector<std::vector<int>> epoch_indices(int epoch) const {
    std::vector<int> order;
    if (shuffle_seed_) {
      order = permutation(ds_.size(), derive_seed(*shuffle_seed_, "shuffle", static_cast<uint64_t>(epoch)));
    } else {
      order.resize(ds_.size());
      for (size_t i = 0; i < ds_.size(); ++i) order[i] = static_cast<int>(i);
    }
    std::vector<std::vector<int>> batches;
    for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch_size_)) {
      size_t end = std::min(order.size(), i + static_cast<size_t>(batch_size_));
      batches.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
    }
    return batches;
  }

  ImageBatch make_batch(const std::vector<int>& indices) const { return assemble_batch(ds_, indices); }

 private:
  const Dataset& ds_;
  int batch_size_;
  std::optional<uint64_t> shuffle_seed_;
};

}  // namespace fadet
