#pragma once

#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fadet/detector.hpp"

namespace fadet {

// Checkpoint container: a JSON header (self-describing metadata + tensor
// index) followed by a raw little-endian float blob. Floats round-trip
// bit-exactly because they never pass through text.
struct Checkpoint {
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

constexpr char kCheckpointMagic[9] = "FADETCK1";

inline void write_u64(std::ostream& out, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json index = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.numel());
  }
  json header = {{"meta", ckpt.meta}, {"tensors", index}};
  std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write checkpoint: " + path);
  out.write(detail::kCheckpointMagic, 8);
  detail::write_u64(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw UserError("not a checkpoint file (bad magic): " + path);
  uint64_t header_len = detail::read_u64(in);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw UserError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw UserError("truncated checkpoint blob: " + path);
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Detector-level save/load
// ---------------------------------------------------------------------------

inline json detector_config_to_json(const DetectorConfig& cfg) {
  return {{"num_classes", cfg.num_classes},
          {"stride", cfg.stride},
          {"backbone_channels", cfg.backbone_channels},
          {"mid_tap", cfg.mid_tap}};
}

inline DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig cfg;
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.stride = j.at("stride").get<int>();
  cfg.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  cfg.mid_tap = j.at("mid_tap").get<int>();
  return cfg;
}

inline void save_detector(const std::string& path, const Detector& det, json extra_meta = json::object()) {
  Checkpoint ckpt;
  ckpt.meta = std::move(extra_meta);
  ckpt.meta["detector_config"] = detector_config_to_json(det.config());
  for (auto& [name, p] : det.named_parameters()) ckpt.tensors.emplace_back(name, p.value());
  write_checkpoint(path, ckpt);
}

// Loads parameters into an existing detector; the stored config must match.
inline void load_detector_params(const Checkpoint& ckpt, ToyDetector& det) {
  DetectorConfig stored = detector_config_from_json(ckpt.meta.at("detector_config"));
  if (!(stored == det.config()))
    throw UserError("checkpoint detector config does not match target detector");
  for (auto& [name, p] : det.named_parameters()) {
    const Tensor* t = ckpt.find(name);
    if (!t) throw UserError("checkpoint missing parameter: " + name);
    if (!t->same_shape(p.value())) throw UserError("checkpoint parameter shape mismatch: " + name);
    Var slot = p;
    slot.value() = *t;  // shared node: updates the detector's parameter
  }
}

inline std::unique_ptr<ToyDetector> load_toy_detector(const std::string& path, json* meta_out = nullptr) {
  Checkpoint ckpt = read_checkpoint(path);
  DetectorConfig cfg = detector_config_from_json(ckpt.meta.at("detector_config"));
  auto det = std::make_unique<ToyDetector>(cfg, 0);
  load_detector_params(ckpt, *det);
  if (meta_out) *meta_out = ckpt.meta;
  return det;
}

}  // namespace fadet
