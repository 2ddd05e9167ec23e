#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ctnmt/errors.hpp"
#include "ctnmt/optimizer.hpp"
#include "ctnmt/tensor.hpp"

namespace ctnmt {

inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'N', 'M', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::string kind;  // "teacher" or "model"
  std::uint64_t step = 0;
  std::uint64_t src_vocab_hash = 0;
  std::uint64_t tgt_vocab_hash = 0;
  std::string config_json;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : tensors) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CheckpointError(origin_ + ": truncated checkpoint");
  }

  std::vector<char> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline constexpr char kEndMarker[4] = {'D', 'O', 'N', 'E'};

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const CheckpointData& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(ck.kind);
  w.u64(ck.step);
  w.u64(ck.src_vocab_hash);
  w.u64(ck.tgt_vocab_hash);
  w.str(ck.config_json);
  w.u64(ck.tensors.size());
  for (const auto& r : ck.tensors) {
    if (shape_numel(r.shape) != r.values.size()) {
      throw CheckpointError("tensor '" + r.name + "' holds " + std::to_string(r.values.size()) +
                            " values for shape " + shape_str(r.shape));
    }
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.u64(d);
    for (float v : r.values) w.f32(v);
  }
  w.raw(detail::kEndMarker, sizeof detail::kEndMarker);
  return w.bytes();
}

inline CheckpointData parse_checkpoint(std::vector<char> bytes, const std::string& origin) {
  detail::ByteReader r(std::move(bytes), origin);
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointError(origin + ": not a checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(origin + ": unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointData ck;
  ck.kind = r.str();
  ck.step = r.u64();
  ck.src_vocab_hash = r.u64();
  ck.tgt_vocab_hash = r.u64();
  ck.config_json = r.str();
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw CheckpointError(origin + ": tensor '" + rec.name + "' has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.u64());
    const auto n = shape_numel(rec.shape);
    rec.values.resize(n);
    for (auto& v : rec.values) v = r.f32();
    ck.tensors.push_back(std::move(rec));
  }
  if (r.raw(sizeof detail::kEndMarker) != std::string(detail::kEndMarker, sizeof detail::kEndMarker) || !r.at_end()) {
    throw CheckpointError(origin + ": trailing or missing end marker");
  }
  return ck;
}

// Writes via a temporary file and rename, so readers never see a partial checkpoint.
inline void write_checkpoint(const std::string& path, const CheckpointData& ck) {
  const auto bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + path);
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(std::move(bytes), path);
}

template <typename T>
void append_tensors(CheckpointData& ck, const std::vector<NamedTensor<T>>& tensors) {
  for (const auto& p : tensors) {
    auto data = p.tensor.data();
    ck.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(data.begin(), data.end())});
  }
}

// Copies stored values into `tensors`. Every name and shape is checked before any value is
// written, so a failed load leaves the targets untouched.
template <typename T>
void restore_tensors(const CheckpointData& ck, const std::vector<NamedTensor<T>>& tensors) {
  std::vector<const TensorRecord*> sources;
  for (const auto& p : tensors) {
    const auto* rec = ck.find(p.name);
    if (!rec) throw CheckpointError("checkpoint lacks tensor '" + p.name + "'");
    if (rec->shape != p.tensor.shape()) {
      throw CheckpointError("shape mismatch for '" + p.name + "': checkpoint " + shape_str(rec->shape) +
                            ", model " + shape_str(p.tensor.shape()));
    }
    sources.push_back(rec);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto dst = tensors[i].tensor;
    auto out = dst.data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(sources[i]->values[k]);
  }
}

template <typename T>
void append_optimizer_state(CheckpointData& ck, const Optimizer<T>& opt) {
  for (const auto& p : opt.groups().all()) {
    const auto& m = opt.moments().at(p.name);
    ck.tensors.push_back({"adam.m:" + p.name, p.tensor.shape(), std::vector<float>(m.first.begin(), m.first.end())});
    ck.tensors.push_back({"adam.v:" + p.name, p.tensor.shape(), std::vector<float>(m.second.begin(), m.second.end())});
  }
}

template <typename T>
std::vector<std::pair<const TensorRecord*, const TensorRecord*>> optimizer_sources(const CheckpointData& ck,
                                                                                   const Optimizer<T>& opt) {
  std::vector<std::pair<const TensorRecord*, const TensorRecord*>> sources;
  for (const auto& p : opt.groups().all()) {
    const auto* m = ck.find("adam.m:" + p.name);
    const auto* v = ck.find("adam.v:" + p.name);
    if (!m || !v) throw CheckpointError("checkpoint lacks optimizer state for '" + p.name + "'");
    if (m->shape != p.tensor.shape() || v->shape != p.tensor.shape()) {
      throw CheckpointError("optimizer state shape mismatch for '" + p.name + "'");
    }
    sources.emplace_back(m, v);
  }
  return sources;
}

template <typename T>
void restore_optimizer_state(const CheckpointData& ck, Optimizer<T>& opt) {
  const auto sources = optimizer_sources(ck, opt);
  std::size_t i = 0;
  for (const auto& p : opt.groups().all()) {
    auto& slot = opt.moments().at(p.name);
    slot.first.assign(sources[i].first->values.begin(), sources[i].first->values.end());
    slot.second.assign(sources[i].second->values.begin(), sources[i].second->values.end());
    ++i;
  }
  opt.set_steps(ck.step);
}

}  // namespace ctnmt
