#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stam/config.hpp"
#include "stam/data.hpp"
#include "stam/errors.hpp"
#include "stam/model.hpp"
#include "stam/tensor.hpp"

namespace stam {

// Dataset file (little-endian):
//   "STAMDS1\0"
//   u32 version, count, T, H, W, C, num_classes
//   count x { u32 label, f32[T][H][W][C] }
//
// Checkpoint file (little-endian):
//   "STAMCK1\0"
//   u32 version
//   u32 config length, config text (key=value lines)
//   u32 tensor count
//   per tensor, sorted by name: u32 name length, name, u32 rank, u32 dims[rank],
//   f64 data (row-major)
inline constexpr std::string_view kDatasetMagic{"STAMDS1\0", 8};
inline constexpr std::string_view kCheckpointMagic{"STAMCK1\0", 8};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 8 + 7 * 4;

namespace detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("write to '" + path + "' failed");
  }

  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : data_(std::move(data)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data));
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError("truncated file: expected " + std::to_string(n) + " bytes of " +
                            std::string(what) + ", " + std::to_string(remaining()) + " left",
                        pos_);
    }
  }
  std::string bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }
  double f64(std::string_view what) { return std::bit_cast<double>(u64(what)); }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError("bad magic bytes", pos_);
    }
    pos_ += magic.size();
  }
  void expect_end() const {
    if (remaining() != 0) throw FormatError(std::to_string(remaining()) + " unexpected trailing bytes", pos_);
  }

 private:
  std::vector<unsigned char> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<VideoClip> clips;

  static Dataset from_clips(std::vector<VideoClip> clips, std::size_t num_classes, std::size_t frames,
                            std::size_t height, std::size_t width, std::size_t channels) {
    return Dataset{num_classes, frames, height, width, channels, std::move(clips)};
  }

  std::size_t clip_bytes() const { return 4 + frames * height * width * channels * 4; }
  std::size_t file_bytes() const { return kDatasetHeaderBytes + clips.size() * clip_bytes(); }
};

inline std::vector<char> encode_dataset(const Dataset& ds) {
  const Shape dims{ds.frames, ds.height, ds.width, ds.channels};
  detail::ByteWriter w;
  w.bytes(kDatasetMagic);
  for (std::size_t v : {std::size_t{kFormatVersion}, ds.clips.size(), ds.frames, ds.height, ds.width,
                        ds.channels, ds.num_classes})
    w.u32(static_cast<std::uint32_t>(v));
  for (const VideoClip& c : ds.clips) {
    if (c.frames.shape() != dims) {
      throw ConfigError("clip " + std::to_string(c.source_id) + " has shape " + shape_str(c.frames.shape()) +
                        ", dataset expects " + shape_str(dims));
    }
    if (c.label >= ds.num_classes) {
      throw LabelError("clip label " + std::to_string(c.label) + " is outside [0, " +
                           std::to_string(ds.num_classes) + ")",
                       c.source_id);
    }
    w.u32(c.label);
    for (float v : c.frames.data()) w.f32(v);
  }
  return w.buffer();
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
  const std::vector<char> bytes = encode_dataset(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

inline Dataset decode_dataset(detail::ByteReader r) {
  r.expect_magic(kDatasetMagic);
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kFormatVersion) throw FormatError("unsupported dataset version", version_at);
  Dataset ds;
  const std::size_t count = r.u32("clip count");
  ds.frames = r.u32("T");
  ds.height = r.u32("H");
  ds.width = r.u32("W");
  ds.channels = r.u32("C");
  ds.num_classes = r.u32("class count");
  if (ds.frames == 0 || ds.height == 0 || ds.width == 0 || ds.channels == 0) {
    throw FormatError("zero frame dimension in header", 12);
  }
  const std::size_t per_clip = ds.frames * ds.height * ds.width * ds.channels;
  ds.clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    r.need(ds.clip_bytes(), "clip " + std::to_string(i));
    VideoClip c;
    c.label = r.u32("label");
    if (c.label >= ds.num_classes) {
      throw FormatError("label " + std::to_string(c.label) + " of clip " + std::to_string(i) +
                            " is outside [0, " + std::to_string(ds.num_classes) + ")",
                        at);
    }
    std::vector<float> data(per_clip);
    for (float& v : data) v = r.f32("frame data");
    c.frames = Tensor<float>(Shape{ds.frames, ds.height, ds.width, ds.channels}, std::move(data));
    c.source_id = i;
    ds.clips.push_back(std::move(c));
  }
  r.expect_end();
  return ds;
}

inline Dataset read_dataset(const std::string& path) {
  return decode_dataset(detail::ByteReader::from_file(path));
}

template <typename T>
void write_checkpoint(const std::string& path, const ModelConfig& config, ModelParams<T>& params) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kFormatVersion);
  const std::string text = config.to_text();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  const auto named = params.named();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(tensor->rank()));
    for (std::size_t d : tensor->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : tensor->data()) w.f64(static_cast<double>(v));
  }
  w.save(path);
}

template <typename T = double>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
};

// Loads a checkpoint. With `expected`, tensors are checked against the
// layout of `expected` and the stored config must equal it.
template <typename T = double>
Checkpoint<T> read_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  detail::ByteReader r = detail::ByteReader::from_file(path);
  r.expect_magic(kCheckpointMagic);
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kFormatVersion) throw FormatError("unsupported checkpoint version", version_at);
  const std::uint32_t text_len = r.u32("config length");
  const std::string text = r.bytes(text_len, "config text");
  ModelConfig stored;
  try {
    stored = ModelConfig::from_key_values(parse_key_values(text));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid embedded config: ") + e.what());
  }
  const ModelConfig layout = expected ? *expected : stored;
  Checkpoint<T> ck{stored, ModelParams<T>::init(layout, 0)};
  auto named = ck.params.named();
  std::map<std::string, Tensor<T>*> by_name(named.begin(), named.end());

  const std::uint32_t count = r.u32("tensor count");
  std::string previous;
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.bytes(name_len, "tensor name");
    if (i > 0 && !(previous < name)) throw FormatError("tensor names not sorted at '" + name + "'", at);
    previous = name;
    const std::uint32_t rank = r.u32("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dimension");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unexpected tensor '" + name + "' in checkpoint");
    if (it->second->shape() != shape) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(it->second->shape()));
    }
    for (auto& v : it->second->data()) v = static_cast<T>(r.f64("tensor data"));
    ++loaded;
  }
  r.expect_end();
  if (loaded != by_name.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(loaded) + " tensors, expected " +
                          std::to_string(by_name.size()));
  }
  if (expected && !(*expected == stored)) {
    throw CheckpointError("checkpoint config does not match expected config:\n" + stored.to_text() +
                          "expected:\n" + expected->to_text());
  }
  return ck;
}

}  // namespace stam
