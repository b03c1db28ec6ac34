// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint layout (all integers little-endian):
//
//   magic        8 bytes  "SPTCKPT\0"
//   version      u32
//   count        u32      number of parameters
//   header       count x { u16 name_len, name bytes, u32 rows, u32 cols, u8 width }
//   data         count x rows*cols little-endian IEEE scalars of `width` bytes
//   config_len   u32
//   config       config_len bytes of JSON (ModelConfig)
//   checksum     u64      FNV-1a over the data section
//
// A file written at 8-byte width loads into a float model by rounding each
// value to nearest; a 4-byte file loads into a double model exactly.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/model.hpp"

namespace spt {

inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'P', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class Fnv1a64 {
 public:
  void update(const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= static_cast<unsigned char>(p[i]);
      h_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

template <class U>
void put_le(std::string& buf, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class F>
void put_float_le(std::string& buf, F v) {
  if constexpr (sizeof(F) == 8) {
    put_le(buf, std::bit_cast<std::uint64_t>(v));
  } else {
    put_le(buf, std::bit_cast<std::uint32_t>(v));
  }
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[at_ + i])) << (8 * i);
    at_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(at_, n);
    at_ += n;
    return s;
  }

  std::size_t position() const { return at_; }
  const char* at(std::size_t pos) const { return data_.data() + pos; }
  bool done() const { return at_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (at_ + n > data_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::string data_;
  std::size_t at_ = 0;
};

}  // namespace detail

template <class T>
void save_checkpoint(const SPTModel<T>& m, const std::filesystem::path& path) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  std::string header, data;
  std::uint32_t count = 0;
  m.for_each_parameter([&](const ParamInfo& info, const Matrix<T>& w) {
    detail::put_le<std::uint16_t>(header, static_cast<std::uint16_t>(info.name.size()));
    header += info.name;
    detail::put_le<std::uint32_t>(header, static_cast<std::uint32_t>(w.rows()));
    detail::put_le<std::uint32_t>(header, static_cast<std::uint32_t>(w.cols()));
    detail::put_le<std::uint8_t>(header, static_cast<std::uint8_t>(sizeof(T)));
    for (Index i = 0; i < w.size(); ++i) detail::put_float_le(data, w.data()[i]);
    ++count;
  });
  detail::Fnv1a64 sum;
  sum.update(data.data(), data.size());
  const std::string cfg = nlohmann::json(m.config).dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, count);
  out += header;
  out += data;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_le<std::uint64_t>(out, sum.value());

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

/// Loads a checkpoint. With `expected`, the embedded config must match it.
template <class T>
SPTModel<T> load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader rd(std::move(raw));

  const std::string magic = rd.bytes(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
    std::uint8_t width;
  };
  const auto count = rd.get<std::uint32_t>();
  std::vector<Entry> entries;
  std::size_t data_bytes = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = rd.bytes(rd.get<std::uint16_t>());
    e.rows = rd.get<std::uint32_t>();
    e.cols = rd.get<std::uint32_t>();
    e.width = rd.get<std::uint8_t>();
    if (e.width != 4 && e.width != 8) throw CheckpointError("bad element width for " + e.name);
    data_bytes += std::size_t(e.rows) * e.cols * e.width;
    entries.push_back(std::move(e));
  }
  const std::size_t data_at = rd.position();
  rd.bytes(data_bytes);
  const std::string cfg_text = rd.bytes(rd.get<std::uint32_t>());
  const auto stored_sum = rd.get<std::uint64_t>();
  if (!rd.done()) throw CheckpointError("trailing bytes after checkpoint checksum");
  detail::Fnv1a64 sum;
  sum.update(rd.at(data_at), data_bytes);
  if (sum.value() != stored_sum) throw CheckpointError("checkpoint checksum mismatch");

  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(cfg_text).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad config in checkpoint: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw CheckpointError("checkpoint config " + nlohmann::json(cfg).dump() + " does not match expected " +
                          nlohmann::json(*expected).dump());
  }

  SPTModel<T> m = allocate_model<T>(cfg);
  std::size_t i = 0;
  std::size_t offset = data_at;
  m.for_each_parameter([&](const ParamInfo& info, Matrix<T>& w) {
    if (i >= entries.size()) throw CheckpointError("checkpoint is missing parameter " + info.name);
    const Entry& e = entries[i++];
    if (e.name != info.name || e.rows != w.rows() || e.cols != w.cols()) {
      throw CheckpointError("checkpoint parameter " + e.name + " [" + std::to_string(e.rows) + "x" +
                            std::to_string(e.cols) + "] does not match " + info.name + " " + shape_str(w));
    }
    for (Index k = 0; k < w.size(); ++k) {
      const char* p = rd.at(offset);
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < e.width; ++b) bits |= std::uint64_t(static_cast<unsigned char>(p[b])) << (8 * b);
      if (e.width == 8) {
        w.data()[k] = static_cast<T>(std::bit_cast<double>(bits));
      } else {
        w.data()[k] = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
      }
      offset += e.width;
    }
  });
  if (i != entries.size()) throw CheckpointError("checkpoint has extra parameters");
  return m;
}

}  // namespace spt
