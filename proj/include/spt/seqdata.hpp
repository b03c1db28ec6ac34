// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/numcore/array.hpp"
#include "spt/random.hpp"

namespace spt {

// ---------------------------------------------------------------------------
// Alphabet
// ---------------------------------------------------------------------------

inline constexpr std::size_t kAlphabetSize = 20;
inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWY";

/// One of the 20 canonical residues, identified by its alphabetical index.
class AminoAcid {
 public:
  constexpr AminoAcid() = default;
  static constexpr AminoAcid from_index(std::size_t i) { return AminoAcid(static_cast<std::uint8_t>(i)); }

  /// nullopt for anything outside the canonical alphabet (B, J, O, U, X, Z, ...).
  static constexpr std::optional<AminoAcid> from_letter(char c) {
    const char up = (c >= 'a' && c <= 'z') ? static_cast<char>(c - 'a' + 'A') : c;
    const auto pos = kAlphabet.find(up);
    if (pos == std::string_view::npos) return std::nullopt;
    return AminoAcid(static_cast<std::uint8_t>(pos));
  }

  constexpr std::size_t index() const { return index_; }
  constexpr char letter() const { return kAlphabet[index_]; }

  friend constexpr bool operator==(AminoAcid, AminoAcid) = default;

 private:
  constexpr explicit AminoAcid(std::uint8_t i) : index_(i) {}
  std::uint8_t index_ = 0;
};

using Sequence = std::vector<AminoAcid>;

class SequenceError : public std::invalid_argument {
 public:
  SequenceError(const std::string& what, std::size_t position)
      : std::invalid_argument(what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses residue letters, case-insensitively, skipping whitespace. The
/// reported position of a bad symbol is its offset in `text`.
inline Sequence parse_sequence(std::string_view text) {
  Sequence out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    const auto aa = AminoAcid::from_letter(c);
    if (!aa) {
      throw SequenceError("invalid residue '" + std::string(1, c) + "' at position " +
                              std::to_string(i),
                          i);
    }
    out.push_back(*aa);
  }
  if (out.empty()) throw SequenceError("empty sequence", 0);
  return out;
}

inline std::string to_string(const Sequence& seq) {
  std::string s;
  s.reserve(seq.size());
  for (AminoAcid a : seq) s.push_back(a.letter());
  return s;
}

// ---------------------------------------------------------------------------
// Records and datasets
// ---------------------------------------------------------------------------

struct ProteinRecord {
  std::string id;
  Sequence sequence;
  int residue_start = 1;
  std::size_t label = 0;
  // Planted motif location; set only for synthetic data.
  std::optional<std::size_t> motif_offset;
  std::size_t motif_length = 0;

  std::size_t length() const { return sequence.size(); }
};

enum class Split { train, test };

struct Dataset {
  std::vector<ProteinRecord> records;
  std::vector<std::string> class_names;
  Split split_tag = Split::train;

  std::size_t size() const { return records.size(); }
  std::size_t num_classes() const { return class_names.size(); }
};

inline void validate(const Dataset& ds) {
  if (ds.records.empty()) throw DataError("dataset has no records");
  for (const auto& r : ds.records) {
    if (r.sequence.empty()) throw DataError("record '" + r.id + "' has an empty sequence");
    if (r.label >= ds.class_names.size()) {
      throw DataError("record '" + r.id + "' has label " + std::to_string(r.label) +
                      " outside " + std::to_string(ds.class_names.size()) + " classes");
    }
  }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// P x 20 one-hot matrix. Masked rows are all zero.
template <class T>
struct EncodedSequence {
  Matrix<T> matrix;
  std::vector<std::size_t> masked;  // sorted, unique

  std::size_t length() const { return static_cast<std::size_t>(matrix.rows()); }
};

template <class T>
EncodedSequence<T> one_hot_encode(const Sequence& seq) {
  EncodedSequence<T> enc;
  enc.matrix = Matrix<T>::Zero(static_cast<Index>(seq.size()), static_cast<Index>(kAlphabetSize));
  for (std::size_t j = 0; j < seq.size(); ++j) {
    enc.matrix(static_cast<Index>(j), static_cast<Index>(seq[j].index())) = T(1);
  }
  return enc;
}

/// Inverse of one_hot_encode. Fails on masked or malformed rows.
template <class T>
Sequence decode(const EncodedSequence<T>& enc) {
  Sequence out;
  out.reserve(enc.length());
  for (Index j = 0; j < enc.matrix.rows(); ++j) {
    Index col = 0;
    const T mx = enc.matrix.row(j).maxCoeff(&col);
    if (mx != T(1) || enc.matrix.row(j).sum() != T(1)) {
      throw std::invalid_argument("decode: row " + std::to_string(j) + " is not one-hot");
    }
    out.push_back(AminoAcid::from_index(static_cast<std::size_t>(col)));
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> checked_positions(std::span<const std::size_t> positions,
                                                  std::size_t length, const char* what) {
  std::vector<std::size_t> out(positions.begin(), positions.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (!out.empty() && out.back() >= length) {
    throw std::out_of_range(std::string(what) + ": position " + std::to_string(out.back()) +
                            " out of range for length " + std::to_string(length));
  }
  return out;
}

}  // namespace detail

/// Zeroes the one-hot rows at `positions`. Idempotent.
template <class T>
EncodedSequence<T> mask_residues(const EncodedSequence<T>& enc,
                                 std::span<const std::size_t> positions) {
  const auto pos = detail::checked_positions(positions, enc.length(), "mask_residues");
  EncodedSequence<T> out = enc;
  for (std::size_t p : pos) out.matrix.row(static_cast<Index>(p)).setZero();
  std::vector<std::size_t> merged;
  std::set_union(enc.masked.begin(), enc.masked.end(), pos.begin(), pos.end(),
                 std::back_inserter(merged));
  out.masked = std::move(merged);
  return out;
}

/// Substitutes each listed residue with one drawn uniformly from the other 19.
inline Sequence mutate_residues(const Sequence& seq, std::span<const std::size_t> positions,
                                std::uint64_t rng_seed) {
  const auto pos = detail::checked_positions(positions, seq.size(), "mutate_residues");
  Rng rng(rng_seed);
  Sequence out = seq;
  for (std::size_t p : pos) {
    const std::size_t orig = seq[p].index();
    std::size_t draw = uniform_index(rng, kAlphabetSize - 1);
    if (draw >= orig) ++draw;
    out[p] = AminoAcid::from_index(draw);
  }
  return out;
}

/// Number of residues addressed by a ratio: floor(ratio * P), at least 1.
inline std::size_t ratio_to_count(double ratio, std::size_t length) {
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(length)));
  return std::max<std::size_t>(1, std::min(k, length));
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> class_histogram(const Dataset& ds) {
  std::vector<std::size_t> counts(ds.class_names.size(), 0);
  for (const auto& r : ds.records) {
    if (r.label >= counts.size()) throw DataError("record '" + r.id + "' has an unknown label");
    ++counts[r.label];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

enum class DatasetFormat { jsonl, fasta };

inline DatasetFormat format_from_path(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".fasta" || ext == ".fa" || ext == ".faa") return DatasetFormat::fasta;
  return DatasetFormat::jsonl;
}

/// Class-name manifest: one name per line, blank lines ignored.
inline std::vector<std::string> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

inline void save_manifest(const std::vector<std::string>& names, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& n : names) out << n << '\n';
}

namespace detail {

class LabelTable {
 public:
  explicit LabelTable(std::optional<std::vector<std::string>> fixed) : fixed_(fixed.has_value()) {
    if (fixed) {
      for (const auto& n : *fixed) intern(n);
    }
  }

  std::size_t lookup(const std::string& name, std::size_t line) {
    auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    if (fixed_) {
      throw DataError("line " + std::to_string(line) + ": unknown label '" + name + "'");
    }
    return intern(name);
  }

  std::vector<std::string> names() const { return names_; }

 private:
  std::size_t intern(const std::string& name) {
    auto [it, inserted] = index_.emplace(name, names_.size());
    if (inserted) names_.push_back(name);
    return it->second;
  }

  bool fixed_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> names_;
};

inline Sequence parse_at_line(const std::string& text, std::size_t line) {
  try {
    return parse_sequence(text);
  } catch (const SequenceError& e) {
    throw DataError("line " + std::to_string(line) + ": " + e.what());
  }
}

inline Dataset load_jsonl(std::istream& in, LabelTable labels) {
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
    }
    try {
      if (!obj.is_object()) throw DataError("expected an object");
      ProteinRecord r;
      r.id = obj.at("id").get<std::string>();
      r.sequence = parse_at_line(obj.at("sequence").get<std::string>(), line);
      r.residue_start = obj.value("residue_start", 1);
      r.label = labels.lookup(obj.at("label").get<std::string>(), line);
      if (obj.contains("motif_offset")) {
        r.motif_offset = obj.at("motif_offset").get<std::size_t>();
        r.motif_length = obj.value("motif_length", std::size_t{0});
      }
      ds.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(line) + ": bad record (" + e.what() + ")");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.rfind("line ", 0) == 0) throw;
      throw DataError("line " + std::to_string(line) + ": " + msg);
    }
  }
  ds.class_names = labels.names();
  return ds;
}

inline Dataset load_fasta(std::istream& in, LabelTable labels) {
  Dataset ds;
  std::string text;
  std::size_t line = 0;
  std::size_t header_line = 0;
  std::optional<ProteinRecord> current;
  std::string residues;

  auto flush = [&]() {
    if (!current) return;
    current->sequence = parse_at_line(residues, header_line);
    ds.records.push_back(std::move(*current));
    current.reset();
    residues.clear();
  };

  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    if (text[0] == '>') {
      flush();
      header_line = line;
      const std::string header = text.substr(1);
      std::vector<std::string> fields;
      std::size_t start = 0;
      for (;;) {
        const auto bar = header.find('|', start);
        fields.push_back(header.substr(start, bar - start));
        if (bar == std::string::npos) break;
        start = bar + 1;
      }
      if (fields.size() < 2 || fields.size() > 3 || fields[0].empty() || fields[1].empty()) {
        throw DataError("line " + std::to_string(line) +
                        ": header must be >id|label|residue_start");
      }
      ProteinRecord r;
      r.id = fields[0];
      r.label = labels.lookup(fields[1], line);
      if (fields.size() == 3) {
        try {
          std::size_t used = 0;
          r.residue_start = std::stoi(fields[2], &used);
          if (used != fields[2].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
          throw DataError("line " + std::to_string(line) + ": bad residue_start '" + fields[2] +
                          "'");
        }
      }
      current = std::move(r);
    } else {
      if (!current) {
        throw DataError("line " + std::to_string(line) + ": sequence data before first header");
      }
      residues += text;
    }
  }
  flush();
  ds.class_names = labels.names();
  return ds;
}

}  // namespace detail

/// Reads a dataset. With a manifest, class order is fixed and unknown labels
/// are rejected; otherwise classes are numbered in first-seen order.
inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                            std::optional<std::vector<std::string>> manifest = std::nullopt,
                            Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  detail::LabelTable labels(std::move(manifest));
  Dataset ds = format == DatasetFormat::jsonl ? detail::load_jsonl(in, std::move(labels))
                                              : detail::load_fasta(in, std::move(labels));
  ds.split_tag = split;
  if (ds.records.empty()) throw DataError("dataset " + path.string() + " has no records");
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path,
                            std::optional<std::vector<std::string>> manifest = std::nullopt,
                            Split split = Split::train) {
  return load_dataset(path, format_from_path(path), std::move(manifest), split);
}

inline void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& r : ds.records) {
    nlohmann::ordered_json obj;
    obj["id"] = r.id;
    obj["sequence"] = to_string(r.sequence);
    obj["residue_start"] = r.residue_start;
    obj["label"] = ds.class_names.at(r.label);
    if (r.motif_offset) {
      obj["motif_offset"] = *r.motif_offset;
      obj["motif_length"] = r.motif_length;
    }
    out << obj.dump() << '\n';
  }
}

inline void save_fasta(const Dataset& ds, const std::filesystem::path& path,
                       std::size_t width = 60) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& r : ds.records) {
    out << '>' << r.id << '|' << ds.class_names.at(r.label) << '|' << r.residue_start << '\n';
    const std::string s = to_string(r.sequence);
    for (std::size_t i = 0; i < s.size(); i += width) out << s.substr(i, width) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic planted-motif benchmark
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_classes = 6;
  std::size_t motif_length = 5;
  std::size_t min_length = 80;
  std::size_t max_length = 120;
  std::size_t n_per_class = 500;
  std::uint64_t seed = 0;
};

/// Per-class motifs used by generate_synthetic for a given spec.
inline std::vector<Sequence> synthetic_motifs(const SyntheticSpec& spec) {
  Rng rng(derive_seed(spec.seed, "synthetic.motifs"));
  std::vector<Sequence> motifs;
  while (motifs.size() < spec.num_classes) {
    Sequence m(spec.motif_length);
    for (auto& a : m) a = AminoAcid::from_index(uniform_index(rng, kAlphabetSize));
    if (std::find(motifs.begin(), motifs.end(), m) == motifs.end()) motifs.push_back(std::move(m));
  }
  return motifs;
}

/// Uniform random background with the class motif planted at a uniform
/// offset. Backgrounds that contain any class motif elsewhere are redrawn, so
/// each record holds exactly one motif occurrence.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.motif_length == 0 || spec.n_per_class == 0) {
    throw std::invalid_argument("generate_synthetic: classes, motif length and count must be positive");
  }
  if (spec.min_length < spec.motif_length || spec.max_length < spec.min_length) {
    throw std::invalid_argument("generate_synthetic: need motif_length <= min_length <= max_length");
  }
  double distinct = 1.0;
  for (std::size_t i = 0; i < spec.motif_length; ++i) distinct *= double(kAlphabetSize);
  if (distinct < double(spec.num_classes)) {
    throw std::invalid_argument("generate_synthetic: too few distinct motifs for the class count");
  }

  const auto motifs = synthetic_motifs(spec);
  std::vector<std::string> motif_text;
  for (const auto& m : motifs) motif_text.push_back(to_string(m));

  Dataset ds;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.class_names.push_back("motif_" + std::to_string(c));

  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t i = 0; i < spec.n_per_class; ++i) {
      Rng rng(derive_seed(spec.seed, "synthetic.record", c, i));
      const std::size_t len =
          spec.min_length + uniform_index(rng, spec.max_length - spec.min_length + 1);
      const std::size_t offset = uniform_index(rng, len - spec.motif_length + 1);
      std::string text;
      for (;;) {
        text.assign(len, 'A');
        for (auto& ch : text) ch = kAlphabet[uniform_index(rng, kAlphabetSize)];
        text.replace(offset, spec.motif_length, motif_text[c]);
        bool clean = true;
        for (std::size_t k = 0; k < motif_text.size() && clean; ++k) {
          for (auto at = text.find(motif_text[k]); at != std::string::npos;
               at = text.find(motif_text[k], at + 1)) {
            if (!(k == c && at == offset)) {
              clean = false;
              break;
            }
          }
        }
        if (clean) break;
      }
      ProteinRecord r;
      r.id = "syn_c" + std::to_string(c) + "_" + std::to_string(i);
      r.sequence = parse_sequence(text);
      r.residue_start = 1;
      r.label = c;
      r.motif_offset = offset;
      r.motif_length = spec.motif_length;
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

/// Moves the last `test_per_class` records of every class into a test split.
inline std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, std::size_t test_per_class) {
  const auto hist = class_histogram(ds);
  Dataset train, test;
  train.class_names = test.class_names = ds.class_names;
  train.split_tag = Split::train;
  test.split_tag = Split::test;
  std::vector<std::size_t> seen(hist.size(), 0);
  for (const auto& r : ds.records) {
    const std::size_t keep = hist[r.label] > test_per_class ? hist[r.label] - test_per_class : 0;
    (seen[r.label]++ < keep ? train : test).records.push_back(r);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace spt
