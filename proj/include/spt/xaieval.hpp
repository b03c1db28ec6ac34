// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/model.hpp"
#include "spt/random.hpp"
#include "spt/seqdata.hpp"
#include "spt/seqscore.hpp"
#include "spt/trainer.hpp"

namespace spt {

enum class PerturbMode { remove, mutate };
enum class Selection { top, bottom, random };

/// Either a fraction of the sequence length or an absolute residue count.
struct Amount {
  bool is_ratio = true;
  double value = 0.0;

  static Amount ratio(double r) { return {true, r}; }
  static Amount count(std::size_t k) { return {false, double(k)}; }

  /// Residues to perturb for a sequence of length P. A zero amount yields
  /// zero; a positive ratio yields max(1, floor(ratio * P)). Counts are
  /// capped at P.
  std::size_t resolve(std::size_t length) const {
    if (value <= 0.0) return 0;
    if (is_ratio) return ratio_to_count(value, length);
    return std::min(length, static_cast<std::size_t>(value));
  }
};

/// k positions by score: top = largest, bottom = smallest, ties to the lower
/// index; random = seeded uniform sample. Returned in selection order.
inline std::vector<std::size_t> select_positions(const std::vector<double>& scores, Selection selection,
                                                 std::size_t k, std::uint64_t rng_seed = 0) {
  const std::size_t P = scores.size();
  if (k > P) {
    throw std::invalid_argument("select_positions: k=" + std::to_string(k) + " exceeds length " + std::to_string(P));
  }
  std::vector<std::size_t> idx(P);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  switch (selection) {
    case Selection::top:
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
      break;
    case Selection::bottom:
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
      break;
    case Selection::random: {
      Rng rng(rng_seed);
      std::shuffle(idx.begin(), idx.end(), rng);
      break;
    }
  }
  idx.resize(k);
  return idx;
}

/// Produces importance scores for a record and a target class.
template <class T>
using Scorer = std::function<ImportanceScores(const SPTModel<T>&, const ProteinRecord&, std::size_t)>;

template <class T>
Scorer<T> sequence_scorer(std::size_t block_index = 0) {
  return [block_index](const SPTModel<T>& m, const ProteinRecord& r, std::size_t c) {
    return sequence_score(m, r, c, block_index);
  };
}

struct FaithfulnessCurve {
  std::vector<Amount> amounts;
  std::vector<double> accuracy_top;
  std::vector<double> accuracy_bottom;
  std::vector<double> accuracy_random;
  double baseline_accuracy = 0.0;

  /// accuracy_bottom - accuracy_top at amount index i.
  double gap(std::size_t i) const { return accuracy_bottom.at(i) - accuracy_top.at(i); }
};

namespace detail {

struct ScoredRecord {
  std::size_t predicted = 0;
  std::vector<double> scores;
};

template <class T>
std::vector<ScoredRecord> score_dataset(const SPTModel<T>& m, const Dataset& ds, const Scorer<T>& scorer,
                                        std::size_t workers) {
  std::vector<ScoredRecord> out(ds.size());
  parallel_for(ds.size(), workers, [&](std::size_t i) {
    const auto& r = ds.records[i];
    out[i].predicted = predict(m, one_hot_encode<T>(r.sequence));
    out[i].scores = scorer(m, r, out[i].predicted).scores;
    if (out[i].scores.size() != r.length()) throw std::logic_error("scorer returned wrong length");
  });
  return out;
}

template <class T>
bool perturbed_correct(const SPTModel<T>& m, const ProteinRecord& r, std::span<const std::size_t> positions,
                       PerturbMode mode, std::uint64_t mutate_seed) {
  EncodedSequence<T> enc;
  if (mode == PerturbMode::remove) {
    enc = mask_residues(one_hot_encode<T>(r.sequence), positions);
  } else {
    enc = one_hot_encode<T>(mutate_residues(r.sequence, positions, mutate_seed));
  }
  return predict(m, enc) == r.label;
}

}  // namespace detail

/// Accuracy after perturbing the top-, bottom- and randomly-selected
/// residues at each amount. Scores are computed once per record on the
/// unperturbed input for its predicted class and reused for every amount.
template <class T>
FaithfulnessCurve faithfulness_curve(const SPTModel<T>& m, const Dataset& ds, const Scorer<T>& scorer,
                                     const std::vector<Amount>& amounts, PerturbMode mode, std::uint64_t rng_seed,
                                     std::size_t workers = 1) {
  if (amounts.empty()) throw std::invalid_argument("faithfulness_curve: no amounts given");
  if (ds.size() == 0) throw std::invalid_argument("faithfulness_curve: empty dataset");
  const auto scored = detail::score_dataset(m, ds, scorer, workers);

  FaithfulnessCurve curve;
  curve.amounts = amounts;
  std::size_t base_correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) base_correct += scored[i].predicted == ds.records[i].label;
  curve.baseline_accuracy = double(base_correct) / double(ds.size());

  const Selection sels[] = {Selection::top, Selection::bottom, Selection::random};
  for (std::size_t a = 0; a < amounts.size(); ++a) {
    double acc[3] = {0, 0, 0};
    for (int s = 0; s < 3; ++s) {
      std::vector<unsigned char> ok(ds.size(), 0);
      parallel_for(ds.size(), workers, [&](std::size_t i) {
        const auto& r = ds.records[i];
        const std::size_t k = amounts[a].resolve(r.length());
        if (k == 0) {
          ok[i] = scored[i].predicted == r.label;
          return;
        }
        const auto pos = select_positions(scored[i].scores, sels[s], k, derive_seed(rng_seed, "faith.select", i, a));
        ok[i] = detail::perturbed_correct(m, r, pos, mode, derive_seed(rng_seed, "faith.mutate", i, a));
      });
      acc[s] = double(std::accumulate(ok.begin(), ok.end(), std::size_t{0})) / double(ds.size());
    }
    curve.accuracy_top.push_back(acc[0]);
    curve.accuracy_bottom.push_back(acc[1]);
    curve.accuracy_random.push_back(acc[2]);
  }
  return curve;
}

template <class T>
FaithfulnessCurve deletion_curve(const SPTModel<T>& m, const Dataset& ds, const Scorer<T>& scorer,
                                 const std::vector<Amount>& amounts, std::uint64_t rng_seed = 0,
                                 std::size_t workers = 1) {
  return faithfulness_curve(m, ds, scorer, amounts, PerturbMode::remove, rng_seed, workers);
}

template <class T>
FaithfulnessCurve mutation_curve(const SPTModel<T>& m, const Dataset& ds, const Scorer<T>& scorer,
                                 const std::vector<Amount>& amounts, std::uint64_t rng_seed,
                                 std::size_t workers = 1) {
  return faithfulness_curve(m, ds, scorer, amounts, PerturbMode::mutate, rng_seed, workers);
}

inline void write_curve_csv(const FaithfulnessCurve& c, std::ostream& out) {
  out << "amount,accuracy_top,accuracy_bottom,accuracy_random,baseline\n";
  out.precision(17);
  for (std::size_t i = 0; i < c.amounts.size(); ++i) {
    out << c.amounts[i].value << ',' << c.accuracy_top[i] << ',' << c.accuracy_bottom[i] << ','
        << c.accuracy_random[i] << ',' << c.baseline_accuracy << '\n';
  }
}

// ---------------------------------------------------------------------------
// Stability
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

/// Spearman rank correlation with average ranks for ties. nullopt when
/// either side is constant, where the correlation is undefined.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const auto ra = detail::average_ranks(a);
  const auto rb = detail::average_ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  if (ra == rb) return 1.0;
  return sab / std::sqrt(saa * sbb);
}

struct StabilityPair {
  ProteinRecord original;
  ProteinRecord perturbed;
};

struct StabilityReport {
  std::vector<std::optional<double>> correlations;
  std::size_t n = 0;            // pairs with a defined correlation
  std::size_t n_undefined = 0;  // pairs where a score vector was constant
  double median = std::nan("");
  double q1 = std::nan("");
  double q3 = std::nan("");
};

namespace detail {

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Rank correlation between the scores of each original/perturbed pair over
/// the positions where the two sequences agree. Both sides are scored for
/// the class the model predicts on the original.
template <class T>
StabilityReport stability_report(const SPTModel<T>& m, const Scorer<T>& scorer,
                                 const std::vector<StabilityPair>& pairs, std::size_t workers = 1) {
  StabilityReport rep;
  rep.correlations.resize(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto& [a, b] = pairs[i];
    if (a.length() != b.length()) {
      throw std::invalid_argument("stability_report: pair " + std::to_string(i) + " has unequal lengths");
    }
    const std::size_t c = predict(m, one_hot_encode<T>(a.sequence));
    const auto sa = scorer(m, a, c).scores;
    const auto sb = scorer(m, b, c).scores;
    std::vector<double> xa, xb;
    for (std::size_t j = 0; j < a.length(); ++j) {
      if (a.sequence[j] == b.sequence[j]) {
        xa.push_back(sa[j]);
        xb.push_back(sb[j]);
      }
    }
    rep.correlations[i] = spearman(xa, xb);
  });
  std::vector<double> defined;
  for (const auto& c : rep.correlations) {
    if (c) defined.push_back(*c);
  }
  rep.n = defined.size();
  rep.n_undefined = pairs.size() - defined.size();
  if (!defined.empty()) {
    rep.median = detail::quantile(defined, 0.5);
    rep.q1 = detail::quantile(defined, 0.25);
    rep.q3 = detail::quantile(defined, 0.75);
  }
  return rep;
}

/// Seeded pairs: a uniformly chosen record and a copy with `substitutions`
/// residues replaced.
inline std::vector<StabilityPair> make_stability_pairs(const Dataset& ds, std::size_t n_pairs,
                                                       std::size_t substitutions, std::uint64_t rng_seed) {
  if (ds.size() == 0) throw std::invalid_argument("make_stability_pairs: empty dataset");
  std::vector<StabilityPair> pairs;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Rng rng(derive_seed(rng_seed, "stability.pair", i));
    const auto& rec = ds.records[uniform_index(rng, ds.size())];
    const std::size_t k = std::min(substitutions, rec.length());
    std::vector<double> dummy(rec.length(), 0.0);
    const auto pos = select_positions(dummy, Selection::random, k, derive_seed(rng_seed, "stability.pos", i));
    StabilityPair p{rec, rec};
    p.perturbed.sequence = mutate_residues(rec.sequence, pos, derive_seed(rng_seed, "stability.mutate", i));
    p.perturbed.id = rec.id + "_mut" + std::to_string(i);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline nlohmann::ordered_json stability_to_json(const StabilityReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  nlohmann::ordered_json j;
  j["n"] = r.n;
  j["n_undefined"] = r.n_undefined;
  j["median"] = num(r.median);
  j["q1"] = num(r.q1);
  j["q3"] = num(r.q3);
  auto all = nlohmann::ordered_json::array();
  for (const auto& c : r.correlations) all.push_back(c ? nlohmann::ordered_json(*c) : nlohmann::ordered_json(nullptr));
  j["correlations"] = std::move(all);
  return j;
}

// ---------------------------------------------------------------------------
// Scoring-stage timing
// ---------------------------------------------------------------------------

struct TimingEntry {
  std::size_t length = 0;
  double median_seconds = 0.0;  // per scoring call
};

/// Median wall time of the pooling + weighting + normalization stage on
/// random activation/gradient matrices of width `hidden`. Each repeat times
/// `inner` back-to-back calls. T defaults to float, the type the runtime
/// explains with; in double the P=2048, D=64 pair already spills a 2 MiB L2.
template <class T = float>
std::vector<TimingEntry> timing_scaling(std::size_t hidden, const std::vector<std::size_t>& lengths,
                                        std::size_t repeats, std::uint64_t rng_seed = 0, std::size_t inner = 200) {
  if (repeats == 0 || inner == 0) throw std::invalid_argument("timing_scaling: repeats must be positive");
  std::vector<TimingEntry> out;
  for (std::size_t li = 0; li < lengths.size(); ++li) {
    const auto P = static_cast<Index>(lengths[li]);
    const auto D = static_cast<Index>(hidden);
    Rng rng(derive_seed(rng_seed, "timing", li));
    Matrix<T> A(P, D), G(P, D);
    for (Index i = 0; i < A.size(); ++i) {
      A.data()[i] = static_cast<T>(uniform_unit(rng) - 0.5);
      G.data()[i] = static_cast<T>(uniform_unit(rng) - 0.5);
    }
    volatile double sink = 0.0;
    std::vector<double> times;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t it = 0; it < inner; ++it) {
        const auto s = score_from_capture<T>(A, G);
        sink = sink + double(s(0));
      }
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count() / double(inner));
    }
    out.push_back({lengths[li], detail::quantile(times, 0.5)});
  }
  return out;
}

template <class T>
std::vector<TimingEntry> timing_scaling(const SPTModel<T>& m, const std::vector<std::size_t>& lengths,
                                        std::size_t repeats, std::uint64_t rng_seed = 0) {
  for (std::size_t L : lengths) {
    if (L > m.config.max_len) throw std::length_error("timing_scaling: length exceeds max_len");
  }
  return timing_scaling<T>(m.config.hidden, lengths, repeats, rng_seed);
}

}  // namespace spt
