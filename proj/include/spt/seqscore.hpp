// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/model.hpp"
#include "spt/seqdata.hpp"

namespace spt {

/// Feature map of one block with the CLS row removed (P x D). The feature
/// map of block l is Norm1(E_{l-1}), the normalized tokens its attention
/// reads. The block output E_l cannot serve for l = L: the logit depends on
/// E_L only through its CLS row, so the residue-row gradient would vanish.
template <class T>
struct FeatureCapture {
  Matrix<T> activations;
  std::size_t block_index = 0;
  std::string protein_id;
};

/// Per-residue importance in [0, 1] for one (protein, class) pair.
struct ImportanceScores {
  std::string protein_id;
  std::size_t class_index = 0;
  std::size_t block_index = 0;
  std::vector<double> scores;
};

namespace detail {

inline void check_block(std::size_t block_index, std::size_t layers) {
  if (block_index < 1 || block_index > layers) {
    throw std::out_of_range("block index " + std::to_string(block_index) + " outside 1.." +
                            std::to_string(layers));
  }
}

}  // namespace detail

/// Activations and the class-logit gradient at the same block, from one
/// evaluation-mode forward/backward pass.
template <class T>
struct GradCapture {
  Matrix<T> activations;  // P x D
  Matrix<T> gradient;     // P x D, d y_c / d A
  RowVector<T> logits;
};

template <class T>
GradCapture<T> capture_with_gradient(const SPTModel<T>& m, const EncodedSequence<T>& enc,
                                     std::size_t class_index, std::size_t block_index) {
  detail::check_block(block_index, m.config.layers);
  if (class_index >= m.config.num_classes) {
    throw std::out_of_range("class index " + std::to_string(class_index) + " outside " +
                            std::to_string(m.config.num_classes) + " classes");
  }
  Graph<T> g;
  ForwardOptions opt;
  opt.input_requires_grad = true;  // otherwise the tape records no backward path to A
  const ForwardPass pass = forward(g, m, enc.matrix, opt);
  const Var feature = pass.feature_maps[block_index - 1];
  const Var logit = g.slice_cols(pass.logits, static_cast<Index>(class_index), 1);
  g.backward(logit);
  const Index P = g.value(feature).rows() - 1;
  GradCapture<T> out;
  out.activations = g.value(feature).bottomRows(P);
  out.gradient = g.grad(feature).bottomRows(P);
  out.logits = g.value(pass.logits).row(0);
  return out;
}

template <class T>
FeatureCapture<T> capture_activations(const SPTModel<T>& m, const EncodedSequence<T>& enc,
                                      std::size_t block_index, std::string protein_id = {}) {
  detail::check_block(block_index, m.config.layers);
  Graph<T> g;
  const ForwardPass pass = forward(g, m, enc.matrix);
  const Matrix<T>& e = g.value(pass.feature_maps[block_index - 1]);
  return FeatureCapture<T>{e.bottomRows(e.rows() - 1), block_index, std::move(protein_id)};
}

/// d y_c / d A for the raw (pre-softmax) logit of class c.
template <class T>
Matrix<T> class_gradient(const SPTModel<T>& m, const EncodedSequence<T>& enc,
                         std::size_t class_index, std::size_t block_index) {
  return capture_with_gradient(m, enc, class_index, block_index).gradient;
}

/// Mean of the gradient over sequence positions.
template <class T>
RowVector<T> neuron_weights(const Matrix<T>& grad) {
  if (grad.rows() == 0) throw std::invalid_argument("neuron_weights: empty gradient");
  return grad.colwise().sum() / static_cast<T>(grad.rows());
}

/// S_j = sum_k w_k A[j, k].
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> raw_scores(const RowVector<T>& weights, const Matrix<T>& activations) {
  if (weights.size() != activations.cols()) {
    throw ShapeError("raw_scores: weights have " + std::to_string(weights.size()) +
                     " entries but activations have " + std::to_string(activations.cols()) + " columns");
  }
  return activations * weights.transpose();
}

/// max(0, S_j) / max_j max(0, S_j); all zeros when no score exceeds 1e-12.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> normalize_scores(const Eigen::Matrix<T, Eigen::Dynamic, 1>& s) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> out = s.cwiseMax(T(0));
  const T mx = out.size() == 0 ? T(0) : out.maxCoeff();
  if (!(mx > T(1e-12))) return Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(s.size());
  return out / mx;
}

/// Pooling, weighting and normalization stage given A and its gradient.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> score_from_capture(const Matrix<T>& activations, const Matrix<T>& grad) {
  return normalize_scores<T>(raw_scores<T>(neuron_weights<T>(grad), activations));
}

/// Sequence Score of `record` for class c at the given block (default: last).
template <class T>
ImportanceScores sequence_score(const SPTModel<T>& m, const ProteinRecord& record,
                                std::size_t class_index, std::size_t block_index = 0) {
  if (block_index == 0) block_index = m.config.layers;
  const auto cap = capture_with_gradient(m, one_hot_encode<T>(record.sequence), class_index, block_index);
  const auto s = score_from_capture<T>(cap.activations, cap.gradient);
  ImportanceScores out;
  out.protein_id = record.id;
  out.class_index = class_index;
  out.block_index = block_index;
  out.scores.assign(s.data(), s.data() + s.size());
  return out;
}

/// Scores for the model's own prediction on the unperturbed input.
template <class T>
ImportanceScores explain_prediction(const SPTModel<T>& m, const ProteinRecord& record,
                                    std::size_t block_index = 0) {
  const std::size_t c = predict(m, one_hot_encode<T>(record.sequence));
  return sequence_score(m, record, c, block_index);
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void write_scores_csv(const ImportanceScores& s, const ProteinRecord& record, std::ostream& out) {
  if (s.scores.size() != record.length()) throw std::invalid_argument("write_scores_csv: length mismatch");
  out << "position,residue_letter,residue_number,score\n";
  out.precision(17);
  for (std::size_t j = 0; j < s.scores.size(); ++j) {
    out << j << ',' << record.sequence[j].letter() << ',' << (record.residue_start + static_cast<long>(j)) << ','
        << s.scores[j] << '\n';
  }
}

inline nlohmann::ordered_json scores_to_json(const ImportanceScores& s, const ProteinRecord& record,
                                             const std::vector<std::string>& class_names = {}) {
  if (s.scores.size() != record.length()) throw std::invalid_argument("scores_to_json: length mismatch");
  nlohmann::ordered_json j;
  j["id"] = s.protein_id;
  j["class_index"] = s.class_index;
  if (s.class_index < class_names.size()) j["class_name"] = class_names[s.class_index];
  j["block"] = s.block_index;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    rows.push_back({{"position", i},
                    {"residue_letter", std::string(1, record.sequence[i].letter())},
                    {"residue_number", record.residue_start + static_cast<long>(i)},
                    {"score", s.scores[i]}});
  }
  j["scores"] = std::move(rows);
  return j;
}

}  // namespace spt
