#pragma once

// Caption corruption and the two training losses: sequence-to-sequence
// masked language modeling and unidirectional language modeling.

#include <random>
#include <stdexcept>
#include <vector>

#include "caplab/model.hpp"
#include "caplab/tensor.hpp"
#include "caplab/tokenizer.hpp"

namespace caplab {

struct CorruptionResult {
  std::vector<int> corrupted;       // same length as the input caption
  std::vector<int> masked_positions;  // 0-based, ascending
  std::vector<int> originals;       // original ids at masked positions
};

struct CorruptionConfig {
  double rate = 0.15;
  // replacement split among selected positions, inherited from BERT
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;
};

// Each non-special token is selected independently with probability `rate`;
// a selected token becomes [MASK], a uniformly random vocab token, or stays
// unchanged per the configured split. Selected positions always enter D.
inline CorruptionResult corrupt(const std::vector<int>& tokens,
                                const Vocabulary& vocab,
                                const CorruptionConfig& cfg, std::mt19937& rng) {
  if (cfg.rate < 0.0 || cfg.rate > 1.0)
    throw std::invalid_argument("corrupt: rate outside [0,1]");
  CorruptionResult res;
  res.corrupted = tokens;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, vocab.size() - 1);
  for (size_t k = 0; k < tokens.size(); ++k) {
    if (vocab.is_special_id(tokens[k])) continue;
    if (unif(rng) >= cfg.rate) continue;
    res.masked_positions.push_back(static_cast<int>(k));
    res.originals.push_back(tokens[k]);
    const double r = unif(rng);
    if (r < cfg.p_mask) {
      res.corrupted[k] = vocab.mask_id();
    } else if (r < cfg.p_mask + cfg.p_random) {
      res.corrupted[k] = pick(rng);
    }  // else keep
  }
  return res;
}

template <class T>
struct LossOutput {
  Tensor<T> loss;
  long correct = 0;  // argmax hits at supervised positions
  long total = 0;
};

namespace obj_detail {

template <class T>
long count_argmax_hits(const Tensor<T>& logits, const std::vector<int>& targets) {
  const int V = logits.dim(1);
  long hits = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    const T* row = logits.values().data() + i * static_cast<size_t>(V);
    int best = 0;
    for (int j = 1; j < V; ++j)
      if (row[j] > row[best]) best = j;
    if (best == targets[i]) ++hits;
  }
  return hits;
}

}  // namespace obj_detail

// Label-smoothed cross entropy over the masked positions only, each
// conditioned on regions, tags and the corrupted caption up to and including
// the position. The model forward must be fed the corrupted tokens; this
// helper swaps them in.
template <class T>
LossOutput<T> s2s_mlm_loss_detailed(const MultimodalBatch<T>& batch,
                                    const CorruptionResult& corruption,
                                    CaptionModel<T>& model,
                                    T label_smoothing = T(0.1)) {
  if (corruption.masked_positions.empty())
    return {Tensor<T>::scalar(T(0)), 0, 0};
  MultimodalBatch<T> corrupted = batch;
  corrupted.caption = corruption.corrupted;
  auto out = model.forward(corrupted);
  std::vector<Tensor<T>> rows;
  for (int k : corruption.masked_positions)
    rows.push_back(slice_rows(out.caption_logits, k, k + 1));
  auto logits = concat_rows(rows);
  LossOutput<T> res;
  res.loss = cross_entropy_rows(logits, corruption.originals, label_smoothing,
                                Reduction::Mean);
  res.total = static_cast<long>(corruption.originals.size());
  res.correct = obj_detail::count_argmax_hits(logits, corruption.originals);
  return res;
}

template <class T>
Tensor<T> s2s_mlm_loss(const MultimodalBatch<T>& batch,
                       const CorruptionResult& corruption,
                       CaptionModel<T>& model, T label_smoothing = T(0.1)) {
  return s2s_mlm_loss_detailed(batch, corruption, model, label_smoothing).loss;
}

// Unidirectional LM: the caption block is [CLS] w_1..w_L under the causal
// seq2seq mask; position k predicts the next token, and the final position
// predicts [SEP] (end of sequence).
template <class T>
LossOutput<T> lm_loss_detailed(const MultimodalBatch<T>& batch,
                               CaptionModel<T>& model, const Vocabulary& vocab,
                               T label_smoothing = T(0.1)) {
  if (batch.caption.empty()) return {Tensor<T>::scalar(T(0)), 0, 0};
  MultimodalBatch<T> shifted = batch;
  shifted.caption.clear();
  shifted.caption.push_back(vocab.cls_id());
  shifted.caption.insert(shifted.caption.end(), batch.caption.begin(),
                         batch.caption.end());
  std::vector<int> targets = batch.caption;
  targets.push_back(vocab.sep_id());
  auto out = model.forward(shifted);
  LossOutput<T> res;
  res.loss = cross_entropy_rows(out.caption_logits, targets, label_smoothing,
                                Reduction::Mean);
  res.total = static_cast<long>(targets.size());
  res.correct = obj_detail::count_argmax_hits(out.caption_logits, targets);
  return res;
}

template <class T>
Tensor<T> lm_loss(const MultimodalBatch<T>& batch, CaptionModel<T>& model,
                  const Vocabulary& vocab, T label_smoothing = T(0.1)) {
  return lm_loss_detailed(batch, model, vocab, label_smoothing).loss;
}

}  // namespace caplab
