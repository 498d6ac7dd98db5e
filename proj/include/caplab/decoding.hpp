#pragma once

// Autoregressive caption generation. Each step appends a [MASK] probe,
// reads the vocabulary distribution at that position, and once a token is
// chosen recomputes the position with the real token so its representation
// can be cached. Beam search runs over an abstract decoder session so tests
// can substitute stub models and the cache-equivalence oracle can substitute
// full recomputation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "caplab/model.hpp"

namespace caplab {

struct Hypothesis {
  std::vector<int> tokens;  // includes the end token when predicted
  double score = 0.0;       // sum of chosen per-step log-probabilities
  bool finished = false;
};

// One decoding session per input. States are immutable once created; a
// hypothesis extends a state into a new one.
template <class T>
class DecoderSession {
 public:
  using StateId = int;
  virtual ~DecoderSession() = default;
  virtual int vocab_size() const = 0;
  virtual StateId root() = 0;
  // Distribution (raw logits) for the next position of `state`.
  virtual std::vector<T> step_logits(StateId state) = 0;
  virtual StateId extend(StateId state, int token) = 0;
  virtual int length(StateId state) const = 0;
};

// Incremental session backed by the model's key/value cache.
template <class T>
class CachedSession final : public DecoderSession<T> {
 public:
  CachedSession(CaptionModel<T>& model, const MultimodalBatch<T>& batch,
                int mask_token, int max_len)
      : model_(model), mask_token_(mask_token), max_len_(max_len) {
    states_.push_back(model_.make_decode_cache(batch));
  }

  int vocab_size() const override { return model_.config().vocab_size; }
  int root() override { return 0; }

  std::vector<T> step_logits(int state) override {
    const auto& cache = states_[state];
    const int s = static_cast<int>(cache.tokens.size());
    if (s >= max_len_)
      throw std::invalid_argument("step: position " + std::to_string(s + 1) +
                                  " beyond max length " +
                                  std::to_string(max_len_));
    return model_.decode_position(cache, mask_token_, s);
  }

  int extend(int state, int token) override {
    states_.push_back(states_[state]);
    model_.finalize_token(states_.back(), token);
    return static_cast<int>(states_.size()) - 1;
  }

  int length(int state) const override {
    return static_cast<int>(states_[state].tokens.size());
  }

  const typename CaptionModel<T>::DecodeCache& cache(int state) const {
    return states_[state];
  }

 private:
  CaptionModel<T>& model_;
  int mask_token_;
  int max_len_;
  std::vector<typename CaptionModel<T>::DecodeCache> states_;
};

// Oracle session: reconstructs the full input (finalized tokens plus a
// trailing [MASK]) and runs a complete forward pass every step.
template <class T>
class FullRecomputeSession final : public DecoderSession<T> {
 public:
  FullRecomputeSession(CaptionModel<T>& model, const MultimodalBatch<T>& batch,
                       int mask_token, int max_len)
      : model_(model), batch_(batch), mask_token_(mask_token),
        max_len_(max_len) {
    states_.push_back({});
  }

  int vocab_size() const override { return model_.config().vocab_size; }
  int root() override { return 0; }

  std::vector<T> step_logits(int state) override {
    const auto& toks = states_[state];
    if (static_cast<int>(toks.size()) >= max_len_)
      throw std::invalid_argument("step: beyond max length");
    NoGradGuard ng;
    MultimodalBatch<T> b = batch_;
    b.caption = toks;
    b.caption.push_back(mask_token_);
    auto out = model_.forward(b);
    const int L = b.n_caption();
    auto row = slice_rows(out.caption_logits, L - 1, L);
    return row.values();
  }

  int extend(int state, int token) override {
    states_.push_back(states_[state]);
    states_.back().push_back(token);
    return static_cast<int>(states_.size()) - 1;
  }

  int length(int state) const override {
    return static_cast<int>(states_[state].size());
  }

 private:
  CaptionModel<T>& model_;
  MultimodalBatch<T> batch_;
  int mask_token_;
  int max_len_;
  std::vector<std::vector<int>> states_;
};

// Session for models trained with the next-token LM objective: the caption
// block is [CLS] plus the tokens so far and the distribution is read at the
// last position (no [MASK] probe).
template <class T>
class LMSession final : public DecoderSession<T> {
 public:
  LMSession(CaptionModel<T>& model, const MultimodalBatch<T>& batch,
            int bos_token, int max_len)
      : model_(model), batch_(batch), bos_token_(bos_token), max_len_(max_len) {
    states_.push_back({});
  }

  int vocab_size() const override { return model_.config().vocab_size; }
  int root() override { return 0; }

  std::vector<T> step_logits(int state) override {
    const auto& toks = states_[state];
    if (static_cast<int>(toks.size()) >= max_len_)
      throw std::invalid_argument("step: beyond max length");
    NoGradGuard ng;
    MultimodalBatch<T> b = batch_;
    b.caption.clear();
    b.caption.push_back(bos_token_);
    b.caption.insert(b.caption.end(), toks.begin(), toks.end());
    auto out = model_.forward(b);
    const int L = b.n_caption();
    return slice_rows(out.caption_logits, L - 1, L).values();
  }

  int extend(int state, int token) override {
    states_.push_back(states_[state]);
    states_.back().push_back(token);
    return static_cast<int>(states_.size()) - 1;
  }

  int length(int state) const override {
    return static_cast<int>(states_[state].size());
  }

 private:
  CaptionModel<T>& model_;
  MultimodalBatch<T> batch_;
  int bos_token_;
  int max_len_;
  std::vector<std::vector<int>> states_;
};

template <class T>
std::vector<double> log_softmax_row(const std::vector<T>& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  double z = 0;
  for (T x : logits) z += std::exp(static_cast<double>(x) - mx);
  const double logz = std::log(z) + mx;
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<double>(logits[i]) - logz;
  return out;
}

struct GenerateOptions {
  int beam_size = 5;
  int max_len = 20;
  bool length_normalize = false;  // divide final score by token count
};

namespace beam_detail {

// Deterministic ordering: higher score first, then lexicographically lower
// token sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace beam_detail

// Standard beam search over a decoder session. A hypothesis finishes when
// the end token is predicted or max length is reached; search stops early
// once no active hypotheses remain.
template <class T>
std::vector<Hypothesis> beam_search(DecoderSession<T>& session, int eos_token,
                                    const GenerateOptions& opt) {
  if (opt.beam_size < 1 || opt.max_len < 1)
    throw std::invalid_argument("beam_search: beam_size and max_len must be >= 1");
  struct Active {
    Hypothesis hyp;
    typename DecoderSession<T>::StateId state;
  };
  std::vector<Active> active{{Hypothesis{}, session.root()}};
  std::vector<Hypothesis> finished;
  for (int step = 0; step < opt.max_len && !active.empty(); ++step) {
    struct Cand {
      Hypothesis hyp;
      typename DecoderSession<T>::StateId parent;
      int token;
    };
    std::vector<Cand> cands;
    for (auto& a : active) {
      auto logp = log_softmax_row(session.step_logits(a.state));
      // top beam_size tokens of this hypothesis
      std::vector<int> idx(logp.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      const size_t keep = std::min<size_t>(opt.beam_size, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(),
                        [&](int x, int y) {
                          if (logp[x] != logp[y]) return logp[x] > logp[y];
                          return x < y;
                        });
      for (size_t i = 0; i < keep; ++i) {
        Cand c;
        c.hyp = a.hyp;
        c.hyp.tokens.push_back(idx[i]);
        c.hyp.score += logp[idx[i]];
        c.parent = a.state;
        c.token = idx[i];
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return beam_detail::better(a.hyp, b.hyp);
    });
    if (cands.size() > static_cast<size_t>(opt.beam_size))
      cands.resize(opt.beam_size);
    active.clear();
    for (auto& c : cands) {
      // state length counts prompt tokens too, so prompted sessions finish
      // at the same absolute position budget
      const bool at_max = session.length(c.parent) + 1 >= opt.max_len;
      if (c.token == eos_token || at_max) {
        c.hyp.finished = true;
        finished.push_back(std::move(c.hyp));
      } else {
        active.push_back({std::move(c.hyp), session.extend(c.parent, c.token)});
      }
    }
  }
  for (auto& a : active) finished.push_back(std::move(a.hyp));
  if (opt.length_normalize)
    for (auto& h : finished)
      if (!h.tokens.empty()) h.score /= static_cast<double>(h.tokens.size());
  std::sort(finished.begin(), finished.end(), beam_detail::better);
  if (finished.size() > static_cast<size_t>(opt.beam_size))
    finished.resize(opt.beam_size);
  return finished;
}

// Cached generation for one input.
template <class T>
std::vector<Hypothesis> generate(const MultimodalBatch<T>& batch,
                                 CaptionModel<T>& model, int mask_token,
                                 int eos_token,
                                 const GenerateOptions& opt = {}) {
  CachedSession<T> session(model, batch, mask_token, opt.max_len);
  return beam_search(session, eos_token, opt);
}

// Zero-shot prompting: the prompt tokens are finalized into the cache as if
// already generated; they consume caption positions but are excluded from
// the returned hypotheses and their scores.
template <class T>
std::vector<Hypothesis> zero_shot_caption(const MultimodalBatch<T>& batch,
                                          CaptionModel<T>& model,
                                          const std::vector<int>& prompt,
                                          int mask_token, int eos_token,
                                          const GenerateOptions& opt = {}) {
  if (static_cast<int>(prompt.size()) >= opt.max_len && !prompt.empty())
    throw std::invalid_argument("zero_shot_caption: prompt of " +
                                std::to_string(prompt.size()) +
                                " tokens reaches max length " +
                                std::to_string(opt.max_len));
  CachedSession<T> session(model, batch, mask_token, opt.max_len);
  auto state = session.root();
  for (int tok : prompt) state = session.extend(state, tok);

  // Same beam loop, but rooted at the prompted state.
  struct PromptedSession final : DecoderSession<T> {
    CachedSession<T>& inner;
    int rootState;
    PromptedSession(CachedSession<T>& s, int r) : inner(s), rootState(r) {}
    int vocab_size() const override { return inner.vocab_size(); }
    int root() override { return rootState; }
    std::vector<T> step_logits(int s) override { return inner.step_logits(s); }
    int extend(int s, int t) override { return inner.extend(s, t); }
    int length(int s) const override { return inner.length(s); }
  } prompted(session, state);
  GenerateOptions inner_opt = opt;
  return beam_search(prompted, eos_token, inner_opt);
}

}  // namespace caplab
