#pragma once

// Synthetic desk-scale captioning task. A fixed inventory of concepts, each
// with a prototype region vector and a dedicated vocabulary token; captions
// come from a small template grammar over the concepts present in the image.
// Concepts are partitioned into in/near/out domains and drawn with a Zipf
// prior, so larger sampled datasets cover more of the long tail.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "caplab/model.hpp"
#include "caplab/tokenizer.hpp"

namespace caplab {

enum class Domain { In, Near, Out };

inline const char* domain_name(Domain d) {
  switch (d) {
    case Domain::In: return "in";
    case Domain::Near: return "near";
    default: return "out";
  }
}

struct ToyWorldConfig {
  int n_concepts = 200;
  int n_in = 120;
  int n_near = 50;
  int n_out = 30;
  double zipf_exponent = 1.1;
  int region_dim = 2054;  // 2048 visual + 6 box values
  uint32_t seed = 1;
};

template <class T>
struct ToyRecord {
  std::string id;
  std::vector<std::vector<T>> regions;
  std::string tags;
  std::string caption;
  Domain domain = Domain::In;
  std::vector<int> concepts;
};

template <class T>
class ToyWorld {
 public:
  explicit ToyWorld(ToyWorldConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.n_in + cfg_.n_near + cfg_.n_out != cfg_.n_concepts)
      throw std::invalid_argument("ToyWorld: domain partition must cover all concepts");
    names_.reserve(cfg_.n_concepts);
    char buf[16];
    for (int i = 0; i < cfg_.n_concepts; ++i) {
      std::snprintf(buf, sizeof(buf), "obj%03d", i);
      names_.push_back(buf);
    }
    std::vector<std::string> tokens = {"[PAD]", "[UNK]",  "[CLS]",  "[SEP]",
                                       "[MASK]", "<person>", "<loc>",  "a",
                                       "photo",  "picture", "of",     "and"};
    tokens.insert(tokens.end(), names_.begin(), names_.end());
    vocab_ = Vocabulary::from_tokens(tokens);
    // per-concept prototype visual vectors
    protos_.resize(cfg_.n_concepts);
    for (int i = 0; i < cfg_.n_concepts; ++i) {
      std::mt19937 rng(cfg_.seed * 2654435761u + static_cast<uint32_t>(i));
      std::normal_distribution<double> g(0.0, 1.0);
      protos_[i].resize(cfg_.region_dim - 6);
      for (auto& x : protos_[i]) x = static_cast<T>(g(rng));
    }
    // Zipf weights over concept index; in-domain concepts sit at the head
    cumw_.resize(cfg_.n_concepts);
    double acc = 0;
    for (int i = 0; i < cfg_.n_concepts; ++i) {
      acc += 1.0 / std::pow(static_cast<double>(i + 1), cfg_.zipf_exponent);
      cumw_[i] = acc;
    }
  }

  const ToyWorldConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::string& concept_name(int i) const { return names_.at(i); }

  Domain domain_of(int cid) const {
    if (cid < cfg_.n_in) return Domain::In;
    if (cid < cfg_.n_in + cfg_.n_near) return Domain::Near;
    return Domain::Out;
  }

  // Zipf draw over all concepts, or restricted to one domain.
  int sample_concept(std::mt19937& rng) const {
    std::uniform_real_distribution<double> u(0.0, cumw_.back());
    const double x = u(rng);
    for (int i = 0; i < cfg_.n_concepts; ++i)
      if (x <= cumw_[i]) return i;
    return cfg_.n_concepts - 1;
  }

  int sample_concept_in_domain(Domain d, std::mt19937& rng) const {
    int lo = 0, hi = cfg_.n_concepts;
    if (d == Domain::In) hi = cfg_.n_in;
    else if (d == Domain::Near) { lo = cfg_.n_in; hi = cfg_.n_in + cfg_.n_near; }
    else lo = cfg_.n_in + cfg_.n_near;
    std::uniform_int_distribution<int> u(lo, hi - 1);
    return u(rng);
  }

  std::string caption_for(const std::vector<int>& concepts, int variant) const {
    const std::string noun = variant % 2 == 0 ? "photo" : "picture";
    std::string cap = "a " + noun + " of a " + names_.at(concepts[0]);
    for (size_t i = 1; i < concepts.size(); ++i)
      cap += " and a " + names_.at(concepts[i]);
    return cap;
  }

  // One record, a pure function of (dataset seed, index): datasets sampled
  // with the same seed are nested supersets of each other.
  ToyRecord<T> make_record(uint32_t seed, long index, double noise,
                           bool in_domain_only) const {
    std::mt19937 rng(static_cast<uint32_t>(seed * 40503u + 7u) ^
                     static_cast<uint32_t>(index * 2246822519ULL));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ToyRecord<T> rec;
    rec.id = (in_domain_only ? "ft" : "pt") + std::to_string(seed) + "-" +
             std::to_string(index);
    const int n_concepts = u(rng) < 0.6 ? 1 : 2;
    for (int c = 0; c < n_concepts; ++c) {
      int cid = in_domain_only ? sample_concept_in_domain(Domain::In, rng)
                                   : sample_concept(rng);
      // avoid duplicated concept in one record
      if (!rec.concepts.empty() && cid == rec.concepts[0])
        cid = (cid + 1) % (in_domain_only ? cfg_.n_in : cfg_.n_concepts);
      rec.concepts.push_back(cid);
    }
    fill_content(rec, noise, rng);
    rec.caption = caption_for(rec.concepts, static_cast<int>(u(rng) * 2));
    Domain worst = Domain::In;
    for (int c : rec.concepts)
      if (static_cast<int>(domain_of(c)) > static_cast<int>(worst))
        worst = domain_of(c);
    rec.domain = worst;
    return rec;
  }

  // Evaluation record with concepts drawn uniformly inside one domain, so
  // tail concepts are actually exercised.
  ToyRecord<T> make_eval_record(uint32_t seed, long index, Domain d,
                                double noise) const {
    std::mt19937 rng(static_cast<uint32_t>(seed * 69069u + 11u) ^
                     static_cast<uint32_t>((index * 4u +
                                            static_cast<uint32_t>(d)) *
                                           2654435761ULL));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ToyRecord<T> rec;
    rec.id = std::string("ev") + domain_name(d) + std::to_string(seed) + "-" +
             std::to_string(index);
    rec.concepts.push_back(sample_concept_in_domain(d, rng));
    fill_content(rec, noise, rng);
    rec.caption = caption_for(rec.concepts, static_cast<int>(u(rng) * 2));
    rec.domain = d;
    return rec;
  }

  // Region rows carry prototype + gaussian noise, then six scaled box values
  // (x1, y1, x2, y2, w, h).
  void fill_content(ToyRecord<T>& rec, double noise, std::mt19937& rng) const {
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::string tags;
    for (int cid : rec.concepts) {
      std::vector<T> row(protos_[cid]);
      for (auto& x : row) x += static_cast<T>(noise * g(rng));
      const double x1 = 0.5 * u(rng), y1 = 0.5 * u(rng);
      const double w = 0.2 + 0.3 * u(rng), h = 0.2 + 0.3 * u(rng);
      for (double b : {x1, y1, x1 + w, y1 + h, w, h})
        row.push_back(static_cast<T>(b));
      rec.regions.push_back(std::move(row));
      // detector tags cover most but not all concepts
      if (u(rng) < 0.75) {
        if (!tags.empty()) tags += ' ';
        tags += names_[cid];
      }
    }
    rec.tags = tags;
  }

 private:
  ToyWorldConfig cfg_;
  std::vector<std::string> names_;
  Vocabulary vocab_;
  std::vector<std::vector<T>> protos_;
  std::vector<double> cumw_;
};

template <class T>
std::vector<ToyRecord<T>> make_toy_dataset(const ToyWorld<T>& world, long n,
                                           double noise, uint32_t seed,
                                           bool in_domain_only = false) {
  if (n < 1) throw std::invalid_argument("make_toy_dataset: n must be >= 1");
  std::vector<ToyRecord<T>> out;
  out.reserve(n);
  for (long i = 0; i < n; ++i)
    out.push_back(world.make_record(seed, i, noise, in_domain_only));
  return out;
}

template <class T>
std::vector<ToyRecord<T>> make_eval_set(const ToyWorld<T>& world, long n_per_domain,
                                        double noise, uint32_t seed) {
  std::vector<ToyRecord<T>> out;
  for (Domain d : {Domain::In, Domain::Near, Domain::Out})
    for (long i = 0; i < n_per_domain; ++i)
      out.push_back(world.make_eval_record(seed, i, d, noise));
  return out;
}

// Tokenized view of a toy record, truncated to the configured limits.
template <class T>
MultimodalBatch<T> to_batch(const ToyRecord<T>& rec,
                            const WordPieceTokenizer& tok,
                            const InputLimits& limits = {}) {
  MultimodalBatch<T> b;
  b.regions = rec.regions;
  if (static_cast<int>(b.regions.size()) > limits.max_regions)
    b.regions.resize(limits.max_regions);
  auto tags = tok.tokenize(rec.tags);
  truncate(tags, limits.max_tags);
  b.tags = tags.ids;
  auto cap = tok.tokenize(rec.caption);
  truncate(cap, limits.max_caption);
  b.caption = cap.ids;
  return b;
}

}  // namespace caplab
