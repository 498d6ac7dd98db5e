#pragma once

// Web alt-text curation pipeline and corpus statistics.
//
// Per-record stages (image filter, segment selection, vocabulary filter,
// anonymization) are independent per record and run in input order;
// corpus-global stages (boilerplate counting, dedup) are two-pass: count,
// then decide in input order. Same inputs + config always produce byte
// identical outputs and drop logs.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace caplab {

struct CorpusRecord {
  std::string id;
  int width = 0;
  int height = 0;
  std::string alt;
  std::optional<std::string> hash;
};

struct DropEntry {
  std::string id;
  std::string stage;
  std::string reason;
};

namespace corpus_detail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// lowercase, strip leading/trailing punctuation, keep internal hyphens
inline std::string normalize_unigram(const std::string& raw) {
  std::string s = lower(raw);
  size_t b = 0, e = s.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> unigrams(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    std::string u = normalize_unigram(w);
    if (!u.empty()) out.push_back(u);
  }
  return out;
}

}  // namespace corpus_detail

// ---- image filter ----

struct FilterDecision {
  bool keep = true;
  std::string reason;
};

// keep iff max(w,h) > 200 and aspect ratio < 3, both strict
inline FilterDecision filter_image(const CorpusRecord& r, int min_longer_side = 200,
                                   double max_aspect = 3.0) {
  if (r.width <= 0 || r.height <= 0)
    return {false, "zero-dimension"};
  const int longer = std::max(r.width, r.height);
  const int shorter = std::min(r.width, r.height);
  if (longer <= min_longer_side) return {false, "longer-side-too-small"};
  if (static_cast<double>(longer) / shorter >= max_aspect)
    return {false, "aspect-ratio-too-large"};
  return {true, ""};
}

// ---- segment selection ----

// Split on sentence-final punctuation {. ! ?}, return the segment with most
// characters after trimming; ties go to the earliest segment.
inline std::string select_segment(const std::string& alt) {
  std::vector<std::string> segments;
  std::string cur;
  for (char c : alt) {
    if (c == '.' || c == '!' || c == '?') {
      segments.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  segments.push_back(cur);
  std::string best;
  for (auto& seg : segments) {
    std::string t = corpus_detail::trim(seg);
    if (t.size() > best.size()) best = t;
  }
  return best;
}

// ---- vocabulary filter ----

class UnigramVocab {
 public:
  UnigramVocab() = default;

  static UnigramVocab build(const std::vector<std::string>& reference_texts,
                            long min_count = 5) {
    UnigramVocab v;
    v.min_count_ = min_count;
    std::unordered_map<std::string, long> counts;
    for (const auto& text : reference_texts)
      for (const auto& u : corpus_detail::unigrams(text)) counts[u] += 1;
    for (auto& [u, c] : counts)
      if (c >= min_count) v.words_.insert(u);
    return v;
  }

  // File format: one unigram per line (counts already thresholded upstream).
  static UnigramVocab load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("UnigramVocab: cannot read " + path);
    UnigramVocab v;
    std::string line;
    while (std::getline(is, line)) {
      line = corpus_detail::trim(line);
      if (!line.empty()) v.words_.insert(corpus_detail::lower(line));
    }
    return v;
  }

  bool contains(const std::string& unigram) const {
    return words_.count(unigram) > 0;
  }
  size_t size() const { return words_.size(); }
  long min_count() const { return min_count_; }

 private:
  std::unordered_set<std::string> words_;
  long min_count_ = 5;
};

// drop iff any unigram is absent from the vocabulary; empty text drops too
inline FilterDecision vocab_filter(const std::string& text,
                                   const UnigramVocab& vocab) {
  auto us = corpus_detail::unigrams(text);
  if (us.empty()) return {false, "empty-text"};
  for (auto& u : us)
    if (!vocab.contains(u)) return {false, "unigram-not-in-vocab:" + u};
  return {true, ""};
}

// ---- boilerplate filter ----

struct BoilerplateConfig {
  // <= 0 means derive from corpus size (0.01% of records, at least 2)
  long frequency_threshold = 0;
  std::vector<std::string> blocklist = {"stock image", "3d illustration",
                                        "vector photo"};
};

class BoilerplateFilter {
 public:
  BoilerplateFilter(const std::vector<std::string>& corpus_texts,
                    BoilerplateConfig cfg = {})
      : cfg_(std::move(cfg)) {
    for (const auto& t : corpus_texts)
      counts_[corpus_detail::lower(corpus_detail::trim(t))] += 1;
    threshold_ = cfg_.frequency_threshold > 0
                     ? cfg_.frequency_threshold
                     : std::max<long>(
                           2, static_cast<long>(corpus_texts.size() / 10000));
    for (auto& b : cfg_.blocklist)
      block_.insert(corpus_detail::lower(corpus_detail::trim(b)));
  }

  FilterDecision check(const std::string& text) const {
    const std::string key = corpus_detail::lower(corpus_detail::trim(text));
    if (block_.count(key)) return {false, "boilerplate-blocklist"};
    auto it = counts_.find(key);
    if (it != counts_.end() && it->second > threshold_)
      return {false, "boilerplate-frequency"};
    return {true, ""};
  }

  long threshold() const { return threshold_; }

 private:
  BoilerplateConfig cfg_;
  std::unordered_map<std::string, long> counts_;
  std::unordered_set<std::string> block_;
  long threshold_ = 0;
};

// ---- anonymization ----

enum class EntityLabel { Person, Loc };

struct EntitySpan {
  size_t begin = 0;
  size_t end = 0;  // half-open byte range
  EntityLabel label = EntityLabel::Person;
};

// Pluggable named-entity interface: text -> labelled spans. Implementations
// must be deterministic for pipeline reproducibility.
using EntityTagger = std::function<std::vector<EntitySpan>(const std::string&)>;

// Deterministic gazetteer tagger: whole-word, case-insensitive matches of a
// fixed name list. Multi-word names match as contiguous word runs.
class GazetteerTagger {
 public:
  void add(const std::string& name, EntityLabel label) {
    entries_.emplace_back(corpus_detail::lower(name), label);
    std::sort(entries_.begin(), entries_.end(),
              [](auto& a, auto& b) { return a.first.size() > b.first.size(); });
  }

  // File format: one entry per line, "name<TAB>PERSON|LOC".
  static GazetteerTagger load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("GazetteerTagger: cannot read " + path);
    GazetteerTagger g;
    std::string line;
    while (std::getline(is, line)) {
      auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      const std::string label = corpus_detail::trim(line.substr(tab + 1));
      g.add(corpus_detail::trim(line.substr(0, tab)),
            label == "LOC" ? EntityLabel::Loc : EntityLabel::Person);
    }
    return g;
  }

  std::vector<EntitySpan> operator()(const std::string& text) const {
    const std::string low = corpus_detail::lower(text);
    std::vector<EntitySpan> spans;
    for (auto& [name, label] : entries_) {
      size_t pos = 0;
      while ((pos = low.find(name, pos)) != std::string::npos) {
        const size_t end = pos + name.size();
        const bool left_ok =
            pos == 0 || !std::isalnum(static_cast<unsigned char>(low[pos - 1]));
        const bool right_ok =
            end >= low.size() ||
            !std::isalnum(static_cast<unsigned char>(low[end]));
        if (left_ok && right_ok) spans.push_back({pos, end, label});
        pos += 1;
      }
    }
    return spans;
  }

 private:
  std::vector<std::pair<std::string, EntityLabel>> entries_;
};

// Replace tagged spans with <person>/<loc>, resolving overlaps longest-first
// and applying left-to-right.
inline std::string anonymize(const std::string& text, const EntityTagger& tagger) {
  auto spans = tagger(text);
  std::sort(spans.begin(), spans.end(), [](const EntitySpan& a, const EntitySpan& b) {
    const size_t la = a.end - a.begin, lb = b.end - b.begin;
    if (la != lb) return la > lb;
    return a.begin < b.begin;
  });
  std::vector<EntitySpan> chosen;
  for (auto& s : spans) {
    bool overlaps = false;
    for (auto& c : chosen)
      if (s.begin < c.end && c.begin < s.end) {
        overlaps = true;
        break;
      }
    if (!overlaps) chosen.push_back(s);
  }
  std::sort(chosen.begin(), chosen.end(),
            [](const EntitySpan& a, const EntitySpan& b) { return a.begin < b.begin; });
  std::string out;
  size_t cur = 0;
  for (auto& s : chosen) {
    out += text.substr(cur, s.begin - cur);
    out += s.label == EntityLabel::Person ? "<person>" : "<loc>";
    cur = s.end;
  }
  out += text.substr(cur);
  return out;
}

// ---- dedup ----

// Drops records whose content hash appears in the test-set list or earlier
// in the stream (first wins). Missing hash is a drop.
inline std::vector<CorpusRecord> dedup(
    const std::vector<CorpusRecord>& records,
    const std::unordered_set<std::string>& test_hashes,
    std::vector<DropEntry>* drops = nullptr) {
  std::vector<CorpusRecord> kept;
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (!r.hash) {
      if (drops) drops->push_back({r.id, "dedup", "missing-hash"});
      continue;
    }
    if (test_hashes.count(*r.hash)) {
      if (drops) drops->push_back({r.id, "dedup", "in-test-set"});
      continue;
    }
    if (!seen.insert(*r.hash).second) {
      if (drops) drops->push_back({r.id, "dedup", "duplicate-in-stream"});
      continue;
    }
    kept.push_back(r);
  }
  return kept;
}

// ---- statistics ----

struct CorpusStats {
  long record_count = 0;
  double captions_per_image = 0.0;
  long unique_unigrams = 0;
  long unigrams_in_tail = 0;  // unique unigrams in the 0.1% occurrence tail
  double length_mean = 0.0;
  double length_std = 0.0;
  long length_p5 = 0, length_p50 = 0, length_p95 = 0;
  std::vector<std::pair<std::string, long>> top_words;  // non-stopword, desc
};

namespace corpus_detail {

inline const std::set<std::string>& stopwords() {
  static const std::set<std::string> sw = {
      "a",  "an", "and", "are", "as",  "at",  "be", "by", "for", "from",
      "in", "is", "it",  "of",  "on",  "or",  "the", "to", "with"};
  return sw;
}

// nearest-rank percentile over a sorted vector
inline long percentile(const std::vector<long>& sorted, double p) {
  if (sorted.empty()) return 0;
  size_t rank = static_cast<size_t>(std::ceil(p / 100.0 * sorted.size()));
  if (rank == 0) rank = 1;
  return sorted[rank - 1];
}

}  // namespace corpus_detail

inline CorpusStats compute_stats(const std::vector<CorpusRecord>& records,
                                 int top_k = 20) {
  CorpusStats s;
  if (records.empty()) return s;
  s.record_count = static_cast<long>(records.size());
  std::set<std::string> image_ids;
  std::map<std::string, long> counts;  // ordered for deterministic ties
  std::vector<long> lengths;
  double sum = 0;
  for (const auto& r : records) {
    image_ids.insert(r.id);
    auto us = corpus_detail::unigrams(r.alt);
    lengths.push_back(static_cast<long>(us.size()));
    sum += static_cast<double>(us.size());
    for (auto& u : us) counts[u] += 1;
  }
  s.captions_per_image =
      static_cast<double>(records.size()) / static_cast<double>(image_ids.size());
  s.unique_unigrams = static_cast<long>(counts.size());
  s.length_mean = sum / static_cast<double>(lengths.size());
  double sq = 0;
  for (long l : lengths) {
    const double d = static_cast<double>(l) - s.length_mean;
    sq += d * d;
  }
  s.length_std = std::sqrt(sq / static_cast<double>(lengths.size()));
  std::sort(lengths.begin(), lengths.end());
  s.length_p5 = corpus_detail::percentile(lengths, 5);
  s.length_p50 = corpus_detail::percentile(lengths, 50);
  s.length_p95 = corpus_detail::percentile(lengths, 95);

  // descending occurrence order, ties by token for determinism
  std::vector<std::pair<std::string, long>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  long total = 0;
  for (auto& [u, c] : sorted) total += c;
  // largest suffix of the distribution whose summed occurrences stay <= 0.1%
  long tail_budget = total / 1000;
  long acc = 0;
  for (auto it = sorted.rbegin(); it != sorted.rend(); ++it) {
    acc += it->second;
    if (acc > tail_budget) break;
    s.unigrams_in_tail += 1;
  }
  for (auto& [u, c] : sorted) {
    if (corpus_detail::stopwords().count(u)) continue;
    s.top_words.emplace_back(u, c);
    if (static_cast<int>(s.top_words.size()) >= top_k) break;
  }
  return s;
}

// ---- pipeline driver ----

struct PipelineConfig {
  std::vector<std::string> stages;  // executed in listed order
  UnigramVocab unigram_vocab;
  BoilerplateConfig boilerplate;
  EntityTagger tagger;  // required when "anonymize" is listed
  std::unordered_set<std::string> test_hashes;
};

struct PipelineResult {
  std::vector<CorpusRecord> kept;
  std::vector<DropEntry> drops;
};

inline PipelineResult run_pipeline(std::vector<CorpusRecord> records,
                                   const PipelineConfig& cfg) {
  PipelineResult res;
  for (const auto& stage : cfg.stages) {
    std::vector<CorpusRecord> next;
    if (stage == "filter_image") {
      for (auto& r : records) {
        auto d = filter_image(r);
        if (d.keep) next.push_back(std::move(r));
        else res.drops.push_back({r.id, stage, d.reason});
      }
    } else if (stage == "select_segment") {
      for (auto& r : records) {
        r.alt = select_segment(r.alt);
        if (r.alt.empty()) res.drops.push_back({r.id, stage, "empty-after-split"});
        else next.push_back(std::move(r));
      }
    } else if (stage == "vocab_filter") {
      for (auto& r : records) {
        auto d = vocab_filter(r.alt, cfg.unigram_vocab);
        if (d.keep) next.push_back(std::move(r));
        else res.drops.push_back({r.id, stage, d.reason});
      }
    } else if (stage == "boilerplate_filter") {
      std::vector<std::string> texts;
      texts.reserve(records.size());
      for (auto& r : records) texts.push_back(r.alt);
      BoilerplateFilter f(texts, cfg.boilerplate);
      for (auto& r : records) {
        auto d = f.check(r.alt);
        if (d.keep) next.push_back(std::move(r));
        else res.drops.push_back({r.id, stage, d.reason});
      }
    } else if (stage == "anonymize") {
      if (!cfg.tagger)
        throw std::invalid_argument("pipeline: anonymize stage without tagger");
      for (auto& r : records) {
        try {
          r.alt = anonymize(r.alt, cfg.tagger);
          next.push_back(std::move(r));
        } catch (const std::exception& e) {
          res.drops.push_back({r.id, stage, std::string("tagger-failure:") + e.what()});
        }
      }
    } else if (stage == "dedup") {
      next = dedup(records, cfg.test_hashes, &res.drops);
    } else {
      throw std::invalid_argument("pipeline: unknown stage '" + stage + "'");
    }
    records = std::move(next);
  }
  res.kept = std::move(records);
  return res;
}

}  // namespace caplab
