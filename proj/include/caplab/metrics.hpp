#pragma once

// Caption evaluation metrics (corpus BLEU@4 and CIDEr-D) plus the
// least-squares log-linear fit used to summarize scaling sweeps.
//
// Metric tokenization: lowercase, punctuation split off, whitespace split.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace caplab {

struct EvalPair {
  std::string image_id;
  std::string candidate;
  std::vector<std::string> references;  // at least one
};

namespace metric_detail {

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> toks;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      toks.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (std::ispunct(static_cast<unsigned char>(c)) && c != '<' &&
               c != '>') {
      flush();
      toks.push_back(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return toks;
}

using NgramCounts = std::map<std::vector<std::string>, long>;

inline NgramCounts count_ngrams(const std::vector<std::string>& toks, int n) {
  NgramCounts counts;
  if (static_cast<int>(toks.size()) >= n)
    for (size_t i = 0; i + n <= toks.size(); ++i)
      counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)] += 1;
  return counts;
}

}  // namespace metric_detail

// Corpus-level BLEU@4: geometric mean of clipped n-gram precisions for
// n=1..4 times the brevity penalty, scaled to [0,100]. Effective reference
// length is the closest to the candidate length (shorter wins ties).
inline double bleu4(const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) return 0.0;
  long matches[4] = {0, 0, 0, 0};
  long totals[4] = {0, 0, 0, 0};
  long cand_len = 0, eff_ref_len = 0;
  for (const auto& p : pairs) {
    if (p.references.empty())
      throw std::invalid_argument("bleu4: pair '" + p.image_id +
                                  "' has no references");
    auto cand = metric_detail::tokenize(p.candidate);
    cand_len += static_cast<long>(cand.size());
    long best_ref = 0;
    long best_diff = -1;
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : p.references) {
      refs.push_back(metric_detail::tokenize(r));
      const long rl = static_cast<long>(refs.back().size());
      const long diff = std::labs(rl - static_cast<long>(cand.size()));
      if (best_diff < 0 || diff < best_diff ||
          (diff == best_diff && rl < best_ref)) {
        best_diff = diff;
        best_ref = rl;
      }
    }
    eff_ref_len += best_ref;
    for (int n = 1; n <= 4; ++n) {
      auto cc = metric_detail::count_ngrams(cand, n);
      metric_detail::NgramCounts max_ref;
      for (const auto& r : refs)
        for (auto& [g, c] : metric_detail::count_ngrams(r, n))
          max_ref[g] = std::max(max_ref[g], c);
      for (auto& [g, c] : cc) {
        totals[n - 1] += c;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matches[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_prec = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(matches[n]) / totals[n]);
  }
  const double bp =
      cand_len >= eff_ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(eff_ref_len) / cand_len);
  return 100.0 * bp * std::exp(log_prec / 4.0);
}

// CIDEr-D: TF-IDF weighted n-gram cosine similarity for n=1..4 with
// candidate-count clipping and a gaussian length penalty (sigma 6), averaged
// over n and references, scaled by 10. IDF comes from the reference sets of
// the evaluation corpus; single-image corpora give degenerate IDF.
inline double cider_d(const std::vector<EvalPair>& pairs, double sigma = 6.0) {
  if (pairs.empty()) return 0.0;
  using metric_detail::NgramCounts;
  // document frequency: number of images whose references contain the n-gram
  std::map<std::vector<std::string>, long> df;
  for (const auto& p : pairs) {
    std::map<std::vector<std::string>, bool> seen;
    for (const auto& r : p.references) {
      auto toks = metric_detail::tokenize(r);
      for (int n = 1; n <= 4; ++n)
        for (auto& [g, c] : metric_detail::count_ngrams(toks, n)) seen[g] = true;
    }
    for (auto& [g, b] : seen) df[g] += 1;
  }
  const double logN = std::log(static_cast<double>(pairs.size()));

  struct Vec {
    std::map<std::vector<std::string>, double> w[4];
    double norm[4] = {0, 0, 0, 0};
    long length = 0;
  };
  auto to_vec = [&](const std::vector<std::string>& toks) {
    Vec v;
    v.length = static_cast<long>(toks.size());
    for (int n = 1; n <= 4; ++n) {
      for (auto& [g, c] : metric_detail::count_ngrams(toks, n)) {
        auto it = df.find(g);
        const double idf =
            logN - std::log(std::max(1.0, it == df.end()
                                              ? 0.0
                                              : static_cast<double>(it->second)));
        v.w[n - 1][g] = static_cast<double>(c) * idf;
      }
      double sq = 0;
      for (auto& [g, x] : v.w[n - 1]) sq += x * x;
      v.norm[n - 1] = std::sqrt(sq);
    }
    return v;
  };

  double total = 0.0;
  for (const auto& p : pairs) {
    auto cv = to_vec(metric_detail::tokenize(p.candidate));
    double image_score = 0.0;
    for (const auto& r : p.references) {
      auto rv = to_vec(metric_detail::tokenize(r));
      const double delta = static_cast<double>(cv.length - rv.length);
      const double len_pen = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (int n = 0; n < 4; ++n) {
        double dot = 0.0;
        for (auto& [g, x] : cv.w[n]) {
          auto it = rv.w[n].find(g);
          if (it != rv.w[n].end()) dot += std::min(x, it->second) * it->second;
        }
        double sim = 0.0;
        if (cv.norm[n] > 0.0 && rv.norm[n] > 0.0)
          sim = dot / (cv.norm[n] * rv.norm[n]);
        image_score += sim * len_pen;
      }
    }
    image_score /= static_cast<double>(p.references.size()) * 4.0;
    total += image_score * 10.0;
  }
  return total / static_cast<double>(pairs.size());
}

// ---- scaling-curve fit ----

struct ScalingPoint {
  double data_size = 0;  // number of image-text pairs, > 0
  std::string model;
  double score = 0;
};

struct LogLinearFit {
  double intercept = 0;  // a in score = a + b ln(data size)
  double slope = 0;
  std::vector<double> residuals;
};

inline LogLinearFit fit_loglinear(const std::vector<ScalingPoint>& points) {
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    if (p.data_size <= 0)
      throw std::invalid_argument("fit_loglinear: data size must be > 0");
    xs.push_back(std::log(p.data_size));
    ys.push_back(p.score);
  }
  std::vector<double> distinct = xs;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2)
    throw std::invalid_argument("fit_loglinear: need >= 2 distinct data sizes");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  LogLinearFit fit;
  fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  fit.intercept = (sy - fit.slope * sx) / n;
  for (size_t i = 0; i < xs.size(); ++i)
    fit.residuals.push_back(ys[i] - (fit.intercept + fit.slope * xs[i]));
  return fit;
}

}  // namespace caplab
