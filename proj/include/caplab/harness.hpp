#pragma once

// Experiment driver: pretrain / finetune loops with gradient accumulation,
// per-domain evaluation, and the model-size x data-size sweep with
// scaling-curve fits and chart output.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "caplab/decoding.hpp"
#include "caplab/metrics.hpp"
#include "caplab/model.hpp"
#include "caplab/objectives.hpp"
#include "caplab/optim.hpp"
#include "caplab/params.hpp"
#include "caplab/tokenizer.hpp"
#include "caplab/toyworld.hpp"

namespace caplab {

struct RunSpec {
  std::string model_name = "micro";
  std::string objective = "s2s-mlm";  // s2s-mlm | lm
  long dataset_size = 1000;
  double data_fraction = 1.0;  // applied to dataset_size, (0,1]
  int effective_batch = 32;    // realized via gradient accumulation
  int micro_batch = 8;
  int epochs = 5;
  double peak_lr = 2e-3;
  double warmup_fraction = 0.02;
  AdamWConfig optim;
  CorruptionConfig corruption;
  double label_smoothing = 0.1;
  double noise = 0.25;
  uint32_t seed = 1;
  long checkpoint_every_samples = 0;  // 0 = final checkpoint only

  void validate() const {
    if (data_fraction <= 0.0 || data_fraction > 1.0)
      throw std::invalid_argument("RunSpec: data_fraction outside (0,1]");
    if (effective_batch < 1 || micro_batch < 1 || epochs < 0)
      throw std::invalid_argument("RunSpec: bad batch/epoch settings");
    if (objective != "s2s-mlm" && objective != "lm")
      throw std::invalid_argument("RunSpec: unknown objective '" + objective + "'");
  }

  long effective_dataset_size() const {
    return std::max<long>(1, static_cast<long>(dataset_size * data_fraction));
  }
};

// Model names the harness resolves: the eight paper presets plus two
// desk-scale sizes used by the default sweep.
inline ModelConfig resolve_model(const std::string& name, int vocab_size) {
  ModelConfig cfg;
  if (name == "micro") {
    cfg.name = name;
    cfg.layers = 2;
    cfg.width = 32;
    cfg.mlp_dim = 64;
    cfg.heads = 2;
  } else if (name == "mini") {
    cfg.name = name;
    cfg.layers = 4;
    cfg.width = 64;
    cfg.mlp_dim = 128;
    cfg.heads = 4;
  } else {
    cfg = ModelConfig::preset(name);
  }
  cfg.vocab_size = vocab_size;
  return cfg;
}

struct CurvePoint {
  long samples_seen = 0;
  double train_loss = 0;
  double masked_acc = 0;
};

struct TrainResult {
  std::vector<CurvePoint> curve;  // samples_seen strictly increasing
  long samples_seen = 0;
  bool aborted = false;  // NaN divergence; partial curve preserved
};

// Training loop shared by pretrain and finetune. Loss reduction: mean over
// the samples of one effective batch of each sample's mean-over-positions
// loss, so micro-batch accumulation reproduces the full-batch update.
template <class T>
TrainResult train_loop(CaptionModel<T>& model, OptimizerState<T>& opt,
                       const std::vector<ToyRecord<T>>& data,
                       const WordPieceTokenizer& tok, const RunSpec& spec,
                       ScheduleKind kind,
                       const std::function<void(const CurvePoint&)>& on_checkpoint = {}) {
  spec.validate();
  const auto& vocab = tok.vocab();
  const long n = static_cast<long>(data.size());
  const long B = spec.effective_batch;
  const long steps_per_epoch = (n + B - 1) / B;
  ScheduleSpec sched;
  sched.kind = kind;
  sched.peak_lr = spec.peak_lr;
  sched.total_steps = std::max<long>(1, spec.epochs * steps_per_epoch);
  sched.warmup_fraction = kind == ScheduleKind::Pretrain ? spec.warmup_fraction : 0.0;

  std::mt19937 shuffle_rng(spec.seed ^ 0x9e3779b9u);
  std::mt19937 corrupt_rng(spec.seed + 1);
  TrainResult res;
  auto entries = model.params().entries();
  long step = 0;
  double loss_acc = 0;
  long loss_batches = 0, hits = 0, positions = 0;
  long next_checkpoint = spec.checkpoint_every_samples;

  auto emit_point = [&] {
    CurvePoint pt;
    pt.samples_seen = res.samples_seen;
    pt.train_loss = loss_batches ? loss_acc / loss_batches : 0.0;
    pt.masked_acc = positions ? static_cast<double>(hits) / positions : 0.0;
    res.curve.push_back(pt);
    if (on_checkpoint) on_checkpoint(pt);
    loss_acc = 0;
    loss_batches = 0;
    hits = 0;
    positions = 0;
  };

  for (int epoch = 0; epoch < spec.epochs && !res.aborted; ++epoch) {
    std::vector<long> order(n);
    for (long i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (long b0 = 0; b0 < n && !res.aborted; b0 += B) {
      const long bsz = std::min<long>(B, n - b0);
      model.params().zero_grads();
      double batch_loss = 0;
      for (long i = b0; i < b0 + bsz; ++i) {
        auto batch = to_batch(data[order[i]], tok);
        LossOutput<T> out;
        if (spec.objective == "s2s-mlm") {
          auto corr = corrupt(batch.caption, vocab, spec.corruption, corrupt_rng);
          out = s2s_mlm_loss_detailed(batch, corr, model,
                                      static_cast<T>(spec.label_smoothing));
        } else {
          out = lm_loss_detailed(batch, model, vocab,
                                 static_cast<T>(spec.label_smoothing));
        }
        backward(scale(out.loss, T(1) / static_cast<T>(bsz)));
        batch_loss += static_cast<double>(out.loss.item()) / bsz;
        hits += out.correct;
        positions += out.total;
      }
      ++step;
      try {
        adamw_step(entries, opt, lr_at(step, sched));
      } catch (const NanGradientError&) {
        res.aborted = true;
        break;
      }
      res.samples_seen += bsz;
      loss_acc += batch_loss;
      ++loss_batches;
      if (spec.checkpoint_every_samples > 0 && res.samples_seen >= next_checkpoint) {
        emit_point();
        next_checkpoint += spec.checkpoint_every_samples;
      }
    }
  }
  if (loss_batches > 0 || res.curve.empty()) emit_point();
  return res;
}

template <class T>
TrainResult pretrain(CaptionModel<T>& model, OptimizerState<T>& opt,
                     const std::vector<ToyRecord<T>>& data,
                     const WordPieceTokenizer& tok, const RunSpec& spec,
                     const std::function<void(const CurvePoint&)>& on_checkpoint = {}) {
  return train_loop(model, opt, data, tok, spec, ScheduleKind::Pretrain,
                    on_checkpoint);
}

// Finetuning keeps the pre-training objective and uses the no-warmup
// linear-decay schedule. The caller picks the learning rate; pick_finetune_lr
// applies the data-scale rule from the hyperparameter table.
template <class T>
TrainResult finetune(CaptionModel<T>& model, OptimizerState<T>& opt,
                     const std::vector<ToyRecord<T>>& data,
                     const WordPieceTokenizer& tok, const RunSpec& spec,
                     const std::function<void(const CurvePoint&)>& on_checkpoint = {}) {
  return train_loop(model, opt, data, tok, spec, ScheduleKind::Finetune,
                    on_checkpoint);
}

// Finetuning learning-rate defaults per model size: one column for
// checkpoints pre-trained on the smallest (3M-scale) subset, one for larger
// subsets. The threshold fraction carries the same rule to desk scale.
struct FinetuneLrRow {
  double lr_small_data;
  double lr_large_data;
};

inline FinetuneLrRow finetune_lr_row(const std::string& model_name) {
  static const std::map<std::string, FinetuneLrRow> table = {
      {"tiny", {2e-4, 2e-4}},    {"tiny12", {1e-4, 5e-5}},
      {"small", {8e-5, 5e-5}},   {"small24", {5e-5, 3e-5}},
      {"base", {3e-5, 1e-5}},    {"base24", {1e-5, 5e-6}},
      {"large", {5e-6, 1e-6}},   {"huge", {8e-7, 8e-7}},
      {"micro", {5e-4, 3e-4}},   {"mini", {3e-4, 2e-4}},
  };
  auto it = table.find(model_name);
  if (it == table.end())
    throw std::invalid_argument("finetune_lr_row: unknown model '" +
                                model_name + "'");
  return it->second;
}

inline double pick_finetune_lr(const std::string& model_name,
                               long pretrain_data_size,
                               long small_data_threshold) {
  auto row = finetune_lr_row(model_name);
  return pretrain_data_size <= small_data_threshold ? row.lr_small_data
                                                    : row.lr_large_data;
}

// ---- evaluation ----

struct DomainScores {
  double cider = 0;
  double bleu = 0;
  long n = 0;
};

template <class T>
std::map<std::string, DomainScores> evaluate_model(
    CaptionModel<T>& model, const ToyWorld<T>& world,
    const std::vector<ToyRecord<T>>& eval_set, const WordPieceTokenizer& tok,
    const std::string& objective = "s2s-mlm", int beam_size = 3,
    int max_len = 12) {
  const auto& vocab = tok.vocab();
  std::map<std::string, std::vector<EvalPair>> by_domain;
  GenerateOptions opt;
  opt.beam_size = beam_size;
  opt.max_len = max_len;
  for (const auto& rec : eval_set) {
    auto batch = to_batch(rec, tok);
    batch.caption.clear();
    std::vector<Hypothesis> hyps;
    if (objective == "lm") {
      LMSession<T> session(model, batch, vocab.cls_id(), opt.max_len);
      hyps = beam_search(session, vocab.sep_id(), opt);
    } else {
      hyps = generate(batch, model, vocab.mask_id(), vocab.sep_id(), opt);
    }
    TokenSeq seq;
    if (!hyps.empty()) seq.ids = hyps.front().tokens;
    EvalPair pair;
    pair.image_id = rec.id;
    pair.candidate = tok.detokenize(seq);
    pair.references = {world.caption_for(rec.concepts, 0),
                       world.caption_for(rec.concepts, 1)};
    by_domain[domain_name(rec.domain)].push_back(pair);
    by_domain["overall"].push_back(std::move(pair));
  }
  std::map<std::string, DomainScores> scores;
  for (auto& [domain, pairs] : by_domain) {
    DomainScores s;
    s.cider = cider_d(pairs);
    s.bleu = bleu4(pairs);
    s.n = static_cast<long>(pairs.size());
    scores[domain] = s;
  }
  return scores;
}

// ---- sweep ----

struct SweepConfig {
  std::vector<std::string> models = {"micro", "mini"};
  std::vector<long> data_sizes = {250, 1000, 4000};
  std::vector<uint32_t> seeds = {1};
  ToyWorldConfig world;
  RunSpec base;                     // per-cell template
  long finetune_size = 200;
  int finetune_epochs = 4;
  long small_data_threshold = 500;  // "3M column" analog
  long eval_per_domain = 30;
  int beam_size = 3;
  int max_len = 12;
  std::string out_dir;  // enables resumable per-cell result files
};

struct SweepRow {
  std::string model;
  long params = 0;
  long data_size = 0;
  uint32_t seed = 0;
  long samples_seen = 0;
  std::string domain;
  std::string metric;
  double value = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::map<std::string, LogLinearFit> fits;  // per model, overall CIDEr vs data
  std::vector<std::string> failures;
};

namespace harness_detail {

inline std::string cell_key(const std::string& model, long data, uint32_t seed) {
  return model + "_" + std::to_string(data) + "_" + std::to_string(seed);
}

inline void write_cell_file(const std::string& path,
                            const std::vector<SweepRow>& rows) {
  std::ofstream os(path);
  for (auto& r : rows)
    os << r.model << "," << r.params << "," << r.data_size << "," << r.seed
       << "," << r.samples_seen << "," << r.domain << "," << r.metric << ","
       << r.value << "\n";
}

inline bool read_cell_file(const std::string& path, std::vector<SweepRow>& rows) {
  std::ifstream is(path);
  if (!is) return false;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    SweepRow r;
    std::string tok;
    std::getline(ls, r.model, ',');
    std::getline(ls, tok, ','); r.params = std::stol(tok);
    std::getline(ls, tok, ','); r.data_size = std::stol(tok);
    std::getline(ls, tok, ','); r.seed = static_cast<uint32_t>(std::stoul(tok));
    std::getline(ls, tok, ','); r.samples_seen = std::stol(tok);
    std::getline(ls, r.domain, ',');
    std::getline(ls, r.metric, ',');
    std::getline(ls, tok, ','); r.value = std::stod(tok);
    rows.push_back(std::move(r));
  }
  return true;
}

}  // namespace harness_detail

// One grid cell: pretrain on the nested subset, finetune on in-domain data,
// evaluate per domain.
template <class T>
std::vector<SweepRow> run_cell(const SweepConfig& cfg, const ToyWorld<T>& world,
                               const WordPieceTokenizer& tok,
                               const std::string& model_name, long data_size,
                               uint32_t seed) {
  RunSpec spec = cfg.base;
  spec.model_name = model_name;
  spec.dataset_size = data_size;
  spec.seed = seed;
  auto config = resolve_model(model_name, world.vocab().size());
  CaptionModel<T> model(config, seed);
  OptimizerState<T> opt;
  opt.config = spec.optim;
  auto pretrain_data = make_toy_dataset(world, data_size, spec.noise, world.config().seed);
  auto pre = pretrain(model, opt, pretrain_data, tok, spec);

  RunSpec ft = spec;
  ft.dataset_size = cfg.finetune_size;
  ft.epochs = cfg.finetune_epochs;
  ft.peak_lr = pick_finetune_lr(model_name, data_size, cfg.small_data_threshold);
  OptimizerState<T> ft_opt;
  ft_opt.config = ft.optim;
  auto finetune_data = make_toy_dataset(world, cfg.finetune_size, spec.noise,
                                        world.config().seed + 17, /*in_domain_only=*/true);
  auto fin = finetune(model, ft_opt, finetune_data, tok, ft);

  auto eval_set = make_eval_set(world, cfg.eval_per_domain, spec.noise,
                                world.config().seed + 29);
  auto scores = evaluate_model(model, world, eval_set, tok, spec.objective,
                               cfg.beam_size, cfg.max_len);
  std::vector<SweepRow> rows;
  const long samples = pre.samples_seen + fin.samples_seen;
  for (auto& [domain, s] : scores) {
    SweepRow base;
    base.model = model_name;
    base.params = static_cast<long>(model.count_params());
    base.data_size = data_size;
    base.seed = seed;
    base.samples_seen = samples;
    base.domain = domain;
    base.metric = "cider";
    base.value = s.cider;
    rows.push_back(base);
    base.metric = "bleu4";
    base.value = s.bleu;
    rows.push_back(base);
  }
  return rows;
}

template <class T>
SweepResult run_sweep(const SweepConfig& cfg) {
  ToyWorld<T> world(cfg.world);
  WordPieceTokenizer tok(world.vocab());
  SweepResult result;
  if (!cfg.out_dir.empty())
    std::filesystem::create_directories(cfg.out_dir);
  for (const auto& model : cfg.models)
    for (long data : cfg.data_sizes)
      for (uint32_t seed : cfg.seeds) {
        std::vector<SweepRow> rows;
        const std::string cell_path =
            cfg.out_dir.empty()
                ? ""
                : cfg.out_dir + "/cell_" +
                      harness_detail::cell_key(model, data, seed) + ".csv";
        if (!cell_path.empty() &&
            harness_detail::read_cell_file(cell_path, rows)) {
          result.rows.insert(result.rows.end(), rows.begin(), rows.end());
          continue;
        }
        try {
          rows = run_cell(cfg, world, tok, model, data, seed);
        } catch (const std::exception& e) {
          result.failures.push_back(harness_detail::cell_key(model, data, seed) +
                                    ": " + e.what());
          continue;
        }
        if (!cell_path.empty()) harness_detail::write_cell_file(cell_path, rows);
        result.rows.insert(result.rows.end(), rows.begin(), rows.end());
      }
  // per-model log-linear fit of overall CIDEr vs data size (seeds averaged)
  for (const auto& model : cfg.models) {
    std::vector<ScalingPoint> points;
    for (long data : cfg.data_sizes) {
      double sum = 0;
      long n = 0;
      for (auto& r : result.rows)
        if (r.model == model && r.data_size == data && r.domain == "overall" &&
            r.metric == "cider") {
          sum += r.value;
          ++n;
        }
      if (n > 0) points.push_back({static_cast<double>(data), model, sum / n});
    }
    if (points.size() >= 2) result.fits[model] = fit_loglinear(points);
  }
  return result;
}

// ---- report emission ----

inline void write_results_csv(const std::string& path,
                              const std::vector<SweepRow>& rows) {
  std::ofstream os(path);
  os << "model,params,data_size,seed,samples_seen,domain,metric,value\n";
  for (auto& r : rows)
    os << r.model << "," << r.params << "," << r.data_size << "," << r.seed
       << "," << r.samples_seen << "," << r.domain << "," << r.metric << ","
       << r.value << "\n";
}

// Minimal standalone SVG line chart, one polyline per model, x plotted in
// log scale.
inline void write_scaling_chart_svg(
    const std::string& path,
    const std::map<std::string, std::vector<std::pair<double, double>>>& series,
    const std::string& x_label, const std::string& y_label) {
  const int W = 640, H = 420, ml = 60, mr = 20, mt = 20, mb = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (auto& [name, pts] : series)
    for (auto& [x, y] : pts) {
      xmin = std::min(xmin, std::log10(x));
      xmax = std::max(xmax, std::log10(x));
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (ymax <= ymin) ymax = ymin + 1;
  if (xmax <= xmin) xmax = xmin + 1;
  auto px = [&](double x) {
    return ml + (std::log10(x) - xmin) / (xmax - xmin) * (W - ml - mr);
  };
  auto py = [&](double y) {
    return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b"};
  std::ofstream os(path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
     << H << "'>\n";
  os << "<rect width='" << W << "' height='" << H << "' fill='white'/>\n";
  os << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr
     << "' y2='" << H - mb << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='"
     << H - mb << "' stroke='black'/>\n";
  os << "<text x='" << W / 2 << "' y='" << H - 12
     << "' text-anchor='middle' font-size='13'>" << x_label
     << " (log scale)</text>\n";
  os << "<text x='16' y='" << H / 2
     << "' text-anchor='middle' font-size='13' transform='rotate(-90 16 "
     << H / 2 << ")'>" << y_label << "</text>\n";
  int ci = 0;
  int legend_y = mt + 12;
  for (auto& [name, pts] : series) {
    const char* color = colors[ci++ % 6];
    os << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
    for (auto& [x, y] : pts) os << px(x) << "," << py(y) << " ";
    os << "'/>\n";
    for (auto& [x, y] : pts)
      os << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='3' fill='"
         << color << "'/>\n";
    os << "<text x='" << W - mr - 120 << "' y='" << legend_y
       << "' font-size='12' fill='" << color << "'>" << name << "</text>\n";
    legend_y += 16;
  }
  os << "</svg>\n";
}

}  // namespace caplab
