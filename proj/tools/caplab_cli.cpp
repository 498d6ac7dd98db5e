// Command-line front end: pretrain / finetune / generate / eval on toy data,
// corpus curation, corpus statistics, the scaling sweep, and model/FLOP
// reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>

#include "caplab/decoding.hpp"
#include "caplab/harness.hpp"
#include "caplab/io.hpp"
#include "caplab/metrics.hpp"
#include "caplab/model.hpp"
#include "caplab/params.hpp"
#include "caplab/tokenizer.hpp"
#include "caplab/toyworld.hpp"

namespace {

using namespace caplab;
using Scalar = float;

json run_spec_meta(const RunSpec& spec) {
  return json{{"model", spec.model_name},
              {"objective", spec.objective},
              {"dataset_size", spec.dataset_size},
              {"seed", spec.seed}};
}

int cmd_train(const std::string& config_path, const std::string& out_path,
              const std::string& init_checkpoint, bool is_finetune) {
  json cfgj = load_json_file(config_path);
  RunSpec spec;
  run_spec_from_json(cfgj, spec);
  ToyWorldConfig wc;
  if (cfgj.contains("world_seed")) wc.seed = cfgj["world_seed"].get<uint32_t>();
  ToyWorld<Scalar> world(wc);
  WordPieceTokenizer tok(world.vocab());
  auto config = resolve_model(spec.model_name, world.vocab().size());
  CaptionModel<Scalar> model(config, spec.seed);
  OptimizerState<Scalar> opt;
  opt.config = spec.optim;
  if (!init_checkpoint.empty())
    load_checkpoint<Scalar>(init_checkpoint, model.params(), nullptr);
  auto data = make_toy_dataset(world, spec.effective_dataset_size(), spec.noise,
                               wc.seed, /*in_domain_only=*/is_finetune);
  auto on_point = [&](const CurvePoint& pt) {
    std::cout << "samples=" << pt.samples_seen << " loss=" << pt.train_loss
              << " masked_acc=" << pt.masked_acc << "\n";
  };
  auto res = is_finetune ? finetune(model, opt, data, tok, spec, on_point)
                         : pretrain(model, opt, data, tok, spec, on_point);
  if (res.aborted)
    std::cerr << "warning: training aborted on non-finite gradient after "
              << res.samples_seen << " samples\n";
  save_checkpoint(out_path, model.params(), &opt, run_spec_meta(spec).dump());
  std::cout << "checkpoint written to " << out_path << "\n";
  return res.aborted ? 1 : 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& input_path,
                 const std::string& model_name, const std::string& objective,
                 int beam, int max_len, const std::string& prompt) {
  ToyWorld<Scalar> world;
  WordPieceTokenizer tok(world.vocab());
  const auto& vocab = tok.vocab();
  auto config = resolve_model(model_name, vocab.size());
  CaptionModel<Scalar> model(config, 1);
  if (!checkpoint.empty()) load_checkpoint<Scalar>(checkpoint, model.params(), nullptr);
  auto records = read_toy_jsonl<Scalar>(input_path);
  GenerateOptions opt;
  opt.beam_size = beam;
  opt.max_len = max_len;
  for (const auto& rec : records) {
    auto batch = to_batch(rec, tok);
    batch.caption.clear();
    std::vector<Hypothesis> hyps;
    if (objective == "lm") {
      LMSession<Scalar> session(model, batch, vocab.cls_id(), opt.max_len);
      hyps = beam_search(session, vocab.sep_id(), opt);
    } else if (!prompt.empty()) {
      auto p = tok.tokenize(prompt);
      hyps = zero_shot_caption(batch, model, p.ids, vocab.mask_id(),
                               vocab.sep_id(), opt);
    } else {
      hyps = generate(batch, model, vocab.mask_id(), vocab.sep_id(), opt);
    }
    TokenSeq seq;
    double score = 0;
    if (!hyps.empty()) {
      seq.ids = hyps.front().tokens;
      score = hyps.front().score;
    }
    std::cout << json{{"id", rec.id},
                      {"caption", tok.detokenize(seq)},
                      {"score", score}}
                     .dump()
              << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& pairs_path) {
  auto pairs = read_eval_pairs_jsonl(pairs_path);
  std::cout << json{{"bleu4", bleu4(pairs)},
                    {"cider", cider_d(pairs)},
                    {"n", pairs.size()}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_corpus(const std::string& config_path) {
  json j = load_json_file(config_path);
  auto records = read_corpus_jsonl(j.at("input").get<std::string>());
  PipelineConfig cfg;
  cfg.stages = j.at("stages").get<std::vector<std::string>>();
  if (j.contains("unigram_vocab"))
    cfg.unigram_vocab = UnigramVocab::load(j["unigram_vocab"].get<std::string>());
  if (j.contains("gazetteer")) {
    auto g = GazetteerTagger::load(j["gazetteer"].get<std::string>());
    cfg.tagger = [g](const std::string& text) { return g(text); };
  }
  if (j.contains("boilerplate_threshold"))
    cfg.boilerplate.frequency_threshold = j["boilerplate_threshold"].get<long>();
  if (j.contains("test_hashes")) {
    std::ifstream is(j["test_hashes"].get<std::string>());
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) cfg.test_hashes.insert(line);
  }
  auto res = run_pipeline(std::move(records), cfg);
  write_corpus_jsonl(j.at("output").get<std::string>(), res.kept);
  if (j.contains("drop_log"))
    write_drop_log(j["drop_log"].get<std::string>(), res.drops);
  std::cout << "kept " << res.kept.size() << ", dropped " << res.drops.size()
            << "\n";
  return 0;
}

int cmd_stats(const std::string& input_path, const std::string& out_path) {
  auto records = read_corpus_jsonl(input_path);
  auto stats = compute_stats(records);
  const std::string text = stats_to_json(stats).dump(2);
  if (out_path.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream os(out_path);
    os << text << "\n";
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir) {
  SweepConfig cfg = sweep_config_from_json(load_json_file(config_path));
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (cfg.out_dir.empty()) cfg.out_dir = "sweep_out";
  auto result = run_sweep<Scalar>(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  write_results_csv(cfg.out_dir + "/results.csv", result.rows);
  json fits;
  for (auto& [model, fit] : result.fits)
    fits[model] = {{"intercept", fit.intercept}, {"slope", fit.slope}};
  std::ofstream(cfg.out_dir + "/fits.json") << fits.dump(2) << "\n";
  // one chart per domain: overall plus the three evaluation domains
  for (const std::string domain : {"overall", "in", "near", "out"}) {
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (auto& r : result.rows)
      if (r.domain == domain && r.metric == "cider")
        series[r.model].emplace_back(static_cast<double>(r.data_size), r.value);
    for (auto& [m, pts] : series) std::sort(pts.begin(), pts.end());
    write_scaling_chart_svg(cfg.out_dir + "/cider_" + domain + ".svg", series,
                            "pre-training pairs", "CIDEr-D (" + domain + ")");
  }
  for (auto& f : result.failures) std::cerr << "cell failed: " << f << "\n";
  std::cout << "wrote " << result.rows.size() << " rows to " << cfg.out_dir
            << "/results.csv\n";
  return result.failures.empty() ? 0 : 1;
}

int cmd_toygen(long n, uint32_t seed, double noise, const std::string& out_path,
               bool eval_set, long per_domain) {
  ToyWorld<Scalar> world;
  if (eval_set) {
    write_toy_jsonl(out_path, make_eval_set(world, per_domain, noise, seed));
  } else {
    write_toy_jsonl(out_path, make_toy_dataset(world, n, noise, seed));
  }
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_report(int n_regions, int text_len) {
  std::cout << "model      layers width  mlp   heads     params      flops\n";
  for (const auto& name : ModelConfig::preset_names()) {
    auto cfg = ModelConfig::preset(name);
    std::printf("%-10s %5d %5d %5d %5d %12lld %12lld\n", name.c_str(),
                cfg.layers, cfg.width, cfg.mlp_dim, cfg.heads,
                count_params(cfg), estimate_flops(cfg, n_regions, text_len));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caption-pretraining laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_path, init_checkpoint;
  auto* pre = app.add_subcommand("pretrain", "pretrain on toy data");
  pre->add_option("--config", config_path, "JSON run config")->required();
  pre->add_option("--out", out_path, "output checkpoint")->required();

  auto* fin = app.add_subcommand("finetune", "finetune a checkpoint on in-domain toy data");
  fin->add_option("--config", config_path, "JSON run config")->required();
  fin->add_option("--init", init_checkpoint, "initial checkpoint")->required();
  fin->add_option("--out", out_path, "output checkpoint")->required();

  std::string input_path, model_name = "micro", objective = "s2s-mlm", prompt;
  std::string checkpoint;
  int beam = 5, max_len = 20;
  auto* gen = app.add_subcommand("generate", "caption toy records");
  gen->add_option("--checkpoint", checkpoint, "model checkpoint");
  gen->add_option("--input", input_path, "records JSONL")->required();
  gen->add_option("--model", model_name, "model preset name");
  gen->add_option("--objective", objective, "s2s-mlm | lm");
  gen->add_option("--beam", beam, "beam size");
  gen->add_option("--max-len", max_len, "max caption length");
  gen->add_option("--prompt", prompt, "zero-shot prompt text");

  std::string pairs_path;
  auto* ev = app.add_subcommand("eval", "score candidate/reference pairs");
  ev->add_option("--pairs", pairs_path, "eval pairs JSONL")->required();

  auto* cor = app.add_subcommand("corpus", "run the curation pipeline");
  cor->add_option("--config", config_path, "JSON pipeline config")->required();

  std::string stats_out;
  auto* st = app.add_subcommand("stats", "corpus statistics report");
  st->add_option("--input", input_path, "records JSONL")->required();
  st->add_option("--out", stats_out, "output JSON (default stdout)");

  std::string sweep_out;
  auto* sw = app.add_subcommand("sweep", "model-size x data-size sweep");
  sw->add_option("--config", config_path, "JSON sweep config")->required();
  sw->add_option("--out-dir", sweep_out, "output directory");

  long toy_n = 100, toy_per_domain = 30;
  uint32_t toy_seed = 7;
  double toy_noise = 0.25;
  bool toy_eval = false;
  auto* tg = app.add_subcommand("toygen", "emit synthetic records as JSONL");
  tg->add_option("--n", toy_n, "record count");
  tg->add_option("--seed", toy_seed, "dataset seed");
  tg->add_option("--noise", toy_noise, "region noise level");
  tg->add_flag("--eval", toy_eval, "emit per-domain evaluation records");
  tg->add_option("--per-domain", toy_per_domain, "eval records per domain");
  tg->add_option("--out", out_path, "output JSONL")->required();

  int n_regions = 50, text_len = 35;
  auto* rep = app.add_subcommand("report", "preset parameter/FLOP table");
  rep->add_option("--regions", n_regions, "region count");
  rep->add_option("--text-len", text_len, "text length (tags + caption)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_train(config_path, out_path, "", false);
    if (fin->parsed()) return cmd_train(config_path, out_path, init_checkpoint, true);
    if (gen->parsed())
      return cmd_generate(checkpoint, input_path, model_name, objective, beam,
                          max_len, prompt);
    if (ev->parsed()) return cmd_eval(pairs_path);
    if (cor->parsed()) return cmd_corpus(config_path);
    if (st->parsed()) return cmd_stats(input_path, stats_out);
    if (sw->parsed()) return cmd_sweep(config_path, sweep_out);
    if (tg->parsed())
      return cmd_toygen(toy_n, toy_seed, toy_noise, out_path, toy_eval,
                        toy_per_domain);
    if (rep->parsed()) return cmd_report(n_regions, text_len);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
