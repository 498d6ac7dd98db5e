#pragma once

// JSON-lines and JSON-config serialization for records, evaluation pairs,
// drop logs, corpus statistics, and experiment configuration.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "caplab/corpus.hpp"
#include "caplab/harness.hpp"
#include "caplab/metrics.hpp"
#include "caplab/toyworld.hpp"

namespace caplab {

using json = nlohmann::json;

namespace io_detail {

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return is;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

template <class Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  auto is = open_in(path);
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    fn(j);
  }
}

}  // namespace io_detail

// ---- corpus records ----

inline std::vector<CorpusRecord> read_corpus_jsonl(const std::string& path) {
  std::vector<CorpusRecord> out;
  io_detail::for_each_jsonl(path, [&](const json& j) {
    CorpusRecord r;
    r.id = j.at("id").get<std::string>();
    r.width = j.at("width").get<int>();
    r.height = j.at("height").get<int>();
    r.alt = j.at("alt").get<std::string>();
    if (j.contains("hash")) r.hash = j.at("hash").get<std::string>();
    out.push_back(std::move(r));
  });
  return out;
}

inline void write_corpus_jsonl(const std::string& path,
                               const std::vector<CorpusRecord>& records) {
  auto os = io_detail::open_out(path);
  for (const auto& r : records) {
    json j{{"id", r.id}, {"width", r.width}, {"height", r.height}, {"alt", r.alt}};
    if (r.hash) j["hash"] = *r.hash;
    os << j.dump() << "\n";
  }
}

inline void write_drop_log(const std::string& path,
                           const std::vector<DropEntry>& drops) {
  auto os = io_detail::open_out(path);
  for (const auto& d : drops)
    os << json{{"id", d.id}, {"stage", d.stage}, {"reason", d.reason}}.dump()
       << "\n";
}

inline json stats_to_json(const CorpusStats& s) {
  json j;
  j["records"] = s.record_count;
  j["captions_per_image"] = s.captions_per_image;
  j["unique_unigrams"] = s.unique_unigrams;
  j["unigrams_in_tail"] = s.unigrams_in_tail;
  j["caption_length"] = {{"mean", s.length_mean},
                         {"stddev", s.length_std},
                         {"p5", s.length_p5},
                         {"p50", s.length_p50},
                         {"p95", s.length_p95}};
  j["top_words"] = json::array();
  for (auto& [tok, count] : s.top_words)
    j["top_words"].push_back({{"token", tok}, {"count", count}});
  return j;
}

// ---- evaluation pairs / generated captions ----

inline std::vector<EvalPair> read_eval_pairs_jsonl(const std::string& path) {
  std::vector<EvalPair> out;
  io_detail::for_each_jsonl(path, [&](const json& j) {
    EvalPair p;
    p.image_id = j.at("id").get<std::string>();
    p.candidate = j.at("candidate").get<std::string>();
    for (auto& r : j.at("references")) p.references.push_back(r.get<std::string>());
    out.push_back(std::move(p));
  });
  return out;
}

// ---- toy records ----

template <class T>
void write_toy_jsonl(const std::string& path,
                     const std::vector<ToyRecord<T>>& records) {
  auto os = io_detail::open_out(path);
  for (const auto& r : records) {
    json j;
    j["id"] = r.id;
    j["tags"] = r.tags;
    j["caption"] = r.caption;
    j["domain"] = domain_name(r.domain);
    j["concepts"] = r.concepts;
    j["regions"] = json::array();
    for (auto& row : r.regions) j["regions"].push_back(row);
    os << j.dump() << "\n";
  }
}

template <class T>
std::vector<ToyRecord<T>> read_toy_jsonl(const std::string& path) {
  std::vector<ToyRecord<T>> out;
  io_detail::for_each_jsonl(path, [&](const json& j) {
    ToyRecord<T> r;
    r.id = j.at("id").get<std::string>();
    r.tags = j.at("tags").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    const std::string d = j.at("domain").get<std::string>();
    r.domain = d == "in" ? Domain::In : d == "near" ? Domain::Near : Domain::Out;
    if (j.contains("concepts"))
      r.concepts = j.at("concepts").get<std::vector<int>>();
    for (auto& row : j.at("regions"))
      r.regions.push_back(row.get<std::vector<T>>());
    out.push_back(std::move(r));
  });
  return out;
}

// ---- run / sweep configuration ----

inline void run_spec_from_json(const json& j, RunSpec& spec) {
  if (j.contains("model")) spec.model_name = j["model"].get<std::string>();
  if (j.contains("objective")) spec.objective = j["objective"].get<std::string>();
  if (j.contains("dataset_size")) spec.dataset_size = j["dataset_size"].get<long>();
  if (j.contains("data_fraction")) spec.data_fraction = j["data_fraction"].get<double>();
  if (j.contains("effective_batch")) spec.effective_batch = j["effective_batch"].get<int>();
  if (j.contains("micro_batch")) spec.micro_batch = j["micro_batch"].get<int>();
  if (j.contains("epochs")) spec.epochs = j["epochs"].get<int>();
  if (j.contains("peak_lr")) spec.peak_lr = j["peak_lr"].get<double>();
  if (j.contains("warmup_fraction")) spec.warmup_fraction = j["warmup_fraction"].get<double>();
  if (j.contains("weight_decay")) spec.optim.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("grad_clip")) spec.optim.grad_clip = j["grad_clip"].get<double>();
  if (j.contains("mask_rate")) spec.corruption.rate = j["mask_rate"].get<double>();
  if (j.contains("label_smoothing")) spec.label_smoothing = j["label_smoothing"].get<double>();
  if (j.contains("noise")) spec.noise = j["noise"].get<double>();
  if (j.contains("seed")) spec.seed = j["seed"].get<uint32_t>();
  if (j.contains("checkpoint_every_samples"))
    spec.checkpoint_every_samples = j["checkpoint_every_samples"].get<long>();
  spec.validate();
}

inline SweepConfig sweep_config_from_json(const json& j) {
  SweepConfig cfg;
  if (j.contains("models")) cfg.models = j["models"].get<std::vector<std::string>>();
  if (j.contains("data_sizes")) cfg.data_sizes = j["data_sizes"].get<std::vector<long>>();
  if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<uint32_t>>();
  if (j.contains("finetune_size")) cfg.finetune_size = j["finetune_size"].get<long>();
  if (j.contains("finetune_epochs")) cfg.finetune_epochs = j["finetune_epochs"].get<int>();
  if (j.contains("small_data_threshold"))
    cfg.small_data_threshold = j["small_data_threshold"].get<long>();
  if (j.contains("eval_per_domain")) cfg.eval_per_domain = j["eval_per_domain"].get<long>();
  if (j.contains("beam_size")) cfg.beam_size = j["beam_size"].get<int>();
  if (j.contains("max_len")) cfg.max_len = j["max_len"].get<int>();
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("world_seed")) cfg.world.seed = j["world_seed"].get<uint32_t>();
  if (j.contains("run")) run_spec_from_json(j["run"], cfg.base);
  return cfg;
}

inline json load_json_file(const std::string& path) {
  auto is = io_detail::open_in(path);
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return j;
}

}  // namespace caplab
