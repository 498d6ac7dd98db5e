#pragma once

// Multimodal fusion transformer over region features, object-tag tokens and
// caption tokens. Caption generation uses a sequence-to-sequence attention
// mask: region/tag positions see the region+tag block only, caption position
// k additionally sees caption positions 1..k. Post-norm (BERT-style) layer
// ordering, MLM output head with weights tied to the word embedding.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "caplab/params.hpp"
#include "caplab/tensor.hpp"

namespace caplab {

enum class Architecture { UnifiedEncoder, EncoderDecoder };

struct ModelConfig {
  std::string name = "custom";
  int layers = 6;
  int width = 256;
  int mlp_dim = 1024;
  int heads = 4;
  int vocab_size = 30522;
  int max_positions = 512;
  int region_dim = 2054;  // 2048 visual dims + 6 scaled box values
  Architecture arch = Architecture::UnifiedEncoder;

  void validate() const {
    if (layers < 1 || width < 1 || mlp_dim < 1 || heads < 1 || vocab_size < 1)
      throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    if (width % heads != 0)
      throw std::invalid_argument("ModelConfig: width " +
                                  std::to_string(width) +
                                  " not divisible by heads " +
                                  std::to_string(heads));
    if (arch == Architecture::EncoderDecoder && layers % 2 != 0)
      throw std::invalid_argument(
          "ModelConfig: encoder-decoder needs an even layer count, got " +
          std::to_string(layers));
  }

  static ModelConfig preset(const std::string& name) {
    ModelConfig c;
    c.name = name;
    auto set = [&](int l, int w, int m, int h) {
      c.layers = l;
      c.width = w;
      c.mlp_dim = m;
      c.heads = h;
    };
    if (name == "tiny") set(6, 256, 1024, 4);
    else if (name == "tiny12") set(12, 256, 1024, 4);
    else if (name == "small") set(12, 384, 1536, 6);
    else if (name == "small24") set(24, 384, 1536, 6);
    else if (name == "base") set(12, 768, 3072, 12);
    else if (name == "base24") set(24, 768, 3072, 12);
    else if (name == "large") set(24, 1024, 4096, 16);
    else if (name == "huge") set(32, 1280, 5120, 16);
    else throw std::invalid_argument("ModelConfig: unknown preset '" + name + "'");
    return c;
  }

  static const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {
        "tiny", "tiny12", "small", "small24", "base", "base24", "large", "huge"};
    return names;
  }
};

template <class T>
struct MultimodalBatch {
  std::vector<std::vector<T>> regions;  // N rows of region_dim values
  std::vector<int> tags;                // M token ids
  std::vector<int> caption;             // L token ids

  int n_regions() const { return static_cast<int>(regions.size()); }
  int n_tags() const { return static_cast<int>(tags.size()); }
  int n_caption() const { return static_cast<int>(caption.size()); }
  int total() const { return n_regions() + n_tags() + n_caption(); }
};

// Boolean visibility matrix in canonical position order [regions|tags|caption].
struct AttentionMaskSpec {
  int n_regions = 0, n_tags = 0, n_caption = 0;
  std::vector<uint8_t> visible;  // side x side, row-major; 1 = may attend

  int side() const { return n_regions + n_tags + n_caption; }
  bool at(int row, int col) const { return visible[row * side() + col] != 0; }
};

inline AttentionMaskSpec build_mask(int n_regions, int n_tags, int n_caption) {
  if (n_regions < 0 || n_tags < 0 || n_caption < 0 ||
      n_regions + n_tags + n_caption == 0)
    throw std::invalid_argument("build_mask: lengths must be >= 0, not all 0");
  AttentionMaskSpec m;
  m.n_regions = n_regions;
  m.n_tags = n_tags;
  m.n_caption = n_caption;
  const int s = m.side();
  const int ctx = n_regions + n_tags;
  m.visible.assign(static_cast<size_t>(s) * s, 0);
  for (int r = 0; r < s; ++r) {
    const int limit = r < ctx ? ctx : r + 1;  // caption row k sees prefix ..k
    for (int c = 0; c < limit && c < s; ++c) m.visible[r * s + c] = 1;
  }
  return m;
}

template <class T>
struct ModelOutput {
  Tensor<T> hidden;          // all positions, canonical order
  Tensor<T> caption_logits;  // L x vocab (decoder positions for enc-dec)
};

// Per-layer key/value projections captured during a forward pass, used to
// seed the incremental decoding cache.
template <class T>
struct KVCapture {
  std::vector<std::vector<T>> k;  // per layer, rows x width
  std::vector<std::vector<T>> v;
};

template <class T>
class CaptionModel {
 public:
  CaptionModel(ModelConfig config, uint32_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    build_params();
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  size_t count_params() const { return params_.total_count(); }

  // Region rows through a learned linear map; tags/caption get word +
  // position + segment embeddings. Tags and caption index positions
  // independently from 0. Everything through a shared layer-norm.
  Tensor<T> embed(const MultimodalBatch<T>& batch) {
    check_batch(batch);
    Tensor<T> xr;
    {
      std::vector<T> flat;
      flat.reserve(static_cast<size_t>(batch.n_regions()) * cfg_.region_dim);
      for (auto& row : batch.regions)
        flat.insert(flat.end(), row.begin(), row.end());
      auto R = Tensor<T>::from_values({batch.n_regions(), cfg_.region_dim},
                                      std::move(flat));
      auto proj = add_rowvec(matmul(R, params_.at("embed.region.w")),
                             params_.at("embed.region.b"));
      xr = add(proj, embedding_rows(params_.at("embed.seg"),
                                    std::vector<int>(batch.n_regions(), 0)));
    }
    auto text_block = [&](const std::vector<int>& ids, int segment) {
      std::vector<int> pos(ids.size()), seg(ids.size(), segment);
      for (size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
      if (static_cast<int>(ids.size()) > cfg_.max_positions)
        throw std::invalid_argument("embed: sequence of " +
                                    std::to_string(ids.size()) +
                                    " exceeds max positions " +
                                    std::to_string(cfg_.max_positions));
      auto e = add(embedding_rows(params_.at("embed.word"), ids),
                   embedding_rows(params_.at("embed.pos"), pos));
      return add(e, embedding_rows(params_.at("embed.seg"), seg));
    };
    auto xt = text_block(batch.tags, 1);
    auto xc = text_block(batch.caption, 2);
    auto x = concat_rows<T>({xr, xt, xc});
    return layer_norm(x, params_.at("embed.ln.g"), params_.at("embed.ln.b"));
  }

  ModelOutput<T> forward(const MultimodalBatch<T>& batch,
                         KVCapture<T>* capture = nullptr) {
    if (cfg_.arch == Architecture::EncoderDecoder) {
      if (capture)
        throw std::invalid_argument(
            "forward: KV capture only supported for the unified encoder");
      return forward_encdec(batch);
    }
    return forward_unified(batch, capture);
  }

  ModelOutput<T> forward_unified(const MultimodalBatch<T>& batch,
                                 KVCapture<T>* capture = nullptr) {
    auto mask = build_mask(batch.n_regions(), batch.n_tags(), batch.n_caption());
    auto h = embed(batch);
    if (capture) {
      capture->k.assign(cfg_.layers, {});
      capture->v.assign(cfg_.layers, {});
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto k = linear(h, p + "attn.k");
      auto v = linear(h, p + "attn.v");
      if (capture) {
        capture->k[l] = k.values();
        capture->v[l] = v.values();
      }
      auto a = attention(linear(h, p + "attn.q"), k, v, &mask.visible, p);
      h = layer_norm(add(h, a), params_.at(p + "ln1.g"),
                     params_.at(p + "ln1.b"));
      auto f = ffn(h, p);
      h = layer_norm(add(h, f), params_.at(p + "ln2.g"),
                     params_.at(p + "ln2.b"));
    }
    ModelOutput<T> out;
    out.hidden = h;
    const int ctx = batch.n_regions() + batch.n_tags();
    out.caption_logits = mlm_head(slice_rows(h, ctx, batch.total()));
    return out;
  }

  // Ablation variant: encoder over regions+tags with full mutual visibility,
  // decoder over the caption with causal self-attention plus cross-attention
  // to the encoder output.
  ModelOutput<T> forward_encdec(const MultimodalBatch<T>& batch) {
    if (cfg_.arch != Architecture::EncoderDecoder)
      throw std::invalid_argument("forward_encdec: config is not encoder-decoder");
    const int half = cfg_.layers / 2;
    MultimodalBatch<T> ctx_batch{batch.regions, batch.tags, {}};
    MultimodalBatch<T> cap_batch{{}, {}, batch.caption};
    auto he = embed(ctx_batch);
    const int ctx = batch.n_regions() + batch.n_tags();
    std::vector<uint8_t> full(static_cast<size_t>(ctx) * ctx, 1);
    for (int l = 0; l < half; ++l) {
      const std::string p = "enc" + std::to_string(l) + ".";
      auto a = attention(linear(he, p + "attn.q"), linear(he, p + "attn.k"),
                         linear(he, p + "attn.v"), &full, p);
      he = layer_norm(add(he, a), params_.at(p + "ln1.g"),
                      params_.at(p + "ln1.b"));
      auto f = ffn(he, p);
      he = layer_norm(add(he, f), params_.at(p + "ln2.g"),
                      params_.at(p + "ln2.b"));
    }
    const int L = batch.n_caption();
    std::vector<uint8_t> causal(static_cast<size_t>(L) * L, 0);
    for (int r = 0; r < L; ++r)
      for (int c = 0; c <= r; ++c) causal[r * L + c] = 1;
    auto hd = embed(cap_batch);
    for (int l = 0; l < half; ++l) {
      const std::string p = "dec" + std::to_string(l) + ".";
      auto a = attention(linear(hd, p + "attn.q"), linear(hd, p + "attn.k"),
                         linear(hd, p + "attn.v"), &causal, p);
      hd = layer_norm(add(hd, a), params_.at(p + "ln1.g"),
                      params_.at(p + "ln1.b"));
      auto x = attention(linear(hd, p + "cross.q"), linear(he, p + "cross.k"),
                         linear(he, p + "cross.v"), nullptr, p, "cross.o");
      hd = layer_norm(add(hd, x), params_.at(p + "ln_x.g"),
                      params_.at(p + "ln_x.b"));
      auto f = ffn(hd, p);
      hd = layer_norm(add(hd, f), params_.at(p + "ln2.g"),
                      params_.at(p + "ln2.b"));
    }
    ModelOutput<T> out;
    out.hidden = concat_rows<T>({he, hd});
    out.caption_logits = mlm_head(hd);
    return out;
  }

  Tensor<T> mlm_head(const Tensor<T>& h) {
    auto t = gelu(linear(h, "head.dense"));
    t = layer_norm(t, params_.at("head.ln.g"), params_.at("head.ln.b"));
    return add_rowvec(matmul_nt(t, params_.at("embed.word")),
                      params_.at("head.bias"));
  }

  // ---- incremental decoding primitives (unified encoder only) ----

  struct DecodeCache {
    std::vector<std::vector<T>> k;  // per layer, (ctx + finalized) x width
    std::vector<std::vector<T>> v;
    std::vector<int> tokens;  // finalized caption tokens
    int n_ctx = 0;            // region + tag rows, never changes
  };

  DecodeCache make_decode_cache(const MultimodalBatch<T>& batch) {
    if (cfg_.arch != Architecture::UnifiedEncoder)
      throw std::invalid_argument("decode cache requires the unified encoder");
    NoGradGuard ng;
    MultimodalBatch<T> prefix{batch.regions, batch.tags, {}};
    KVCapture<T> cap;
    forward_unified(prefix, &cap);
    DecodeCache cache;
    cache.k = std::move(cap.k);
    cache.v = std::move(cap.v);
    cache.n_ctx = prefix.total();
    return cache;
  }

  // Hidden pass for one new caption position attending to the cache and to
  // itself. Returns the vocabulary logits at that position; when new_k/new_v
  // are non-null the per-layer key/value rows are written there so the caller
  // can finalize the position.
  std::vector<T> decode_position(const DecodeCache& cache, int token_id,
                                 int pos_index,
                                 std::vector<std::vector<T>>* new_k = nullptr,
                                 std::vector<std::vector<T>>* new_v = nullptr) {
    NoGradGuard ng;
    const int w = cfg_.width;
    auto e = add(embedding_rows(params_.at("embed.word"), {token_id}),
                 embedding_rows(params_.at("embed.pos"), {pos_index}));
    e = add(e, embedding_rows(params_.at("embed.seg"), {2}));
    auto h = layer_norm(e, params_.at("embed.ln.g"), params_.at("embed.ln.b"));
    if (new_k) new_k->assign(cfg_.layers, {});
    if (new_v) new_v->assign(cfg_.layers, {});
    const int rows = cache.n_ctx + static_cast<int>(cache.tokens.size());
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto q = linear(h, p + "attn.q");
      auto kn = linear(h, p + "attn.k");
      auto vn = linear(h, p + "attn.v");
      if (new_k) (*new_k)[l] = kn.values();
      if (new_v) (*new_v)[l] = vn.values();
      std::vector<T> kbuf(cache.k[l]);
      kbuf.insert(kbuf.end(), kn.values().begin(), kn.values().end());
      std::vector<T> vbuf(cache.v[l]);
      vbuf.insert(vbuf.end(), vn.values().begin(), vn.values().end());
      auto K = Tensor<T>::from_values({rows + 1, w}, std::move(kbuf));
      auto V = Tensor<T>::from_values({rows + 1, w}, std::move(vbuf));
      auto a = attention(q, K, V, nullptr, p);
      h = layer_norm(add(h, a), params_.at(p + "ln1.g"),
                     params_.at(p + "ln1.b"));
      auto f = ffn(h, p);
      h = layer_norm(add(h, f), params_.at(p + "ln2.g"),
                     params_.at(p + "ln2.b"));
    }
    return mlm_head(h).values();
  }

  // Recomputes the position with the chosen real token and appends its
  // key/value rows; cached states therefore always reflect real tokens.
  void finalize_token(DecodeCache& cache, int token_id) {
    std::vector<std::vector<T>> nk, nv;
    decode_position(cache, token_id, static_cast<int>(cache.tokens.size()),
                    &nk, &nv);
    for (int l = 0; l < cfg_.layers; ++l) {
      cache.k[l].insert(cache.k[l].end(), nk[l].begin(), nk[l].end());
      cache.v[l].insert(cache.v[l].end(), nv[l].begin(), nv[l].end());
    }
    cache.tokens.push_back(token_id);
  }

 private:
  Tensor<T> linear(const Tensor<T>& x, const std::string& prefix) {
    return add_rowvec(matmul(x, params_.at(prefix + ".w")),
                      params_.at(prefix + ".b"));
  }

  // Multi-head attention; q rows attend over k/v rows, with an optional
  // visibility matrix of shape (q rows x kv rows).
  Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k,
                      const Tensor<T>& v, const std::vector<uint8_t>* visible,
                      const std::string& prefix,
                      const std::string& out_name = "attn.o") {
    const int w = cfg_.width;
    const int dh = w / cfg_.heads;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> heads;
    heads.reserve(cfg_.heads);
    for (int hI = 0; hI < cfg_.heads; ++hI) {
      auto qh = slice_cols(q, hI * dh, (hI + 1) * dh);
      auto kh = slice_cols(k, hI * dh, (hI + 1) * dh);
      auto vh = slice_cols(v, hI * dh, (hI + 1) * dh);
      auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
      if (visible) scores = add_mask(scores, *visible);
      heads.push_back(matmul(softmax_rows(scores), vh));
    }
    return add_rowvec(matmul(concat_cols(heads), params_.at(prefix + out_name + ".w")),
                      params_.at(prefix + out_name + ".b"));
  }

  Tensor<T> ffn(const Tensor<T>& h, const std::string& prefix) {
    return linear(gelu(linear(h, prefix + "mlp.fc")), prefix + "mlp.proj");
  }

  void check_batch(const MultimodalBatch<T>& batch) const {
    for (auto& row : batch.regions)
      if (static_cast<int>(row.size()) != cfg_.region_dim)
        throw std::invalid_argument(
            "batch: region feature of dim " + std::to_string(row.size()) +
            " does not match config region_dim " +
            std::to_string(cfg_.region_dim));
    for (int id : batch.tags)
      if (id < 0 || id >= cfg_.vocab_size)
        throw std::out_of_range("batch: tag id " + std::to_string(id) +
                                " outside vocab");
    for (int id : batch.caption)
      if (id < 0 || id >= cfg_.vocab_size)
        throw std::out_of_range("batch: caption id " + std::to_string(id) +
                                " outside vocab");
  }

  void create_block(const std::string& p, bool cross) {
    const int w = cfg_.width;
    for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      params_.create(p + n + ".w", {w, w});
      params_.create(p + n + ".b", {w});
    }
    if (cross) {
      for (const char* n : {"cross.q", "cross.k", "cross.v", "cross.o"}) {
        params_.create(p + std::string(n) + ".w", {w, w});
        params_.create(p + std::string(n) + ".b", {w});
      }
      params_.create(p + "ln_x.g", {w});
      params_.create(p + "ln_x.b", {w});
    }
    params_.create(p + "ln1.g", {w});
    params_.create(p + "ln1.b", {w});
    params_.create(p + "mlp.fc.w", {w, cfg_.mlp_dim});
    params_.create(p + "mlp.fc.b", {cfg_.mlp_dim});
    params_.create(p + "mlp.proj.w", {cfg_.mlp_dim, w});
    params_.create(p + "mlp.proj.b", {w});
    params_.create(p + "ln2.g", {w});
    params_.create(p + "ln2.b", {w});
  }

  void build_params() {
    const int w = cfg_.width;
    params_.create("embed.word", {cfg_.vocab_size, w});
    params_.create("embed.pos", {cfg_.max_positions, w});
    params_.create("embed.seg", {3, w});
    params_.create("embed.region.w", {cfg_.region_dim, w});
    params_.create("embed.region.b", {w});
    params_.create("embed.ln.g", {w});
    params_.create("embed.ln.b", {w});
    if (cfg_.arch == Architecture::UnifiedEncoder) {
      for (int l = 0; l < cfg_.layers; ++l)
        create_block("layer" + std::to_string(l) + ".", false);
    } else {
      for (int l = 0; l < cfg_.layers / 2; ++l)
        create_block("enc" + std::to_string(l) + ".", false);
      for (int l = 0; l < cfg_.layers / 2; ++l)
        create_block("dec" + std::to_string(l) + ".", true);
    }
    params_.create("head.dense.w", {w, w});
    params_.create("head.dense.b", {w});
    params_.create("head.ln.g", {w});
    params_.create("head.ln.b", {w});
    params_.create("head.bias", {cfg_.vocab_size});
  }

  // Truncated normal (sigma 0.02) for matrices and embeddings, zeros for
  // biases, ones for layer-norm gains.
  void init_params(uint32_t seed) {
    std::mt19937 rng(seed);
    for (const auto& name : params_.names()) {
      auto& t = params_.at(name);
      const bool is_gain = name.ends_with("ln.g") || name.ends_with("ln1.g") ||
                           name.ends_with("ln2.g") || name.ends_with("ln_x.g");
      const bool is_bias = name.ends_with(".b") || name == "head.bias";
      if (is_gain)
        std::fill(t.values().begin(), t.values().end(), T(1));
      else if (is_bias)
        std::fill(t.values().begin(), t.values().end(), T(0));
      else
        init_truncated_normal(t, T(0.02), rng);
    }
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
};

// Closed-form parameter count matching CaptionModel's allocation, so size
// tables can be produced without materializing the larger models.
inline long long count_params(const ModelConfig& cfg) {
  const long long w = cfg.width, mlp = cfg.mlp_dim, V = cfg.vocab_size;
  long long n = 0;
  n += V * w + cfg.max_positions * static_cast<long long>(w) + 3 * w;  // embeddings
  n += cfg.region_dim * w + w;  // region projection
  n += 2 * w;                   // embedding layer norm
  const long long self_block = 4 * (w * w + w)   // attention projections
                               + 2 * 2 * w       // two layer norms
                               + w * mlp + mlp + mlp * w + w;  // feed-forward
  if (cfg.arch == Architecture::UnifiedEncoder) {
    n += cfg.layers * self_block;
  } else {
    const long long cross = 4 * (w * w + w) + 2 * w;  // cross-attn + its norm
    n += (cfg.layers / 2) * self_block;            // encoder
    n += (cfg.layers / 2) * (self_block + cross);  // decoder
  }
  n += w * w + w + 2 * w + V;  // output head (word matrix tied, bias per token)
  return n;
}

// Single-forward-pass multiply-accumulate count (one FLOP per MAC) across the
// region projection, all attention/FFN linear maps, the attention
// score/context products, and the output head applied at every position.
inline long long estimate_flops(const ModelConfig& cfg, int n_regions,
                                int text_len) {
  if (n_regions < 0 || text_len < 0)
    throw std::invalid_argument("estimate_flops: lengths must be >= 0");
  const long long w = cfg.width, mlp = cfg.mlp_dim, V = cfg.vocab_size;
  auto block = [&](long long q_rows, long long kv_rows) {
    long long f = 0;
    f += 3 * kv_rows * w * w + q_rows * w * w;  // q/k/v and output projections
    f += 2 * q_rows * kv_rows * w;              // scores + context
    f += 2 * q_rows * w * mlp;                  // feed-forward
    return f;
  };
  long long flops = static_cast<long long>(n_regions) * cfg.region_dim * w;
  long long head_rows;
  if (cfg.arch == Architecture::UnifiedEncoder) {
    const long long s = n_regions + text_len;
    flops += cfg.layers * block(s, s);
    head_rows = s;
  } else {
    const long long tags = std::min<long long>(text_len, 15);
    const long long cap = text_len - tags;
    const long long ctx = n_regions + tags;
    flops += (cfg.layers / 2) * block(ctx, ctx);
    // decoder layer: causal self-attention, then cross-attention (q/o over
    // caption rows, k/v over encoder rows), then feed-forward
    const long long cross =
        2 * cap * w * w + 2 * ctx * w * w + 2 * cap * ctx * w;
    flops += (cfg.layers / 2) * (block(cap, cap) + cross);
    head_rows = cap;
  }
  flops += head_rows * w * w + head_rows * w * V;  // MLM head
  return flops;
}

}  // namespace caplab
