#include "bilm/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "bilm/error.hpp"
#include "bilm/rng.hpp"

namespace bilm::model {

// ----------------------------------------------------------------------------
// Configuration and layout
// ----------------------------------------------------------------------------

ModelConfig ModelConfig::base(int vocab_size) {
  ModelConfig c;
  c.n_layers = 12;
  c.d_embed = 768;
  c.d_hidden = 768;
  c.d_ffn = 3072;
  c.n_heads = 12;
  c.d_head = 64;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::small(int vocab_size) {
  ModelConfig c;
  c.n_layers = 4;
  c.d_embed = 512;
  c.d_hidden = 512;
  c.d_ffn = 2048;
  c.n_heads = 8;
  c.d_head = 64;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::tiny(int vocab_size) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_embed = 128;
  c.d_hidden = 128;
  c.d_ffn = 512;
  c.n_heads = 2;
  c.d_head = 64;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::preset(std::string_view name, int vocab_size) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (lower == "base") return base(vocab_size);
  if (lower == "small") return small(vocab_size);
  if (lower == "tiny") return tiny(vocab_size);
  throw ValidationError("unknown model preset '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  const auto positive = [](int v, const char* what) {
    if (v <= 0) {
      throw ValidationError(std::string("model config: ") + what + " must be positive");
    }
  };
  positive(n_layers, "n_layers");
  positive(d_embed, "d_embed");
  positive(d_hidden, "d_hidden");
  positive(d_ffn, "d_ffn");
  positive(n_heads, "n_heads");
  positive(d_head, "d_head");
  positive(max_seq_len, "max_seq_len");
  positive(vocab_size, "vocab_size");
  if (n_heads * d_head != d_hidden) {
    throw ValidationError("model config: d_hidden (" + std::to_string(d_hidden) +
                          ") must equal n_heads x d_head (" + std::to_string(n_heads) + " x " +
                          std::to_string(d_head) + ")");
  }
  if (d_embed != d_hidden) {
    throw ValidationError("model config: d_embed must equal d_hidden");
  }
  if (!(dropout >= 0.0 && dropout < 1.0) ||
      !(attention_dropout >= 0.0 && attention_dropout < 1.0)) {
    throw ValidationError("model config: dropout rates must be in [0, 1)");
  }
  if (position_embedding != "absolute") {
    throw ValidationError("model config: only absolute position embeddings are supported");
  }
  if (activation != "gelu") {
    throw ValidationError("model config: only gelu activation is supported");
  }
  if (!(init_std > 0.0) || !(layer_norm_eps > 0.0)) {
    throw ValidationError("model config: init_std and layer_norm_eps must be positive");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},
          {"d_embed", d_embed},
          {"d_hidden", d_hidden},
          {"d_ffn", d_ffn},
          {"n_heads", n_heads},
          {"d_head", d_head},
          {"max_seq_len", max_seq_len},
          {"vocab_size", vocab_size},
          {"dropout", dropout},
          {"attention_dropout", attention_dropout},
          {"position_embedding", position_embedding},
          {"activation", activation},
          {"tie_embeddings", tie_embeddings},
          {"init_std", init_std},
          {"layer_norm_eps", layer_norm_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_embed = j.at("d_embed").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = j.value("dropout", c.dropout);
  c.attention_dropout = j.value("attention_dropout", c.attention_dropout);
  c.position_embedding = j.value("position_embedding", c.position_embedding);
  c.activation = j.value("activation", c.activation);
  c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  c.init_std = j.value("init_std", c.init_std);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  return c;
}

void ParameterLayout::add(std::string name, std::vector<int64_t> shape) {
  size_t size = 1;
  for (const int64_t d : shape) {
    size *= static_cast<size_t>(d);
  }
  index_.emplace(name, tensors_.size());
  tensors_.push_back(TensorSpec{std::move(name), std::move(shape), total_, size});
  total_ += size;
}

ParameterLayout::ParameterLayout(const ModelConfig& config) {
  config.validate();
  const int64_t C = config.d_hidden;
  const int64_t F = config.d_ffn;
  add("wte", {config.vocab_size, C});
  add("wpe", {config.max_seq_len, C});
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.g", {C});
    add(p + "ln1.b", {C});
    add(p + "attn.qkv.w", {C, 3 * C});
    add(p + "attn.qkv.b", {3 * C});
    add(p + "attn.proj.w", {C, C});
    add(p + "attn.proj.b", {C});
    add(p + "ln2.g", {C});
    add(p + "ln2.b", {C});
    add(p + "mlp.fc.w", {C, F});
    add(p + "mlp.fc.b", {F});
    add(p + "mlp.proj.w", {F, C});
    add(p + "mlp.proj.b", {C});
  }
  add("lnf.g", {C});
  add("lnf.b", {C});
  if (!config.tie_embeddings) {
    add("lm_head.w", {config.vocab_size, C});
  }
}

const TensorSpec& ParameterLayout::find(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw ValidationError("no parameter tensor named '" + std::string(name) + "'");
  }
  return tensors_[it->second];
}

int64_t parameter_count(const ModelConfig& config) {
  return static_cast<int64_t>(ParameterLayout(config).total_size());
}

std::span<const double> ModelState::tensor(std::string_view name) const {
  const TensorSpec& t = layout.find(name);
  return {params.data() + t.offset, t.size};
}

std::span<double> ModelState::tensor(std::string_view name) {
  const TensorSpec& t = layout.find(name);
  return {params.data() + t.offset, t.size};
}

ModelState init(const ModelConfig& config, uint64_t seed) {
  ModelState state;
  state.config = config;
  state.layout = ParameterLayout(config);
  state.params.assign(state.layout.total_size(), 0.0);
  state.seed = seed;

  const auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  const double residual_std = config.init_std / std::sqrt(2.0 * config.n_layers);
  Rng rng(seed);
  for (const TensorSpec& t : state.layout.tensors()) {
    double* p = state.params.data() + t.offset;
    if (ends_with(t.name, ".g")) {
      std::fill(p, p + t.size, 1.0);
    } else if (ends_with(t.name, ".b")) {
      // zero
    } else {
      const bool residual = ends_with(t.name, "attn.proj.w") || ends_with(t.name, "mlp.proj.w");
      const double std = residual ? residual_std : config.init_std;
      for (size_t i = 0; i < t.size; ++i) {
        p[i] = rng.normal() * std;
      }
    }
  }
  return state;
}

// ----------------------------------------------------------------------------
// Kernels. All matrices are row-major; the inner loops are contiguous axpy
// updates so the compiler can vectorise them without reassociating sums.
// ----------------------------------------------------------------------------
namespace {

// out[N, O] = in[N, I] @ w[I, O] (+ bias)
void matmul_forward(double* out, const double* in, const double* w, const double* bias, size_t N,
                    size_t I, size_t O) {
  for (size_t n = 0; n < N; ++n) {
    double* o_row = out + n * O;
    if (bias != nullptr) {
      std::copy(bias, bias + O, o_row);
    } else {
      std::fill(o_row, o_row + O, 0.0);
    }
    const double* i_row = in + n * I;
    for (size_t i = 0; i < I; ++i) {
      const double a = i_row[i];
      const double* w_row = w + i * O;
      for (size_t o = 0; o < O; ++o) {
        o_row[o] += a * w_row[o];
      }
    }
  }
}

std::vector<double> transpose(const double* m, size_t rows, size_t cols) {
  std::vector<double> t(rows * cols);
  for (size_t r = 0; r < rows; ++r) {
    for (size_t c = 0; c < cols; ++c) {
      t[c * rows + r] = m[r * cols + c];
    }
  }
  return t;
}

// Accumulates gradients of matmul_forward. Any of din / dw / dbias may be null.
void matmul_backward(const double* dout, const double* in, const double* w, size_t N, size_t I,
                     size_t O, double* din, double* dw, double* dbias) {
  if (dbias != nullptr) {
    for (size_t n = 0; n < N; ++n) {
      const double* g = dout + n * O;
      for (size_t o = 0; o < O; ++o) {
        dbias[o] += g[o];
      }
    }
  }
  if (dw != nullptr) {
    for (size_t n = 0; n < N; ++n) {
      const double* g = dout + n * O;
      const double* i_row = in + n * I;
      for (size_t i = 0; i < I; ++i) {
        const double a = i_row[i];
        double* dw_row = dw + i * O;
        for (size_t o = 0; o < O; ++o) {
          dw_row[o] += a * g[o];
        }
      }
    }
  }
  if (din != nullptr) {
    const std::vector<double> wt = transpose(w, I, O);
    for (size_t n = 0; n < N; ++n) {
      const double* g = dout + n * O;
      double* d_row = din + n * I;
      for (size_t o = 0; o < O; ++o) {
        const double a = g[o];
        const double* wt_row = wt.data() + o * I;
        for (size_t i = 0; i < I; ++i) {
          d_row[i] += a * wt_row[i];
        }
      }
    }
  }
}

void layernorm_forward(double* out, double* mean, double* rstd, const double* in,
                       const double* gain, const double* bias, size_t N, size_t C, double eps) {
  for (size_t n = 0; n < N; ++n) {
    const double* x = in + n * C;
    double m = 0.0;
    for (size_t c = 0; c < C; ++c) {
      m += x[c];
    }
    m /= static_cast<double>(C);
    double v = 0.0;
    for (size_t c = 0; c < C; ++c) {
      const double d = x[c] - m;
      v += d * d;
    }
    v /= static_cast<double>(C);
    const double r = 1.0 / std::sqrt(v + eps);
    double* o = out + n * C;
    for (size_t c = 0; c < C; ++c) {
      o[c] = (x[c] - m) * r * gain[c] + bias[c];
    }
    mean[n] = m;
    rstd[n] = r;
  }
}

void layernorm_backward(double* din, double* dgain, double* dbias, const double* dout,
                        const double* in, const double* gain, const double* mean,
                        const double* rstd, size_t N, size_t C) {
  for (size_t n = 0; n < N; ++n) {
    const double* g = dout + n * C;
    const double* x = in + n * C;
    const double m = mean[n];
    const double r = rstd[n];
    double dnorm_mean = 0.0;
    double dnorm_norm_mean = 0.0;
    for (size_t c = 0; c < C; ++c) {
      const double norm = (x[c] - m) * r;
      const double dnorm = gain[c] * g[c];
      dnorm_mean += dnorm;
      dnorm_norm_mean += dnorm * norm;
    }
    dnorm_mean /= static_cast<double>(C);
    dnorm_norm_mean /= static_cast<double>(C);
    double* d = din + n * C;
    for (size_t c = 0; c < C; ++c) {
      const double norm = (x[c] - m) * r;
      const double dnorm = gain[c] * g[c];
      dbias[c] += g[c];
      dgain[c] += norm * g[c];
      d[c] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * r;
    }
  }
}

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

// tanh approximation of GELU, as used by GPT-2.
void gelu_forward(double* out, const double* in, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    const double x = in[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
  }
}

void gelu_backward(double* din, const double* in, const double* dout, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    const double x = in[i];
    const double th = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
    const double dudx = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
    din[i] += dout[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dudx);
  }
}

// Inverted dropout. keep[i] == 0 drops element i; survivors scale by 1 / (1 - p).
struct DropoutMask {
  std::vector<uint8_t> keep;
  double scale = 1.0;

  bool active() const { return !keep.empty(); }
};

DropoutMask make_mask(size_t n, double p, uint64_t seed) {
  DropoutMask mask;
  if (p <= 0.0) {
    return mask;
  }
  mask.keep.resize(n);
  mask.scale = 1.0 / (1.0 - p);
  Rng rng(seed);
  for (size_t i = 0; i < n; ++i) {
    mask.keep[i] = rng.uniform() >= p ? 1 : 0;
  }
  return mask;
}

void apply_mask(double* x, const DropoutMask& mask) {
  if (!mask.active()) {
    return;
  }
  for (size_t i = 0; i < mask.keep.size(); ++i) {
    x[i] = mask.keep[i] != 0 ? x[i] * mask.scale : 0.0;
  }
}

struct Dims {
  size_t B = 0, T = 0, C = 0, F = 0, H = 0, D = 0, V = 0, L = 0;
  size_t N() const { return B * T; }
};

struct LayerCache {
  std::vector<double> resid_in;  // block input
  std::vector<double> ln1_out, ln1_mean, ln1_rstd;
  std::vector<double> qkv;
  std::vector<double> att;  // [B, H, T, T] softmax probabilities (pre-dropout)
  DropoutMask att_mask;
  std::vector<double> atty;  // attention result before output projection
  DropoutMask attn_out_mask;
  std::vector<double> resid_mid;
  std::vector<double> ln2_out, ln2_mean, ln2_rstd;
  std::vector<double> fc_pre, fc_act;
  DropoutMask mlp_out_mask;
};

struct Activations {
  Dims dims;
  std::vector<int> tokens;
  DropoutMask emb_mask;
  std::vector<LayerCache> layers;
  std::vector<double> resid_final;
  std::vector<double> lnf_out, lnf_mean, lnf_rstd;
  std::vector<double> logits;
};

struct Weights {
  const double* wte;
  const double* wpe;
  const double* unembed;  // [V, C]
  const double* lnf_g;
  const double* lnf_b;
  struct Layer {
    const double *ln1_g, *ln1_b, *qkv_w, *qkv_b, *proj_w, *proj_b;
    const double *ln2_g, *ln2_b, *fc_w, *fc_b, *mlp_w, *mlp_b;
  };
  std::vector<Layer> layers;
};

template <class Ptr, class Buffer>
Weights bind(const ModelState& state, Buffer& buffer) {
  const auto at = [&](const std::string& name) -> Ptr {
    return buffer.data() + state.layout.find(name).offset;
  };
  Weights w{};
  w.wte = at("wte");
  w.wpe = at("wpe");
  w.unembed = state.config.tie_embeddings ? w.wte : at("lm_head.w");
  w.lnf_g = at("lnf.g");
  w.lnf_b = at("lnf.b");
  for (int l = 0; l < state.config.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    w.layers.push_back({at(p + "ln1.g"), at(p + "ln1.b"), at(p + "attn.qkv.w"),
                        at(p + "attn.qkv.b"), at(p + "attn.proj.w"), at(p + "attn.proj.b"),
                        at(p + "ln2.g"), at(p + "ln2.b"), at(p + "mlp.fc.w"), at(p + "mlp.fc.b"),
                        at(p + "mlp.proj.w"), at(p + "mlp.proj.b")});
  }
  return w;
}

Weights bind_params(const ModelState& state) {
  return bind<const double*>(state, state.params);
}

// Same offsets as the parameters, but pointing into a gradient buffer.
struct GradPtrs {
  double *wte, *wpe, *unembed, *lnf_g, *lnf_b;
  struct Layer {
    double *ln1_g, *ln1_b, *qkv_w, *qkv_b, *proj_w, *proj_b;
    double *ln2_g, *ln2_b, *fc_w, *fc_b, *mlp_w, *mlp_b;
  };
  std::vector<Layer> layers;
};

GradPtrs bind_grads(const ModelState& state, std::vector<double>& grads) {
  const auto at = [&](const std::string& name) {
    return grads.data() + state.layout.find(name).offset;
  };
  GradPtrs g{};
  g.wte = at("wte");
  g.wpe = at("wpe");
  g.unembed = state.config.tie_embeddings ? g.wte : at("lm_head.w");
  g.lnf_g = at("lnf.g");
  g.lnf_b = at("lnf.b");
  for (int l = 0; l < state.config.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    g.layers.push_back({at(p + "ln1.g"), at(p + "ln1.b"), at(p + "attn.qkv.w"),
                        at(p + "attn.qkv.b"), at(p + "attn.proj.w"), at(p + "attn.proj.b"),
                        at(p + "ln2.g"), at(p + "ln2.b"), at(p + "mlp.fc.w"), at(p + "mlp.fc.b"),
                        at(p + "mlp.proj.w"), at(p + "mlp.proj.b")});
  }
  return g;
}

Dims dims_for(const ModelConfig& c, size_t B, size_t T) {
  Dims d;
  d.B = B;
  d.T = T;
  d.C = static_cast<size_t>(c.d_hidden);
  d.F = static_cast<size_t>(c.d_ffn);
  d.H = static_cast<size_t>(c.n_heads);
  d.D = static_cast<size_t>(c.d_head);
  d.V = static_cast<size_t>(c.vocab_size);
  d.L = static_cast<size_t>(c.n_layers);
  return d;
}

void check_tokens(const ModelConfig& c, std::span<const int> tokens, size_t T) {
  if (T == 0) {
    throw ValidationError("forward: empty input");
  }
  if (T > static_cast<size_t>(c.max_seq_len)) {
    throw ValidationError("forward: input length " + std::to_string(T) + " exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
  }
  for (const int t : tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw ValidationError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(c.vocab_size));
    }
  }
}

// Final LayerNorm + tied/untied unembedding for N rows.
void unembed(const ModelState& state, const Weights& w, const double* resid, size_t N,
             std::vector<double>& lnf_out, std::vector<double>& lnf_mean,
             std::vector<double>& lnf_rstd, std::vector<double>& logits) {
  const size_t C = static_cast<size_t>(state.config.d_hidden);
  const size_t V = static_cast<size_t>(state.config.vocab_size);
  lnf_out.resize(N * C);
  lnf_mean.resize(N);
  lnf_rstd.resize(N);
  layernorm_forward(lnf_out.data(), lnf_mean.data(), lnf_rstd.data(), resid, w.lnf_g, w.lnf_b, N,
                    C, state.config.layer_norm_eps);
  const std::vector<double> unembed_t = transpose(w.unembed, V, C);  // [C, V]
  logits.resize(N * V);
  matmul_forward(logits.data(), lnf_out.data(), unembed_t.data(), nullptr, N, C, V);
}

// Batched forward over B rows of T tokens. Dropout sites draw from
// independent streams derived from dropout_seed.
void run_forward(const ModelState& state, const Weights& w, std::span<const int> tokens, size_t B,
                 size_t T, bool train_mode, uint64_t dropout_seed, Activations& acts) {
  const ModelConfig& cfg = state.config;
  const Dims d = dims_for(cfg, B, T);
  const size_t N = d.N();
  const bool drop = train_mode && cfg.dropout > 0.0;
  const bool att_drop = train_mode && cfg.attention_dropout > 0.0;
  acts.dims = d;
  acts.tokens.assign(tokens.begin(), tokens.end());

  std::vector<double> x(N * d.C);
  for (size_t b = 0; b < B; ++b) {
    for (size_t t = 0; t < T; ++t) {
      const size_t n = b * T + t;
      const double* te = w.wte + static_cast<size_t>(tokens[n]) * d.C;
      const double* pe = w.wpe + t * d.C;
      for (size_t c = 0; c < d.C; ++c) {
        x[n * d.C + c] = te[c] + pe[c];
      }
    }
  }
  acts.emb_mask = drop ? make_mask(N * d.C, cfg.dropout, mix_seed(dropout_seed, 0)) : DropoutMask{};
  apply_mask(x.data(), acts.emb_mask);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d.D));
  acts.layers.resize(d.L);
  for (size_t l = 0; l < d.L; ++l) {
    const auto& lw = w.layers[l];
    LayerCache& lc = acts.layers[l];
    lc.resid_in = x;

    lc.ln1_out.resize(N * d.C);
    lc.ln1_mean.resize(N);
    lc.ln1_rstd.resize(N);
    layernorm_forward(lc.ln1_out.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(), x.data(),
                      lw.ln1_g, lw.ln1_b, N, d.C, cfg.layer_norm_eps);

    lc.qkv.resize(N * 3 * d.C);
    matmul_forward(lc.qkv.data(), lc.ln1_out.data(), lw.qkv_w, lw.qkv_b, N, d.C, 3 * d.C);

    lc.att.assign(B * d.H * T * T, 0.0);
    for (size_t b = 0; b < B; ++b) {
      for (size_t h = 0; h < d.H; ++h) {
        for (size_t t = 0; t < T; ++t) {
          const double* q = lc.qkv.data() + (b * T + t) * 3 * d.C + h * d.D;
          double* row = lc.att.data() + ((b * d.H + h) * T + t) * T;
          double max_score = -INFINITY;
          for (size_t s = 0; s <= t; ++s) {
            const double* k = lc.qkv.data() + (b * T + s) * 3 * d.C + d.C + h * d.D;
            double dot = 0.0;
            for (size_t i = 0; i < d.D; ++i) {
              dot += q[i] * k[i];
            }
            row[s] = dot * scale;
            max_score = std::max(max_score, row[s]);
          }
          double sum = 0.0;
          for (size_t s = 0; s <= t; ++s) {
            row[s] = std::exp(row[s] - max_score);
            sum += row[s];
          }
          for (size_t s = 0; s <= t; ++s) {
            row[s] /= sum;
          }
        }
      }
    }
    std::vector<double> att_used = lc.att;
    lc.att_mask = att_drop ? make_mask(att_used.size(), cfg.attention_dropout,
                                       mix_seed(dropout_seed, 1 + 3 * l))
                           : DropoutMask{};
    apply_mask(att_used.data(), lc.att_mask);

    lc.atty.assign(N * d.C, 0.0);
    for (size_t b = 0; b < B; ++b) {
      for (size_t h = 0; h < d.H; ++h) {
        for (size_t t = 0; t < T; ++t) {
          const double* row = att_used.data() + ((b * d.H + h) * T + t) * T;
          double* y = lc.atty.data() + (b * T + t) * d.C + h * d.D;
          for (size_t s = 0; s <= t; ++s) {
            const double a = row[s];
            const double* v = lc.qkv.data() + (b * T + s) * 3 * d.C + 2 * d.C + h * d.D;
            for (size_t i = 0; i < d.D; ++i) {
              y[i] += a * v[i];
            }
          }
        }
      }
    }

    std::vector<double> attn_out(N * d.C);
    matmul_forward(attn_out.data(), lc.atty.data(), lw.proj_w, lw.proj_b, N, d.C, d.C);
    lc.attn_out_mask =
        drop ? make_mask(N * d.C, cfg.dropout, mix_seed(dropout_seed, 2 + 3 * l)) : DropoutMask{};
    apply_mask(attn_out.data(), lc.attn_out_mask);
    for (size_t i = 0; i < N * d.C; ++i) {
      x[i] += attn_out[i];
    }
    lc.resid_mid = x;

    lc.ln2_out.resize(N * d.C);
    lc.ln2_mean.resize(N);
    lc.ln2_rstd.resize(N);
    layernorm_forward(lc.ln2_out.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(), x.data(),
                      lw.ln2_g, lw.ln2_b, N, d.C, cfg.layer_norm_eps);
    lc.fc_pre.resize(N * d.F);
    matmul_forward(lc.fc_pre.data(), lc.ln2_out.data(), lw.fc_w, lw.fc_b, N, d.C, d.F);
    lc.fc_act.resize(N * d.F);
    gelu_forward(lc.fc_act.data(), lc.fc_pre.data(), N * d.F);

    std::vector<double> mlp_out(N * d.C);
    matmul_forward(mlp_out.data(), lc.fc_act.data(), lw.mlp_w, lw.mlp_b, N, d.F, d.C);
    lc.mlp_out_mask =
        drop ? make_mask(N * d.C, cfg.dropout, mix_seed(dropout_seed, 3 + 3 * l)) : DropoutMask{};
    apply_mask(mlp_out.data(), lc.mlp_out_mask);
    for (size_t i = 0; i < N * d.C; ++i) {
      x[i] += mlp_out[i];
    }
  }
  acts.resid_final = std::move(x);
  unembed(state, w, acts.resid_final.data(), N, acts.lnf_out, acts.lnf_mean, acts.lnf_rstd,
          acts.logits);
}

// Writes d(mean CE)/d(logits) into dlogits and returns the summed loss.
double cross_entropy(const std::vector<double>& logits, std::span<const int> targets, size_t V,
                     int64_t n_targets, std::vector<double>* dlogits) {
  double total = 0.0;
  if (dlogits != nullptr) {
    dlogits->assign(logits.size(), 0.0);
  }
  for (size_t n = 0; n < targets.size(); ++n) {
    if (targets[n] < 0) {
      continue;
    }
    const double* row = logits.data() + n * V;
    const double max_logit = *std::max_element(row, row + V);
    double sum = 0.0;
    for (size_t v = 0; v < V; ++v) {
      sum += std::exp(row[v] - max_logit);
    }
    const double lse = max_logit + std::log(sum);
    total += lse - row[static_cast<size_t>(targets[n])];
    if (dlogits != nullptr) {
      double* g = dlogits->data() + n * V;
      const double inv = 1.0 / static_cast<double>(n_targets);
      for (size_t v = 0; v < V; ++v) {
        g[v] = std::exp(row[v] - lse) * inv;
      }
      g[static_cast<size_t>(targets[n])] -= inv;
    }
  }
  return total;
}

void backward_mask(double* g, const DropoutMask& mask) { apply_mask(g, mask); }

void run_backward(const ModelState& state, const Weights& w, const Activations& acts,
                  const std::vector<double>& dlogits, std::vector<double>& grads) {
  const Dims d = acts.dims;
  const size_t N = d.N();
  const size_t B = d.B;
  const size_t T = d.T;
  GradPtrs g = bind_grads(state, grads);

  // Unembedding: logits = lnf_out @ U^T.
  std::vector<double> dlnf(N * d.C, 0.0);
  {
    const std::vector<double> unembed_t = transpose(w.unembed, d.V, d.C);
    std::vector<double> dunembed_t(d.C * d.V, 0.0);
    matmul_backward(dlogits.data(), acts.lnf_out.data(), unembed_t.data(), N, d.C, d.V,
                    dlnf.data(), dunembed_t.data(), nullptr);
    for (size_t c = 0; c < d.C; ++c) {
      for (size_t v = 0; v < d.V; ++v) {
        g.unembed[v * d.C + c] += dunembed_t[c * d.V + v];
      }
    }
  }
  std::vector<double> dx(N * d.C, 0.0);
  layernorm_backward(dx.data(), g.lnf_g, g.lnf_b, dlnf.data(), acts.resid_final.data(), w.lnf_g,
                     acts.lnf_mean.data(), acts.lnf_rstd.data(), N, d.C);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d.D));
  for (size_t li = d.L; li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& lg = g.layers[li];
    const LayerCache& lc = acts.layers[li];

    // x_out = resid_mid + dropout(mlp(ln2(resid_mid)))
    std::vector<double> dmlp = dx;
    backward_mask(dmlp.data(), lc.mlp_out_mask);
    std::vector<double> dfc_act(N * d.F, 0.0);
    matmul_backward(dmlp.data(), lc.fc_act.data(), lw.mlp_w, N, d.F, d.C, dfc_act.data(), lg.mlp_w,
                    lg.mlp_b);
    std::vector<double> dfc_pre(N * d.F, 0.0);
    gelu_backward(dfc_pre.data(), lc.fc_pre.data(), dfc_act.data(), N * d.F);
    std::vector<double> dln2(N * d.C, 0.0);
    matmul_backward(dfc_pre.data(), lc.ln2_out.data(), lw.fc_w, N, d.C, d.F, dln2.data(), lg.fc_w,
                    lg.fc_b);
    layernorm_backward(dx.data(), lg.ln2_g, lg.ln2_b, dln2.data(), lc.resid_mid.data(), lw.ln2_g,
                       lc.ln2_mean.data(), lc.ln2_rstd.data(), N, d.C);

    // resid_mid = resid_in + dropout(proj(attention(ln1(resid_in))))
    std::vector<double> dattn = dx;
    backward_mask(dattn.data(), lc.attn_out_mask);
    std::vector<double> datty(N * d.C, 0.0);
    matmul_backward(dattn.data(), lc.atty.data(), lw.proj_w, N, d.C, d.C, datty.data(), lg.proj_w,
                    lg.proj_b);

    std::vector<double> dqkv(N * 3 * d.C, 0.0);
    std::vector<double> att_used = lc.att;
    apply_mask(att_used.data(), lc.att_mask);
    std::vector<double> drow(T);
    for (size_t b = 0; b < B; ++b) {
      for (size_t h = 0; h < d.H; ++h) {
        for (size_t t = 0; t < T; ++t) {
          const size_t row_off = ((b * d.H + h) * T + t) * T;
          const double* probs = lc.att.data() + row_off;
          const double* used = att_used.data() + row_off;
          const double* dy = datty.data() + (b * T + t) * d.C + h * d.D;
          // y_t = sum_s used[s] v_s
          for (size_t s = 0; s <= t; ++s) {
            const double* v = lc.qkv.data() + (b * T + s) * 3 * d.C + 2 * d.C + h * d.D;
            double* dv = dqkv.data() + (b * T + s) * 3 * d.C + 2 * d.C + h * d.D;
            double dot = 0.0;
            for (size_t i = 0; i < d.D; ++i) {
              dot += dy[i] * v[i];
              dv[i] += used[s] * dy[i];
            }
            drow[s] = dot;
          }
          if (lc.att_mask.active()) {
            for (size_t s = 0; s <= t; ++s) {
              drow[s] = lc.att_mask.keep[row_off + s] != 0 ? drow[s] * lc.att_mask.scale : 0.0;
            }
          }
          // softmax backward
          double weighted = 0.0;
          for (size_t s = 0; s <= t; ++s) {
            weighted += probs[s] * drow[s];
          }
          const double* q = lc.qkv.data() + (b * T + t) * 3 * d.C + h * d.D;
          double* dq = dqkv.data() + (b * T + t) * 3 * d.C + h * d.D;
          for (size_t s = 0; s <= t; ++s) {
            const double dscore = probs[s] * (drow[s] - weighted) * scale;
            const double* k = lc.qkv.data() + (b * T + s) * 3 * d.C + d.C + h * d.D;
            double* dk = dqkv.data() + (b * T + s) * 3 * d.C + d.C + h * d.D;
            for (size_t i = 0; i < d.D; ++i) {
              dq[i] += dscore * k[i];
              dk[i] += dscore * q[i];
            }
          }
        }
      }
    }
    std::vector<double> dln1(N * d.C, 0.0);
    matmul_backward(dqkv.data(), lc.ln1_out.data(), lw.qkv_w, N, d.C, 3 * d.C, dln1.data(),
                    lg.qkv_w, lg.qkv_b);
    layernorm_backward(dx.data(), lg.ln1_g, lg.ln1_b, dln1.data(), lc.resid_in.data(), lw.ln1_g,
                       lc.ln1_mean.data(), lc.ln1_rstd.data(), N, d.C);
  }

  backward_mask(dx.data(), acts.emb_mask);
  for (size_t b = 0; b < B; ++b) {
    for (size_t t = 0; t < T; ++t) {
      const size_t n = b * T + t;
      double* dte = g.wte + static_cast<size_t>(acts.tokens[n]) * d.C;
      double* dpe = g.wpe + t * d.C;
      const double* src = dx.data() + n * d.C;
      for (size_t c = 0; c < d.C; ++c) {
        dte[c] += src[c];
        dpe[c] += src[c];
      }
    }
  }
}

// Flattens equal-length rows and builds next-token targets (-1 = no target).
size_t flatten_rows(const ModelConfig& cfg, Rows rows, std::vector<int>& tokens,
                    std::vector<int>& targets) {
  if (rows.empty()) {
    throw ValidationError("loss: empty batch");
  }
  const size_t T = rows.front().size();
  if (T < 2) {
    throw ValidationError("loss: rows need at least two tokens");
  }
  tokens.clear();
  targets.clear();
  for (const auto& row : rows) {
    if (row.size() != T) {
      throw ValidationError("loss: batch rows must have equal length");
    }
    tokens.insert(tokens.end(), row.begin(), row.end());
    for (size_t t = 0; t < T; ++t) {
      targets.push_back(t + 1 < T ? row[t + 1] : -1);
    }
  }
  check_tokens(cfg, tokens, T);
  return T;
}

}  // namespace

ForwardTrace forward(const ModelState& state, std::span<const int> tokens, bool trace,
                     bool train_mode, uint64_t dropout_seed) {
  check_tokens(state.config, tokens, tokens.size());
  const Weights w = bind_params(state);
  Activations acts;
  run_forward(state, w, tokens, 1, tokens.size(), train_mode, dropout_seed, acts);

  ForwardTrace out;
  out.positions = static_cast<int>(tokens.size());
  out.vocab_size = state.config.vocab_size;
  out.logits = std::move(acts.logits);
  if (trace) {
    out.hidden_states.reserve(acts.layers.size() + 1);
    for (auto& lc : acts.layers) {
      out.hidden_states.push_back(std::move(lc.resid_in));
    }
    out.hidden_states.push_back(std::move(acts.resid_final));
    for (auto& lc : acts.layers) {
      out.attention_activations.push_back(std::move(lc.atty));
      out.ffn_activations.push_back(std::move(lc.fc_act));
    }
  }
  return out;
}

std::vector<double> decode_hidden(const ModelState& state, std::span<const double> hidden,
                                  int positions) {
  const size_t C = static_cast<size_t>(state.config.d_hidden);
  if (positions <= 0 || hidden.size() != static_cast<size_t>(positions) * C) {
    throw ValidationError("decode_hidden: expected positions x d_hidden values");
  }
  const Weights w = bind_params(state);
  std::vector<double> lnf_out, mean, rstd, logits;
  unembed(state, w, hidden.data(), static_cast<size_t>(positions), lnf_out, mean, rstd, logits);
  return logits;
}

LossAndGrads loss_and_grads(const ModelState& state, Rows rows, bool train_mode,
                            uint64_t dropout_seed) {
  std::vector<int> tokens;
  std::vector<int> targets;
  const size_t T = flatten_rows(state.config, rows, tokens, targets);
  const Weights w = bind_params(state);
  Activations acts;
  run_forward(state, w, tokens, rows.size(), T, train_mode, dropout_seed, acts);

  LossAndGrads out;
  out.n_targets = static_cast<int64_t>(rows.size() * (T - 1));
  std::vector<double> dlogits;
  const double total = cross_entropy(acts.logits, targets, acts.dims.V, out.n_targets, &dlogits);
  out.loss = total / static_cast<double>(out.n_targets);
  if (!std::isfinite(out.loss)) {
    throw Error("non-finite loss " + std::to_string(out.loss));
  }
  out.grads.assign(state.params.size(), 0.0);
  run_backward(state, w, acts, dlogits, out.grads);
  return out;
}

double batch_loss(const ModelState& state, Rows rows) {
  std::vector<int> tokens;
  std::vector<int> targets;
  const size_t T = flatten_rows(state.config, rows, tokens, targets);
  const Weights w = bind_params(state);
  Activations acts;
  run_forward(state, w, tokens, rows.size(), T, false, 0, acts);
  const auto n_targets = static_cast<int64_t>(rows.size() * (T - 1));
  return cross_entropy(acts.logits, targets, acts.dims.V, n_targets, nullptr) /
         static_cast<double>(n_targets);
}

LogProb sequence_logprob(const ModelState& state, std::span<const int> tokens, int start,
                         int end) {
  if (start <= 0 || start > end || end > static_cast<int>(tokens.size())) {
    throw ValidationError("sequence_logprob: invalid range [" + std::to_string(start) + ", " +
                          std::to_string(end) + ") for " + std::to_string(tokens.size()) +
                          " tokens");
  }
  LogProb out;
  if (start == end) {
    return out;
  }
  // Logits at the last scored position are never needed.
  const ForwardTrace tr = forward(state, tokens.first(static_cast<size_t>(end - 1)));
  const size_t V = static_cast<size_t>(tr.vocab_size);
  for (int p = start; p < end; ++p) {
    const std::span<const double> row = tr.logits_at(p - 1);
    const double max_logit = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (size_t v = 0; v < V; ++v) {
      sum += std::exp(row[v] - max_logit);
    }
    out.sum += row[static_cast<size_t>(tokens[static_cast<size_t>(p)])] - max_logit - std::log(sum);
    ++out.n_tokens;
  }
  return out;
}

}  // namespace bilm::model
