#pragma once

// Decoder-only transformer (pre-norm blocks, learned absolute positions, tied
// unembedding by default) with an explicit reverse-mode backward pass.
//
// All arithmetic is double precision and single-threaded, so every result is a
// deterministic function of (parameters, inputs, dropout seed).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bilm::model {

struct ModelConfig {
  int n_layers = 2;
  int d_embed = 128;
  int d_hidden = 128;
  int d_ffn = 512;
  int n_heads = 2;
  int d_head = 64;
  int max_seq_len = 256;
  int vocab_size = 50004;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  std::string position_embedding = "absolute";
  std::string activation = "gelu";
  bool tie_embeddings = true;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;

  static ModelConfig base(int vocab_size = 50004);
  static ModelConfig small(int vocab_size = 50004);
  static ModelConfig tiny(int vocab_size = 50004);
  // "Base", "Small" or "Tiny" (case-insensitive).
  static ModelConfig preset(std::string_view name, int vocab_size);

  // Throws ValidationError when dimensions are inconsistent.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  std::vector<int64_t> shape;
  size_t offset = 0;
  size_t size = 0;
};

// Named views into one flat parameter buffer. Weight matrices are stored
// [in, out] row-major; embeddings are [rows, d_hidden].
class ParameterLayout {
 public:
  ParameterLayout() = default;
  explicit ParameterLayout(const ModelConfig& config);

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec& find(std::string_view name) const;
  size_t total_size() const { return total_; }

 private:
  void add(std::string name, std::vector<int64_t> shape);

  std::vector<TensorSpec> tensors_;
  std::unordered_map<std::string, size_t> index_;
  size_t total_ = 0;
};

int64_t parameter_count(const ModelConfig& config);

struct ModelState {
  ModelConfig config;
  ParameterLayout layout;
  std::vector<double> params;
  // Adam moments; empty until the first optimizer step.
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  uint64_t seed = 0;
  int64_t step = 0;  // completed optimizer steps
  std::string tokenizer_hash;
  std::string tokenizer_blob;  // serialized tokenizer carried inside checkpoints

  std::span<const double> tensor(std::string_view name) const;
  std::span<double> tensor(std::string_view name);
};

// Normal(0, init_std) weights, residual output projections scaled by
// 1/sqrt(2 * n_layers), zero biases, unit LayerNorm gains.
ModelState init(const ModelConfig& config, uint64_t seed);

struct ForwardTrace {
  int positions = 0;
  int vocab_size = 0;
  std::vector<double> logits;  // positions x vocab_size
  // Residual stream: index 0 is the embedding output, index l the output of block l.
  std::vector<std::vector<double>> hidden_states;
  // Per block: attention result before the output projection (positions x d_hidden)
  // and FFN intermediate after GELU (positions x d_ffn). Empty unless traced.
  std::vector<std::vector<double>> attention_activations;
  std::vector<std::vector<double>> ffn_activations;

  std::span<const double> logits_at(int position) const {
    return {logits.data() + static_cast<size_t>(position) * static_cast<size_t>(vocab_size),
            static_cast<size_t>(vocab_size)};
  }
};

// Causal forward pass over one sequence. train_mode enables dropout drawn from
// dropout_seed; eval mode is deterministic and dropout-free.
ForwardTrace forward(const ModelState& state, std::span<const int> tokens, bool trace = false,
                     bool train_mode = false, uint64_t dropout_seed = 0);

// Final LayerNorm followed by the unembedding, applied to `positions` rows of a
// residual-stream snapshot. Shares the forward pass kernels exactly.
std::vector<double> decode_hidden(const ModelState& state, std::span<const double> hidden,
                                  int positions);

struct LossAndGrads {
  double loss = 0.0;
  int64_t n_targets = 0;
  std::vector<double> grads;  // same layout as ModelState::params
};

using Rows = std::span<const std::span<const int>>;

// Mean next-token cross-entropy over every row (position t predicts t + 1)
// plus gradients for every parameter. Rows must share one length.
LossAndGrads loss_and_grads(const ModelState& state, Rows rows, bool train_mode = false,
                            uint64_t dropout_seed = 0);

// Same loss without the backward pass; eval mode.
double batch_loss(const ModelState& state, Rows rows);

struct LogProb {
  double sum = 0.0;
  int n_tokens = 0;
};

// Sum over p in [start, end) of log softmax(logits[p - 1])[tokens[p]].
// Positions before `start` only condition. Requires 0 < start <= end <= |tokens|.
LogProb sequence_logprob(const ModelState& state, std::span<const int> tokens, int start,
                         int end);

// Checkpoint: magic, version, JSON header (config, seed, step, tokenizer hash,
// tensor directory), then raw little-endian payloads.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelState& state);
ModelState load_checkpoint(const std::filesystem::path& path);
ModelState deserialize_checkpoint(std::string_view bytes);

}  // namespace bilm::model
