#pragma once

// Interpretability probes: decoding intermediate residual states through the
// output head (logit lens), and per-language neuron detection with overlap
// and typological-distance correlation.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bilm/corpus.hpp"
#include "bilm/model.hpp"
#include "bilm/typology.hpp"

namespace bilm::mech {

enum class LangClass : uint8_t { neutral = 0, l1 = 1, l2 = 2 };

std::string to_string(LangClass c);

// Classifies from relative frequencies: L1 when rel_l1 >= threshold * rel_l2
// (so a token absent from L2 but present in L1 is L1), symmetric for L2.
LangClass classify(double rel_l1, double rel_l2, double threshold);

struct LangDictionary {
  std::vector<LangClass> classes;  // indexed by token id
  std::vector<int64_t> counts_l1;
  std::vector<int64_t> counts_l2;
  int64_t total_l1 = 0;
  int64_t total_l2 = 0;
  double threshold = 2.0;
  std::string tokenizer_hash;

  LangClass at(int id) const { return classes.at(static_cast<size_t>(id)); }
  nlohmann::json to_json() const;
};

LangDictionary build_lang_dictionary(std::span<const int> l1_tokens,
                                     std::span<const int> l2_tokens, int vocab_size,
                                     double threshold = 2.0);

struct LayerCounts {
  int64_t l1 = 0;
  int64_t l2 = 0;
  int64_t neutral = 0;
  double ratio = 0.0;  // l1 / l2; 0 when both are 0; +inf (and flagged) when only l2 is 0
  bool ratio_flagged = false;
};

// l1 / l2 with the zero conventions above.
double lens_ratio(int64_t l1, int64_t l2, bool* flagged = nullptr);

struct LensOptions {
  int k = 10;
  bool last_position_only = false;
};

struct LayerLanguageProfile {
  // Index 0 is the embedding output, index l the output of block l; the last
  // entry decodes to the model's own logits.
  std::vector<LayerCounts> layers;
  int k = 10;
  bool last_position_only = false;
  int64_t positions_scanned = 0;  // per layer
  std::string tokenizer_hash;

  nlohmann::json to_json() const;
};

// Indices of the k largest values, ordered by value descending then index ascending.
std::vector<int> top_k(std::span<const double> values, int k);

// [layer][position] -> top-k ids after final LayerNorm + unembedding.
std::vector<std::vector<std::vector<int>>> lens_top_k(const model::ModelState& state,
                                                      std::span<const int> tokens, int k);

LayerLanguageProfile logit_lens(const model::ModelState& state,
                                std::span<const std::vector<int>> inputs,
                                const LangDictionary& dictionary, const LensOptions& options = {});

enum class Sublayer { attention, ffn };

// Streaming per-neuron sums of |activation|. Sums are kept in fixed point so
// merging partial results is exact and independent of chunk order.
class ActivationAccumulator {
 public:
  ActivationAccumulator(int n_layers, int attention_width, int ffn_width);

  // `values` holds positions x width activations for one layer and sublayer.
  void add(Sublayer sublayer, int layer, std::span<const double> values, int64_t positions);
  void add_trace(const model::ForwardTrace& trace);
  void merge(const ActivationAccumulator& other);

  int n_layers() const { return n_layers_; }
  int width(Sublayer sublayer) const;
  // Mean |activation| per neuron over the tokens recorded for that layer.
  std::vector<double> mean(Sublayer sublayer, int layer) const;

 private:
  __extension__ using Fixed = __int128;

  int n_layers_;
  int attention_width_;
  int ffn_width_;
  std::vector<std::vector<Fixed>> attention_;
  std::vector<std::vector<Fixed>> ffn_;
  std::vector<int64_t> attention_tokens_;
  std::vector<int64_t> ffn_tokens_;
};

// The ceil(quantile * n) highest-scoring indices (ties to the lower index),
// returned in ascending index order.
std::vector<int> top_quantile_indices(std::span<const double> scores, double quantile);

struct NeuronSet {
  std::string language;
  std::string corpus_hash;
  double quantile = 0.25;
  int attention_width = 0;
  int ffn_width = 0;
  std::vector<std::vector<int>> attention;  // per layer, ascending
  std::vector<std::vector<int>> ffn;

  int n_layers() const { return static_cast<int>(attention.size()); }
  nlohmann::json to_json() const;
  static NeuronSet from_json(const nlohmann::json& j);
};

NeuronSet select_neurons(const ActivationAccumulator& acc, double quantile);

// Runs the model over every corpus row (or the first max_rows rows).
NeuronSet detect_language_neurons(const model::ModelState& state,
                                  const corpus::PackedCorpus& corpus, double quantile = 0.25,
                                  size_t max_rows = 0);

struct OverlapResult {
  std::vector<int64_t> attention;  // per layer
  std::vector<int64_t> ffn;
  int64_t total_attention = 0;
  int64_t total_ffn = 0;
  int64_t total = 0;

  nlohmann::json to_json() const;
};

OverlapResult neuron_overlap(const NeuronSet& a, const NeuronSet& b);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r = 0.0;
};

// Least squares y = slope * x + intercept and Pearson r. Throws when either
// variable has zero variance or fewer than 3 points are given.
LineFit fit_line(std::span<const double> xs, std::span<const double> ys);

struct OverlapPoint {
  std::string language_a;
  std::string language_b;
  double shared = 0.0;
};

struct CorrelationResult {
  LineFit fit;
  std::vector<OverlapPoint> points;
  std::vector<double> distances;  // aligned with points

  nlohmann::json to_json() const;
};

CorrelationResult overlap_distance_correlation(std::span<const OverlapPoint> overlaps,
                                               const typology::DistanceMatrix& distances);

}  // namespace bilm::mech
