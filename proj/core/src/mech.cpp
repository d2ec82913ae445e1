#include "bilm/mech.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "bilm/error.hpp"

namespace bilm::mech {

std::string to_string(LangClass c) {
  switch (c) {
    case LangClass::l1: return "l1";
    case LangClass::l2: return "l2";
    case LangClass::neutral: return "neutral";
  }
  return "neutral";
}

LangClass classify(double rel_l1, double rel_l2, double threshold) {
  if (rel_l1 == 0.0 && rel_l2 == 0.0) {
    return LangClass::neutral;
  }
  if (rel_l1 >= threshold * rel_l2) {
    return LangClass::l1;
  }
  if (rel_l2 >= threshold * rel_l1) {
    return LangClass::l2;
  }
  return LangClass::neutral;
}

LangDictionary build_lang_dictionary(std::span<const int> l1_tokens,
                                     std::span<const int> l2_tokens, int vocab_size,
                                     double threshold) {
  if (l1_tokens.empty() || l2_tokens.empty()) {
    throw ValidationError("build_lang_dictionary: empty corpus");
  }
  if (!(threshold > 1.0)) {
    throw ValidationError("build_lang_dictionary: threshold must exceed 1");
  }
  LangDictionary d;
  d.threshold = threshold;
  const auto V = static_cast<size_t>(vocab_size);
  d.counts_l1.assign(V, 0);
  d.counts_l2.assign(V, 0);
  const auto count = [&](std::span<const int> tokens, std::vector<int64_t>& counts) {
    for (const int t : tokens) {
      if (t < 0 || t >= vocab_size) {
        throw ValidationError("build_lang_dictionary: token id " + std::to_string(t) +
                              " outside vocabulary");
      }
      ++counts[static_cast<size_t>(t)];
    }
  };
  count(l1_tokens, d.counts_l1);
  count(l2_tokens, d.counts_l2);
  d.total_l1 = static_cast<int64_t>(l1_tokens.size());
  d.total_l2 = static_cast<int64_t>(l2_tokens.size());
  d.classes.resize(V);
  for (size_t i = 0; i < V; ++i) {
    const double rel1 = static_cast<double>(d.counts_l1[i]) / static_cast<double>(d.total_l1);
    const double rel2 = static_cast<double>(d.counts_l2[i]) / static_cast<double>(d.total_l2);
    d.classes[i] = classify(rel1, rel2, threshold);
  }
  return d;
}

nlohmann::json LangDictionary::to_json() const {
  int64_t n1 = 0, n2 = 0, n0 = 0;
  for (const LangClass c : classes) {
    n1 += c == LangClass::l1;
    n2 += c == LangClass::l2;
    n0 += c == LangClass::neutral;
  }
  return {{"threshold", threshold},         {"total_l1", total_l1}, {"total_l2", total_l2},
          {"tokenizer_hash", tokenizer_hash}, {"n_l1", n1},          {"n_l2", n2},
          {"n_neutral", n0}};
}

double lens_ratio(int64_t l1, int64_t l2, bool* flagged) {
  if (flagged != nullptr) {
    *flagged = l2 == 0 && l1 > 0;
  }
  if (l2 == 0) {
    return l1 == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return static_cast<double>(l1) / static_cast<double>(l2);
}

nlohmann::json LayerLanguageProfile::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (size_t l = 0; l < layers.size(); ++l) {
    const LayerCounts& c = layers[l];
    layers_json.push_back({{"layer", l},
                           {"l1", c.l1},
                           {"l2", c.l2},
                           {"neutral", c.neutral},
                           {"ratio", c.ratio_flagged ? nlohmann::json() : nlohmann::json(c.ratio)},
                           {"ratio_flagged", c.ratio_flagged}});
  }
  return {{"k", k},
          {"last_position_only", last_position_only},
          {"positions_scanned", positions_scanned},
          {"tokenizer_hash", tokenizer_hash},
          {"layers", layers_json}};
}

std::vector<int> top_k(std::span<const double> values, int k) {
  const size_t n = std::min(values.size(), static_cast<size_t>(std::max(k, 0)));
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](int a, int b) {
                      const double va = values[static_cast<size_t>(a)];
                      const double vb = values[static_cast<size_t>(b)];
                      return va > vb || (va == vb && a < b);
                    });
  idx.resize(n);
  return idx;
}

std::vector<std::vector<std::vector<int>>> lens_top_k(const model::ModelState& state,
                                                      std::span<const int> tokens, int k) {
  const model::ForwardTrace trace = model::forward(state, tokens, true);
  const auto V = static_cast<size_t>(state.config.vocab_size);
  std::vector<std::vector<std::vector<int>>> out;
  for (const auto& hidden : trace.hidden_states) {
    const std::vector<double> logits = model::decode_hidden(state, hidden, trace.positions);
    auto& layer = out.emplace_back();
    for (int p = 0; p < trace.positions; ++p) {
      layer.push_back(top_k(std::span<const double>(logits).subspan(static_cast<size_t>(p) * V, V), k));
    }
  }
  return out;
}

LayerLanguageProfile logit_lens(const model::ModelState& state,
                                std::span<const std::vector<int>> inputs,
                                const LangDictionary& dictionary, const LensOptions& options) {
  if (!dictionary.tokenizer_hash.empty() && !state.tokenizer_hash.empty() &&
      dictionary.tokenizer_hash != state.tokenizer_hash) {
    throw ValidationError("logit_lens: dictionary and model use different tokenizers");
  }
  if (dictionary.classes.size() != static_cast<size_t>(state.config.vocab_size)) {
    throw ValidationError("logit_lens: dictionary size differs from the model vocabulary");
  }
  if (options.k <= 0 || options.k > state.config.vocab_size) {
    throw ValidationError("logit_lens: k must lie in [1, vocab_size]");
  }
  LayerLanguageProfile profile;
  profile.k = options.k;
  profile.last_position_only = options.last_position_only;
  profile.tokenizer_hash = state.tokenizer_hash;
  profile.layers.resize(static_cast<size_t>(state.config.n_layers) + 1);
  for (const auto& input : inputs) {
    if (input.empty()) {
      throw ValidationError("logit_lens: empty input sequence");
    }
    const auto per_layer = lens_top_k(state, input, options.k);
    const size_t first = options.last_position_only ? input.size() - 1 : 0;
    for (size_t l = 0; l < per_layer.size(); ++l) {
      for (size_t p = first; p < per_layer[l].size(); ++p) {
        for (const int id : per_layer[l][p]) {
          switch (dictionary.at(id)) {
            case LangClass::l1: ++profile.layers[l].l1; break;
            case LangClass::l2: ++profile.layers[l].l2; break;
            case LangClass::neutral: ++profile.layers[l].neutral; break;
          }
        }
      }
    }
    profile.positions_scanned += static_cast<int64_t>(input.size() - first);
  }
  for (LayerCounts& c : profile.layers) {
    c.ratio = lens_ratio(c.l1, c.l2, &c.ratio_flagged);
  }
  return profile;
}

// ----------------------------------------------------------------------------
// Neurons
// ----------------------------------------------------------------------------

namespace {
constexpr double kFixedScale = 281474976710656.0;  // 2^48
}

ActivationAccumulator::ActivationAccumulator(int n_layers, int attention_width, int ffn_width)
    : n_layers_(n_layers),
      attention_width_(attention_width),
      ffn_width_(ffn_width),
      attention_(static_cast<size_t>(n_layers), std::vector<Fixed>(static_cast<size_t>(attention_width), 0)),
      ffn_(static_cast<size_t>(n_layers), std::vector<Fixed>(static_cast<size_t>(ffn_width), 0)),
      attention_tokens_(static_cast<size_t>(n_layers), 0),
      ffn_tokens_(static_cast<size_t>(n_layers), 0) {
  if (n_layers <= 0 || attention_width <= 0 || ffn_width <= 0) {
    throw ValidationError("activation accumulator dimensions must be positive");
  }
}

int ActivationAccumulator::width(Sublayer sublayer) const {
  return sublayer == Sublayer::attention ? attention_width_ : ffn_width_;
}

void ActivationAccumulator::add(Sublayer sublayer, int layer, std::span<const double> values,
                                int64_t positions) {
  if (layer < 0 || layer >= n_layers_) {
    throw ValidationError("activation layer index out of range");
  }
  const auto w = static_cast<size_t>(width(sublayer));
  if (positions < 0 || values.size() != static_cast<size_t>(positions) * w) {
    throw ValidationError("activation block must hold positions x width values");
  }
  auto& sums = (sublayer == Sublayer::attention ? attention_ : ffn_)[static_cast<size_t>(layer)];
  auto& tokens =
      (sublayer == Sublayer::attention ? attention_tokens_ : ffn_tokens_)[static_cast<size_t>(layer)];
  for (int64_t p = 0; p < positions; ++p) {
    const double* row = values.data() + static_cast<size_t>(p) * w;
    for (size_t i = 0; i < w; ++i) {
      sums[i] += static_cast<Fixed>(std::llround(std::fabs(row[i]) * kFixedScale));
    }
  }
  tokens += positions;
}

void ActivationAccumulator::add_trace(const model::ForwardTrace& trace) {
  if (trace.attention_activations.size() != static_cast<size_t>(n_layers_)) {
    throw ValidationError("trace does not match the accumulator's layer count");
  }
  for (int l = 0; l < n_layers_; ++l) {
    add(Sublayer::attention, l, trace.attention_activations[static_cast<size_t>(l)], trace.positions);
    add(Sublayer::ffn, l, trace.ffn_activations[static_cast<size_t>(l)], trace.positions);
  }
}

void ActivationAccumulator::merge(const ActivationAccumulator& other) {
  if (other.n_layers_ != n_layers_ || other.attention_width_ != attention_width_ ||
      other.ffn_width_ != ffn_width_) {
    throw ValidationError("cannot merge accumulators of different shapes");
  }
  for (size_t l = 0; l < static_cast<size_t>(n_layers_); ++l) {
    for (size_t i = 0; i < attention_[l].size(); ++i) attention_[l][i] += other.attention_[l][i];
    for (size_t i = 0; i < ffn_[l].size(); ++i) ffn_[l][i] += other.ffn_[l][i];
    attention_tokens_[l] += other.attention_tokens_[l];
    ffn_tokens_[l] += other.ffn_tokens_[l];
  }
}

std::vector<double> ActivationAccumulator::mean(Sublayer sublayer, int layer) const {
  const auto l = static_cast<size_t>(layer);
  const auto& sums = (sublayer == Sublayer::attention ? attention_ : ffn_).at(l);
  const int64_t tokens = (sublayer == Sublayer::attention ? attention_tokens_ : ffn_tokens_).at(l);
  if (tokens == 0) {
    throw ValidationError("no activations recorded for layer " + std::to_string(layer));
  }
  std::vector<double> out(sums.size());
  for (size_t i = 0; i < sums.size(); ++i) {
    out[i] = static_cast<double>(sums[i]) / kFixedScale / static_cast<double>(tokens);
  }
  return out;
}

std::vector<int> top_quantile_indices(std::span<const double> scores, double quantile) {
  if (!(quantile > 0.0 && quantile <= 1.0)) {
    throw ValidationError("quantile must lie in (0, 1]");
  }
  const double exact = quantile * static_cast<double>(scores.size());
  // Guard against products such as 0.25 * n landing a hair above an integer.
  const auto count = static_cast<int>(std::ceil(exact - 1e-9));
  std::vector<int> picked = top_k(scores, count);
  std::sort(picked.begin(), picked.end());
  return picked;
}

NeuronSet select_neurons(const ActivationAccumulator& acc, double quantile) {
  NeuronSet set;
  set.quantile = quantile;
  set.attention_width = acc.width(Sublayer::attention);
  set.ffn_width = acc.width(Sublayer::ffn);
  for (int l = 0; l < acc.n_layers(); ++l) {
    set.attention.push_back(top_quantile_indices(acc.mean(Sublayer::attention, l), quantile));
    set.ffn.push_back(top_quantile_indices(acc.mean(Sublayer::ffn, l), quantile));
  }
  return set;
}

NeuronSet detect_language_neurons(const model::ModelState& state,
                                  const corpus::PackedCorpus& corpus, double quantile,
                                  size_t max_rows) {
  size_t rows = corpus.rows();
  if (max_rows > 0) rows = std::min(rows, max_rows);
  if (rows == 0) {
    throw ValidationError("detect_language_neurons: corpus is empty");
  }
  ActivationAccumulator acc(state.config.n_layers, state.config.d_hidden, state.config.d_ffn);
  for (size_t r = 0; r < rows; ++r) {
    acc.add_trace(model::forward(state, corpus.row(r), true));
  }
  NeuronSet set = select_neurons(acc, quantile);
  set.language = corpus.language;
  set.corpus_hash = corpus.content_hash();
  return set;
}

nlohmann::json NeuronSet::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (size_t l = 0; l < attention.size(); ++l) {
    layers.push_back({{"layer", l}, {"attention", attention[l]}, {"ffn", ffn[l]}});
  }
  return {{"language", language},
          {"corpus_hash", corpus_hash},
          {"quantile", quantile},
          {"attention_width", attention_width},
          {"ffn_width", ffn_width},
          {"layers", layers}};
}

NeuronSet NeuronSet::from_json(const nlohmann::json& j) {
  NeuronSet s;
  s.language = j.at("language").get<std::string>();
  s.corpus_hash = j.at("corpus_hash").get<std::string>();
  s.quantile = j.at("quantile").get<double>();
  s.attention_width = j.at("attention_width").get<int>();
  s.ffn_width = j.at("ffn_width").get<int>();
  for (const auto& layer : j.at("layers")) {
    s.attention.push_back(layer.at("attention").get<std::vector<int>>());
    s.ffn.push_back(layer.at("ffn").get<std::vector<int>>());
  }
  return s;
}

OverlapResult neuron_overlap(const NeuronSet& a, const NeuronSet& b) {
  if (a.n_layers() != b.n_layers() || a.attention_width != b.attention_width ||
      a.ffn_width != b.ffn_width || a.ffn.size() != b.ffn.size()) {
    throw ValidationError("neuron_overlap: neuron sets come from different architectures");
  }
  const auto intersect = [](std::vector<int> x, std::vector<int> y) {
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    std::vector<int> common;
    std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
    return static_cast<int64_t>(common.size());
  };
  OverlapResult out;
  for (size_t l = 0; l < a.attention.size(); ++l) {
    out.attention.push_back(intersect(a.attention[l], b.attention[l]));
    out.ffn.push_back(intersect(a.ffn[l], b.ffn[l]));
    out.total_attention += out.attention.back();
    out.total_ffn += out.ffn.back();
  }
  out.total = out.total_attention + out.total_ffn;
  return out;
}

nlohmann::json OverlapResult::to_json() const {
  return {{"attention", attention},
          {"ffn", ffn},
          {"total_attention", total_attention},
          {"total_ffn", total_ffn},
          {"total", total}};
}

LineFit fit_line(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) {
    throw ValidationError("fit_line: x and y lengths differ");
  }
  if (xs.size() < 3) {
    throw ValidationError("fit_line: need at least 3 points");
  }
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw ValidationError("fit_line: degenerate variance");
  }
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r = sxy / std::sqrt(sxx * syy);
  return f;
}

CorrelationResult overlap_distance_correlation(std::span<const OverlapPoint> overlaps,
                                               const typology::DistanceMatrix& distances) {
  CorrelationResult out;
  std::vector<double> ys;
  for (const auto& p : overlaps) {
    out.points.push_back(p);
    out.distances.push_back(distances.at(p.language_a, p.language_b));
    ys.push_back(p.shared);
  }
  out.fit = fit_line(out.distances, ys);
  return out;
}

nlohmann::json CorrelationResult::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (size_t i = 0; i < points.size(); ++i) {
    pts.push_back({{"language_a", points[i].language_a},
                   {"language_b", points[i].language_b},
                   {"distance", distances[i]},
                   {"shared", points[i].shared}});
  }
  return {{"slope", fit.slope}, {"intercept", fit.intercept}, {"r", fit.r}, {"points", pts}};
}

}  // namespace bilm::mech
