#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evolve/autodiff.hpp"
#include "evolve/tensor.hpp"

namespace evolve {

enum class ModelMode : std::uint8_t { evolve = 0, cls = 1 };

std::string to_string(ModelMode mode);
ModelMode parse_model_mode(std::string_view text);

// Reserved token ids; dataset code c maps to token c + kFirstCodeToken.
inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kFirstCodeToken = 2;

struct ModelConfig {
  std::size_t d_model = 384;
  std::size_t n_heads = 8;
  std::size_t n_layers = 8;
  std::size_t max_seq_len = 400;
  std::size_t vocab_size = 0;  // token ids, including the reserved ones
  std::size_t n_ages = 111;    // ages 0..110
  std::size_t n_t2f = 101;     // years-to-forecast 0..100
  std::size_t n_classes = 0;
  double dropout = 0.1;
  ModelMode mode = ModelMode::evolve;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One person's model input: parallel code / age / years-to-forecast streams.
// Positions are implicit (0..T-1).
struct InputSequence {
  std::vector<int> codes;
  std::vector<int> ages;
  std::vector<int> t2f;

  std::size_t size() const { return codes.size(); }
  std::vector<int> positions() const;

  // Structural checks against a config. Out-of-table ages / t2f are NOT errors here;
  // they are clipped when packed.
  void validate(const ModelConfig& config) const;
};

// Returns a copy with the CLS token prepended (ages / t2f copied from the first real
// code); drops the oldest code when that would exceed max_seq_len.
InputSequence with_cls_token(const InputSequence& seq, std::size_t max_seq_len);

// Sequences padded to a common length, flattened row-major as [batch x seq_len].
struct PackedInputs {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> codes;
  std::vector<int> ages;
  std::vector<int> positions;
  std::vector<int> t2f;
  std::vector<std::size_t> lengths;
  std::size_t clipped = 0;  // age / t2f values pulled into table range
};

PackedInputs pack_sequences(std::span<const InputSequence* const> seqs, const ModelConfig& config);

// Sigmoid outputs: one row per position (evolve) or a single row (cls).
struct PredictionSeries {
  std::size_t rows = 0;
  std::size_t classes = 0;
  std::vector<double> sigmoids;

  std::span<const double> row(std::size_t t) const { return {sigmoids.data() + t * classes, classes}; }
  double at(std::size_t t, std::size_t c) const { return sigmoids[t * classes + c]; }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Transformer backbone shared by the Evolve (causal, per-position head) and CLS
// (bidirectional, head on position 0) variants. Pre-layer-norm residual blocks.
template <typename T>
class EvolveModel {
 public:
  struct Output {
    Var<T> hidden;  // [batch*seq_len x d_model], after the final layer norm
    Var<T> logits;  // evolve: [batch*seq_len x C]; cls: [batch x C]
  };

  EvolveModel(ModelConfig config, std::uint64_t seed);
  // Adopts existing weights (e.g. from a checkpoint); names and shapes must match.
  EvolveModel(ModelConfig config, std::vector<NamedTensor<T>> parameters);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  Tensor<T>& parameter(std::string_view name);
  const Tensor<T>& parameter(std::string_view name) const;

  std::size_t parameter_count() const;
  static std::size_t parameter_count(const ModelConfig& config);
  // Names and shapes in canonical order.
  static std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

  void set_requires_grad(bool on);
  void zero_grad();
  // Zero weight and bias in the decision layer (all sigmoids become 0.5).
  void zero_decision_head();

  // Recording forward pass; gradients flow into parameters with requires_grad.
  // Dropout is active only when `train` is true, and then `rng` is required.
  Output forward(Graph<T>& graph, const PackedInputs& inputs, bool train, std::mt19937_64* rng);
  // Summed code + age + position + t2f embeddings, [batch*seq_len x d_model].
  Var<T> embed_inputs(Graph<T>& graph, const PackedInputs& inputs);

  // Inference helpers: dropout off, no gradient tracking, safe to call concurrently.
  PredictionSeries predict(const InputSequence& seq) const;
  std::vector<PredictionSeries> predict_many(std::span<const InputSequence> seqs, std::size_t batch_size = 64) const;
  // Same layout as predict_many but holding raw decision-layer logits.
  std::vector<PredictionSeries> logits_many(std::span<const InputSequence> seqs, std::size_t batch_size = 64) const;
  // Final-layer hidden states per position, [T x d_model].
  Tensor<T> position_embeddings(const InputSequence& seq) const;

  // Total age / t2f values clipped into table range so far (inference and training).
  std::size_t clipped_count() const { return clipped_.load(); }

  template <typename U>
  EvolveModel<U> cast() const {
    std::vector<NamedTensor<U>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back({p.name, p.tensor.template cast<U>()});
    return EvolveModel<U>(config_, std::move(out));
  }

 private:
  template <typename Bind>
  Output run(Graph<T>& graph, const PackedInputs& inputs, bool train, std::mt19937_64* rng, Bind&& bind) const;
  std::size_t index_of(std::string_view name) const;
  Output infer(Graph<T>& graph, const PackedInputs& inputs) const;

  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
  mutable std::atomic<std::size_t> clipped_{0};

 public:
  EvolveModel(const EvolveModel& other) : config_(other.config_), params_(other.params_), clipped_(other.clipped_.load()) {}
  EvolveModel& operator=(const EvolveModel& other) {
    config_ = other.config_;
    params_ = other.params_;
    clipped_ = other.clipped_.load();
    return *this;
  }
  EvolveModel(EvolveModel&& other) noexcept
      : config_(std::move(other.config_)), params_(std::move(other.params_)), clipped_(other.clipped_.load()) {}
  EvolveModel& operator=(EvolveModel&& other) noexcept {
    config_ = std::move(other.config_);
    params_ = std::move(other.params_);
    clipped_ = other.clipped_.load();
    return *this;
  }
};

extern template class EvolveModel<float>;
extern template class EvolveModel<double>;
extern template class EvolveModel<long double>;

}  // namespace evolve
