#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "evolve/checkpoint.hpp"
#include "evolve/model.hpp"

namespace evolve {

// One training person: model input plus the fixed forecast-interval label vector.
struct Example {
  std::uint64_t person_id = 0;
  InputSequence sequence;
  std::vector<std::uint8_t> labels;  // dense, one entry per class
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double warmup_fraction = 0.05;   // of total scheduled steps
  double min_lr_fraction = 0.1;    // cosine floor relative to learning_rate
  std::size_t batch_size = 160;
  std::size_t max_epochs = 50;
  std::size_t early_stop_patience = 10;
  double none_downsample_rate = 0.25;
  std::vector<double> class_weights;  // empty means all ones
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;

  void validate(std::size_t n_classes) const;
  std::vector<double> resolved_class_weights(std::size_t n_classes) const;
};

// Padded model inputs with per-row targets. Targets repeat the person's label vector
// at every real position; padded positions carry zero loss weight.
struct Batch {
  PackedInputs inputs;
  std::vector<std::uint8_t> labels;        // [batch x C]
  std::vector<std::uint8_t> padding_mask;  // [batch x seq_len], 1 = real position
  std::size_t n_classes = 0;
};

Batch make_batch(std::span<const Example* const> examples, const ModelConfig& config);

// Multi-label BCE at one position: (1/C) * sum_c w_c * BCE(y_c, p_c).
double position_loss(std::span<const std::uint8_t> labels, std::span<const double> probabilities,
                     std::span<const double> class_weights);
// Mean of position_loss over the rows of a prediction series.
double person_loss(std::span<const std::uint8_t> labels, const PredictionSeries& series,
                   std::span<const double> class_weights);

// Mean person loss over the batch, recorded on `graph` for backpropagation.
template <typename T>
Var<T> batch_loss(Graph<T>& graph, EvolveModel<T>& model, const Batch& batch, std::span<const double> class_weights,
                  bool train, std::mt19937_64* rng);

// Mean person loss of a dataset under the current weights (dropout off).
double dataset_loss(const EvolveModel<float>& model, std::span<const Example> examples,
                    std::span<const double> class_weights, std::size_t batch_size = 64);

// Indices of the examples kept for one epoch, shuffled. Persons whose only label is
// `none_class` survive with probability `rate`; all others are always kept.
std::vector<std::size_t> downsample_none(std::span<const Example> examples, std::size_t none_class, double rate,
                                         std::mt19937_64& rng);

// Linear warmup, then cosine decay to min_lr_fraction * learning_rate.
double scheduled_learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

class AdamW {
 public:
  AdamW(std::vector<NamedTensor<float>>& params, const TrainConfig& cfg);
  // Applies one update using the gradients stored on the parameters.
  void step(double learning_rate);
  std::uint64_t steps() const { return steps_; }

  void export_state(std::vector<NamedTensor<float>>& out) const;
  void import_state(const Checkpoint& ckpt);

 private:
  std::vector<NamedTensor<float>>* params_;
  std::vector<std::vector<float>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::uint64_t steps_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_gradients(std::vector<NamedTensor<float>>& params, double max_norm);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double learning_rate = 0.0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_valid_loss = 0.0;
  bool stopped_early = false;
};

struct FitOptions {
  std::size_t none_class = 0;
  // Written after every epoch when set; holds everything needed to continue the run.
  std::optional<std::filesystem::path> resume_path;
  // Continue from a state previously written to resume_path.
  std::optional<Checkpoint> resume_from;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Trains in place; on return `model` holds the weights with the lowest validation loss.
// Throws NumericError if the loss diverges.
FitResult fit(EvolveModel<float>& model, std::span<const Example> train, std::span<const Example> valid,
              const TrainConfig& cfg, const FitOptions& options);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

}  // namespace evolve
