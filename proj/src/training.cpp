#include "evolve/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>

#include "evolve/errors.hpp"

namespace evolve {

namespace {

double bce_from_logit(double z, bool y) {
  // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
  const double s = y ? -z : z;
  return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x65766fu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

bool is_none_only(const Example& ex, std::size_t none_class) {
  if (none_class >= ex.labels.size() || ex.labels[none_class] == 0) return false;
  for (std::size_t c = 0; c < ex.labels.size(); ++c) {
    if (c != none_class && ex.labels[c] != 0) return false;
  }
  return true;
}

// Shuffled indices grouped into batches of similar length.
std::vector<std::vector<std::size_t>> bucketed_batches(std::vector<std::size_t> idx, std::span<const Example> data,
                                                       std::size_t batch_size, std::mt19937_64& rng) {
  const std::size_t chunk = batch_size * 50;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t lo = 0; lo < idx.size(); lo += chunk) {
    const std::size_t hi = std::min(idx.size(), lo + chunk);
    std::stable_sort(idx.begin() + lo, idx.begin() + hi, [&](std::size_t a, std::size_t b) {
      return data[a].sequence.size() < data[b].sequence.size();
    });
    for (std::size_t b = lo; b < hi; b += batch_size) {
      batches.emplace_back(idx.begin() + b, idx.begin() + std::min(hi, b + batch_size));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

void copy_values(const std::vector<NamedTensor<float>>& from, std::vector<NamedTensor<float>>& to) {
  for (std::size_t i = 0; i < to.size(); ++i) {
    std::copy(from[i].tensor.values().begin(), from[i].tensor.values().end(), to[i].tensor.values().begin());
  }
}

const Tensor<float>& require(const Checkpoint& ckpt, const std::string& name, const Shape& shape) {
  const NamedTensor<float>* t = ckpt.find(name);
  if (t == nullptr) throw DataError("resume state is missing tensor '" + name + "'");
  if (t->tensor.shape() != shape) throw DataError("resume tensor '" + name + "' has shape " +
                                                  shape_to_string(t->tensor.shape()) + ", expected " +
                                                  shape_to_string(shape));
  return t->tensor;
}

}  // namespace

void TrainConfig::validate(std::size_t n_classes) const {
  auto bad = [](const std::string& what) { throw ConfigError("training: " + what); };
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be finite and >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) bad("warmup_fraction must be in [0,1)");
  if (!(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0)) bad("min_lr_fraction must be in [0,1]");
  if (batch_size == 0) bad("batch_size must be positive");
  if (max_epochs == 0) bad("max_epochs must be positive");
  if (early_stop_patience == 0) bad("early_stop_patience must be positive");
  if (!(none_downsample_rate > 0.0 && none_downsample_rate <= 1.0)) bad("none_downsample_rate must be in (0,1]");
  if (!class_weights.empty()) {
    if (class_weights.size() != n_classes) {
      bad("class_weights has " + std::to_string(class_weights.size()) + " entries, expected " +
          std::to_string(n_classes));
    }
    for (double w : class_weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) bad("class weights must be finite and >= 0");
    }
  }
  if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) bad("grad_clip_norm must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    bad("adam betas must be in [0,1)");
  }
  if (!(adam_eps > 0.0)) bad("adam_eps must be positive");
}

std::vector<double> TrainConfig::resolved_class_weights(std::size_t n_classes) const {
  if (class_weights.empty()) return std::vector<double>(n_classes, 1.0);
  return class_weights;
}

Batch make_batch(std::span<const Example* const> examples, const ModelConfig& config) {
  if (examples.empty()) throw ContractError("make_batch: empty batch");
  std::vector<const InputSequence*> seqs;
  seqs.reserve(examples.size());
  for (const Example* e : examples) {
    if (e->labels.size() != config.n_classes) {
      throw DimensionError("person " + std::to_string(e->person_id) + " has " + std::to_string(e->labels.size()) +
                           " labels, model expects " + std::to_string(config.n_classes));
    }
    seqs.push_back(&e->sequence);
  }
  Batch b;
  b.inputs = pack_sequences(std::span<const InputSequence* const>(seqs), config);
  b.n_classes = config.n_classes;
  b.labels.reserve(examples.size() * config.n_classes);
  for (const Example* e : examples) b.labels.insert(b.labels.end(), e->labels.begin(), e->labels.end());
  b.padding_mask.assign(b.inputs.batch * b.inputs.seq_len, 0);
  for (std::size_t i = 0; i < b.inputs.batch; ++i) {
    std::fill_n(b.padding_mask.begin() + i * b.inputs.seq_len, b.inputs.lengths[i], 1);
  }
  return b;
}

double position_loss(std::span<const std::uint8_t> labels, std::span<const double> probabilities,
                     std::span<const double> class_weights) {
  if (labels.size() != probabilities.size() || labels.size() != class_weights.size() || labels.empty()) {
    throw DimensionError("position_loss: labels, probabilities and weights must have the same non-zero length");
  }
  double total = 0.0;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    const double p = probabilities[c];
    if (std::isnan(p)) throw NumericError("position_loss: probability is NaN");
    const double term = labels[c] ? -std::log(p) : -std::log1p(-p);
    total += class_weights[c] * term;
  }
  return total / static_cast<double>(labels.size());
}

double person_loss(std::span<const std::uint8_t> labels, const PredictionSeries& series,
                   std::span<const double> class_weights) {
  if (series.rows == 0) throw ContractError("person_loss: empty prediction series");
  double total = 0.0;
  for (std::size_t t = 0; t < series.rows; ++t) total += position_loss(labels, series.row(t), class_weights);
  return total / static_cast<double>(series.rows);
}

template <typename T>
Var<T> batch_loss(Graph<T>& graph, EvolveModel<T>& model, const Batch& batch, std::span<const double> class_weights,
                  bool train, std::mt19937_64* rng) {
  const ModelConfig& cfg = model.config();
  const std::size_t C = cfg.n_classes;
  if (batch.n_classes != C || class_weights.size() != C) throw DimensionError("batch_loss: class count mismatch");
  const auto out = model.forward(graph, batch.inputs, train, rng);
  const std::size_t B = batch.inputs.batch, S = batch.inputs.seq_len;
  const bool per_position = cfg.mode == ModelMode::evolve;
  const std::size_t rows = per_position ? B * S : B;

  Tensor<T> targets({rows, C}, T(0));
  std::vector<T> row_w(rows, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* y = batch.labels.data() + b * C;
    if (per_position) {
      const std::size_t len = batch.inputs.lengths[b];
      const T w = T(1.0 / (static_cast<double>(len) * static_cast<double>(B)));
      for (std::size_t t = 0; t < len; ++t) {
        row_w[b * S + t] = w;
        for (std::size_t c = 0; c < C; ++c) targets.at(b * S + t, c) = y[c] ? T(1) : T(0);
      }
    } else {
      row_w[b] = T(1.0 / static_cast<double>(B));
      for (std::size_t c = 0; c < C; ++c) targets.at(b, c) = y[c] ? T(1) : T(0);
    }
  }
  std::vector<T> cw(class_weights.begin(), class_weights.end());
  return bce_with_logits(out.logits, targets, std::span<const T>(row_w), std::span<const T>(cw));
}

template Var<float> batch_loss(Graph<float>&, EvolveModel<float>&, const Batch&, std::span<const double>, bool,
                               std::mt19937_64*);
template Var<double> batch_loss(Graph<double>&, EvolveModel<double>&, const Batch&, std::span<const double>, bool,
                                std::mt19937_64*);
template Var<long double> batch_loss(Graph<long double>&, EvolveModel<long double>&, const Batch&,
                                     std::span<const double>, bool, std::mt19937_64*);

double dataset_loss(const EvolveModel<float>& model, std::span<const Example> examples,
                    std::span<const double> class_weights, std::size_t batch_size) {
  if (examples.empty()) throw ContractError("dataset_loss: no examples");
  const std::size_t C = model.config().n_classes;
  if (class_weights.size() != C) throw DimensionError("dataset_loss: class weight count mismatch");
  std::vector<InputSequence> seqs;
  seqs.reserve(examples.size());
  for (const auto& e : examples) seqs.push_back(e.sequence);
  const auto logits = model.logits_many(seqs, batch_size);
  double total = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& s = logits[i];
    const auto& y = examples[i].labels;
    if (y.size() != C) throw DimensionError("dataset_loss: label count mismatch");
    double person = 0.0;
    for (std::size_t t = 0; t < s.rows; ++t) {
      double pos = 0.0;
      for (std::size_t c = 0; c < C; ++c) pos += class_weights[c] * bce_from_logit(s.at(t, c), y[c] != 0);
      person += pos / static_cast<double>(C);
    }
    total += person / static_cast<double>(s.rows);
  }
  const double loss = total / static_cast<double>(examples.size());
  if (!std::isfinite(loss)) throw NumericError("dataset loss is not finite");
  return loss;
}

std::vector<std::size_t> downsample_none(std::span<const Example> examples, std::size_t none_class, double rate,
                                         std::mt19937_64& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("none downsample rate must be in (0,1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> kept;
  kept.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (!is_none_only(examples[i], none_class) || u(rng) < rate) kept.push_back(i);
  }
  std::shuffle(kept.begin(), kept.end(), rng);
  return kept;
}

double scheduled_learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return cfg.learning_rate;
  const std::size_t warmup =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.warmup_fraction * total_steps)));
  if (step <= warmup) return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - std::min(total_steps, warmup)));
  const double progress = std::clamp(static_cast<double>(step - warmup) / span, 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.learning_rate * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
}

AdamW::AdamW(std::vector<NamedTensor<float>>& params, const TrainConfig& cfg)
    : params_(&params),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), 0.0f);
    v_.emplace_back(p.tensor.size(), 0.0f);
  }
}

void AdamW::step(double learning_rate) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_->size(); ++i) {
    Tensor<float>& p = (*params_)[i].tensor;
    if (!p.has_grad()) continue;
    // Decay only matrices; gains, biases stay undecayed.
    const double wd = p.rank() >= 2 ? weight_decay_ : 0.0;
    float* w = p.values().data();
    const float* g = p.grad().data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * gj);
      v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] = static_cast<float>(w[j] - learning_rate * (mhat / (std::sqrt(vhat) + eps_) + wd * w[j]));
    }
  }
}

void AdamW::export_state(std::vector<NamedTensor<float>>& out) const {
  for (std::size_t i = 0; i < params_->size(); ++i) {
    const auto& p = (*params_)[i];
    out.push_back({"adam.m/" + p.name, Tensor<float>(p.tensor.shape(), m_[i])});
    out.push_back({"adam.v/" + p.name, Tensor<float>(p.tensor.shape(), v_[i])});
  }
  out.push_back({"adam.steps", Tensor<float>({1}, {static_cast<float>(steps_)})});
}

void AdamW::import_state(const Checkpoint& ckpt) {
  for (std::size_t i = 0; i < params_->size(); ++i) {
    const auto& p = (*params_)[i];
    const auto& m = require(ckpt, "adam.m/" + p.name, p.tensor.shape());
    const auto& v = require(ckpt, "adam.v/" + p.name, p.tensor.shape());
    m_[i].assign(m.values().begin(), m.values().end());
    v_[i].assign(v.values().begin(), v.values().end());
  }
  steps_ = static_cast<std::uint64_t>(require(ckpt, "adam.steps", {1})[0]);
}

double clip_gradients(std::vector<NamedTensor<float>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm) {
    const float f = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad()) g *= f;
    }
  }
  return norm;
}

FitResult fit(EvolveModel<float>& model, std::span<const Example> train, std::span<const Example> valid,
              const TrainConfig& cfg, const FitOptions& options) {
  const ModelConfig& mcfg = model.config();
  const std::size_t C = mcfg.n_classes;
  cfg.validate(C);
  if (train.empty()) throw ContractError("fit: empty training set");
  if (valid.empty()) throw ContractError("fit: empty validation set");
  if (options.none_class >= C) throw ConfigError("fit: none class out of range");
  const std::vector<double> weights = cfg.resolved_class_weights(C);

  model.set_requires_grad(true);
  auto& params = model.parameters();
  AdamW opt(params, cfg);

  std::size_t n_none = 0;
  for (const auto& e : train) n_none += is_none_only(e, options.none_class) ? 1 : 0;
  const double expected = static_cast<double>(train.size() - n_none) + cfg.none_downsample_rate * n_none;
  const std::size_t per_epoch =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(expected / static_cast<double>(cfg.batch_size))));
  const std::size_t total_steps = per_epoch * cfg.max_epochs;

  FitResult result;
  result.best_valid_loss = std::numeric_limits<double>::infinity();
  std::vector<NamedTensor<float>> best = params;
  std::size_t start_epoch = 1, bad_epochs = 0, step = 0;

  if (options.resume_from) {
    const Checkpoint& ck = *options.resume_from;
    if (!(ck.config == mcfg)) throw ConfigError("resume state was written for a different model configuration");
    for (auto& p : params) {
      const auto& t = require(ck, p.name, p.tensor.shape());
      std::copy(t.values().begin(), t.values().end(), p.tensor.values().begin());
    }
    for (auto& p : best) {
      const auto& t = require(ck, "best/" + p.name, p.tensor.shape());
      std::copy(t.values().begin(), t.values().end(), p.tensor.values().begin());
    }
    opt.import_state(ck);
    const auto& st = require(ck, "trainer.state", {4});
    start_epoch = static_cast<std::size_t>(st[0]) + 1;
    result.best_epoch = static_cast<std::size_t>(st[1]);
    bad_epochs = static_cast<std::size_t>(st[2]);
    step = static_cast<std::size_t>(opt.steps());
    if (const auto* h = ck.find("trainer.history"); h != nullptr && h->tensor.rank() == 2 && h->tensor.dim(1) == 5) {
      for (std::size_t r = 0; r < h->tensor.dim(0); ++r) {
        result.history.push_back({static_cast<std::size_t>(h->tensor.at(r, 0)), h->tensor.at(r, 1),
                                  h->tensor.at(r, 2), h->tensor.at(r, 3)});
      }
    }
    // best loss stored as a float pair (hi + lo)
    const auto& bl = require(ck, "trainer.best_loss", {2});
    result.best_valid_loss = static_cast<double>(bl[0]) + static_cast<double>(bl[1]);
    if (bad_epochs >= cfg.early_stop_patience) result.stopped_early = true;
  }

  for (std::size_t epoch = start_epoch; epoch <= cfg.max_epochs && !result.stopped_early; ++epoch) {
    std::mt19937_64 rng(mix_seed(cfg.seed, epoch));
    const auto kept = downsample_none(train, options.none_class, cfg.none_downsample_rate, rng);
    const auto batches = bucketed_batches(kept, train, cfg.batch_size, rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    double lr = 0.0;
    for (const auto& idx : batches) {
      std::vector<const Example*> members;
      members.reserve(idx.size());
      for (std::size_t i : idx) members.push_back(&train[i]);
      const Batch batch = make_batch(std::span<const Example* const>(members), mcfg);
      model.zero_grad();
      Graph<float> g;
      const Var<float> loss = batch_loss(g, model, batch, weights, true, &rng);
      const double value = g.backward(loss);
      if (!std::isfinite(value)) throw NumericError("training loss diverged at epoch " + std::to_string(epoch));
      clip_gradients(params, cfg.grad_clip_norm);
      ++step;
      lr = scheduled_learning_rate(cfg, step, total_steps);
      opt.step(lr);
      loss_sum += value * static_cast<double>(idx.size());
      seen += idx.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.valid_loss = dataset_loss(model, valid, weights);
    rec.learning_rate = lr;
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    if (rec.valid_loss < result.best_valid_loss) {
      result.best_valid_loss = rec.valid_loss;
      result.best_epoch = epoch;
      copy_values(params, best);
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }
    if (bad_epochs >= cfg.early_stop_patience) result.stopped_early = true;

    if (options.resume_path) {
      Checkpoint ck;
      ck.config = mcfg;
      for (const auto& p : params) ck.tensors.push_back({p.name, Tensor<float>(p.tensor.shape(), p.tensor.values())});
      for (const auto& p : best) ck.tensors.push_back({"best/" + p.name, Tensor<float>(p.tensor.shape(), p.tensor.values())});
      opt.export_state(ck.tensors);
      ck.tensors.push_back({"trainer.state", Tensor<float>({4}, {static_cast<float>(epoch),
                                                                 static_cast<float>(result.best_epoch),
                                                                 static_cast<float>(bad_epochs), 0.0f})});
      const float hi = static_cast<float>(result.best_valid_loss);
      const float lo = static_cast<float>(result.best_valid_loss - static_cast<double>(hi));
      ck.tensors.push_back({"trainer.best_loss", Tensor<float>({2}, {hi, lo})});
      std::vector<float> hist;
      for (const auto& h : result.history) {
        hist.insert(hist.end(), {static_cast<float>(h.epoch), static_cast<float>(h.train_loss),
                                 static_cast<float>(h.valid_loss), static_cast<float>(h.learning_rate), 0.0f});
      }
      ck.tensors.push_back({"trainer.history", Tensor<float>({result.history.size(), 5}, hist)});
      save_checkpoint(*options.resume_path, ck);
    }
  }

  copy_values(best, params);
  model.set_requires_grad(false);
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_loss,valid_loss,lr\n";
  out.precision(9);
  for (const auto& h : history) {
    out << h.epoch << ',' << h.train_loss << ',' << h.valid_loss << ',' << h.learning_rate << '\n';
  }
}

}  // namespace evolve
