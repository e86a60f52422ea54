#include "evolve/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evolve/errors.hpp"
#include "evolve/parallel.hpp"

namespace evolve {

std::string to_string(ModelMode mode) { return mode == ModelMode::evolve ? "evolve" : "cls"; }

ModelMode parse_model_mode(std::string_view text) {
  if (text == "evolve") return ModelMode::evolve;
  if (text == "cls") return ModelMode::cls;
  throw ConfigError("mode: expected 'evolve' or 'cls', got '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string(field) + " must be positive");
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers, "n_layers");
  positive(n_ages, "n_ages");
  positive(n_t2f, "n_t2f");
  positive(n_classes, "n_classes");
  if (vocab_size <= static_cast<std::size_t>(kFirstCodeToken)) {
    throw ConfigError("vocab_size must exceed the reserved token ids");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

std::vector<int> InputSequence::positions() const {
  std::vector<int> pos(size());
  std::iota(pos.begin(), pos.end(), 0);
  return pos;
}

void InputSequence::validate(const ModelConfig& config) const {
  if (codes.empty()) throw ContractError("input sequence is empty");
  if (ages.size() != codes.size() || t2f.size() != codes.size()) {
    throw DimensionError("input streams differ in length");
  }
  if (codes.size() > config.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(codes.size()) + " exceeds max_seq_len " +
                      std::to_string(config.max_seq_len));
  }
  for (std::size_t t = 0; t < codes.size(); ++t) {
    if (codes[t] < 0 || static_cast<std::size_t>(codes[t]) >= config.vocab_size) {
      throw IndexError("code id " + std::to_string(codes[t]) + " outside vocabulary");
    }
    if (t > 0 && ages[t] < ages[t - 1]) throw ContractError("ages must be non-decreasing");
    if (t > 0 && t2f[t] > t2f[t - 1]) throw ContractError("t2f must be non-increasing");
  }
  if (config.mode == ModelMode::cls && codes.front() != kClsToken) {
    throw ContractError("cls mode requires the CLS token at position 0");
  }
}

InputSequence with_cls_token(const InputSequence& seq, std::size_t max_seq_len) {
  if (seq.codes.empty()) throw ContractError("cannot add CLS token to an empty sequence");
  const std::size_t keep = std::min(seq.size(), max_seq_len - 1);
  const std::size_t skip = seq.size() - keep;
  InputSequence out;
  out.codes.reserve(keep + 1);
  out.codes.push_back(kClsToken);
  out.ages.push_back(seq.ages[skip]);
  out.t2f.push_back(seq.t2f[skip]);
  out.codes.insert(out.codes.end(), seq.codes.begin() + static_cast<std::ptrdiff_t>(skip), seq.codes.end());
  out.ages.insert(out.ages.end(), seq.ages.begin() + static_cast<std::ptrdiff_t>(skip), seq.ages.end());
  out.t2f.insert(out.t2f.end(), seq.t2f.begin() + static_cast<std::ptrdiff_t>(skip), seq.t2f.end());
  return out;
}

PackedInputs pack_sequences(std::span<const InputSequence* const> seqs, const ModelConfig& config) {
  if (seqs.empty()) throw ContractError("cannot pack an empty batch");
  PackedInputs p;
  p.batch = seqs.size();
  for (const InputSequence* s : seqs) {
    s->validate(config);
    p.seq_len = std::max(p.seq_len, s->size());
  }
  const std::size_t n = p.batch * p.seq_len;
  p.codes.assign(n, kPadToken);
  p.ages.assign(n, 0);
  p.positions.assign(n, 0);
  p.t2f.assign(n, 0);
  p.lengths.reserve(p.batch);
  const int max_age = static_cast<int>(config.n_ages) - 1;
  const int max_t2f = static_cast<int>(config.n_t2f) - 1;
  for (std::size_t b = 0; b < p.batch; ++b) {
    const InputSequence& s = *seqs[b];
    p.lengths.push_back(s.size());
    for (std::size_t t = 0; t < s.size(); ++t) {
      const std::size_t i = b * p.seq_len + t;
      p.codes[i] = s.codes[t];
      const int age = std::clamp(s.ages[t], 0, max_age);
      const int t2f = std::clamp(s.t2f[t], 0, max_t2f);
      p.clipped += (age != s.ages[t]) + (t2f != s.t2f[t]);
      p.ages[i] = age;
      p.t2f[i] = t2f;
      p.positions[i] = static_cast<int>(t);
    }
    for (std::size_t t = s.size(); t < p.seq_len; ++t) p.positions[b * p.seq_len + t] = static_cast<int>(t);
  }
  return p;
}

// ---- EvolveModel -------------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

std::string layer_name(std::size_t layer, const char* leaf) { return "layer" + std::to_string(layer) + "." + leaf; }

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Shape>> EvolveModel<T>::parameter_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<std::pair<std::string, Shape>> out{
      {"embed.code", {c.vocab_size, d}},
      {"embed.age", {c.n_ages, d}},
      {"embed.pos", {c.max_seq_len, d}},
      {"embed.t2f", {c.n_t2f, d}},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    out.emplace_back(layer_name(l, "ln1.gain"), Shape{d});
    out.emplace_back(layer_name(l, "ln1.bias"), Shape{d});
    out.emplace_back(layer_name(l, "attn.qkv.weight"), Shape{d, 3 * d});
    out.emplace_back(layer_name(l, "attn.qkv.bias"), Shape{3 * d});
    out.emplace_back(layer_name(l, "attn.out.weight"), Shape{d, d});
    out.emplace_back(layer_name(l, "attn.out.bias"), Shape{d});
    out.emplace_back(layer_name(l, "ln2.gain"), Shape{d});
    out.emplace_back(layer_name(l, "ln2.bias"), Shape{d});
    out.emplace_back(layer_name(l, "mlp.fc.weight"), Shape{d, 4 * d});
    out.emplace_back(layer_name(l, "mlp.fc.bias"), Shape{4 * d});
    out.emplace_back(layer_name(l, "mlp.proj.weight"), Shape{4 * d, d});
    out.emplace_back(layer_name(l, "mlp.proj.bias"), Shape{d});
  }
  out.emplace_back("final_ln.gain", Shape{d});
  out.emplace_back("final_ln.bias", Shape{d});
  out.emplace_back("head.weight", Shape{d, c.n_classes});
  out.emplace_back("head.bias", Shape{c.n_classes});
  return out;
}

// d*(V + n_ages + max_seq_len + n_t2f) + n_layers*(12 d^2 + 13 d) + 2 d + d*C + C
template <typename T>
std::size_t EvolveModel<T>::parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return d * (c.vocab_size + c.n_ages + c.max_seq_len + c.n_t2f) + c.n_layers * (12 * d * d + 13 * d) + 2 * d +
         d * c.n_classes + c.n_classes;
}

template <typename T>
EvolveModel<T>::EvolveModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto layout = parameter_layout(config_);
  params_.reserve(layout.size());
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  for (const auto& [name, shape] : layout) {
    Tensor<T> t(shape);
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".gain")) {
      std::fill(t.data().begin(), t.data().end(), T{1});
    } else if (ends_with(".bias")) {
      // zeros
    } else {
      double stddev = 0.02;
      if (shape.size() == 2 && name.rfind("embed.", 0) != 0) {
        stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
        if (ends_with("attn.out.weight") || ends_with("mlp.proj.weight")) stddev *= resid_scale;
      }
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    }
    params_.push_back({name, std::move(t)});
  }
}

template <typename T>
EvolveModel<T>::EvolveModel(ModelConfig config, std::vector<NamedTensor<T>> parameters)
    : config_(std::move(config)), params_(std::move(parameters)) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  if (layout.size() != params_.size()) {
    throw ConfigError("parameter set has " + std::to_string(params_.size()) + " tensors, config expects " +
                      std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (params_[i].name != layout[i].first || params_[i].tensor.shape() != layout[i].second) {
      throw ConfigError("parameter '" + params_[i].name + "' " + shape_to_string(params_[i].tensor.shape()) +
                        " does not match expected '" + layout[i].first + "' " + shape_to_string(layout[i].second));
    }
  }
}

template <typename T>
std::size_t EvolveModel<T>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw NotFoundError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
Tensor<T>& EvolveModel<T>::parameter(std::string_view name) {
  return params_[index_of(name)].tensor;
}

template <typename T>
const Tensor<T>& EvolveModel<T>::parameter(std::string_view name) const {
  return params_[index_of(name)].tensor;
}

template <typename T>
std::size_t EvolveModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
void EvolveModel<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

template <typename T>
void EvolveModel<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void EvolveModel<T>::zero_decision_head() {
  for (const char* name : {"head.weight", "head.bias"}) {
    auto& t = parameter(name);
    std::fill(t.data().begin(), t.data().end(), T{0});
  }
}

template <typename T>
template <typename Bind>
typename EvolveModel<T>::Output EvolveModel<T>::run(Graph<T>& /*graph*/, const PackedInputs& in, bool train,
                                                    std::mt19937_64* rng, Bind&& bind) const {
  if (train && config_.dropout > 0.0 && rng == nullptr) throw ContractError("training forward needs an rng");
  if (in.seq_len > config_.max_seq_len) throw LengthError("packed batch longer than max_seq_len");
  const T drop = train ? static_cast<T>(config_.dropout) : T{0};
  auto maybe_dropout = [&](Var<T> x) { return drop > T{0} ? dropout(x, drop, *rng) : x; };
  std::size_t idx = 0;
  auto next = [&] { return bind(idx++); };

  const Var<T> code_table = next();
  const Var<T> age_table = next();
  const Var<T> pos_table = next();
  const Var<T> t2f_table = next();
  Var<T> x = add(add(embedding_lookup(code_table, std::span<const int>(in.codes)),
                     embedding_lookup(age_table, std::span<const int>(in.ages))),
                 add(embedding_lookup(pos_table, std::span<const int>(in.positions)),
                     embedding_lookup(t2f_table, std::span<const int>(in.t2f))));
  x = maybe_dropout(x);
  const auto eps = static_cast<T>(kLayerNormEps);
  const bool causal = config_.mode == ModelMode::evolve;
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Var<T> ln1_g = next(), ln1_b = next(), qkv_w = next(), qkv_b = next(), out_w = next(), out_b = next();
    Var<T> ln2_g = next(), ln2_b = next(), fc_w = next(), fc_b = next(), proj_w = next(), proj_b = next();

    Var<T> h = layer_norm(x, ln1_g, ln1_b, eps);
    Var<T> qkv = add_bias(matmul(h, qkv_w), qkv_b);
    Var<T> att = multi_head_attention(qkv, std::span<const std::size_t>(in.lengths), in.seq_len, config_.n_heads, causal);
    x = add(x, maybe_dropout(add_bias(matmul(att, out_w), out_b)));

    h = layer_norm(x, ln2_g, ln2_b, eps);
    Var<T> f = gelu(add_bias(matmul(h, fc_w), fc_b));
    x = add(x, maybe_dropout(add_bias(matmul(f, proj_w), proj_b)));
  }
  Var<T> fin_g = next(), fin_b = next(), head_w = next(), head_b = next();
  Var<T> hidden = layer_norm(x, fin_g, fin_b, eps);
  Var<T> head_in = hidden;
  if (config_.mode == ModelMode::cls) {
    std::vector<std::size_t> rows(in.batch);
    for (std::size_t b = 0; b < in.batch; ++b) rows[b] = b * in.seq_len;
    head_in = gather_rows(hidden, std::span<const std::size_t>(rows));
  }
  return {hidden, add_bias(matmul(head_in, head_w), head_b)};
}

template <typename T>
typename EvolveModel<T>::Output EvolveModel<T>::forward(Graph<T>& g, const PackedInputs& inputs, bool train,
                                                        std::mt19937_64* rng) {
  clipped_ += inputs.clipped;
  return run(g, inputs, train, rng, [&](std::size_t i) { return g.parameter(params_[i].tensor); });
}

template <typename T>
Var<T> EvolveModel<T>::embed_inputs(Graph<T>& g, const PackedInputs& in) {
  return add(add(embedding_lookup(g.parameter(parameter("embed.code")), std::span<const int>(in.codes)),
                 embedding_lookup(g.parameter(parameter("embed.age")), std::span<const int>(in.ages))),
             add(embedding_lookup(g.parameter(parameter("embed.pos")), std::span<const int>(in.positions)),
                 embedding_lookup(g.parameter(parameter("embed.t2f")), std::span<const int>(in.t2f))));
}

template <typename T>
typename EvolveModel<T>::Output EvolveModel<T>::infer(Graph<T>& g, const PackedInputs& inputs) const {
  clipped_ += inputs.clipped;
  return run(g, inputs, false, nullptr, [&](std::size_t i) { return g.constant_ref(params_[i].tensor); });
}

template <typename T>
PredictionSeries EvolveModel<T>::predict(const InputSequence& seq) const {
  return predict_many(std::span<const InputSequence>(&seq, 1), 1).front();
}

template <typename T>
std::vector<PredictionSeries> EvolveModel<T>::predict_many(std::span<const InputSequence> seqs,
                                                           std::size_t batch_size) const {
  std::vector<PredictionSeries> out = logits_many(seqs, batch_size);
  for (auto& s : out) {
    for (auto& v : s.sigmoids) v = stable_sigmoid(v);
  }
  return out;
}

template <typename T>
std::vector<PredictionSeries> EvolveModel<T>::logits_many(std::span<const InputSequence> seqs,
                                                          std::size_t batch_size) const {
  std::vector<PredictionSeries> out(seqs.size());
  if (seqs.empty()) return out;
  batch_size = std::max<std::size_t>(1, batch_size);
  // Length-sorted batches keep padding small; results are written back by index.
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return seqs[a].size() < seqs[b].size(); });
  const std::size_t n_batches = (order.size() + batch_size - 1) / batch_size;
  const std::size_t C = config_.n_classes;
  parallel_for(n_batches, [&](std::size_t bi) {
    const std::size_t lo = bi * batch_size, hi = std::min(order.size(), lo + batch_size);
    std::vector<const InputSequence*> members;
    for (std::size_t i = lo; i < hi; ++i) members.push_back(&seqs[order[i]]);
    const PackedInputs packed = pack_sequences(std::span<const InputSequence* const>(members), config_);
    Graph<T> g;
    const Output o = infer(g, packed);
    const Tensor<T>& logits = o.logits.value();
    for (std::size_t b = 0; b < members.size(); ++b) {
      PredictionSeries s;
      s.classes = C;
      s.rows = config_.mode == ModelMode::evolve ? packed.lengths[b] : 1;
      s.sigmoids.resize(s.rows * C);
      const std::size_t base = config_.mode == ModelMode::evolve ? b * packed.seq_len : b;
      for (std::size_t t = 0; t < s.rows; ++t) {
        for (std::size_t c = 0; c < C; ++c) {
          s.sigmoids[t * C + c] = static_cast<double>(logits.at(base + t, c));
        }
      }
      out[order[lo + b]] = std::move(s);
    }
  });
  return out;
}

template <typename T>
Tensor<T> EvolveModel<T>::position_embeddings(const InputSequence& seq) const {
  const InputSequence* one = &seq;
  const PackedInputs packed = pack_sequences(std::span<const InputSequence* const>(&one, 1), config_);
  Graph<T> g;
  const Output o = infer(g, packed);
  return Tensor<T>(o.hidden.value());
}

template class EvolveModel<float>;
template class EvolveModel<double>;
template class EvolveModel<long double>;

}  // namespace evolve
