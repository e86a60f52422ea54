#include "evolve/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "evolve/errors.hpp"

namespace evolve {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(s));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " +
                         shape_to_string(b));
  }
}

template <typename T>
Graph<T>* graph_of(Var<T> a) {
  if (a.graph == nullptr) throw ContractError("variable is not attached to a graph");
  return a.graph;
}

template <typename T>
Graph<T>* graph_of(Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw ContractError("variables belong to different graphs");
  return graph_of(a);
}

// Uniform double in [0, 1) from the top 53 bits; stable across standard libraries.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

// ---- AttentionMask ------------------------------------------------------------

AttentionMask::AttentionMask(std::size_t size, bool allowed)
    : size_(size), bits_(size * size, allowed ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t size) {
  AttentionMask m(size, false);
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

AttentionMask AttentionMask::full(std::size_t size) { return AttentionMask(size, true); }

AttentionMask AttentionMask::with_key_limit(std::size_t valid_keys) const {
  AttentionMask m = *this;
  for (std::size_t i = 0; i < size_; ++i) {
    for (std::size_t j = valid_keys; j < size_; ++j) m.set(i, j, false);
  }
  return m;
}

// ---- Graph --------------------------------------------------------------------

template <typename T>
const Tensor<T>& Var<T>::value() const {
  if (graph == nullptr) throw ContractError("variable is not attached to a graph");
  return graph->value(*this);
}

template <typename T>
void Graph<T>::check_live() const {
  if (consumed_) throw ContractError("graph already consumed by backward(); re-run the forward pass");
}

template <typename T>
Var<T> Graph<T>::parameter(Tensor<T>& p) {
  check_live();
  if (auto it = param_index_.find(&p); it != param_index_.end()) return Var<T>{this, it->second};
  Node node;
  node.needs_grad = p.requires_grad();
  node.param = &p;
  nodes_.push_back(std::move(node));
  param_index_.emplace(&p, nodes_.size() - 1);
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  check_live();
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::constant_ref(const Tensor<T>& value) {
  check_live();
  Node node;
  node.ref = &value;
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var<T> v) const {
  check_live();
  const Node& n = nodes_.at(v.id);
  if (n.param != nullptr) return *n.param;
  if (n.ref != nullptr) return *n.ref;
  return n.value;
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backprop backprop) {
  check_live();
  value.check_finite("forward op output");
  Node node;
  node.value = std::move(value);
  for (const Var<T>& in : inputs) {
    if (in.graph != this) throw ContractError("op input recorded on a different graph");
    node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
  }
  if (node.needs_grad) node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
std::vector<T>& Graph<T>::grad(Var<T> v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad.assign(n.param != nullptr ? n.param->size() : n.value.size(), T{0});
  return n.grad;
}

template <typename T>
T* Graph<T>::grad_if_needed(Var<T> v) {
  if (!nodes_[v.id].needs_grad) return nullptr;
  return grad(v).data();
}

template <typename T>
T Graph<T>::backward(Var<T> loss) {
  check_live();
  if (loss.graph != this) throw ContractError("loss belongs to a different graph");
  const Tensor<T>& root_value = value(loss);
  if (root_value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_to_string(root_value.shape()));
  }
  const T result = root_value[0];
  const Node& root = nodes_[loss.id];
  if (root.needs_grad) {
    grad(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backprop) n.backprop(std::span<const T>(n.grad));
      if (n.param != nullptr && n.param->requires_grad()) {
        auto dst = n.param->grad();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }
  nodes_.clear();
  nodes_.shrink_to_fit();
  param_index_.clear();
  consumed_ = true;
  return result;
}

// ---- scalar helpers -------------------------------------------------------------

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
void softmax_masked_row(const T* in, const std::uint8_t* allowed, T* out, std::size_t n) {
  T max_v = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed[j] && in[j] > max_v) max_v = in[j];
    any = any || allowed[j];
  }
  if (!any) throw ContractError("masked softmax: row has no unmasked entry");
  if (max_v == -std::numeric_limits<T>::infinity()) {
    throw ContractError("masked softmax: all unmasked entries are -inf");
  }
  T total{0};
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed[j]) {
      out[j] = std::exp(in[j] - max_v);
      total += out[j];
    } else {
      out[j] = T{0};
    }
  }
  const T inv = T{1} / total;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

// ---- ops ----------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>* g = graph_of(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  require_rank2(A.shape(), "matmul");
  require_rank2(B.shape(), "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_to_string(A.shape()) + " . " +
                         shape_to_string(B.shape()));
  }
  Tensor<T> C({m, n});
  MutMap<T>(C.data().data(), m, n).noalias() = ConstMap<T>(A.data().data(), m, k) * ConstMap<T>(B.data().data(), k, n);
  return g->record(std::move(C), {a, b}, [g, a, b, m, k, n](std::span<const T> dC) {
    ConstMap<T> dCm(dC.data(), m, n);
    if (T* dA = g->grad_if_needed(a)) {
      MutMap<T>(dA, m, k).noalias() += dCm * ConstMap<T>(g->value(b).data().data(), k, n).transpose();
    }
    if (T* dB = g->grad_if_needed(b)) {
      MutMap<T>(dB, k, n).noalias() += ConstMap<T>(g->value(a).data().data(), m, k).transpose() * dCm;
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>* g = graph_of(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  require_same_shape(A.shape(), B.shape(), "add");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return g->record(std::move(out), {a, b}, [g, a, b](std::span<const T> d) {
    for (Var<T> v : {a, b}) {
      if (T* dv = g->grad_if_needed(v)) {
        for (std::size_t i = 0; i < d.size(); ++i) dv[i] += d[i];
      }
    }
  });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  Graph<T>* g = graph_of(x, bias);
  const Tensor<T>& X = x.value();
  const Tensor<T>& b = bias.value();
  require_rank2(X.shape(), "add_bias");
  const std::size_t m = X.dim(0), n = X.dim(1);
  if (b.rank() != 1 || b.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_to_string(b.shape()) + " does not match " +
                         shape_to_string(X.shape()));
  }
  Tensor<T> out = X;
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) += b[c];
  }
  return g->record(std::move(out), {x, bias}, [g, x, bias, m, n](std::span<const T> d) {
    if (T* dx = g->grad_if_needed(x)) {
      for (std::size_t i = 0; i < d.size(); ++i) dx[i] += d[i];
    }
    if (T* db = g->grad_if_needed(bias)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) db[c] += d[r * n + c];
      }
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>* g = graph_of(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  require_same_shape(A.shape(), B.shape(), "mul");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return g->record(std::move(out), {a, b}, [g, a, b](std::span<const T> d) {
    const auto& av = g->value(a);
    const auto& bv = g->value(b);
    if (T* da = g->grad_if_needed(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * bv[i];
    }
    if (T* db = g->grad_if_needed(b)) {
      for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Graph<T>* g = graph_of(x);
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  return g->record(std::move(out), {x}, [g, x, factor](std::span<const T> d) {
    if (T* dx = g->grad_if_needed(x)) {
      for (std::size_t i = 0; i < d.size(); ++i) dx[i] += d[i] * factor;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Graph<T>* g = graph_of(x);
  const auto& X = x.value();
  T total{0};
  for (T v : X.data()) total += v;
  return g->record(Tensor<T>({1}, {total}), {x}, [g, x](std::span<const T> d) {
    if (T* dx = g->grad_if_needed(x)) {
      const std::size_t n = g->value(x).size();
      for (std::size_t i = 0; i < n; ++i) dx[i] += d[0];
    }
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Graph<T>* g = graph_of(x);
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = stable_sigmoid(v);
  auto saved = std::make_shared<std::vector<T>>(out.values());
  return g->record(std::move(out), {x}, [g, x, saved](std::span<const T> d) {
    if (T* dx = g->grad_if_needed(x)) {
      for (std::size_t i = 0; i < d.size(); ++i) dx[i] += d[i] * (*saved)[i] * (T{1} - (*saved)[i]);
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Graph<T>* g = graph_of(x);
  const auto& X = x.value();
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const T v = X[i];
    out[i] = T(0.5) * v * (T{1} + std::tanh(kC * (v + kA * v * v * v)));
  }
  return g->record(std::move(out), {x}, [g, x](std::span<const T> d) {
    T* dx = g->grad_if_needed(x);
    if (!dx) return;
    const auto& X = g->value(x);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T v = X[i];
      const T th = std::tanh(kC * (v + kA * v * v * v));
      const T dudx = kC * (T{1} + T{3} * kA * v * v);
      dx[i] += d[i] * (T(0.5) * (T{1} + th) + T(0.5) * v * (T{1} - th * th) * dudx);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  Graph<T>* g = graph_of(x, gain);
  graph_of(x, bias);
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  const auto& X = x.value();
  const std::size_t d = X.shape().back();
  const std::size_t rows = X.size() / d;
  const auto& G = gain.value();
  const auto& B = bias.value();
  if (G.size() != d || B.size() != d) throw DimensionError("layer_norm: gain/bias must have the last-axis size");

  auto xhat = std::make_shared<std::vector<T>>(X.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = X.data().data() + r * d;
    T mu{0};
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mu) * rs;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = G[c] * h + B[c];
    }
  }
  return g->record(std::move(out), {x, gain, bias}, [g, x, gain, bias, xhat, rstd, rows, d](std::span<const T> dy) {
    const auto& G = g->value(gain);
    if (T* dg = g->grad_if_needed(gain)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) dg[c] += dy[r * d + c] * (*xhat)[r * d + c];
      }
    }
    if (T* db = g->grad_if_needed(bias)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) db[c] += dy[r * d + c];
      }
    }
    if (T* dx = g->grad_if_needed(x)) {
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dh{0}, mean_dh_h{0};
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = dy[r * d + c] * G[c];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + c];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        for (std::size_t c = 0; c < d; ++c) {
          const T dh = dy[r * d + c] * G[c];
          dx[r * d + c] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
        }
      }
    }
  });
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const int> ids) {
  Graph<T>* g = graph_of(table);
  const auto& W = table.value();
  require_rank2(W.shape(), "embedding_lookup");
  const std::size_t vocab = W.dim(0), d = W.dim(1);
  if (ids.empty()) throw ContractError("embedding_lookup: empty id sequence");
  auto saved = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  Tensor<T> out({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int id = ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside table of " + std::to_string(vocab) +
                       " rows");
    }
    std::copy_n(W.data().data() + static_cast<std::size_t>(id) * d, d, out.data().data() + t * d);
  }
  return g->record(std::move(out), {table}, [g, table, saved, d](std::span<const T> dy) {
    T* dW = g->grad_if_needed(table);
    if (!dW) return;
    for (std::size_t t = 0; t < saved->size(); ++t) {
      T* dst = dW + static_cast<std::size_t>((*saved)[t]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += dy[t * d + c];
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> x, T rate, std::mt19937_64& rng) {
  if (rate < T{0} || rate >= T{1}) throw ContractError("dropout: rate must lie in [0, 1)");
  if (rate == T{0}) return x;
  Graph<T>* g = graph_of(x);
  const auto& X = x.value();
  const T keep_scale = T{1} / (T{1} - rate);
  auto mask = std::make_shared<std::vector<T>>(X.size());
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    (*mask)[i] = uniform01(rng) >= static_cast<double>(rate) ? keep_scale : T{0};
    out[i] = X[i] * (*mask)[i];
  }
  return g->record(std::move(out), {x}, [g, x, mask](std::span<const T> dy) {
    if (T* dx = g->grad_if_needed(x)) {
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
    }
  });
}

template <typename T>
Var<T> masked_softmax_rows(Var<T> x, const AttentionMask& mask) {
  Graph<T>* g = graph_of(x);
  const auto& X = x.value();
  if (X.rank() != 2 && X.rank() != 3) throw DimensionError("masked_softmax_rows: expected [T x T] or [h x T x T]");
  const std::size_t n = X.shape().back();
  if (X.shape()[X.rank() - 2] != n || mask.size() != n) {
    throw DimensionError("masked_softmax_rows: mask " + std::to_string(mask.size()) + "x" +
                         std::to_string(mask.size()) + " does not match " + shape_to_string(X.shape()));
  }
  const std::size_t blocks = X.size() / (n * n);
  Tensor<T> out(X.shape());
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (b * n + i) * n;
      softmax_masked_row(X.data().data() + off, mask.row(i), out.data().data() + off, n);
    }
  }
  const std::size_t rows = blocks * n;
  auto saved = std::make_shared<std::vector<T>>(out.values());
  return g->record(std::move(out), {x}, [g, x, saved, rows, n](std::span<const T> dy) {
    T* dx = g->grad_if_needed(x);
    if (!dx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = saved->data() + r * n;
      const T* dyr = dy.data() + r * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += dyr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yr[j] * (dyr[j] - dot);
    }
  });
}

template <typename T>
Var<T> multi_head_attention(Var<T> qkv, std::span<const std::size_t> lengths, std::size_t seq_len,
                            std::size_t n_heads, bool causal) {
  Graph<T>* g = graph_of(qkv);
  const auto& X = qkv.value();
  require_rank2(X.shape(), "multi_head_attention");
  const std::size_t batch = lengths.size();
  if (batch == 0 || seq_len == 0 || X.dim(0) != batch * seq_len) {
    throw DimensionError("multi_head_attention: rows " + std::to_string(X.dim(0)) + " != batch*seq_len");
  }
  if (X.dim(1) % 3 != 0) throw DimensionError("multi_head_attention: qkv width must be 3*d");
  const std::size_t d = X.dim(1) / 3;
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("multi_head_attention: d not divisible by heads");
  const std::size_t dh = d / n_heads;
  const T scale_factor = T{1} / std::sqrt(static_cast<T>(dh));
  const std::size_t ld = 3 * d;

  auto masks = std::make_shared<std::vector<AttentionMask>>();
  masks->reserve(batch);
  const AttentionMask base = causal ? AttentionMask::causal(seq_len) : AttentionMask::full(seq_len);
  for (std::size_t len : lengths) {
    if (len == 0 || len > seq_len) throw ContractError("multi_head_attention: sequence length out of range");
    masks->push_back(base.with_key_limit(len));
  }

  auto probs = std::make_shared<std::vector<T>>(batch * n_heads * seq_len * seq_len);
  Tensor<T> out({batch * seq_len, d});
  RowMat<T> scores(seq_len, seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base_ptr = X.data().data() + b * seq_len * ld;
    for (std::size_t h = 0; h < n_heads; ++h) {
      ConstStrided<T> Q(base_ptr + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
      ConstStrided<T> K(base_ptr + d + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
      ConstStrided<T> V(base_ptr + 2 * d + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
      scores.noalias() = (Q * K.transpose()) * scale_factor;
      T* P = probs->data() + (b * n_heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        softmax_masked_row(scores.data() + i * seq_len, (*masks)[b].row(i), P + i * seq_len, seq_len);
      }
      MutStrided<T> O(out.data().data() + b * seq_len * d + h * dh, seq_len, dh, Eigen::OuterStride<>(d));
      O.noalias() = ConstMap<T>(P, seq_len, seq_len) * V;
    }
  }

  return g->record(std::move(out), {qkv}, [g, qkv, probs, batch, seq_len, n_heads, d, dh, ld, scale_factor](
                                               std::span<const T> dout) {
    T* dX = g->grad_if_needed(qkv);
    if (!dX) return;
    const auto& X = g->value(qkv);
    RowMat<T> dP(seq_len, seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* base_ptr = X.data().data() + b * seq_len * ld;
      T* dbase = dX + b * seq_len * ld;
      for (std::size_t h = 0; h < n_heads; ++h) {
        ConstStrided<T> Q(base_ptr + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
        ConstStrided<T> K(base_ptr + d + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
        ConstStrided<T> V(base_ptr + 2 * d + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
        MutStrided<T> dQ(dbase + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
        MutStrided<T> dK(dbase + d + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
        MutStrided<T> dV(dbase + 2 * d + h * dh, seq_len, dh, Eigen::OuterStride<>(ld));
        ConstStrided<T> dO(dout.data() + b * seq_len * d + h * dh, seq_len, dh, Eigen::OuterStride<>(d));
        ConstMap<T> P(probs->data() + (b * n_heads + h) * seq_len * seq_len, seq_len, seq_len);

        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        for (std::size_t i = 0; i < seq_len; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < seq_len; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j < seq_len; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot);
        }
        dQ.noalias() += (dP * K) * scale_factor;
        dK.noalias() += (dP.transpose() * Q) * scale_factor;
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
  Graph<T>* g = graph_of(x);
  const auto& X = x.value();
  require_rank2(X.shape(), "gather_rows");
  const std::size_t n = X.dim(1);
  if (rows.empty()) throw ContractError("gather_rows: no rows requested");
  auto saved = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Tensor<T> out({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= X.dim(0)) throw IndexError("gather_rows: row index out of range");
    std::copy_n(X.data().data() + rows[r] * n, n, out.data().data() + r * n);
  }
  return g->record(std::move(out), {x}, [g, x, saved, n](std::span<const T> dy) {
    T* dx = g->grad_if_needed(x);
    if (!dx) return;
    for (std::size_t r = 0; r < saved->size(); ++r) {
      for (std::size_t c = 0; c < n; ++c) dx[(*saved)[r] * n + c] += dy[r * n + c];
    }
  });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets, std::span<const T> row_weights,
                       std::span<const T> class_weights) {
  Graph<T>* g = graph_of(logits);
  const auto& Z = logits.value();
  require_rank2(Z.shape(), "bce_with_logits");
  require_same_shape(Z.shape(), targets.shape(), "bce_with_logits");
  const std::size_t rows = Z.dim(0), classes = Z.dim(1);
  if (row_weights.size() != rows || class_weights.size() != classes) {
    throw DimensionError("bce_with_logits: weight vector sizes do not match logits");
  }
  targets.check_finite("bce_with_logits targets");
  using Acc = std::common_type_t<T, double>;
  Acc total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_weights[r] == T{0}) continue;
    Acc row_total = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const Acc z = Z.at(r, c);
      const Acc y = targets.at(r, c);
      const Acc l = std::max(z, Acc{0}) - z * y + std::log1p(std::exp(-std::abs(z)));
      row_total += static_cast<Acc>(class_weights[c]) * l;
    }
    total += static_cast<Acc>(row_weights[r]) * row_total / static_cast<Acc>(classes);
  }
  auto rw = std::make_shared<std::vector<T>>(row_weights.begin(), row_weights.end());
  auto cw = std::make_shared<std::vector<T>>(class_weights.begin(), class_weights.end());
  auto y = std::make_shared<Tensor<T>>(targets);
  return g->record(Tensor<T>({1}, {static_cast<T>(total)}), {logits},
                   [g, logits, rw, cw, y, rows, classes](std::span<const T> d) {
                     T* dz = g->grad_if_needed(logits);
                     if (!dz) return;
                     const auto& Z = g->value(logits);
                     const T inv_c = T{1} / static_cast<T>(classes);
                     for (std::size_t r = 0; r < rows; ++r) {
                       if ((*rw)[r] == T{0}) continue;
                       const T f = d[0] * (*rw)[r] * inv_c;
                       for (std::size_t c = 0; c < classes; ++c) {
                         dz[r * classes + c] += f * (*cw)[c] * (stable_sigmoid(Z.at(r, c)) - y->at(r, c));
                       }
                     }
                   });
}

#define EVOLVE_INSTANTIATE(T)                                                                              \
  template struct Var<T>;                                                                                  \
  template class Graph<T>;                                                                                 \
  template T stable_sigmoid<T>(T);                                                                         \
  template void softmax_masked_row<T>(const T*, const std::uint8_t*, T*, std::size_t);                     \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                               \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                  \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                                             \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                  \
  template Var<T> scale<T>(Var<T>, T);                                                                     \
  template Var<T> sum<T>(Var<T>);                                                                          \
  template Var<T> mean<T>(Var<T>);                                                                         \
  template Var<T> sigmoid<T>(Var<T>);                                                                      \
  template Var<T> gelu<T>(Var<T>);                                                                         \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                                \
  template Var<T> embedding_lookup<T>(Var<T>, std::span<const int>);                                       \
  template Var<T> dropout<T>(Var<T>, T, std::mt19937_64&);                                                 \
  template Var<T> masked_softmax_rows<T>(Var<T>, const AttentionMask&);                                    \
  template Var<T> multi_head_attention<T>(Var<T>, std::span<const std::size_t>, std::size_t, std::size_t, \
                                          bool);                                                           \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                                    \
  template Var<T> bce_with_logits<T>(Var<T>, const Tensor<T>&, std::span<const T>, std::span<const T>);

EVOLVE_INSTANTIATE(float)
EVOLVE_INSTANTIATE(double)
EVOLVE_INSTANTIATE(long double)

}  // namespace evolve
