#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "evolve/tensor.hpp"

namespace evolve {

// T x T allowed-pairs matrix: entry (i, j) true when query i may attend to key j.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t size, bool allowed);

  // Decoder-style: j <= i.
  static AttentionMask causal(std::size_t size);
  // Bidirectional: everything allowed.
  static AttentionMask full(std::size_t size);

  // Copy with every key j >= valid_keys disallowed (key padding).
  AttentionMask with_key_limit(std::size_t valid_keys) const;

  std::size_t size() const { return size_; }
  bool allowed(std::size_t i, std::size_t j) const { return bits_[i * size_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { bits_[i * size_ + j] = value ? 1 : 0; }
  const std::uint8_t* row(std::size_t i) const { return bits_.data() + i * size_; }

 private:
  std::size_t size_ = 0;
  std::vector<std::uint8_t> bits_;
};

template <typename T>
class Graph;

// Handle to a value recorded on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Dynamic reverse-mode tape. Nodes are appended in execution order, so the tape is
// already topologically sorted; backward() walks it once in reverse and then frees it.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf bound to an external parameter. Gradients are accumulated into p.grad()
  // when p.requires_grad(). Repeated calls with the same tensor return the same leaf.
  Var<T> parameter(Tensor<T>& p);
  Var<T> constant(Tensor<T> value);
  // Leaf that reads an external tensor without copying it and never receives gradients.
  Var<T> constant_ref(const Tensor<T>& value);

  const Tensor<T>& value(Var<T> v) const;
  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Runs reverse accumulation from a scalar loss and releases the tape.
  // Returns the loss value. A second call throws ContractError.
  T backward(Var<T> loss);

  // --- op-implementation interface ---
  using Backprop = std::function<void(std::span<const T>)>;
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backprop backprop);
  // Output gradient buffer of a node (allocated on first use).
  std::vector<T>& grad(Var<T> v);
  // Convenience: gradient buffer or nullptr when the node does not need one.
  T* grad_if_needed(Var<T> v);

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    Tensor<T>* param = nullptr;
    const Tensor<T>* ref = nullptr;
    Backprop backprop;
  };

  void check_live() const;

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_index_;
  bool consumed_ = false;
};

// ---- operations -------------------------------------------------------------

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
// x: [m x n], bias: [n]
template <typename T> Var<T> add_bias(Var<T> x, Var<T> bias);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
// tanh approximation
template <typename T> Var<T> gelu(Var<T> x);
// Normalizes each row over the last axis, then applies gain * x_hat + bias.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps);
template <typename T> Var<T> embedding_lookup(Var<T> table, std::span<const int> ids);
// Inverted dropout; identity when rate == 0.
template <typename T> Var<T> dropout(Var<T> x, T rate, std::mt19937_64& rng);
// x: [T x T] or [h x T x T]; masked entries get -inf before normalization.
template <typename T> Var<T> masked_softmax_rows(Var<T> x, const AttentionMask& mask);
// qkv: [batch*seq_len x 3*d] packed per row as (q | k | v). Each sequence b has
// lengths[b] real positions; keys beyond that are padding and never attended.
// Returns [batch*seq_len x d].
template <typename T>
Var<T> multi_head_attention(Var<T> qkv, std::span<const std::size_t> lengths, std::size_t seq_len,
                            std::size_t n_heads, bool causal);
template <typename T> Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows);
// Weighted multi-label BCE on logits [N x C]:
//   sum_r row_weight[r] * (1/C) * sum_c class_weight[c] * BCE(target[r,c], sigmoid(logit[r,c]))
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets, std::span<const T> row_weights,
                       std::span<const T> class_weights);

// Numerically stable scalar sigmoid (branches on sign).
template <typename T>
T stable_sigmoid(T x);

// Softmax of one row restricted to `allowed` entries; disallowed outputs are exactly 0.
// Throws ContractError when no entry is allowed.
template <typename T>
void softmax_masked_row(const T* in, const std::uint8_t* allowed, T* out, std::size_t n);

}  // namespace evolve
