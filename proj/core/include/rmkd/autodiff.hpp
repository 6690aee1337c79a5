#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "rmkd/tensor.hpp"

namespace rmkd {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Append-only tape. Every node's inputs precede it; backward visits nodes once
// in reverse append order. Nodes are only created through constant(),
// parameter() and the ops below.
class Graph {
 public:
  // Receives the graph, the finished gradient of the node and its value.
  using BackwardFn = std::function<void(Graph&, const Tensor& grad, const Tensor& value)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Appends an op result. The node participates in backward when any input
  // requires grad; otherwise `backward` is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  // Clears previous gradients, seeds d(loss)/d(loss) = 1 and propagates.
  void backward(Var loss);

  // Gradient of a node after backward(); all zeros when nothing reached it.
  Tensor grad(Var v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator for node `id`, allocated on first touch.
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor grad;
  };
  std::deque<Node> nodes_;
};

// Broadcasting is limited to equal rank where any axis of size 1 stretches.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var exp(Var a);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

// Softmax over the last axis with max subtraction.
Var softmax(Var x);

inline constexpr double kLayerNormEpsilon = 1e-5;
// Per-row normalization over the last axis; gain and bias hold d elements.
Var layer_norm(Var x, Var gain, Var bias);

// x: [T x c_in], kernels: [k x c_in x c_out], odd k, zero "same" padding.
Var conv1d(Var x, Var kernels);

Var sum(Var a);
// [rows x cols] -> [1 x cols]
Var mean_rows(Var a);
Var mse(Var a, Var b);
// Sum of squared differences over rows whose mask entry is nonzero.
// Pass an empty mask to include every row.
Var squared_error_sum(Var a, Var b, std::span<const double> row_mask = {});

// Gathers rows of `table` ([V x d]) by id.
Var embedding(Var table, std::span<const std::uint32_t> ids);
// Repeats row i of h `repeats[i]` times, dropping zero-count rows.
Var repeat_rows(Var h, std::span<const std::uint32_t> repeats);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
// Appends zero rows so that the result has `rows` rows.
Var pad_rows(Var a, std::size_t rows);
Var concat_cols(std::span<const Var> parts);

// Inverted dropout with a mask drawn from `seed`. rate == 0 returns `a`.
Var dropout(Var a, double rate, std::uint64_t seed);

}  // namespace rmkd
