#include "rmkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rmkd/error.hpp"
#include "rmkd/rng.hpp"

namespace rmkd {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.graph() != this) throw ContractError("op inputs belong to different graphs");
    needs = needs || requires_grad(in.id());
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : BackwardFn{}, {}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw ContractError("loss belongs to a different graph");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, n.grad, n.value);
  }
}

namespace {

// Compensated summation for scalar reductions. The loss feeds finite
// differences, so its rounding error has to stay near one ulp.
class NeumaierSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    comp_ += std::abs(sum_) >= std::abs(v) ? (sum_ - t) + v : (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Maps output flat index -> input flat indices under size-1 stretching.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride, b_stride, out_dims;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const std::size_t r = a.size();
  p.out.resize(r);
  p.a_stride.resize(r);
  p.b_stride.resize(r);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    }
    p.out[i] = std::max(a[i], b[i]);
    p.a_stride[i] = a[i] == 1 ? 0 : sa;
    p.b_stride[i] = b[i] == 1 ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const std::size_t n = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      ia += p.a_stride[ax];
      ib += p.b_stride[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.a_stride[ax] * idx[ax];
      ib -= p.b_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

template <typename Forward, typename GradA, typename GradB>
Var binary(Var a, Var b, const char* name, Forward f, GradA ga, GradB gb) {
  Broadcast p = plan_broadcast(a.shape(), b.shape(), name);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor out(p.out);
  for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(av[i], bv[j]); });
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [p, ia, ib, ga, gb](Graph& g, const Tensor& grad, const Tensor&) {
    const Tensor& x = g.value(ia);
    const Tensor& y = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& dx = g.grad_buffer(ia);
      for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { dx[i] += ga(grad[o], x[i], y[j]); });
    }
    if (g.requires_grad(ib)) {
      Tensor& dy = g.grad_buffer(ib);
      for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { dy[j] += gb(grad[o], x[i], y[j]); });
    }
  });
}

void require_rank2(const Var& v, const char* op) {
  if (v.shape().size() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(v.shape()));
  }
}

// out[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      if (s == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      out[i * k + p] += acc;
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      if (s == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * grow[j];
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= factor;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, factor](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < grad.numel(); ++i) dx[i] += factor * grad[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia](Graph& g, const Tensor& grad, const Tensor&) {
    const Tensor& x = g.value(ia);
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      if (x[i] > 0.0) dx[i] += grad[i];
    }
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::exp(v);
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia](Graph& g, const Tensor& grad, const Tensor& y) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < grad.numel(); ++i) dx[i] += grad[i] * y[i];
  });
}

Var matmul(Var a, Var b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n}, 0.0);
  gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib, m, k, n](Graph& g, const Tensor& grad, const Tensor&) {
    if (g.requires_grad(ia)) {
      gemm_nt(grad.data().data(), g.value(ib).data().data(), g.grad_buffer(ia).data().data(), m, n, k);
    }
    if (g.requires_grad(ib)) {
      gemm_tn(g.value(ia).data().data(), grad.data().data(), g.grad_buffer(ib).data().data(), m, k, n);
    }
  });
}

Var transpose(Var a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  const Tensor& x = a.value();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, r, c](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += grad[j * r + i];
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < grad.numel(); ++i) dx[i] += grad[i];
  });
}

Var softmax(Var x) {
  const Tensor& in = x.value();
  const std::size_t rows = in.rows(), cols = in.cols();
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = in.row(r);
    auto dst = out.row(r);
    const double mx = *std::max_element(src.begin(), src.end());
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = std::exp(src[c] - mx);
      total += dst[c];
    }
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix, rows, cols](Graph& g, const Tensor& grad, const Tensor& s) {
    Tensor& dx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += grad[r * cols + c] * s[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        dx[r * cols + c] += s[r * cols + c] * (grad[r * cols + c] - dot);
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias) {
  const Tensor& in = x.value();
  const std::size_t rows = in.rows(), d = in.cols();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match feature size " + std::to_string(d));
  }
  Tensor normalized(in.shape());
  std::vector<double> inv_std(rows);
  Tensor out(in.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = in.row(r);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : src) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (src[c] - mean) * inv_std[r];
      normalized[r * d + c] = xh;
      out[r * d + c] = gv[c] * xh + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](Graph& g, const Tensor& grad,
                                                                                             const Tensor&) {
        const Tensor& gv = g.value(ig);
        if (g.requires_grad(ix)) {
          Tensor& dx = g.grad_buffer(ix);
          std::vector<double> dxh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dxh[c] = grad[r * d + c] * gv[c];
              mean_dxh += dxh[c];
              mean_dxh_xh += dxh[c] * normalized[r * d + c];
            }
            mean_dxh /= static_cast<double>(d);
            mean_dxh_xh /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              dx[r * d + c] += inv_std[r] * (dxh[c] - mean_dxh - normalized[r * d + c] * mean_dxh_xh);
            }
          }
        }
        if (g.requires_grad(ig)) {
          Tensor& dg = g.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) dg[c] += grad[r * d + c] * normalized[r * d + c];
        }
        if (g.requires_grad(ib)) {
          Tensor& db = g.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) db[c] += grad[r * d + c];
        }
      });
}

Var conv1d(Var x, Var kernels) {
  require_rank2(x, "conv1d");
  const Shape& ks = kernels.shape();
  if (ks.size() != 3) throw DimensionError("conv1d: kernels must be [k x c_in x c_out], got " + shape_str(ks));
  const std::size_t k = ks[0], cin = ks[1], cout = ks[2];
  if (k % 2 == 0) throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(k));
  const std::size_t len = x.shape()[0];
  if (x.shape()[1] != cin) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " does not match kernels " + shape_str(ks));
  }
  const long pad = static_cast<long>(k / 2);
  const double* xv = x.value().data().data();
  const double* kv = kernels.value().data().data();
  Tensor out({len, cout}, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t t = 0; t < len; ++t) {
      const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
      if (src < 0 || src >= static_cast<long>(len)) continue;
      gemm_nn(xv + src * cin, kv + j * cin * cout, out.data().data() + t * cout, 1, cin, cout);
    }
  }
  const std::size_t ix = x.id(), ik = kernels.id();
  return x.graph().record(std::move(out), {x, kernels}, [ix, ik, k, cin, cout, len, pad](Graph& g, const Tensor& grad, const Tensor&) {
    const double* gv = grad.data().data();
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t t = 0; t < len; ++t) {
        const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
        if (src < 0 || src >= static_cast<long>(len)) continue;
        if (g.requires_grad(ix)) {
          gemm_nt(gv + t * cout, g.value(ik).data().data() + j * cin * cout,
                  g.grad_buffer(ix).data().data() + src * cin, 1, cout, cin);
        }
        if (g.requires_grad(ik)) {
          gemm_tn(g.value(ix).data().data() + src * cin, gv + t * cout,
                  g.grad_buffer(ik).data().data() + j * cin * cout, 1, cin, cout);
        }
      }
    }
  });
}

Var sum(Var a) {
  NeumaierSum total;
  for (double v : a.value().data()) total.add(v);
  const std::size_t ia = a.id();
  return a.graph().record(Tensor::scalar(total.value()), {a}, [ia](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (double& v : dx.storage()) v += grad[0];
  });
}

Var mean_rows(Var a) {
  const Tensor& in = a.value();
  const std::size_t rows = in.rows(), cols = in.cols();
  Tensor out({1, cols}, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += in[r * cols + c];
  for (double& v : out.storage()) v /= static_cast<double>(rows);
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, rows, cols](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += grad[c] / static_cast<double>(rows);
  });
}

Var squared_error_sum(Var a, Var b, std::span<const double> row_mask) {
  if (a.shape() != b.shape()) {
    throw DimensionError("squared error: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> mask(row_mask.begin(), row_mask.end());
  if (mask.empty()) mask.assign(rows, 1.0);
  if (mask.size() != rows) throw DimensionError("squared error: mask length does not match row count");
  NeumaierSum total;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = x[r * cols + c] - y[r * cols + c];
      total.add(d * d);
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(Tensor::scalar(total.value()), {a, b},
                          [ia, ib, rows, cols, mask = std::move(mask)](Graph& g, const Tensor& grad, const Tensor&) {
                            const Tensor& x = g.value(ia);
                            const Tensor& y = g.value(ib);
                            const bool ga = g.requires_grad(ia), gb = g.requires_grad(ib);
                            for (std::size_t r = 0; r < rows; ++r) {
                              if (mask[r] == 0.0) continue;
                              for (std::size_t c = 0; c < cols; ++c) {
                                const std::size_t i = r * cols + c;
                                const double d = 2.0 * (x[i] - y[i]) * grad[0];
                                if (ga) g.grad_buffer(ia)[i] += d;
                                if (gb) g.grad_buffer(ib)[i] -= d;
                              }
                            }
                          });
}

Var mse(Var a, Var b) {
  const double count = static_cast<double>(a.value().numel());
  return scale(squared_error_sum(a, b), 1.0 / count);
}

Var embedding(Var table, std::span<const std::uint32_t> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  Tensor out({ids.size(), d});
  const Tensor& tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data().data() + ids[i] * d, d, out.data().data() + i * d);
  }
  const std::size_t it = table.id();
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return table.graph().record(std::move(out), {table}, [it, d, saved = std::move(saved)](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dt = g.grad_buffer(it);
    for (std::size_t i = 0; i < saved.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) dt[saved[i] * d + c] += grad[i * d + c];
  });
}

Var repeat_rows(Var h, std::span<const std::uint32_t> repeats) {
  require_rank2(h, "repeat_rows");
  const std::size_t rows = h.shape()[0], d = h.shape()[1];
  if (repeats.size() != rows) {
    throw DimensionError("repeat_rows: " + std::to_string(repeats.size()) + " counts for " + std::to_string(rows) +
                         " rows");
  }
  std::size_t total = 0;
  for (auto r : repeats) total += r;
  if (total == 0) throw InputError("repeat_rows: all durations are zero (degenerate utterance)");
  Tensor out({total, d});
  const Tensor& hv = h.value();
  std::size_t o = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::uint32_t rep = 0; rep < repeats[i]; ++rep, ++o) {
      std::copy_n(hv.data().data() + i * d, d, out.data().data() + o * d);
    }
  }
  const std::size_t ih = h.id();
  std::vector<std::uint32_t> saved(repeats.begin(), repeats.end());
  return h.graph().record(std::move(out), {h}, [ih, d, saved = std::move(saved)](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dh = g.grad_buffer(ih);
    std::size_t o = 0;
    for (std::size_t i = 0; i < saved.size(); ++i) {
      for (std::uint32_t rep = 0; rep < saved[i]; ++rep, ++o)
        for (std::size_t c = 0; c < d; ++c) dh[i * d + c] += grad[o * d + c];
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (begin >= end || end > cols) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  const Tensor& x = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * cols + begin + c];
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, rows, cols, begin, w](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) dx[r * cols + begin + c] += grad[r * w + c];
  });
}

Var pad_rows(Var a, std::size_t rows) {
  require_rank2(a, "pad_rows");
  const std::size_t have = a.shape()[0], cols = a.shape()[1];
  if (rows < have) throw DimensionError("pad_rows: cannot shrink " + shape_str(a.shape()));
  if (rows == have) return a;
  Tensor out({rows, cols}, 0.0);
  std::copy(a.value().data().begin(), a.value().data().end(), out.data().begin());
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {a}, [ia, have, cols](Graph& g, const Tensor& grad, const Tensor&) {
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < have * cols; ++i) dx[i] += grad[i];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape().at(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.shape()[0] != rows) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.shape()[1]);
    cols += p.shape()[1];
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& x = parts[i].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[i]; ++c) out[r * cols + offset + c] = x[r * widths[i] + c];
    offset += widths[i];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].graph().record(std::move(out), parts, [ids, widths, rows, cols](Graph& g, const Tensor& grad, const Tensor&) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (g.requires_grad(ids[i])) {
        Tensor& dx = g.grad_buffer(ids[i]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[i]; ++c) dx[r * widths[i] + c] += grad[r * cols + offset + c];
      }
      offset += widths[i];
    }
  });
}

Var dropout(Var a, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (rate == 0.0) return a;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(a.shape());
  for (double& m : mask.storage()) m = rng.uniform() < rate ? 0.0 : keep_scale;
  return mul(a, a.graph().constant(std::move(mask)));
}

}  // namespace rmkd
