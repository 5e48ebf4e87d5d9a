#include "dualsc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace dualsc {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void validate_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw ShapeError("empty shape");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_to_str(shape));
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

bool grad_needed(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Adds g into t's grad buffer.
void accum(Tensor t, const std::vector<float>& g) {
  auto& dst = t.grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

std::size_t leading_count(const std::vector<std::size_t>& shape, std::size_t trailing_dims) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing_dims < shape.size(); ++i) n *= shape[i];
  return n;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, float value, bool requires_grad) {
  validate_shape(shape);
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = std::move(shape);
  t.node_->data.assign(shape_numel(t.node_->shape), value);
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<float> data,
                         bool requires_grad) {
  validate_shape(shape);
  const std::size_t n = shape_numel(shape);
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = std::move(shape);
  if (data.empty()) {
    t.node_->data.assign(n, 0.0f);
  } else {
    if (data.size() != n) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_to_str(t.node_->shape));
    }
    t.node_->data = std::move(data);
  }
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(std::vector<std::size_t> shape, float lo, float hi, SeededRng& rng,
                       bool requires_grad) {
  validate_shape(shape);
  std::vector<float> data(shape_numel(shape));
  for (float& v : data) v = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::normal(std::vector<std::size_t> shape, float mean, float stddev, SeededRng& rng,
                      bool requires_grad) {
  validate_shape(shape);
  std::vector<float> data(shape_numel(shape));
  for (float& v : data) v = rng.normal(mean, stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

std::vector<float>& Tensor::grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

void Tensor::zero_grad() {
  if (defined() && !node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str());
  return data()[0];
}

std::string Tensor::shape_str() const { return shape_to_str(shape()); }

// ---- Tape ------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, Tensor output, std::function<void()> backward_fn) {
  if (consumed_) throw StateError("recording onto a consumed tape");
  records_.push_back(Record{op, std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw StateError("backward on a consumed tape");
  if (records_.empty()) throw StateError("backward on an empty tape");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + loss.shape_str());
  }
  consumed_ = true;
  Tensor seed = loss;
  seed.grad()[0] += 1.0f;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    // Records whose output never received a gradient cannot contribute.
    if (!it->output.has_grad()) continue;
    it->backward_fn();
  }
  records_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw StateError("backward called with no active tape");
  t->backward(loss);
}

// ---- ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + a.shape_str() + " x " + b.shape_str());
  }
  if (a.rank() != b.rank()) {
    throw ShapeError("matmul rank mismatch: " + a.shape_str() + " x " + b.shape_str());
  }
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::size_t k2 = b.dim(r - 2), n = b.dim(r - 1);
  if (k != k2) {
    throw ShapeError("matmul inner dimension mismatch: " + a.shape_str() + " x " + b.shape_str());
  }
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError("matmul batch dimension mismatch: " + a.shape_str() + " x " +
                       b.shape_str());
    }
  }
  std::vector<std::size_t> out_shape(a.shape());
  out_shape[r - 1] = n;
  const std::size_t batches = leading_count(a.shape(), 2);

  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    ConstMapMat A(a.data().data() + bi * m * k, m, k);
    ConstMapMat B(b.data().data() + bi * k * n, k, n);
    MapMat C(out.data().data() + bi * m * n, m, n);
    C.noalias() = A * B;
  }
  check_finite(out, "matmul");

  if (grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record("matmul", out, [ta, tb, to, batches, m, k, n]() mutable {
      const auto& go = to.grad();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        for (std::size_t bi = 0; bi < batches; ++bi) {
          ConstMapMat G(go.data() + bi * m * n, m, n);
          ConstMapMat B(tb.data().data() + bi * k * n, k, n);
          MapMat GA(ga.data() + bi * m * k, m, k);
          GA.noalias() += G * B.transpose();
        }
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (std::size_t bi = 0; bi < batches; ++bi) {
          ConstMapMat G(go.data() + bi * m * n, m, n);
          ConstMapMat A(ta.data().data() + bi * m * k, m, k);
          MapMat GB(gb.data() + bi * k * n, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast = b.rank() == 1 && a.rank() > 1 && b.dim(0) == a.shape().back();
  if (!broadcast && a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  if (broadcast) {
    const std::size_t d = b.dim(0);
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i % d];
  } else {
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  }
  check_finite(out, "add");

  if (grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record("add", out, [ta, tb, to, broadcast]() mutable {
      const auto& go = to.grad();
      if (ta.requires_grad()) accum(ta, go);
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        if (broadcast) {
          const std::size_t d = gb.size();
          for (std::size_t i = 0; i < go.size(); ++i) gb[i % d] += go[i];
        } else {
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");

  if (grad_needed({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record("mul", out, [ta, tb, to]() mutable {
      const auto& go = to.grad();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * tb.data()[i];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ta.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  check_finite(out, "scale");
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("scale", out, [ta, to, c]() mutable {
      const auto& go = to.grad();
      auto& ga = ta.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > 0.0f ? a.data()[i] : 0.0f;
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("relu", out, [ta, to]() mutable {
      const auto& go = to.grad();
      auto& ga = ta.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (ta.data()[i] > 0.0f) ga[i] += go[i];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& a, float p, SeededRng& rng, bool training) {
  if (p < 0.0f || p >= 1.0f) throw ParamError("dropout p must be in [0,1)");
  if (!training || p == 0.0f) return a;
  const float inv_keep = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<float>>(a.numel());
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const float m = rng.next_unit() >= p ? inv_keep : 0.0f;
    (*mask)[i] = m;
    out.data()[i] = a.data()[i] * m;
  }
  check_finite(out, "dropout");
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("dropout", out, [ta, to, mask]() mutable {
      const auto& go = to.grad();
      auto& ga = ta.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + a.shape_str());
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2), n = a.dim(r - 1);
  std::vector<std::size_t> out_shape(a.shape());
  std::swap(out_shape[r - 2], out_shape[r - 1]);
  const std::size_t batches = leading_count(a.shape(), 2);
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const float* src = a.data().data() + bi * m * n;
    float* dst = out.data().data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("transpose_last2", out, [ta, to, batches, m, n]() mutable {
      const auto& go = to.grad();
      auto& ga = ta.grad();
      for (std::size_t bi = 0; bi < batches; ++bi) {
        const float* g = go.data() + bi * m * n;
        float* dst = ga.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

namespace {

// Shared softmax body; writes probabilities into out.
void softmax_rows(const std::vector<float>& in, std::vector<float>& out, std::size_t rows,
                  std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = in.data() + r * d;
    float* y = out.data() + r * d;
    float mx = x[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  }
}

}  // namespace

Tensor softmax_lastdim(const Tensor& a) {
  const std::size_t d = a.shape().back();
  if (d == 0) throw ShapeError("softmax over empty last dim");
  const std::size_t rows = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape());
  softmax_rows(a.data(), out.data(), rows, d);
  check_finite(out, "softmax_lastdim");
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("softmax_lastdim", out, [ta, to, rows, d]() mutable {
      const auto& go = to.grad();
      const auto& y = to.data();
      auto& ga = ta.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += go[r * d + j] * y[r * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          ga[r * d + j] += y[r * d + j] * (go[r * d + j] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& a) {
  const std::size_t d = a.shape().back();
  if (d == 0) throw ShapeError("log_softmax over empty last dim");
  const std::size_t rows = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = a.data().data() + r * d;
    float* y = out.data().data() + r * d;
    float mx = x[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
    const float lse = mx + static_cast<float>(std::log(sum));
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - lse;
  }
  check_finite(out, "log_softmax_lastdim");
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("log_softmax_lastdim", out, [ta, to, rows, d]() mutable {
      const auto& go = to.grad();
      const auto& y = to.data();
      auto& ga = ta.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < d; ++j) gsum += go[r * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          ga[r * d + j] += go[r * d + j] - std::exp(y[r * d + j]) * static_cast<float>(gsum);
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (eps <= 0.0f) throw ParamError("layer_norm eps must be > 0");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm affine size mismatch: x " + x.shape_str() + ", gamma " +
                     gamma.shape_str() + ", beta " + beta.shape_str());
  }
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_sigma = std::make_shared<std::vector<float>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= d;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_sigma)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const float xh = (xr[j] - static_cast<float>(mean)) * is;
      (*xhat)[r * d + j] = xh;
      out.data()[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  check_finite(out, "layer_norm");

  if (grad_needed({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, to = out;
    Tape::active()->record("layer_norm", out, [tx, tg, tb, to, xhat, inv_sigma, rows, d]() mutable {
      const auto& go = to.grad();
      if (tg.requires_grad()) {
        auto& gg = tg.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += go[r * d + j] * (*xhat)[r * d + j];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
      }
      if (tx.requires_grad()) {
        auto& gx = tx.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(go[r * d + j]) * tg.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * (*xhat)[r * d + j];
          }
          mean_dxhat /= d;
          mean_dxhat_xhat /= d;
          const float is = (*inv_sigma)[r];
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(go[r * d + j]) * tg.data()[j];
            gx[r * d + j] += static_cast<float>(
                is * (dxh - mean_dxhat - (*xhat)[r * d + j] * mean_dxhat_xhat));
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + table.shape_str());
  if (ids.empty()) throw ShapeError("embedding_lookup with empty id sequence");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding id " + std::to_string(ids[i]) + " out of range [0," +
                       std::to_string(v) + ") at position " + std::to_string(i));
    }
  }
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float* src = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  if (grad_needed({&table})) {
    out.set_requires_grad(true);
    Tensor tt = table, to = out;
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    Tape::active()->record("embedding_lookup", out, [tt, to, ids_copy, d]() mutable {
      const auto& go = to.grad();
      auto& gt = tt.grad();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        float* dst = gt.data() + static_cast<std::size_t>((*ids_copy)[i]) * d;
        const float* g = go.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

Tensor split_heads(const Tensor& x, std::size_t n_heads) {
  if (x.rank() != 2) throw ShapeError("split_heads expects rank 2, got " + x.shape_str());
  const std::size_t len = x.dim(0), d = x.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("split_heads: dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  Tensor out = Tensor::zeros({n_heads, len, hd});
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < hd; ++j)
        out.data()[(h * len + l) * hd + j] = x.data()[l * d + h * hd + j];
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record("split_heads", out, [tx, to, n_heads, len, d, hd]() mutable {
      const auto& go = to.grad();
      auto& gx = tx.grad();
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t j = 0; j < hd; ++j)
            gx[l * d + h * hd + j] += go[(h * len + l) * hd + j];
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("merge_heads expects rank 3, got " + x.shape_str());
  const std::size_t n_heads = x.dim(0), len = x.dim(1), hd = x.dim(2);
  const std::size_t d = n_heads * hd;
  Tensor out = Tensor::zeros({len, d});
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < hd; ++j)
        out.data()[l * d + h * hd + j] = x.data()[(h * len + l) * hd + j];
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record("merge_heads", out, [tx, to, n_heads, len, d, hd]() mutable {
      const auto& go = to.grad();
      auto& gx = tx.grad();
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t j = 0; j < hd; ++j)
            gx[(h * len + l) * hd + j] += go[l * d + h * hd + j];
    });
  }
  return out;
}

Tensor take_per_row(const Tensor& x, const std::vector<int>& ids) {
  if (x.rank() != 2) throw ShapeError("take_per_row expects rank 2, got " + x.shape_str());
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (ids.size() != rows) {
    throw ShapeError("take_per_row id count " + std::to_string(ids.size()) +
                     " != row count " + std::to_string(rows));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cols) {
      throw IndexError("take_per_row id " + std::to_string(ids[i]) + " out of range [0," +
                       std::to_string(cols) + ") at row " + std::to_string(i));
    }
  }
  Tensor out = Tensor::zeros({rows});
  for (std::size_t i = 0; i < rows; ++i)
    out.data()[i] = x.data()[i * cols + static_cast<std::size_t>(ids[i])];
  if (grad_needed({&x})) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    Tape::active()->record("take_per_row", out, [tx, to, ids_copy, cols]() mutable {
      const auto& go = to.grad();
      auto& gx = tx.grad();
      for (std::size_t i = 0; i < ids_copy->size(); ++i)
        gx[i * cols + static_cast<std::size_t>((*ids_copy)[i])] += go[i];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  check_finite(out, "sum_all");
  if (grad_needed({&a})) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record("sum_all", out, [ta, to]() mutable {
      const float g = to.grad()[0];
      auto& ga = ta.grad();
      for (float& v : ga) v += g;
    });
  }
  return out;
}

}  // namespace dualsc
