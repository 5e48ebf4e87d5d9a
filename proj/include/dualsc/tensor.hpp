#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualsc/rng.hpp"

namespace dualsc {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParamError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first touched
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float32 tensor. Cheap shared handle: copies alias the same
// storage. Values are treated as immutable once an op has produced them;
// parameter updates between steps mutate data() in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor uniform(std::vector<std::size_t> shape, float lo, float hi, SeededRng& rng,
                        bool requires_grad = false);
  static Tensor normal(std::vector<std::size_t> shape, float mean, float stddev, SeededRng& rng,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t numel() const { return node().data.size(); }

  std::vector<float>& data() { return node().data; }
  const std::vector<float>& data() const { return node().data; }

  // Lazily allocated, zero-filled. grad() on a leaf that never received a
  // gradient therefore reads as all zeros.
  std::vector<float>& grad();
  bool has_grad() const { return defined() && !node_->grad.empty(); }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool v) { node().requires_grad = v; }
  void zero_grad();

  float item() const;
  std::string shape_str() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  detail::TensorNode& node() {
    if (!node_) throw StateError("tensor is undefined");
    return *node_;
  }
  const detail::TensorNode& node() const {
    if (!node_) throw StateError("tensor is undefined");
    return *node_;
  }

  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape. Ops append records in execution order (so every input of
// a record was produced earlier or is a leaf) and backward() replays them once
// in reverse, after which the tape is consumed.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Thread-local active tape; ops record onto it while one is in scope.
  static Tape* active();

  void record(const char* op, Tensor output, std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and replays the records in reverse. Throws
  // ShapeError for a non-scalar loss and StateError on a consumed tape.
  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return records_.size(); }

 private:
  struct Record {
    const char* op;
    Tensor output;
    std::function<void()> backward_fn;
  };
  std::vector<Record> records_;
  bool consumed_ = false;

  friend class TapeScope;
};

// RAII guard making a tape the active one for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Convenience: backward on the active tape.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------
// Every op validates shapes, produces finite values (NaN/Inf raises
// NumericError) and records a backward closure when a tape is active and any
// input requires grad.

// [m,k]x[k,n] or batched with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// Equal shapes, or b rank-1 broadcast over the trailing dimension.
Tensor add(const Tensor& a, const Tensor& b);

// Elementwise product, equal shapes.
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float c);
Tensor relu(const Tensor& a);

// Inverted dropout: scales by 1/(1-p) at train time, identity in eval.
Tensor dropout(const Tensor& a, float p, SeededRng& rng, bool training);

Tensor transpose_last2(const Tensor& a);

// Numerically stabilized by max subtraction; each last-dim slice sums to 1.
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);

// Per-slice standardization followed by the gamma/beta affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

// Rows of the output copy table rows ids[i]; backward scatter-adds.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

// [L, H*Dh] -> [H, L, Dh] and back.
Tensor split_heads(const Tensor& x, std::size_t n_heads);
Tensor merge_heads(const Tensor& x);

// x [T,V], ids[T] -> [T]: out[t] = x[t, ids[t]].
Tensor take_per_row(const Tensor& x, const std::vector<int>& ids);

// Full reduction to a scalar (shape {1}).
Tensor sum_all(const Tensor& a);

}  // namespace dualsc
