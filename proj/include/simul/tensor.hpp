#pragma once

// Dense 2-D float64 tensors with reverse-mode automatic differentiation.
//
// Every tensor is a rows x cols matrix (scalars are 1x1). Differentiation is
// define-by-run: while a Tape is alive on the current thread, operations on
// tensors that require gradients (or derive from ones that do) are recorded,
// and Tape::backward replays them in reverse. Tapes are rebuilt every forward
// pass. A tape and the tensors recorded on it are confined to one thread;
// independent tapes on different threads do not share state.

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace simul {

class Tape;

namespace detail {
struct TensorImpl {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
  bool requires_grad = false;
  // Leaf gradient, allocated on first registration with a tape.
  std::shared_ptr<std::vector<double>> grad;
  // Cache of this tensor's node on the most recent tape that saw it.
  Tape* tape = nullptr;
  std::uint64_t tape_epoch = 0;
  int node = -1;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(int rows, int cols);
  static Tensor full(int rows, int cols, double value);
  static Tensor scalar(double value) { return full(1, 1, value); }
  static Tensor from_data(int rows, int cols, std::vector<double> data);
  /// Gaussian init, N(0, stddev^2), drawn row-major from `rng`.
  static Tensor randn(int rows, int cols, std::mt19937_64& rng, double stddev = 1.0);

  int rows() const { return impl_->rows; }
  int cols() const { return impl_->cols; }
  long numel() const { return static_cast<long>(impl_->rows) * impl_->cols; }
  std::vector<int> shape() const { return {impl_->rows, impl_->cols}; }

  double at(int r, int c) const { return impl_->data[static_cast<size_t>(r) * impl_->cols + c]; }
  /// Value of a 1x1 tensor.
  double value() const;

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access. Intended for leaf setup and optimizer updates
  /// between tapes; mutating a tensor already recorded on a live tape is
  /// undefined.
  std::span<double> mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  /// Accumulated leaf gradient (zeros if backward never reached this leaf).
  Tensor grad() const;
  bool has_grad() const { return impl_->grad != nullptr; }
  void zero_grad();

  /// Deep copy, detached from any tape, requires_grad off.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Reverse-mode tape. Constructing one makes it the active tape for the
/// current thread (previous tape is restored on destruction, so scopes nest).
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  /// Backpropagates from a 1x1 loss recorded on this tape. Populates the
  /// leaf gradients of every requires_grad tensor reachable from the loss;
  /// registered leaves that the loss does not depend on keep zero gradients.
  /// Calling backward twice on one tape is an error.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }

  struct OpRecord;
  using BackwardFn = void (*)(Tape&, const OpRecord&);

  struct OpRecord {
    std::shared_ptr<detail::TensorImpl> out;
    std::vector<int> inputs;  // node ids, -1 for untracked constants
    std::vector<std::shared_ptr<detail::TensorImpl>> saved;
    std::vector<double> scratch;  // op-specific saved values (masks, ids, params)
    BackwardFn backward = nullptr;
    std::vector<double> grad;  // d(loss)/d(out), allocated during backward
    bool is_leaf = false;
  };

  /// Records an op node and tags `out` with it. Returns the node id.
  int record(const Tensor& out, std::vector<int> inputs,
             std::vector<std::shared_ptr<detail::TensorImpl>> saved,
             std::vector<double> scratch, BackwardFn fn);

  /// Node id of `t` on this tape; registers a leaf node if `t` requires
  /// gradients and has none yet. Returns -1 for plain constants.
  int node_of(const Tensor& t);

  /// Gradient buffer for node `id`, zero-initialized to `n` on first access.
  std::vector<double>& grad_buf(int id, std::size_t n);

 private:
  std::vector<OpRecord> nodes_;
  bool backward_done_ = false;
  std::uint64_t epoch_;
  Tape* prev_ = nullptr;
};

// ---- elementwise and scalar ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, const Tensor& b);
/// s - a, elementwise.
Tensor rsub(double s, const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double s);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
/// Adds a 1 x n row vector to every row of an m x n matrix.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp_(const Tensor& x);
/// Natural log; throws std::domain_error on non-positive entries.
Tensor log_(const Tensor& x);
Tensor sqrt_(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor clamp_min(const Tensor& x, double lo);
/// Elementwise max; gradient follows the larger side (ties go to `a`).
Tensor maximum(const Tensor& a, const Tensor& b);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- reductions and scans ----
Tensor sum(const Tensor& x);   // 1x1
Tensor mean(const Tensor& x);  // 1x1
/// axis 0: column sums (1 x n); axis 1: row sums (m x 1).
Tensor sum_axis(const Tensor& x, int axis);
/// Running sums along each row. Exclusive form shifts by one (first entry 0).
Tensor cumsum_rows(const Tensor& x, bool exclusive = false);

// ---- normalization ----
/// Normalizes so slices along `axis` sum to 1 (axis 1: each row; axis 0: each
/// column). Max-subtracted for stability.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
/// Per-row layer norm with learned 1 x n gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- structural ----
Tensor row(const Tensor& x, int r);                       // 1 x cols view-copy
Tensor slice_rows(const Tensor& x, int r0, int nrows);
Tensor slice_cols(const Tensor& x, int c0, int ncols);
Tensor stack_rows(std::span<const Tensor> parts);         // vertical concat
Tensor concat_cols(std::span<const Tensor> parts);        // horizontal concat
/// Interleaves H same-shape m x n matrices into m x (n*H):
/// out[i, j*H + h] = parts[h][i, j].
Tensor interleave_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, int rows, int cols);

// ---- lookup / regularization ----
/// Gathers rows of `table` (vocab x dim) by id. Out-of-range ids throw.
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// Inverted dropout; identity when `training` is false or p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training);

/// Value-identical tensor through which backward propagates nothing.
Tensor detach(const Tensor& x);

// ---- composites ----
/// Frobenius norm, guarded so the gradient stays finite near zero.
Tensor l2_norm(const Tensor& x);
/// Mean over rows of label-smoothed cross entropy between `logits` (n x V)
/// and integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double label_smoothing);

/// Backward through the tape `loss` was recorded on.
void backward(const Tensor& loss);

std::string shape_str(const Tensor& t);

}  // namespace simul
