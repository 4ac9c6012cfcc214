#include "simul/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace simul {

namespace {

using detail::TensorImpl;

std::atomic<std::uint64_t> g_tape_epoch{0};
thread_local Tape* g_current_tape = nullptr;

void ensure_valid(const Tensor& t, const char* op) {
  if (t.rows() < 1 || t.cols() < 1)
    throw std::invalid_argument(std::string(op) + ": tensor is empty");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  ensure_valid(a, op);
  ensure_valid(b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

Tensor make_tensor(int rows, int cols) {
  if (rows < 1 || cols < 1)
    throw std::invalid_argument("tensor dimensions must be positive, got " +
                                std::to_string(rows) + "x" + std::to_string(cols));
  Tensor t;
  t.impl_->rows = rows;
  t.impl_->cols = cols;
  t.impl_->data.assign(static_cast<size_t>(rows) * cols, 0.0);
  return t;
}

// Records `out` on the active tape if any input is tracked. Inputs that do
// not require gradients get node id -1; their values, when the backward rule
// needs them, must be passed through `saved`.
void record_op(Tensor& out, std::initializer_list<const Tensor*> ins,
               std::vector<std::shared_ptr<TensorImpl>> saved, std::vector<double> scratch,
               Tape::BackwardFn fn) {
  Tape* tape = Tape::current();
  if (tape == nullptr) return;
  bool tracked = false;
  for (const Tensor* t : ins) tracked = tracked || t->requires_grad();
  if (!tracked) return;
  std::vector<int> input_ids;
  input_ids.reserve(ins.size());
  for (const Tensor* t : ins) input_ids.push_back(tape->node_of(*t));
  tape->record(out, std::move(input_ids), std::move(saved), std::move(scratch), fn);
}

void accumulate(Tape& tape, int node, const double* g, size_t n) {
  if (node < 0) return;
  auto& buf = tape.grad_buf(node, n);
  for (size_t i = 0; i < n; ++i) buf[i] += g[i];
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "(" << t.rows() << "x" << t.cols() << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(int rows, int cols) { return make_tensor(rows, cols); }

Tensor Tensor::full(int rows, int cols, double value) {
  Tensor t = make_tensor(rows, cols);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(int rows, int cols, std::vector<double> data) {
  if (static_cast<long>(data.size()) != static_cast<long>(rows) * cols)
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for a " + std::to_string(rows) + "x" +
                                std::to_string(cols) + " tensor");
  Tensor t = make_tensor(rows, cols);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::randn(int rows, int cols, std::mt19937_64& rng, double stddev) {
  Tensor t = make_tensor(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.impl_->data) v = dist(rng);
  return t;
}

double Tensor::value() const {
  if (numel() != 1)
    throw std::logic_error("value: tensor is " + shape_str(*this) + ", not a scalar");
  return impl_->data[0];
}

Tensor Tensor::grad() const {
  Tensor g = make_tensor(std::max(rows(), 1), std::max(cols(), 1));
  if (impl_->grad) g.impl_->data = *impl_->grad;
  return g;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(std::max(rows(), 1), std::max(cols(), 1));
  t.impl_->data = impl_->data;
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : epoch_(++g_tape_epoch) {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

int Tape::node_of(const Tensor& t) {
  auto& impl = *t.impl_;
  if (impl.tape == this && impl.tape_epoch == epoch_) return impl.node;
  if (!impl.requires_grad) return -1;
  // First encounter of a tracked leaf on this tape.
  OpRecord rec;
  rec.out = t.impl_;
  rec.is_leaf = true;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(rec));
  if (!impl.grad) impl.grad = std::make_shared<std::vector<double>>(t.numel(), 0.0);
  impl.tape = this;
  impl.tape_epoch = epoch_;
  impl.node = id;
  return id;
}

int Tape::record(const Tensor& out, std::vector<int> inputs,
                 std::vector<std::shared_ptr<TensorImpl>> saved, std::vector<double> scratch,
                 BackwardFn fn) {
  OpRecord rec;
  rec.out = out.impl_;
  rec.inputs = std::move(inputs);
  rec.saved = std::move(saved);
  rec.scratch = std::move(scratch);
  rec.backward = fn;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(rec));
  out.impl_->requires_grad = true;
  out.impl_->tape = this;
  out.impl_->tape_epoch = epoch_;
  out.impl_->node = id;
  return id;
}

std::vector<double>& Tape::grad_buf(int id, std::size_t n) {
  auto& g = nodes_[static_cast<size_t>(id)].grad;
  if (g.size() != n) g.assign(n, 0.0);
  return g;
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) throw std::logic_error("backward already called on this tape");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss));
  const auto& impl = *loss.impl_;
  if (impl.tape != this || impl.tape_epoch != epoch_)
    throw std::logic_error("backward: loss was not recorded on the active tape");
  backward_done_ = true;
  grad_buf(impl.node, 1)[0] = 1.0;
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    OpRecord& rec = nodes_[static_cast<size_t>(i)];
    if (rec.grad.empty()) continue;
    if (rec.is_leaf) {
      auto& sink = *rec.out->grad;
      for (size_t k = 0; k < sink.size(); ++k) sink[k] += rec.grad[k];
    } else if (rec.backward != nullptr) {
      rec.backward(*this, rec);
    }
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

static void add_bw(Tape& tape, const Tape::OpRecord& rec) {
  accumulate(tape, rec.inputs[0], rec.grad.data(), rec.grad.size());
  accumulate(tape, rec.inputs[1], rec.grad.data(), rec.grad.size());
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  const auto& bv = b.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  record_op(out, {&a, &b}, {}, {}, add_bw);
  return out;
}

static void identity_bw(Tape& tape, const Tape::OpRecord& rec) {
  accumulate(tape, rec.inputs[0], rec.grad.data(), rec.grad.size());
}

Tensor add(const Tensor& a, double s) {
  ensure_valid(a, "add");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
  record_op(out, {&a}, {}, {}, identity_bw);
  return out;
}

static void sub_bw(Tape& tape, const Tape::OpRecord& rec) {
  accumulate(tape, rec.inputs[0], rec.grad.data(), rec.grad.size());
  if (rec.inputs[1] >= 0) {
    auto& gb = tape.grad_buf(rec.inputs[1], rec.grad.size());
    for (size_t i = 0; i < rec.grad.size(); ++i) gb[i] -= rec.grad[i];
  }
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  const auto& bv = b.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  record_op(out, {&a, &b}, {}, {}, sub_bw);
  return out;
}

static void neg_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  auto& ga = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) ga[i] -= rec.grad[i];
}

Tensor rsub(double s, const Tensor& a) {
  ensure_valid(a, "rsub");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = s - av[i];
  record_op(out, {&a}, {}, {}, neg_bw);
  return out;
}

Tensor neg(const Tensor& a) {
  ensure_valid(a, "neg");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = -av[i];
  record_op(out, {&a}, {}, {}, neg_bw);
  return out;
}

static void mul_bw(Tape& tape, const Tape::OpRecord& rec) {
  const auto& av = rec.saved[0]->data;
  const auto& bv = rec.saved[1]->data;
  const size_t n = rec.grad.size();
  if (rec.inputs[0] >= 0) {
    auto& ga = tape.grad_buf(rec.inputs[0], n);
    for (size_t i = 0; i < n; ++i) ga[i] += rec.grad[i] * bv[i];
  }
  if (rec.inputs[1] >= 0) {
    auto& gb = tape.grad_buf(rec.inputs[1], n);
    for (size_t i = 0; i < n; ++i) gb[i] += rec.grad[i] * av[i];
  }
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  const auto& bv = b.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  record_op(out, {&a, &b}, {a.impl_, b.impl_}, {}, mul_bw);
  return out;
}

static void scale_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const double s = rec.scratch[0];
  auto& ga = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) ga[i] += s * rec.grad[i];
}

Tensor mul(const Tensor& a, double s) {
  ensure_valid(a, "mul");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  record_op(out, {&a}, {}, {s}, scale_bw);
  return out;
}

static void div_bw(Tape& tape, const Tape::OpRecord& rec) {
  const auto& av = rec.saved[0]->data;
  const auto& bv = rec.saved[1]->data;
  const size_t n = rec.grad.size();
  if (rec.inputs[0] >= 0) {
    auto& ga = tape.grad_buf(rec.inputs[0], n);
    for (size_t i = 0; i < n; ++i) ga[i] += rec.grad[i] / bv[i];
  }
  if (rec.inputs[1] >= 0) {
    auto& gb = tape.grad_buf(rec.inputs[1], n);
    for (size_t i = 0; i < n; ++i) gb[i] -= rec.grad[i] * av[i] / (bv[i] * bv[i]);
  }
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  const auto& bv = b.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  record_op(out, {&a, &b}, {a.impl_, b.impl_}, {}, div_bw);
  return out;
}

static void add_rowvec_bw(Tape& tape, const Tape::OpRecord& rec) {
  const int m = rec.out->rows, n = rec.out->cols;
  accumulate(tape, rec.inputs[0], rec.grad.data(), rec.grad.size());
  if (rec.inputs[1] >= 0) {
    auto& gv = tape.grad_buf(rec.inputs[1], static_cast<size_t>(n));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gv[static_cast<size_t>(j)] += rec.grad[static_cast<size_t>(i) * n + j];
  }
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  ensure_valid(x, "add_rowvec");
  if (v.rows() != 1 || v.cols() != x.cols())
    throw std::invalid_argument("add_rowvec: vector " + shape_str(v) +
                                " does not match matrix " + shape_str(x));
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  const auto& vv = v.impl_->data;
  auto& ov = out.impl_->data;
  const int n = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < n; ++j)
      ov[static_cast<size_t>(i) * n + j] = xv[static_cast<size_t>(i) * n + j] + vv[static_cast<size_t>(j)];
  record_op(out, {&x, &v}, {}, {}, add_rowvec_bw);
  return out;
}

static void sigmoid_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& y = rec.saved[0]->data;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) gx[i] += rec.grad[i] * y[i] * (1.0 - y[i]);
}

Tensor sigmoid(const Tensor& x) {
  ensure_valid(x, "sigmoid");
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = stable_sigmoid(xv[i]);
  record_op(out, {&x}, {out.impl_}, {}, sigmoid_bw);
  return out;
}

static void relu_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& xv = rec.saved[0]->data;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i)
    if (xv[i] > 0.0) gx[i] += rec.grad[i];
}

Tensor relu(const Tensor& x) {
  ensure_valid(x, "relu");
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  record_op(out, {&x}, {x.impl_}, {}, relu_bw);
  return out;
}

static void exp_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& y = rec.saved[0]->data;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) gx[i] += rec.grad[i] * y[i];
}

Tensor exp_(const Tensor& x) {
  ensure_valid(x, "exp");
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(xv[i]);
  record_op(out, {&x}, {out.impl_}, {}, exp_bw);
  return out;
}

static void log_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& xv = rec.saved[0]->data;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) gx[i] += rec.grad[i] / xv[i];
}

Tensor log_(const Tensor& x) {
  ensure_valid(x, "log");
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) {
    if (!(xv[i] > 0.0))
      throw std::domain_error("log: non-positive input " + std::to_string(xv[i]));
    ov[i] = std::log(xv[i]);
  }
  record_op(out, {&x}, {x.impl_}, {}, log_bw);
  return out;
}

static void sqrt_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& y = rec.saved[0]->data;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) gx[i] += rec.grad[i] * 0.5 / y[i];
}

Tensor sqrt_(const Tensor& x) {
  ensure_valid(x, "sqrt");
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (size_t i = 0; i < ov.size(); ++i) {
    if (xv[i] < 0.0)
      throw std::domain_error("sqrt: negative input " + std::to_string(xv[i]));
    ov[i] = std::sqrt(xv[i]);
  }
  record_op(out, {&x}, {out.impl_}, {}, sqrt_bw);
  return out;
}

static void mask_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& mask = rec.scratch;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (size_t i = 0; i < rec.grad.size(); ++i) gx[i] += rec.grad[i] * mask[i];
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  ensure_valid(x, "clamp");
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  std::vector<double> mask(ov.size(), 0.0);
  for (size_t i = 0; i < ov.size(); ++i) {
    // Gradient passes exactly where the value does.
    if (xv[i] < lo) {
      ov[i] = lo;
    } else if (xv[i] > hi) {
      ov[i] = hi;
    } else {
      ov[i] = xv[i];
      mask[i] = 1.0;
    }
  }
  record_op(out, {&x}, {}, std::move(mask), mask_bw);
  return out;
}

Tensor clamp_min(const Tensor& x, double lo) {
  return clamp(x, lo, std::numeric_limits<double>::infinity());
}

static void maximum_bw(Tape& tape, const Tape::OpRecord& rec) {
  const auto& mask = rec.scratch;  // 1 where a won, 0 where b won
  const size_t n = rec.grad.size();
  if (rec.inputs[0] >= 0) {
    auto& ga = tape.grad_buf(rec.inputs[0], n);
    for (size_t i = 0; i < n; ++i) ga[i] += rec.grad[i] * mask[i];
  }
  if (rec.inputs[1] >= 0) {
    auto& gb = tape.grad_buf(rec.inputs[1], n);
    for (size_t i = 0; i < n; ++i) gb[i] += rec.grad[i] * (1.0 - mask[i]);
  }
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "maximum");
  Tensor out = make_tensor(a.rows(), a.cols());
  const auto& av = a.impl_->data;
  const auto& bv = b.impl_->data;
  auto& ov = out.impl_->data;
  std::vector<double> mask(ov.size(), 0.0);
  for (size_t i = 0; i < ov.size(); ++i) {
    if (av[i] >= bv[i]) {
      ov[i] = av[i];
      mask[i] = 1.0;
    } else {
      ov[i] = bv[i];
    }
  }
  record_op(out, {&a, &b}, {}, std::move(mask), maximum_bw);
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// C += A(m x k) * B(k x n). Inner accumulation runs over p ascending for every
// output element; streaming a row subset therefore reproduces the full-matrix
// results bit for bit, which the incremental decoder relies on.
static void matmul_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double apv = a[p];
      const double* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += apv * b[j];
    }
  }
}

static void matmul_bw(Tape& tape, const Tape::OpRecord& rec) {
  const auto& A = rec.saved[0];
  const auto& B = rec.saved[1];
  const int m = A->rows, k = A->cols, n = B->cols;
  const double* g = rec.grad.data();
  if (rec.inputs[0] >= 0) {
    // dA[i,p] = sum_j g[i,j] * B[p,j]
    auto& ga = tape.grad_buf(rec.inputs[0], static_cast<size_t>(m) * k);
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double* gr = g + static_cast<size_t>(i) * n;
        const double* br = B->data.data() + static_cast<size_t>(p) * n;
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
        ga[static_cast<size_t>(i) * k + p] += acc;
      }
  }
  if (rec.inputs[1] >= 0) {
    // dB[p,j] = sum_i A[i,p] * g[i,j]
    auto& gb = tape.grad_buf(rec.inputs[1], static_cast<size_t>(k) * n);
    for (int i = 0; i < m; ++i) {
      const double* ar = A->data.data() + static_cast<size_t>(i) * k;
      const double* gr = g + static_cast<size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const double apv = ar[p];
        double* dst = gb.data() + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) dst[j] += apv * gr[j];
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  ensure_valid(a, "matmul");
  ensure_valid(b, "matmul");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(a) + " vs " +
                                shape_str(b));
  Tensor out = make_tensor(a.rows(), b.cols());
  matmul_acc(a.impl_->data.data(), b.impl_->data.data(), out.impl_->data.data(), a.rows(),
             a.cols(), b.cols());
  record_op(out, {&a, &b}, {a.impl_, b.impl_}, {}, matmul_bw);
  return out;
}

static void transpose_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const int m = rec.out->rows, n = rec.out->cols;  // out is n_in x m_in
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      gx[static_cast<size_t>(j) * m + i] += rec.grad[static_cast<size_t>(i) * n + j];
}

Tensor transpose(const Tensor& a) {
  ensure_valid(a, "transpose");
  Tensor out = make_tensor(a.cols(), a.rows());
  const auto& av = a.impl_->data;
  auto& ov = out.impl_->data;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      ov[static_cast<size_t>(j) * a.rows() + i] = av[static_cast<size_t>(i) * a.cols() + j];
  record_op(out, {&a}, {}, {}, transpose_bw);
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and scans
// ---------------------------------------------------------------------------

static void sum_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const size_t n = static_cast<size_t>(rec.scratch[0]);
  const double g = rec.grad[0] * rec.scratch[1];
  auto& gx = tape.grad_buf(rec.inputs[0], n);
  for (size_t i = 0; i < n; ++i) gx[i] += g;
}

Tensor sum(const Tensor& x) {
  ensure_valid(x, "sum");
  double acc = 0.0;
  for (double v : x.impl_->data) acc += v;
  Tensor out = Tensor::scalar(acc);
  record_op(out, {&x}, {}, {static_cast<double>(x.numel()), 1.0}, sum_bw);
  return out;
}

Tensor mean(const Tensor& x) {
  ensure_valid(x, "mean");
  double acc = 0.0;
  for (double v : x.impl_->data) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(acc * inv);
  record_op(out, {&x}, {}, {static_cast<double>(x.numel()), inv}, sum_bw);
  return out;
}

static void sum_axis0_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const int m = static_cast<int>(rec.scratch[0]);
  const int n = rec.out->cols;
  auto& gx = tape.grad_buf(rec.inputs[0], static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) gx[static_cast<size_t>(i) * n + j] += rec.grad[static_cast<size_t>(j)];
}

static void sum_axis1_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const int m = rec.out->rows;
  const int n = static_cast<int>(rec.scratch[0]);
  auto& gx = tape.grad_buf(rec.inputs[0], static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) gx[static_cast<size_t>(i) * n + j] += rec.grad[static_cast<size_t>(i)];
}

Tensor sum_axis(const Tensor& x, int axis) {
  ensure_valid(x, "sum_axis");
  const int m = x.rows(), n = x.cols();
  const auto& xv = x.impl_->data;
  if (axis == 0) {
    Tensor out = make_tensor(1, n);
    auto& ov = out.impl_->data;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ov[static_cast<size_t>(j)] += xv[static_cast<size_t>(i) * n + j];
    record_op(out, {&x}, {}, {static_cast<double>(m)}, sum_axis0_bw);
    return out;
  }
  if (axis == 1) {
    Tensor out = make_tensor(m, 1);
    auto& ov = out.impl_->data;
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += xv[static_cast<size_t>(i) * n + j];
      ov[static_cast<size_t>(i)] = acc;
    }
    record_op(out, {&x}, {}, {static_cast<double>(n)}, sum_axis1_bw);
    return out;
  }
  throw std::invalid_argument("sum_axis: axis must be 0 or 1, got " + std::to_string(axis));
}

static void cumsum_rows_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const bool exclusive = rec.scratch[0] != 0.0;
  const int m = rec.out->rows, n = rec.out->cols;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  for (int i = 0; i < m; ++i) {
    const double* g = rec.grad.data() + static_cast<size_t>(i) * n;
    double* dst = gx.data() + static_cast<size_t>(i) * n;
    double run = 0.0;
    for (int j = n - 1; j >= 0; --j) {
      if (exclusive) {
        dst[j] += run;       // y_l depends on x_j only for l > j
        run += g[j];
      } else {
        run += g[j];
        dst[j] += run;       // y_l depends on x_j for l >= j
      }
    }
  }
}

Tensor cumsum_rows(const Tensor& x, bool exclusive) {
  ensure_valid(x, "cumsum_rows");
  const int m = x.rows(), n = x.cols();
  Tensor out = make_tensor(m, n);
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (int i = 0; i < m; ++i) {
    double run = 0.0;
    for (int j = 0; j < n; ++j) {
      const size_t idx = static_cast<size_t>(i) * n + j;
      if (exclusive) {
        ov[idx] = run;
        run += xv[idx];
      } else {
        run += xv[idx];
        ov[idx] = run;
      }
    }
  }
  record_op(out, {&x}, {}, {exclusive ? 1.0 : 0.0}, cumsum_rows_bw);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

static void softmax_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& y = rec.saved[0]->data;
  const int axis = static_cast<int>(rec.scratch[0]);
  const int m = rec.out->rows, n = rec.out->cols;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  if (axis == 1) {
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += rec.grad[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) gx[off + j] += y[off + j] * (rec.grad[off + j] - dot);
    }
  } else {
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int i = 0; i < m; ++i) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        dot += rec.grad[idx] * y[idx];
      }
      for (int i = 0; i < m; ++i) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        gx[idx] += y[idx] * (rec.grad[idx] - dot);
      }
    }
  }
}

Tensor softmax(const Tensor& x, int axis) {
  ensure_valid(x, "softmax");
  if (axis != 0 && axis != 1)
    throw std::invalid_argument("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  const int m = x.rows(), n = x.cols();
  Tensor out = make_tensor(m, n);
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  if (axis == 1) {
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      double mx = xv[off];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xv[off + j]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        ov[off + j] = std::exp(xv[off + j] - mx);
        z += ov[off + j];
      }
      for (int j = 0; j < n; ++j) ov[off + j] /= z;
    }
  } else {
    for (int j = 0; j < n; ++j) {
      double mx = xv[static_cast<size_t>(j)];
      for (int i = 1; i < m; ++i) mx = std::max(mx, xv[static_cast<size_t>(i) * n + j]);
      double z = 0.0;
      for (int i = 0; i < m; ++i) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        ov[idx] = std::exp(xv[idx] - mx);
        z += ov[idx];
      }
      for (int i = 0; i < m; ++i) ov[static_cast<size_t>(i) * n + j] /= z;
    }
  }
  record_op(out, {&x}, {out.impl_}, {static_cast<double>(axis)}, softmax_bw);
  return out;
}

static void log_softmax_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& y = rec.saved[0]->data;  // log-probabilities
  const int axis = static_cast<int>(rec.scratch[0]);
  const int m = rec.out->rows, n = rec.out->cols;
  auto& gx = tape.grad_buf(rec.inputs[0], rec.grad.size());
  if (axis == 1) {
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += rec.grad[off + j];
      for (int j = 0; j < n; ++j) gx[off + j] += rec.grad[off + j] - std::exp(y[off + j]) * s;
    }
  } else {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int i = 0; i < m; ++i) s += rec.grad[static_cast<size_t>(i) * n + j];
      for (int i = 0; i < m; ++i) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        gx[idx] += rec.grad[idx] - std::exp(y[idx]) * s;
      }
    }
  }
}

Tensor log_softmax(const Tensor& x, int axis) {
  ensure_valid(x, "log_softmax");
  if (axis != 0 && axis != 1)
    throw std::invalid_argument("log_softmax: axis must be 0 or 1, got " + std::to_string(axis));
  const int m = x.rows(), n = x.cols();
  Tensor out = make_tensor(m, n);
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  if (axis == 1) {
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      double mx = xv[off];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xv[off + j]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(xv[off + j] - mx);
      const double lz = mx + std::log(z);
      for (int j = 0; j < n; ++j) ov[off + j] = xv[off + j] - lz;
    }
  } else {
    for (int j = 0; j < n; ++j) {
      double mx = xv[static_cast<size_t>(j)];
      for (int i = 1; i < m; ++i) mx = std::max(mx, xv[static_cast<size_t>(i) * n + j]);
      double z = 0.0;
      for (int i = 0; i < m; ++i) z += std::exp(xv[static_cast<size_t>(i) * n + j] - mx);
      const double lz = mx + std::log(z);
      for (int i = 0; i < m; ++i) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        ov[idx] = xv[idx] - lz;
      }
    }
  }
  record_op(out, {&x}, {out.impl_}, {static_cast<double>(axis)}, log_softmax_bw);
  return out;
}

static void layer_norm_bw(Tape& tape, const Tape::OpRecord& rec) {
  const int m = rec.out->rows, n = rec.out->cols;
  const auto& gain = rec.saved[0]->data;
  // scratch layout: [inv_std (m)] [xhat (m*n)]
  const double* inv_std = rec.scratch.data();
  const double* xhat = rec.scratch.data() + m;
  const double* g = rec.grad.data();
  if (rec.inputs[1] >= 0) {
    auto& gg = tape.grad_buf(rec.inputs[1], static_cast<size_t>(n));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gg[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * n + j] * xhat[static_cast<size_t>(i) * n + j];
  }
  if (rec.inputs[2] >= 0) {
    auto& gb = tape.grad_buf(rec.inputs[2], static_cast<size_t>(n));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * n + j];
  }
  if (rec.inputs[0] >= 0) {
    auto& gx = tape.grad_buf(rec.inputs[0], static_cast<size_t>(m) * n);
    std::vector<double> gh(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      double mean_gh = 0.0, mean_ghx = 0.0;
      for (int j = 0; j < n; ++j) {
        gh[static_cast<size_t>(j)] = g[off + j] * gain[static_cast<size_t>(j)];
        mean_gh += gh[static_cast<size_t>(j)];
        mean_ghx += gh[static_cast<size_t>(j)] * xhat[off + j];
      }
      mean_gh /= n;
      mean_ghx /= n;
      for (int j = 0; j < n; ++j)
        gx[off + j] += inv_std[i] * (gh[static_cast<size_t>(j)] - mean_gh - xhat[off + j] * mean_ghx);
    }
  }
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  ensure_valid(x, "layer_norm");
  const int m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(n));
  Tensor out = make_tensor(m, n);
  const auto& xv = x.impl_->data;
  const auto& gv = gain.impl_->data;
  const auto& bv = bias.impl_->data;
  auto& ov = out.impl_->data;
  std::vector<double> scratch(static_cast<size_t>(m) + static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xv[off + j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = xv[off + j] - mu;
      var += d * d;
    }
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    scratch[static_cast<size_t>(i)] = inv_std;
    for (int j = 0; j < n; ++j) {
      const double xh = (xv[off + j] - mu) * inv_std;
      scratch[static_cast<size_t>(m) + off + j] = xh;
      ov[off + j] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  record_op(out, {&x, &gain, &bias}, {gain.impl_}, std::move(scratch), layer_norm_bw);
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

static void slice_rows_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const int r0 = static_cast<int>(rec.scratch[0]);
  const int src_rows = static_cast<int>(rec.scratch[1]);
  const int n = rec.out->cols;
  auto& gx = tape.grad_buf(rec.inputs[0], static_cast<size_t>(src_rows) * n);
  for (int i = 0; i < rec.out->rows; ++i)
    for (int j = 0; j < n; ++j)
      gx[static_cast<size_t>(r0 + i) * n + j] += rec.grad[static_cast<size_t>(i) * n + j];
}

Tensor slice_rows(const Tensor& x, int r0, int nrows) {
  ensure_valid(x, "slice_rows");
  if (r0 < 0 || nrows < 1 || r0 + nrows > x.rows())
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                std::to_string(r0 + nrows) + ") out of " + shape_str(x));
  Tensor out = make_tensor(nrows, x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  std::copy(xv.begin() + static_cast<size_t>(r0) * x.cols(),
            xv.begin() + static_cast<size_t>(r0 + nrows) * x.cols(), ov.begin());
  record_op(out, {&x}, {}, {static_cast<double>(r0), static_cast<double>(x.rows())},
            slice_rows_bw);
  return out;
}

Tensor row(const Tensor& x, int r) { return slice_rows(x, r, 1); }

static void slice_cols_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const int c0 = static_cast<int>(rec.scratch[0]);
  const int src_cols = static_cast<int>(rec.scratch[1]);
  const int m = rec.out->rows, n = rec.out->cols;
  auto& gx = tape.grad_buf(rec.inputs[0], static_cast<size_t>(m) * src_cols);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      gx[static_cast<size_t>(i) * src_cols + c0 + j] += rec.grad[static_cast<size_t>(i) * n + j];
}

Tensor slice_cols(const Tensor& x, int c0, int ncols) {
  ensure_valid(x, "slice_cols");
  if (c0 < 0 || ncols < 1 || c0 + ncols > x.cols())
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                std::to_string(c0 + ncols) + ") out of " + shape_str(x));
  Tensor out = make_tensor(x.rows(), ncols);
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < ncols; ++j)
      ov[static_cast<size_t>(i) * ncols + j] = xv[static_cast<size_t>(i) * x.cols() + c0 + j];
  record_op(out, {&x}, {}, {static_cast<double>(c0), static_cast<double>(x.cols())},
            slice_cols_bw);
  return out;
}

static void stack_rows_bw(Tape& tape, const Tape::OpRecord& rec) {
  const int n = rec.out->cols;
  size_t row_off = 0;
  for (size_t k = 0; k < rec.inputs.size(); ++k) {
    const int part_rows = static_cast<int>(rec.scratch[k]);
    if (rec.inputs[k] >= 0) {
      auto& gp = tape.grad_buf(rec.inputs[k], static_cast<size_t>(part_rows) * n);
      const double* src = rec.grad.data() + row_off * n;
      for (size_t i = 0; i < static_cast<size_t>(part_rows) * n; ++i) gp[i] += src[i];
    }
    row_off += static_cast<size_t>(part_rows);
  }
}

Tensor stack_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no parts");
  const int n = parts[0].cols();
  int total = 0;
  for (const Tensor& p : parts) {
    ensure_valid(p, "stack_rows");
    if (p.cols() != n)
      throw std::invalid_argument("stack_rows: column mismatch " + shape_str(parts[0]) +
                                  " vs " + shape_str(p));
    total += p.rows();
  }
  Tensor out = make_tensor(total, n);
  auto& ov = out.impl_->data;
  size_t off = 0;
  std::vector<double> rows_scratch;
  rows_scratch.reserve(parts.size());
  for (const Tensor& p : parts) {
    std::copy(p.impl_->data.begin(), p.impl_->data.end(), ov.begin() + off);
    off += p.impl_->data.size();
    rows_scratch.push_back(static_cast<double>(p.rows()));
  }
  // record_op takes pointers; build the variable-arity list by hand.
  Tape* tape = Tape::current();
  if (tape != nullptr) {
    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
    if (tracked) {
      std::vector<int> ids;
      ids.reserve(parts.size());
      for (const Tensor& p : parts) ids.push_back(tape->node_of(p));
      tape->record(out, std::move(ids), {}, std::move(rows_scratch), stack_rows_bw);
    }
  }
  return out;
}

static void concat_cols_bw(Tape& tape, const Tape::OpRecord& rec) {
  const int m = rec.out->rows, n = rec.out->cols;
  int col_off = 0;
  for (size_t k = 0; k < rec.inputs.size(); ++k) {
    const int w = static_cast<int>(rec.scratch[k]);
    if (rec.inputs[k] >= 0) {
      auto& gp = tape.grad_buf(rec.inputs[k], static_cast<size_t>(m) * w);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          gp[static_cast<size_t>(i) * w + j] += rec.grad[static_cast<size_t>(i) * n + col_off + j];
    }
    col_off += w;
  }
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int m = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    ensure_valid(p, "concat_cols");
    if (p.rows() != m)
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0]) + " vs " +
                                  shape_str(p));
    total += p.cols();
  }
  Tensor out = make_tensor(m, total);
  auto& ov = out.impl_->data;
  int col_off = 0;
  std::vector<double> widths;
  widths.reserve(parts.size());
  for (const Tensor& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        ov[static_cast<size_t>(i) * total + col_off + j] = p.impl_->data[static_cast<size_t>(i) * w + j];
    col_off += w;
    widths.push_back(static_cast<double>(w));
  }
  Tape* tape = Tape::current();
  if (tape != nullptr) {
    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
    if (tracked) {
      std::vector<int> ids;
      ids.reserve(parts.size());
      for (const Tensor& p : parts) ids.push_back(tape->node_of(p));
      tape->record(out, std::move(ids), {}, std::move(widths), concat_cols_bw);
    }
  }
  return out;
}

static void interleave_cols_bw(Tape& tape, const Tape::OpRecord& rec) {
  const int h_count = static_cast<int>(rec.inputs.size());
  const int m = rec.out->rows;
  const int n = rec.out->cols / h_count;
  for (int h = 0; h < h_count; ++h) {
    if (rec.inputs[static_cast<size_t>(h)] < 0) continue;
    auto& gp = tape.grad_buf(rec.inputs[static_cast<size_t>(h)], static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gp[static_cast<size_t>(i) * n + j] +=
            rec.grad[(static_cast<size_t>(i) * n + j) * h_count + h];
  }
}

Tensor interleave_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("interleave_cols: no parts");
  const int m = parts[0].rows(), n = parts[0].cols();
  for (const Tensor& p : parts) {
    ensure_valid(p, "interleave_cols");
    if (p.rows() != m || p.cols() != n)
      throw std::invalid_argument("interleave_cols: shape mismatch " + shape_str(parts[0]) +
                                  " vs " + shape_str(p));
  }
  const int h_count = static_cast<int>(parts.size());
  Tensor out = make_tensor(m, n * h_count);
  auto& ov = out.impl_->data;
  for (int h = 0; h < h_count; ++h) {
    const auto& pv = parts[static_cast<size_t>(h)].impl_->data;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        ov[(static_cast<size_t>(i) * n + j) * h_count + h] = pv[static_cast<size_t>(i) * n + j];
  }
  Tape* tape = Tape::current();
  if (tape != nullptr) {
    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
    if (tracked) {
      std::vector<int> ids;
      ids.reserve(parts.size());
      for (const Tensor& p : parts) ids.push_back(tape->node_of(p));
      tape->record(out, std::move(ids), {}, {}, interleave_cols_bw);
    }
  }
  return out;
}

Tensor reshape(const Tensor& x, int rows, int cols) {
  ensure_valid(x, "reshape");
  if (static_cast<long>(rows) * cols != x.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x) + " as " +
                                std::to_string(rows) + "x" + std::to_string(cols));
  Tensor out = make_tensor(rows, cols);
  out.impl_->data = x.impl_->data;
  record_op(out, {&x}, {}, {}, identity_bw);
  return out;
}

// ---------------------------------------------------------------------------
// Lookup / regularization
// ---------------------------------------------------------------------------

static void embedding_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const int dim = rec.out->cols;
  const int vocab = static_cast<int>(rec.scratch[0]);
  auto& gt = tape.grad_buf(rec.inputs[0], static_cast<size_t>(vocab) * dim);
  for (int i = 0; i < rec.out->rows; ++i) {
    const int id = static_cast<int>(rec.scratch[static_cast<size_t>(i) + 1]);
    double* dst = gt.data() + static_cast<size_t>(id) * dim;
    const double* src = rec.grad.data() + static_cast<size_t>(i) * dim;
    for (int j = 0; j < dim; ++j) dst[j] += src[j];
  }
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  ensure_valid(table, "embedding");
  if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
  const int vocab = table.rows(), dim = table.cols();
  Tensor out = make_tensor(static_cast<int>(ids.size()), dim);
  auto& ov = out.impl_->data;
  std::vector<double> scratch;
  scratch.reserve(ids.size() + 1);
  scratch.push_back(static_cast<double>(vocab));
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(vocab));
    std::copy(table.impl_->data.begin() + static_cast<size_t>(id) * dim,
              table.impl_->data.begin() + static_cast<size_t>(id + 1) * dim,
              ov.begin() + i * static_cast<size_t>(dim));
    scratch.push_back(static_cast<double>(id));
  }
  record_op(out, {&table}, {}, std::move(scratch), embedding_bw);
  return out;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
  ensure_valid(x, "dropout");
  if (p < 0.0 || p >= 1.0)
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  Tensor out = make_tensor(x.rows(), x.cols());
  const auto& xv = x.impl_->data;
  auto& ov = out.impl_->data;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(ov.size());
  for (size_t i = 0; i < ov.size(); ++i) {
    mask[i] = uni(rng) < p ? 0.0 : keep_scale;
    ov[i] = xv[i] * mask[i];
  }
  record_op(out, {&x}, {}, std::move(mask), mask_bw);
  return out;
}

Tensor detach(const Tensor& x) {
  ensure_valid(x, "detach");
  Tensor out = make_tensor(x.rows(), x.cols());
  out.impl_->data = x.impl_->data;
  return out;
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

static void l2_norm_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& xv = rec.saved[0]->data;
  // Guarded denominator keeps the gradient finite at the origin (where the
  // true derivative does not exist); there it degrades to subgradient ~0.
  const double denom = std::max(rec.out->data[0], 1e-12);
  const double g = rec.grad[0] / denom;
  auto& gx = tape.grad_buf(rec.inputs[0], xv.size());
  for (size_t i = 0; i < xv.size(); ++i) gx[i] += g * xv[i];
}

Tensor l2_norm(const Tensor& x) {
  ensure_valid(x, "l2_norm");
  double ss = 0.0;
  for (double v : x.impl_->data) ss += v * v;
  Tensor out = Tensor::scalar(std::sqrt(ss));
  record_op(out, {&x}, {x.impl_}, {}, l2_norm_bw);
  return out;
}

static void cross_entropy_bw(Tape& tape, const Tape::OpRecord& rec) {
  if (rec.inputs[0] < 0) return;
  const auto& probs = rec.saved[0]->data;
  const int n = rec.saved[0]->rows;
  const int vocab = rec.saved[0]->cols;
  const double eps = rec.scratch[0];
  const double g = rec.grad[0] / n;
  auto& gx = tape.grad_buf(rec.inputs[0], static_cast<size_t>(n) * vocab);
  const double uniform = eps / vocab;
  for (int i = 0; i < n; ++i) {
    const int target = static_cast<int>(rec.scratch[static_cast<size_t>(i) + 1]);
    const size_t off = static_cast<size_t>(i) * vocab;
    for (int j = 0; j < vocab; ++j) {
      double q = uniform;
      if (j == target) q += 1.0 - eps;
      gx[off + j] += g * (probs[off + j] - q);
    }
  }
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double label_smoothing) {
  ensure_valid(logits, "cross_entropy");
  if (static_cast<size_t>(logits.rows()) != targets.size())
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + shape_str(logits) + " logits");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw std::invalid_argument("cross_entropy: smoothing must lie in [0, 1)");
  const int n = logits.rows(), vocab = logits.cols();
  const auto& xv = logits.impl_->data;
  // Keep softmax probabilities for the backward rule.
  auto probs = std::make_shared<TensorImpl>();
  probs->rows = n;
  probs->cols = vocab;
  probs->data.assign(static_cast<size_t>(n) * vocab, 0.0);
  std::vector<double> scratch;
  scratch.reserve(targets.size() + 1);
  scratch.push_back(label_smoothing);
  const double uniform = label_smoothing / vocab;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int target = targets[static_cast<size_t>(i)];
    if (target < 0 || target >= vocab)
      throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                              " outside vocab of " + std::to_string(vocab));
    const size_t off = static_cast<size_t>(i) * vocab;
    double mx = xv[off];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, xv[off + j]);
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) z += std::exp(xv[off + j] - mx);
    const double lz = mx + std::log(z);
    double loss_i = 0.0;
    for (int j = 0; j < vocab; ++j) {
      const double logp = xv[off + j] - lz;
      probs->data[off + j] = std::exp(logp);
      double q = uniform;
      if (j == target) q += 1.0 - label_smoothing;
      loss_i -= q * logp;
    }
    total += loss_i;
    scratch.push_back(static_cast<double>(target));
  }
  Tensor out = Tensor::scalar(total / n);
  record_op(out, {&logits}, {std::move(probs)}, std::move(scratch), cross_entropy_bw);
  return out;
}

}  // namespace simul
