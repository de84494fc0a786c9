#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mixhash::diffmath {

// Row-major float32 matrix. This is the parameter storage type and the
// on-disk tensor format; vectors are stored as 1 x n.
struct DenseMatrix {
  int rows = 0, cols = 0;
  std::vector<float> data;

  DenseMatrix() = default;
  DenseMatrix(int r, int c, float fill = 0.0f)
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {}

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return data.size(); }
  bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }
  void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

// Row-major double work matrix for activations and upstream gradients.
// Batch math runs in double so that composite losses are smooth enough for
// tight finite-difference verification; parameters stay float32.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {}

  void resize(int r, int c) {
    rows = r;
    cols = c;
    data.assign(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0);
  }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  size_t size() const { return data.size(); }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

// A named parameter with its gradient accumulator. Gradients are reset to
// zero at each optimization step boundary.
struct ParamTensor {
  std::string name;
  DenseMatrix value;
  DenseMatrix grad;

  ParamTensor() = default;
  ParamTensor(std::string n, int r, int c) : name(std::move(n)), value(r, c), grad(r, c) {}

  void zero_grad() { grad.fill(0.0f); }
  size_t size() const { return value.size(); }
};

// Read-only view of one sparse input row (sorted indices, positive values).
struct SparseRow {
  const int32_t* indices = nullptr;
  const float* values = nullptr;
  int nnz = 0;
};
using SparseBatch = std::vector<SparseRow>;

// ---- layers ----------------------------------------------------------------
// All backward functions accumulate (+=) into parameter grads so several loss
// terms can share a parameter within one step.

// out = in * W + b, bias broadcast over rows. in: B x n, W: n x h, b: 1 x h.
void affine_forward(const Mat& in, const ParamTensor& W, const ParamTensor& b, Mat& out);
// grad_in may be null for leaf inputs.
void affine_backward(const Mat& in, ParamTensor& W, ParamTensor& b, const Mat& upstream,
                     Mat* grad_in);

void sparse_affine_forward(const SparseBatch& in, const ParamTensor& W, const ParamTensor& b,
                           Mat& out);
void sparse_affine_backward(const SparseBatch& in, ParamTensor& W, ParamTensor& b,
                            const Mat& upstream);

void relu_forward(const Mat& in, Mat& out);
void relu_backward(const Mat& in, const Mat& upstream, Mat& grad_in);

double sigmoid_scalar(double x);  // numerically stable branch form
void sigmoid_forward(const Mat& in, Mat& out);
// takes the forward output: d sigma = s * (1 - s)
void sigmoid_backward(const Mat& out, const Mat& upstream, Mat& grad_in);

void softplus_forward(const Mat& in, Mat& out);
void softplus_backward(const Mat& in, const Mat& upstream, Mat& grad_in);

// log softmax over each row, max-subtraction stabilized.
void log_softmax_forward(const Mat& logits, Mat& out);
// takes the forward output (log probabilities).
void log_softmax_backward(const Mat& logp, const Mat& upstream, Mat& grad_logits);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.96;
  int64_t decay_interval = 10000;
  int64_t t = 0;  // completed steps

  std::vector<DenseMatrix> m1, m2;  // aligned with the param list given to init()

  void init(const std::vector<ParamTensor*>& params);
  // base_lr * decay^floor(t / decay_interval)
  double effective_lr() const;
};

// Standard Adam update; increments t and zeroes the grads it consumed.
// Throws if any gradient is non-finite, naming the parameter.
void adam_step(const std::vector<ParamTensor*>& params, AdamState& state);

// Scales all grads so their joint L2 norm is at most max_norm; returns the
// pre-clip norm. max_norm <= 0 disables clipping.
double clip_global_norm(const std::vector<ParamTensor*>& params, double max_norm);

// ---- verification ----------------------------------------------------------

struct FdCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of analytic gradients. loss_fn(compute_grads) must
// evaluate the loss deterministically (frozen noise) and, when asked,
// accumulate analytic gradients into the tensors. Checks a seeded random
// subset of at least coords_per_tensor coordinates per tensor (all if fewer).
// Relative error denominator: max(|analytic|, |numeric|, 1e-6).
FdCheckResult finite_difference_check(const std::function<double(bool)>& loss_fn,
                                      const std::vector<ParamTensor*>& params, double eps,
                                      uint64_t seed, int coords_per_tensor = 100);

}  // namespace mixhash::diffmath
