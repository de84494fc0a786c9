#include "mixhash/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "mixhash/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mixhash::diffmath {

namespace {

[[noreturn]] void shape_error(const char* op, int a, int b) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s: shape mismatch (%d vs %d)", op, a, b);
  throw std::invalid_argument(buf);
}

void require(bool ok, const char* op, int a, int b) {
  if (!ok) shape_error(op, a, b);
}

}  // namespace

void affine_forward(const Mat& in, const ParamTensor& W, const ParamTensor& b, Mat& out) {
  require(in.cols == W.value.rows, "affine", in.cols, W.value.rows);
  require(b.value.rows == 1 && b.value.cols == W.value.cols, "affine bias", b.value.cols,
          W.value.cols);
  const int B = in.rows, n = in.cols, h = W.value.cols;
  out.resize(B, h);
  const float* wd = W.value.data.data();
  const float* bd = b.value.data.data();
#pragma omp parallel for schedule(static)
  for (int r = 0; r < B; ++r) {
    const double* x = in.row(r);
    double* y = out.row(r);
    for (int j = 0; j < h; ++j) y[j] = bd[j];
    for (int k = 0; k < n; ++k) {
      const double v = x[k];
      if (v == 0.0) continue;
      const float* w = wd + static_cast<size_t>(k) * h;
      for (int j = 0; j < h; ++j) y[j] += v * static_cast<double>(w[j]);
    }
  }
}

void affine_backward(const Mat& in, ParamTensor& W, ParamTensor& b, const Mat& upstream,
                     Mat* grad_in) {
  require(in.cols == W.value.rows, "affine backward", in.cols, W.value.rows);
  require(upstream.rows == in.rows && upstream.cols == W.value.cols, "affine backward upstream",
          upstream.cols, W.value.cols);
  const int B = in.rows, n = in.cols, h = W.value.cols;

  // weight grads: each weight row is reduced by one thread, batch in order
#pragma omp parallel for schedule(static)
  for (int k = 0; k < n; ++k) {
    std::vector<double> acc(h, 0.0);
    for (int d = 0; d < B; ++d) {
      const double v = in.at(d, k);
      if (v == 0.0) continue;
      const double* u = upstream.row(d);
      for (int j = 0; j < h; ++j) acc[j] += v * u[j];
    }
    float* gw = W.grad.data.data() + static_cast<size_t>(k) * h;
    for (int j = 0; j < h; ++j) gw[j] = static_cast<float>(gw[j] + acc[j]);
  }

#pragma omp parallel for schedule(static)
  for (int j = 0; j < h; ++j) {
    double acc = 0.0;
    for (int d = 0; d < B; ++d) acc += upstream.at(d, j);
    b.grad.data[j] = static_cast<float>(b.grad.data[j] + acc);
  }

  if (grad_in) {
    grad_in->resize(B, n);
    const float* wd = W.value.data.data();
#pragma omp parallel for schedule(static)
    for (int d = 0; d < B; ++d) {
      const double* u = upstream.row(d);
      double* g = grad_in->row(d);
      for (int k = 0; k < n; ++k) {
        const float* w = wd + static_cast<size_t>(k) * h;
        double acc = 0.0;
        for (int j = 0; j < h; ++j) acc += u[j] * static_cast<double>(w[j]);
        g[k] = acc;
      }
    }
  }
}

void sparse_affine_forward(const SparseBatch& in, const ParamTensor& W, const ParamTensor& b,
                           Mat& out) {
  const int B = static_cast<int>(in.size());
  const int h = W.value.cols;
  require(b.value.rows == 1 && b.value.cols == h, "sparse affine bias", b.value.cols, h);
  out.resize(B, h);
  const float* wd = W.value.data.data();
  const float* bd = b.value.data.data();
#pragma omp parallel for schedule(static)
  for (int r = 0; r < B; ++r) {
    double* y = out.row(r);
    for (int j = 0; j < h; ++j) y[j] = bd[j];
    const SparseRow& row = in[r];
    for (int e = 0; e < row.nnz; ++e) {
      const double v = row.values[e];
      const float* w = wd + static_cast<size_t>(row.indices[e]) * h;
      for (int j = 0; j < h; ++j) y[j] += v * static_cast<double>(w[j]);
    }
  }
}

void sparse_affine_backward(const SparseBatch& in, ParamTensor& W, ParamTensor& b,
                            const Mat& upstream) {
  const int B = static_cast<int>(in.size());
  const int h = W.value.cols;
  require(upstream.rows == B && upstream.cols == h, "sparse affine backward", upstream.cols, h);

  // column blocks are disjoint, so rows shared between documents don't race
  const int BLK = 128;
  float* gw = W.grad.data.data();
#pragma omp parallel for schedule(static)
  for (int j0 = 0; j0 < h; j0 += BLK) {
    const int j1 = std::min(j0 + BLK, h);
    for (int d = 0; d < B; ++d) {
      const double* u = upstream.row(d);
      const SparseRow& row = in[d];
      for (int e = 0; e < row.nnz; ++e) {
        const double v = row.values[e];
        float* g = gw + static_cast<size_t>(row.indices[e]) * h;
        for (int j = j0; j < j1; ++j) g[j] = static_cast<float>(g[j] + v * u[j]);
      }
    }
  }

#pragma omp parallel for schedule(static)
  for (int j = 0; j < h; ++j) {
    double acc = 0.0;
    for (int d = 0; d < B; ++d) acc += upstream.at(d, j);
    b.grad.data[j] = static_cast<float>(b.grad.data[j] + acc);
  }
}

void relu_forward(const Mat& in, Mat& out) {
  out.resize(in.rows, in.cols);
  const int64_t n = static_cast<int64_t>(in.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
}

void relu_backward(const Mat& in, const Mat& upstream, Mat& grad_in) {
  require(in.rows == upstream.rows && in.cols == upstream.cols, "relu backward", in.cols,
          upstream.cols);
  grad_in.resize(in.rows, in.cols);
  const int64_t n = static_cast<int64_t>(in.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) grad_in.data[i] = in.data[i] > 0.0 ? upstream.data[i] : 0.0;
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void sigmoid_forward(const Mat& in, Mat& out) {
  out.resize(in.rows, in.cols);
  const int64_t n = static_cast<int64_t>(in.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) out.data[i] = sigmoid_scalar(in.data[i]);
}

void sigmoid_backward(const Mat& out, const Mat& upstream, Mat& grad_in) {
  require(out.rows == upstream.rows && out.cols == upstream.cols, "sigmoid backward", out.cols,
          upstream.cols);
  grad_in.resize(out.rows, out.cols);
  const int64_t n = static_cast<int64_t>(out.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const double s = out.data[i];
    grad_in.data[i] = upstream.data[i] * s * (1.0 - s);
  }
}

void softplus_forward(const Mat& in, Mat& out) {
  out.resize(in.rows, in.cols);
  const int64_t n = static_cast<int64_t>(in.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const double x = in.data[i];
    out.data[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
}

void softplus_backward(const Mat& in, const Mat& upstream, Mat& grad_in) {
  require(in.rows == upstream.rows && in.cols == upstream.cols, "softplus backward", in.cols,
          upstream.cols);
  grad_in.resize(in.rows, in.cols);
  const int64_t n = static_cast<int64_t>(in.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) grad_in.data[i] = upstream.data[i] * sigmoid_scalar(in.data[i]);
}

void log_softmax_forward(const Mat& logits, Mat& out) {
  out.resize(logits.rows, logits.cols);
  const int B = logits.rows, n = logits.cols;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < B; ++r) {
    const double* x = logits.row(r);
    double* y = out.row(r);
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
}

void log_softmax_backward(const Mat& logp, const Mat& upstream, Mat& grad_logits) {
  require(logp.rows == upstream.rows && logp.cols == upstream.cols, "log_softmax backward",
          logp.cols, upstream.cols);
  grad_logits.resize(logp.rows, logp.cols);
  const int B = logp.rows, n = logp.cols;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < B; ++r) {
    const double* u = upstream.row(r);
    const double* lp = logp.row(r);
    double* g = grad_logits.row(r);
    double usum = 0.0;
    for (int j = 0; j < n; ++j) usum += u[j];
    for (int j = 0; j < n; ++j) g[j] = u[j] - std::exp(lp[j]) * usum;
  }
}

void AdamState::init(const std::vector<ParamTensor*>& params) {
  m1.clear();
  m2.clear();
  for (const ParamTensor* p : params) {
    m1.emplace_back(p->value.rows, p->value.cols, 0.0f);
    m2.emplace_back(p->value.rows, p->value.cols, 0.0f);
  }
  t = 0;
}

double AdamState::effective_lr() const {
  return base_lr * std::pow(decay, static_cast<double>(t / decay_interval));
}

void adam_step(const std::vector<ParamTensor*>& params, AdamState& state) {
  if (state.m1.size() != params.size()) {
    throw std::invalid_argument("adam: state not initialized for this parameter list");
  }
  for (const ParamTensor* p : params) {
    const int64_t n = static_cast<int64_t>(p->grad.size());
    bool bad = false;
#pragma omp parallel for schedule(static) reduction(|| : bad)
    for (int64_t i = 0; i < n; ++i) bad = bad || !std::isfinite(p->grad.data[i]);
    if (bad) throw std::runtime_error("adam: non-finite gradient in parameter '" + p->name + "'");
  }

  const double lr = state.effective_lr();
  const int64_t step = state.t + 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(step));

  for (size_t pi = 0; pi < params.size(); ++pi) {
    ParamTensor* p = params[pi];
    if (!state.m1[pi].same_shape(p->value)) {
      throw std::invalid_argument("adam: state shape mismatch for '" + p->name + "'");
    }
    float* v = p->value.data.data();
    float* g = p->grad.data.data();
    float* m = state.m1[pi].data.data();
    float* s = state.m2[pi].data.data();
    const int64_t n = static_cast<int64_t>(p->value.size());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      const double gg = g[i];
      const double m1n = state.beta1 * m[i] + (1.0 - state.beta1) * gg;
      const double m2n = state.beta2 * s[i] + (1.0 - state.beta2) * gg * gg;
      m[i] = static_cast<float>(m1n);
      s[i] = static_cast<float>(m2n);
      v[i] = static_cast<float>(v[i] - lr * (m1n / bc1) / (std::sqrt(m2n / bc2) + state.eps));
      g[i] = 0.0f;
    }
  }
  state.t += 1;
}

double clip_global_norm(const std::vector<ParamTensor*>& params, double max_norm) {
  double sq = 0.0;
  for (const ParamTensor* p : params) {
    for (float g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (ParamTensor* p : params) {
      for (float& g : p->grad.data) g *= scale;
    }
  }
  return norm;
}

FdCheckResult finite_difference_check(const std::function<double(bool)>& loss_fn,
                                      const std::vector<ParamTensor*>& params, double eps,
                                      uint64_t seed, int coords_per_tensor) {
  for (ParamTensor* p : params) p->zero_grad();
  loss_fn(true);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const ParamTensor* p : params) {
    analytic.emplace_back(p->grad.data.begin(), p->grad.data.end());
  }

  Rng rng(seed);
  FdCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    ParamTensor* p = params[pi];
    const int n = static_cast<int>(p->size());
    std::vector<int> coords;
    if (n <= coords_per_tensor) {
      coords.resize(n);
      for (int i = 0; i < n; ++i) coords[i] = i;
    } else {
      std::vector<int> all(n);
      for (int i = 0; i < n; ++i) all[i] = i;
      for (int i = 0; i < coords_per_tensor; ++i) {
        const int j = i + static_cast<int>(rng.below(n - i));
        std::swap(all[i], all[j]);
      }
      coords.assign(all.begin(), all.begin() + coords_per_tensor);
    }

    auto fd_at = [&](int c, double e) {
      const float orig = p->value.data[c];
      const float plus = static_cast<float>(static_cast<double>(orig) + e);
      const float minus = static_cast<float>(static_cast<double>(orig) - e);
      p->value.data[c] = plus;
      const double lp = loss_fn(false);
      p->value.data[c] = minus;
      const double lm = loss_fn(false);
      p->value.data[c] = orig;
      return (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
    };

    for (int c : coords) {
      // Shrink the step until consecutive central-difference estimates agree;
      // this isolates ReLU kinks inside the perturbation window without ever
      // consulting the analytic value. The absolute 1e-9 floor lets
      // near-zero-gradient coordinates stop before double-precision noise
      // (which grows as the step shrinks) becomes visible.
      double e = eps;
      double numeric = fd_at(c, e);
      for (int refine = 0; refine < 5; ++refine) {
        const double next = fd_at(c, e / 8.0);
        const bool consistent =
            std::fabs(numeric - next) <=
            std::max(1e-4 * std::max(std::fabs(numeric), std::fabs(next)), 1e-9);
        numeric = next;
        e /= 8.0;
        if (consistent) break;
      }
      const double a = analytic[pi][c];
      const double rel =
          std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p->name;
        res.worst_coord = c;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace mixhash::diffmath
