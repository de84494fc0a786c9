#include <cmath>
#include <limits>
#include <stdexcept>

#include "doctest.h"
#include "mixhash/diffmath.hpp"
#include "mixhash/ref_kernels.hpp"
#include "mixhash/rng.hpp"

using namespace mixhash;
using diffmath::Mat;
using diffmath::ParamTensor;

namespace {

Mat to_mat(const diffmath::DenseMatrix& d) {
  Mat m(d.rows, d.cols);
  for (size_t i = 0; i < d.size(); ++i) m.data[i] = d.data[i];
  return m;
}

void fill_param(ParamTensor& t, Rng& rng, double scale = 0.3) {
  for (float& v : t.value.data) v = static_cast<float>(scale * rng.normal());
}

void fill(Mat& m, Rng& rng, double scale = 1.0) {
  for (double& v : m.data) v = scale * rng.normal();
}

}  // namespace

TEST_CASE("affine forward identity example") {
  Mat in(2, 2);
  in.at(0, 0) = 1.0;
  in.at(1, 1) = 1.0;
  ParamTensor w("w", 2, 2), b("b", 1, 2);
  w.value.at(0, 0) = 1.0f;
  w.value.at(0, 1) = 2.0f;
  w.value.at(1, 0) = 3.0f;
  w.value.at(1, 1) = 4.0f;
  Mat out;
  diffmath::affine_forward(in, w, b, out);
  CHECK(out.at(0, 0) == doctest::Approx(1.0));
  CHECK(out.at(0, 1) == doctest::Approx(2.0));
  CHECK(out.at(1, 0) == doctest::Approx(3.0));
  CHECK(out.at(1, 1) == doctest::Approx(4.0));
}

TEST_CASE("affine grad_bias is column sums of upstream") {
  const int B = 5, n = 3, h = 4;
  Rng rng(1);
  Mat in(B, n);
  fill(in, rng);
  ParamTensor w("w", n, h), b("b", 1, h);
  fill_param(w, rng);
  Mat up(B, h, 1.0);  // ones
  diffmath::affine_backward(in, w, b, up, nullptr);
  for (int j = 0; j < h; ++j) CHECK(b.grad.at(0, j) == doctest::Approx(B));
}

TEST_CASE("affine shape mismatch throws") {
  Mat in(2, 3);
  ParamTensor w("w", 4, 2), b("b", 1, 2);
  Mat out;
  CHECK_THROWS_AS(diffmath::affine_forward(in, w, b, out), std::invalid_argument);
}

TEST_CASE("affine backward matches finite differences at eps 1e-3") {
  const int B = 3, n = 3, h = 4;
  Rng rng(7);
  Mat in(B, n);
  fill(in, rng);
  ParamTensor w("w", n, h), b("b", 1, h);
  fill_param(w, rng);
  fill_param(b, rng, 0.1);
  Mat weights(B, h);
  fill(weights, rng);  // fixed projection making the loss a scalar

  auto loss_fn = [&](bool grads) {
    Mat out;
    diffmath::affine_forward(in, w, b, out);
    double loss = 0.0;
    for (size_t i = 0; i < out.size(); ++i) loss += weights.data[i] * out.data[i];
    if (grads) diffmath::affine_backward(in, w, b, weights, nullptr);
    return loss;
  };
  auto res = diffmath::finite_difference_check(loss_fn, {&w, &b}, 1e-3, 42);
  CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("relu and sigmoid pointwise values") {
  Mat in(1, 4);
  in.data = {-1.0, 2.0, 50.0, -50.0};
  Mat out;
  diffmath::relu_forward(in, out);
  CHECK(out.data[0] == 0.0);
  CHECK(out.data[1] == 2.0);
  diffmath::sigmoid_forward(in, out);
  CHECK(out.data[2] > 0.99);
  CHECK(out.data[2] <= 1.0);
  CHECK(out.data[3] > 0.0);  // no underflow to zero at -50
  CHECK(out.data[3] < 1e-20);
  CHECK(std::isfinite(out.data[2]));
  CHECK(std::isfinite(out.data[3]));
  Mat zero(1, 1, 0.0);
  diffmath::sigmoid_forward(zero, out);
  CHECK(out.data[0] == doctest::Approx(0.5));
}

TEST_CASE("softplus stable tails") {
  Mat in(1, 3);
  in.data = {0.0, 40.0, -40.0};
  Mat out;
  diffmath::softplus_forward(in, out);
  CHECK(out.data[0] == doctest::Approx(std::log(2.0)));
  CHECK(out.data[1] == doctest::Approx(40.0));
  CHECK(out.data[2] == doctest::Approx(std::exp(-40.0)));
}

TEST_CASE("log_softmax values and row normalization") {
  Mat logits(1, 4, 0.7);  // all equal
  Mat out;
  diffmath::log_softmax_forward(logits, out);
  for (double v : out.data) CHECK(v == doctest::Approx(-std::log(4.0)));

  Mat two(1, 2);
  two.data = {0.0, std::log(3.0)};
  diffmath::log_softmax_forward(two, out);
  CHECK(out.data[0] == doctest::Approx(-std::log(4.0)));
  CHECK(out.data[1] == doctest::Approx(std::log(3.0 / 4.0)));

  Rng rng(3);
  Mat big(10, 50);
  fill(big, rng, 5.0);
  diffmath::log_softmax_forward(big, out);
  for (int r = 0; r < out.rows; ++r) {
    double sum = 0.0;
    for (int c = 0; c < out.cols; ++c) sum += std::exp(out.at(r, c));
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("log_softmax backward matches finite differences") {
  const int B = 3, n = 6;
  Rng rng(11);
  ParamTensor logits("logits", B, n);
  fill_param(logits, rng, 1.0);
  Mat weights(B, n);
  fill(weights, rng);

  auto loss_fn = [&](bool grads) {
    Mat lm = to_mat(logits.value), out;
    diffmath::log_softmax_forward(lm, out);
    double loss = 0.0;
    for (size_t i = 0; i < out.size(); ++i) loss += weights.data[i] * out.data[i];
    if (grads) {
      Mat g;
      diffmath::log_softmax_backward(out, weights, g);
      for (size_t i = 0; i < g.size(); ++i) {
        logits.grad.data[i] = static_cast<float>(logits.grad.data[i] + g.data[i]);
      }
    }
    return loss;
  };
  auto res = diffmath::finite_difference_check(loss_fn, {&logits}, 1e-3, 5);
  CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("adam learning rate decays at the interval boundary") {
  ParamTensor p("p", 1, 1);
  p.value.data[0] = 1.0f;
  diffmath::AdamState st;
  st.init({&p});
  st.t = 9999;
  CHECK(st.effective_lr() == doctest::Approx(1e-3));
  p.grad.data[0] = 0.5f;
  diffmath::adam_step({&p}, st);
  CHECK(st.t == 10000);
  CHECK(st.effective_lr() == doctest::Approx(0.96e-3));
}

TEST_CASE("adam with zero gradients is a fixed point") {
  ParamTensor p("p", 2, 2);
  p.value.fill(0.75f);
  diffmath::AdamState st;
  st.init({&p});
  diffmath::adam_step({&p}, st);
  CHECK(st.t == 1);
  for (float v : p.value.data) CHECK(v == 0.75f);
}

TEST_CASE("adam first-step magnitude is about the base learning rate") {
  ParamTensor p("p", 1, 1);
  p.value.data[0] = 1.0f;
  p.grad.data[0] = 1.0f;
  diffmath::AdamState st;
  st.init({&p});
  diffmath::adam_step({&p}, st);
  CHECK(std::fabs((1.0 - p.value.data[0]) - 1e-3) < 1e-6);
  CHECK(p.grad.data[0] == 0.0f);  // grads zeroed at the step boundary
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  ParamTensor p("enc_w1", 1, 2);
  p.grad.data[0] = std::numeric_limits<float>::quiet_NaN();
  diffmath::AdamState st;
  st.init({&p});
  std::vector<ParamTensor*> ps = {&p};
  CHECK_THROWS_WITH_AS(diffmath::adam_step(ps, st),
                       doctest::Contains("enc_w1"), std::runtime_error);
}

TEST_CASE("global norm clip scales gradients") {
  ParamTensor p("p", 1, 2);
  p.grad.data = {3.0f, 4.0f};  // norm 5
  const double norm = diffmath::clip_global_norm({&p}, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad.data[0] == doctest::Approx(0.6f));
  CHECK(p.grad.data[1] == doctest::Approx(0.8f));
}

TEST_CASE("finite difference check on a quadratic and on a corrupted gradient") {
  ParamTensor p("p", 1, 8);
  Rng rng(9);
  fill_param(p, rng, 1.0);

  auto quad = [&](bool grads) {
    double loss = 0.0;
    for (float v : p.value.data) loss += 0.5 * static_cast<double>(v) * v;
    if (grads) {
      for (size_t i = 0; i < p.size(); ++i) {
        p.grad.data[i] = static_cast<float>(p.grad.data[i] + p.value.data[i]);
      }
    }
    return loss;
  };
  auto res = diffmath::finite_difference_check(quad, {&p}, 1e-3, 4);
  CHECK(res.max_rel_err <= 1e-4);

  auto corrupted = [&](bool grads) {
    const double loss = quad(grads);
    if (grads) {
      for (float& g : p.grad.data) g *= 2.0f;
    }
    return loss;
  };
  auto bad = diffmath::finite_difference_check(corrupted, {&p}, 1e-3, 4);
  CHECK(bad.max_rel_err > 0.3);
  CHECK(bad.max_rel_err < 0.7);
}

TEST_CASE("parallel kernels agree with the serial reference") {
  const int B = 17, n = 23, h = 31;
  Rng rng(21);
  Mat in(B, n);
  fill(in, rng);
  ParamTensor w("w", n, h), b("b", 1, h);
  fill_param(w, rng);
  fill_param(b, rng, 0.1);
  const Mat wm = to_mat(w.value), bm = to_mat(b.value);

  Mat out_par, out_ser;
  diffmath::affine_forward(in, w, b, out_par);
  ref::affine_forward(in, wm, bm, out_ser);
  for (size_t i = 0; i < out_par.size(); ++i) {
    CHECK(out_par.data[i] == doctest::Approx(out_ser.data[i]).epsilon(1e-12));
  }

  Mat up(B, h);
  fill(up, rng);
  Mat gin_par, gin_ser, gw_ser, gb_ser;
  diffmath::affine_backward(in, w, b, up, &gin_par);
  ref::affine_backward(in, wm, up, gin_ser, gw_ser, gb_ser);
  for (size_t i = 0; i < gin_par.size(); ++i) {
    CHECK(gin_par.data[i] == doctest::Approx(gin_ser.data[i]).epsilon(1e-12));
  }
  for (size_t i = 0; i < w.grad.size(); ++i) {
    CHECK(static_cast<double>(w.grad.data[i]) ==
          doctest::Approx(gw_ser.data[i]).epsilon(1e-5));
  }

  Mat logits(B, h), ls_par, ls_ser;
  fill(logits, rng, 4.0);
  diffmath::log_softmax_forward(logits, ls_par);
  ref::log_softmax(logits, ls_ser);
  for (size_t i = 0; i < ls_par.size(); ++i) {
    CHECK(ls_par.data[i] == doctest::Approx(ls_ser.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("sparse affine agrees with densified input") {
  const int B = 6, V = 40, h = 12;
  Rng rng(31);
  ParamTensor w("w", V, h), b("b", 1, h);
  fill_param(w, rng);
  fill_param(b, rng, 0.1);

  std::vector<std::vector<int32_t>> idx(B);
  std::vector<std::vector<float>> val(B);
  diffmath::SparseBatch sb(B);
  Mat dense(B, V);
  for (int r = 0; r < B; ++r) {
    for (int t = 0; t < V; ++t) {
      if (rng.uniform() < 0.2) {
        idx[r].push_back(t);
        const float v = static_cast<float>(rng.uniform() + 0.1);
        val[r].push_back(v);
        dense.at(r, t) = v;
      }
    }
    sb[r] = {idx[r].data(), val[r].data(), static_cast<int>(idx[r].size())};
  }

  Mat out_sparse, out_dense;
  diffmath::sparse_affine_forward(sb, w, b, out_sparse);
  diffmath::affine_forward(dense, w, b, out_dense);
  for (size_t i = 0; i < out_sparse.size(); ++i) {
    CHECK(out_sparse.data[i] == doctest::Approx(out_dense.data[i]).epsilon(1e-12));
  }

  Mat up(B, h);
  fill(up, rng);
  ParamTensor w2 = w, b2 = b;
  diffmath::sparse_affine_backward(sb, w, b, up);
  diffmath::affine_backward(dense, w2, b2, up, nullptr);
  for (size_t i = 0; i < w.grad.size(); ++i) {
    CHECK(static_cast<double>(w.grad.data[i]) ==
          doctest::Approx(static_cast<double>(w2.grad.data[i])).epsilon(1e-4));
  }
  for (size_t i = 0; i < b.grad.size(); ++i) {
    CHECK(static_cast<double>(b.grad.data[i]) ==
          doctest::Approx(static_cast<double>(b2.grad.data[i])).epsilon(1e-6));
  }
}
