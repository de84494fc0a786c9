// Times the OpenMP kernels against their serial reference implementations and
// verifies that the two paths agree.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "mixhash/diffmath.hpp"
#include "mixhash/hashing.hpp"
#include "mixhash/ref_kernels.hpp"
#include "mixhash/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace mixhash;
using diffmath::Mat;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void fill_mat(Mat& m, Rng& rng, double scale = 1.0) {
  for (double& v : m.data) v = scale * rng.normal();
}

void fill_param(diffmath::ParamTensor& t, Rng& rng, double scale = 0.05) {
  for (float& v : t.value.data) v = static_cast<float>(scale * rng.normal());
}

Mat to_mat(const diffmath::DenseMatrix& d) {
  Mat m(d.rows, d.cols);
  for (size_t i = 0; i < d.size(); ++i) m.data[i] = d.data[i];
  return m;
}

double max_abs_diff(const Mat& a, const Mat& b) {
  double mx = 0.0;
  for (size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::fabs(a.data[i] - b.data[i]));
  return mx;
}

void report(const char* name, double serial_ms, double parallel_ms, double diff) {
  std::printf("%-22s serial %8.2f ms   parallel %8.2f ms   speedup %5.2fx   max|d| %.2e\n", name,
              serial_ms, parallel_ms, serial_ms / parallel_ms, diff);
}

void bench_affine() {
  const int B = 256, n = 512, h = 512, reps = 10;
  Rng rng(11);
  Mat in(B, n);
  fill_mat(in, rng);
  diffmath::ParamTensor W("w", n, h), bias("b", 1, h);
  fill_param(W, rng);
  fill_param(bias, rng);

  Mat out_par, out_ser;
  const Mat wm = to_mat(W.value), bm = to_mat(bias.value);

  double t0 = now_ms();
  for (int r = 0; r < reps; ++r) ref::affine_forward(in, wm, bm, out_ser);
  double t1 = now_ms();
  for (int r = 0; r < reps; ++r) diffmath::affine_forward(in, W, bias, out_par);
  double t2 = now_ms();
  report("affine forward", t1 - t0, t2 - t1, max_abs_diff(out_ser, out_par));

  Mat up(B, h);
  fill_mat(up, rng);
  Mat gin_ser, gw_ser, gb_ser, gin_par;
  t0 = now_ms();
  for (int r = 0; r < reps; ++r) ref::affine_backward(in, wm, up, gin_ser, gw_ser, gb_ser);
  t1 = now_ms();
  for (int r = 0; r < reps; ++r) {
    W.zero_grad();
    bias.zero_grad();
    diffmath::affine_backward(in, W, bias, up, &gin_par);
  }
  t2 = now_ms();
  double diff = max_abs_diff(gin_ser, gin_par);
  for (size_t i = 0; i < W.grad.size(); ++i) {
    diff = std::max(diff, std::fabs(gw_ser.data[i] - static_cast<double>(W.grad.data[i])));
  }
  report("affine backward", t1 - t0, t2 - t1, diff);
}

void bench_log_softmax() {
  const int B = 256, n = 10000, reps = 10;
  Rng rng(12);
  Mat logits(B, n), out_ser, out_par;
  fill_mat(logits, rng, 3.0);

  double t0 = now_ms();
  for (int r = 0; r < reps; ++r) ref::log_softmax(logits, out_ser);
  double t1 = now_ms();
  for (int r = 0; r < reps; ++r) diffmath::log_softmax_forward(logits, out_par);
  double t2 = now_ms();
  report("log_softmax", t1 - t0, t2 - t1, max_abs_diff(out_ser, out_par));
}

void bench_topk() {
  const int n = 20000, nq = 200, bits = 64, k = 100;
  Rng rng(13);
  std::vector<std::string> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = "d" + std::to_string(i);
  hashing::BinaryCodebook db = hashing::make_codebook(n, bits, std::move(ids));
  for (uint64_t& w : db.words) w = rng.next_u64();
  std::vector<uint64_t> queries(nq);
  for (uint64_t& q : queries) q = rng.next_u64();

  // serial: exhaustive sort with per-bit distances
  double t0 = now_ms();
  size_t check_ser = 0;
  for (int q = 0; q < nq; ++q) {
    auto nn = ref::topk_fullsort(db.words, db.words_per_doc, n, &queries[q], bits, k);
    check_ser += nn[0].second;
  }
  double t1 = now_ms();

  // parallel: heap selection with popcount, threads across queries
  size_t check_par = 0;
  std::vector<size_t> firsts(nq);
#pragma omp parallel for schedule(dynamic, 8)
  for (int q = 0; q < nq; ++q) {
    auto nn = hashing::topk(db, &queries[q], bits, k);
    firsts[q] = nn[0].second;
  }
  for (size_t f : firsts) check_par += f;
  double t2 = now_ms();
  report("hamming topk", t1 - t0, t2 - t1,
         check_ser == check_par ? 0.0 : 1.0);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  std::printf("threads: 1 (built without OpenMP)\n");
#endif
  bench_affine();
  bench_log_softmax();
  bench_topk();
  return 0;
}
