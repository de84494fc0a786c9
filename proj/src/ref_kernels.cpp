#include "mixhash/ref_kernels.hpp"

#include <algorithm>
#include <cmath>

namespace mixhash::ref {

void affine_forward(const Mat& in, const Mat& W, const Mat& bias, Mat& out) {
  const int B = in.rows, n = in.cols, h = W.cols;
  out.resize(B, h);
  for (int r = 0; r < B; ++r) {
    for (int j = 0; j < h; ++j) out.at(r, j) = bias.at(0, j);
    for (int k = 0; k < n; ++k) {
      const double v = in.at(r, k);
      if (v == 0.0) continue;
      for (int j = 0; j < h; ++j) out.at(r, j) += v * W.at(k, j);
    }
  }
}

void affine_backward(const Mat& in, const Mat& W, const Mat& upstream, Mat& grad_in, Mat& grad_W,
                     Mat& grad_b) {
  const int B = in.rows, n = in.cols, h = W.cols;
  grad_in.resize(B, n);
  grad_W.resize(n, h);
  grad_b.resize(1, h);
  for (int k = 0; k < n; ++k) {
    for (int d = 0; d < B; ++d) {
      const double v = in.at(d, k);
      if (v == 0.0) continue;
      for (int j = 0; j < h; ++j) grad_W.at(k, j) += v * upstream.at(d, j);
    }
  }
  for (int j = 0; j < h; ++j) {
    for (int d = 0; d < B; ++d) grad_b.at(0, j) += upstream.at(d, j);
  }
  for (int d = 0; d < B; ++d) {
    for (int k = 0; k < n; ++k) {
      double acc = 0.0;
      for (int j = 0; j < h; ++j) acc += upstream.at(d, j) * W.at(k, j);
      grad_in.at(d, k) = acc;
    }
  }
}

void log_softmax(const Mat& logits, Mat& out) {
  const int B = logits.rows, n = logits.cols;
  out.resize(B, n);
  for (int r = 0; r < B; ++r) {
    double mx = logits.at(r, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, logits.at(r, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(logits.at(r, j) - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) out.at(r, j) = logits.at(r, j) - lse;
  }
}

int hamming(const uint64_t* a, const uint64_t* b, int bits) {
  int d = 0;
  for (int i = 0; i < bits; ++i) {
    const uint64_t ba = (a[i / 64] >> (i % 64)) & 1u;
    const uint64_t bb = (b[i / 64] >> (i % 64)) & 1u;
    d += static_cast<int>(ba ^ bb);
  }
  return d;
}

std::vector<std::pair<int, int>> topk_fullsort(const std::vector<uint64_t>& db_words,
                                               int words_per_doc, int num_docs,
                                               const uint64_t* query, int bits, int k) {
  std::vector<std::pair<int, int>> all(num_docs);  // (distance, doc)
  for (int i = 0; i < num_docs; ++i) {
    const uint64_t* c = db_words.data() + static_cast<size_t>(i) * words_per_doc;
    all[i] = {hamming(query, c, bits), i};
  }
  std::sort(all.begin(), all.end());
  std::vector<std::pair<int, int>> out(k);
  for (int i = 0; i < k; ++i) out[i] = {all[i].second, all[i].first};
  return out;
}

}  // namespace mixhash::ref
