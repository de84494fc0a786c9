#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mixhash/diffmath.hpp"

namespace mixhash::ref {

// Serial reference implementations of the parallel kernels. Kept deliberately
// naive: tests compare the OpenMP paths against these, and the bench tool
// times the two side by side.

using diffmath::Mat;

// out = in * W + bias (bias is 1 x h)
void affine_forward(const Mat& in, const Mat& W, const Mat& bias, Mat& out);
void affine_backward(const Mat& in, const Mat& W, const Mat& upstream, Mat& grad_in, Mat& grad_W,
                     Mat& grad_b);

void log_softmax(const Mat& logits, Mat& out);

// per-bit loop, no popcount
int hamming(const uint64_t* a, const uint64_t* b, int bits);

// exhaustive (distance, index) sort; returns (doc, distance) pairs
std::vector<std::pair<int, int>> topk_fullsort(const std::vector<uint64_t>& db_words,
                                               int words_per_doc, int num_docs,
                                               const uint64_t* query, int bits, int k);

}  // namespace mixhash::ref
