#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixhash/diffmath.hpp"

namespace mixhash::hashing {

// Bit-packed binary codes for a document collection. Bit i of a code is
// latent dimension i; unused high bits of the last word are zero.
struct BinaryCodebook {
  int num_docs = 0;
  int bits = 0;
  int words_per_doc = 0;
  std::vector<uint64_t> words;     // num_docs * words_per_doc, row-major
  std::vector<std::string> ids;    // aligned with docs

  const uint64_t* code(int doc) const {
    return words.data() + static_cast<size_t>(doc) * words_per_doc;
  }
  bool get_bit(int doc, int bit) const { return (code(doc)[bit / 64] >> (bit % 64)) & 1u; }
};

BinaryCodebook make_codebook(int num_docs, int bits, std::vector<std::string> ids);

// Lower median of each latent dimension.
std::vector<double> median_thresholds(const diffmath::DenseMatrix& latents);

// bit = 1 iff latent > threshold
BinaryCodebook binarize(const diffmath::DenseMatrix& latents,
                        const std::vector<double>& thresholds, std::vector<std::string> ids);

// Thresholds from the same latents (database-side binarization).
BinaryCodebook median_binarize(const diffmath::DenseMatrix& latents,
                               std::vector<std::string> ids);

// bit = 1 iff prob > threshold (deterministic rule for Bernoulli codes)
BinaryCodebook fixed_binarize(const diffmath::DenseMatrix& probs, std::vector<std::string> ids,
                              double threshold = 0.5);

int hamming(const BinaryCodebook& a, int ia, const BinaryCodebook& b, int ib);
int hamming_words(const uint64_t* a, const uint64_t* b, int words_per_doc);

// Exact K nearest by Hamming distance, ties broken by ascending doc index.
// Returns (doc index, distance) sorted ascending by (distance, index).
std::vector<std::pair<int, int>> topk(const BinaryCodebook& db, const uint64_t* query, int bits,
                                      int k);

// Fraction of retrieved label sets intersecting the query's label set.
double precision_at_k(const std::vector<const std::vector<int>*>& retrieved_labels,
                      const std::vector<int>& query_labels, int k);

struct EvalReport {
  int k = 0;
  std::vector<std::string> query_ids;   // non-skipped queries, in query order
  std::vector<double> precision;        // aligned with query_ids
  int num_skipped = 0;                  // queries with an empty label set
  double mean = 0.0;
};

EvalReport evaluate(const BinaryCodebook& queries,
                    const std::vector<std::vector<int>>& query_labels, const BinaryCodebook& db,
                    const std::vector<std::vector<int>>& db_labels, int k = 100);

// codes file: "mixhash-codes v1 <num_docs> <bits>" header, then per doc
// id<TAB>hex with most-significant-word-first hex, padding bits zero
void save_codes(const BinaryCodebook& cb, const std::string& path);
BinaryCodebook load_codes(const std::string& path);

void save_thresholds(const std::vector<double>& thresholds, const std::string& path);
std::vector<double> load_thresholds(const std::string& path);

// report TSV: header, one row per query id<TAB>precision, final MEAN row
void save_eval_report(const EvalReport& report, const std::string& path);

}  // namespace mixhash::hashing
