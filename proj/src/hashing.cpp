#include "mixhash/hashing.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <queue>
#include <sstream>
#include <stdexcept>

namespace mixhash::hashing {

BinaryCodebook make_codebook(int num_docs, int bits, std::vector<std::string> ids) {
  if (num_docs < 1) throw std::invalid_argument("codebook needs at least one document");
  if (bits < 1) throw std::invalid_argument("codebook needs at least one bit");
  if (static_cast<int>(ids.size()) != num_docs) {
    throw std::invalid_argument("codebook id count does not match num_docs");
  }
  BinaryCodebook cb;
  cb.num_docs = num_docs;
  cb.bits = bits;
  cb.words_per_doc = (bits + 63) / 64;
  cb.words.assign(static_cast<size_t>(num_docs) * cb.words_per_doc, 0);
  cb.ids = std::move(ids);
  return cb;
}

std::vector<double> median_thresholds(const diffmath::DenseMatrix& latents) {
  const int n = latents.rows, m = latents.cols;
  if (n < 1) throw std::invalid_argument("median thresholds need at least one row");
  std::vector<double> thr(m);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < m; ++c) {
    std::vector<double> col(n);
    for (int r = 0; r < n; ++r) col[r] = latents.at(r, c);
    const int mid = (n - 1) / 2;  // lower median
    std::nth_element(col.begin(), col.begin() + mid, col.end());
    thr[c] = col[mid];
  }
  return thr;
}

BinaryCodebook binarize(const diffmath::DenseMatrix& latents,
                        const std::vector<double>& thresholds, std::vector<std::string> ids) {
  const int n = latents.rows, m = latents.cols;
  if (static_cast<int>(thresholds.size()) != m) {
    throw std::invalid_argument("threshold count does not match latent dimension");
  }
  BinaryCodebook cb = make_codebook(n, m, std::move(ids));
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n; ++r) {
    uint64_t* w = cb.words.data() + static_cast<size_t>(r) * cb.words_per_doc;
    for (int c = 0; c < m; ++c) {
      if (static_cast<double>(latents.at(r, c)) > thresholds[c]) {
        w[c / 64] |= uint64_t{1} << (c % 64);
      }
    }
  }
  return cb;
}

BinaryCodebook median_binarize(const diffmath::DenseMatrix& latents,
                               std::vector<std::string> ids) {
  return binarize(latents, median_thresholds(latents), std::move(ids));
}

BinaryCodebook fixed_binarize(const diffmath::DenseMatrix& probs, std::vector<std::string> ids,
                              double threshold) {
  return binarize(probs, std::vector<double>(probs.cols, threshold), std::move(ids));
}

int hamming_words(const uint64_t* a, const uint64_t* b, int words_per_doc) {
  int d = 0;
  for (int w = 0; w < words_per_doc; ++w) d += std::popcount(a[w] ^ b[w]);
  return d;
}

int hamming(const BinaryCodebook& a, int ia, const BinaryCodebook& b, int ib) {
  if (a.bits != b.bits) {
    throw std::invalid_argument("hamming: code widths differ (" + std::to_string(a.bits) +
                                " vs " + std::to_string(b.bits) + ")");
  }
  return hamming_words(a.code(ia), b.code(ib), a.words_per_doc);
}

std::vector<std::pair<int, int>> topk(const BinaryCodebook& db, const uint64_t* query, int bits,
                                      int k) {
  if (bits != db.bits) {
    throw std::invalid_argument("topk: query width " + std::to_string(bits) +
                                " does not match database width " + std::to_string(db.bits));
  }
  if (k < 1 || k > db.num_docs) {
    throw std::invalid_argument("topk: k=" + std::to_string(k) + " out of range for " +
                                std::to_string(db.num_docs) + " documents");
  }
  // max-heap on (distance, index); scanning indices in order keeps ties stable
  std::priority_queue<std::pair<int, int>> heap;
  const int W = db.words_per_doc;
  for (int i = 0; i < db.num_docs; ++i) {
    const int d = hamming_words(query, db.code(i), W);
    if (static_cast<int>(heap.size()) < k) {
      heap.emplace(d, i);
    } else if (std::pair<int, int>(d, i) < heap.top()) {
      heap.pop();
      heap.emplace(d, i);
    }
  }
  std::vector<std::pair<int, int>> out(heap.size());
  for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
    out[i] = {heap.top().second, heap.top().first};
    heap.pop();
  }
  return out;
}

namespace {

bool intersects(const std::vector<int>& a, const std::vector<int>& b) {
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) return true;
    if (a[i] < b[j]) ++i;
    else ++j;
  }
  return false;
}

}  // namespace

double precision_at_k(const std::vector<const std::vector<int>*>& retrieved_labels,
                      const std::vector<int>& query_labels, int k) {
  if (k < 1 || static_cast<int>(retrieved_labels.size()) != k) {
    throw std::invalid_argument("precision_at_k: expected exactly k retrieved items");
  }
  int rel = 0;
  for (const std::vector<int>* labels : retrieved_labels) {
    if (intersects(*labels, query_labels)) ++rel;
  }
  return static_cast<double>(rel) / k;
}

EvalReport evaluate(const BinaryCodebook& queries,
                    const std::vector<std::vector<int>>& query_labels, const BinaryCodebook& db,
                    const std::vector<std::vector<int>>& db_labels, int k) {
  if (db.num_docs < 1) throw std::invalid_argument("evaluate: empty database");
  if (queries.bits != db.bits) {
    throw std::invalid_argument("evaluate: code widths differ (" + std::to_string(queries.bits) +
                                " vs " + std::to_string(db.bits) + ")");
  }
  if (k < 1 || k > db.num_docs) {
    throw std::invalid_argument("evaluate: k=" + std::to_string(k) + " exceeds database size " +
                                std::to_string(db.num_docs));
  }
  if (static_cast<int>(query_labels.size()) != queries.num_docs ||
      static_cast<int>(db_labels.size()) != db.num_docs) {
    throw std::invalid_argument("evaluate: label lists must align with the codebooks");
  }

  const int nq = queries.num_docs;
  std::vector<double> prec(nq, -1.0);
#pragma omp parallel for schedule(dynamic, 8)
  for (int q = 0; q < nq; ++q) {
    if (query_labels[q].empty()) continue;
    const auto nn = topk(db, queries.code(q), queries.bits, k);
    std::vector<const std::vector<int>*> retrieved;
    retrieved.reserve(k);
    for (const auto& [doc, dist] : nn) retrieved.push_back(&db_labels[doc]);
    prec[q] = precision_at_k(retrieved, query_labels[q], k);
  }

  EvalReport rep;
  rep.k = k;
  double sum = 0.0;
  for (int q = 0; q < nq; ++q) {
    if (prec[q] < 0.0) {
      rep.num_skipped += 1;
      continue;
    }
    rep.query_ids.push_back(queries.ids[q]);
    rep.precision.push_back(prec[q]);
    sum += prec[q];
  }
  if (rep.precision.empty()) {
    throw std::runtime_error("evaluate: every query had an empty label set");
  }
  rep.mean = sum / static_cast<double>(rep.precision.size());
  return rep;
}

void save_codes(const BinaryCodebook& cb, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "mixhash-codes v1 " << cb.num_docs << " " << cb.bits << "\n";
  char buf[17];
  for (int i = 0; i < cb.num_docs; ++i) {
    out << cb.ids[i] << "\t";
    const uint64_t* w = cb.code(i);
    for (int j = cb.words_per_doc - 1; j >= 0; --j) {
      std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(w[j]));
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

BinaryCodebook load_codes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open codes file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty codes file '" + path + "'");
  std::istringstream hdr(line);
  std::string magic, version;
  int num_docs = -1, bits = -1;
  hdr >> magic >> version >> num_docs >> bits;
  if (magic != "mixhash-codes" || version != "v1" || num_docs < 1 || bits < 1) {
    throw std::runtime_error("'" + path + "' is not a mixhash-codes v1 file");
  }
  std::vector<std::string> ids(num_docs);
  BinaryCodebook cb;
  {
    std::vector<std::string> tmp(num_docs);
    cb = make_codebook(num_docs, bits, std::move(tmp));
  }
  const int W = cb.words_per_doc;
  const size_t hex_len = static_cast<size_t>(W) * 16;
  int row = 0;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (row >= num_docs) throw std::runtime_error("'" + path + "' has more rows than its header");
    const size_t tab = line.find('\t');
    if (tab == std::string::npos || line.size() - tab - 1 != hex_len) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected id<TAB>" +
                               std::to_string(hex_len) + "-char hex");
    }
    ids[row] = line.substr(0, tab);
    uint64_t* w = cb.words.data() + static_cast<size_t>(row) * W;
    for (int j = 0; j < W; ++j) {
      const std::string chunk = line.substr(tab + 1 + static_cast<size_t>(j) * 16, 16);
      w[W - 1 - j] = std::stoull(chunk, nullptr, 16);
    }
    if (bits % 64 != 0) {
      const uint64_t mask = ~((uint64_t{1} << (bits % 64)) - 1);
      if (w[W - 1] & mask) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                 ": padding bits beyond code width are not zero");
      }
    }
    ++row;
  }
  if (row != num_docs) {
    throw std::runtime_error("'" + path + "' header says " + std::to_string(num_docs) +
                             " docs but " + std::to_string(row) + " were read");
  }
  cb.ids = std::move(ids);
  return cb;
}

void save_thresholds(const std::vector<double>& thresholds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "mixhash-medians v1 " << thresholds.size() << "\n";
  char buf[40];
  for (double t : thresholds) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", t);
    out << buf;
  }
}

std::vector<double> load_thresholds(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open medians file '" + path + "'");
  std::string magic, version;
  size_t n = 0;
  in >> magic >> version >> n;
  if (magic != "mixhash-medians" || version != "v1") {
    throw std::runtime_error("'" + path + "' is not a mixhash-medians v1 file");
  }
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    if (!(in >> out[i])) throw std::runtime_error("truncated medians file '" + path + "'");
  }
  return out;
}

void save_eval_report(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "id\tprecision\n";
  char buf[40];
  for (size_t i = 0; i < report.query_ids.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.6f", report.precision[i]);
    out << report.query_ids[i] << "\t" << buf << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%.6f", report.mean);
  out << "MEAN\t" << buf << "\n";
}

}  // namespace mixhash::hashing
