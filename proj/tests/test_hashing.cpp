#include <algorithm>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mixhash/hashing.hpp"
#include "mixhash/ref_kernels.hpp"
#include "mixhash/rng.hpp"

using namespace mixhash;
using diffmath::DenseMatrix;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = "d" + std::to_string(i);
  return ids;
}

hashing::BinaryCodebook random_codebook(int n, int bits, uint64_t seed) {
  hashing::BinaryCodebook cb = hashing::make_codebook(n, bits, make_ids(n));
  Rng rng(seed);
  for (int d = 0; d < n; ++d) {
    uint64_t* w = cb.words.data() + static_cast<size_t>(d) * cb.words_per_doc;
    for (int b = 0; b < bits; ++b) {
      if (rng.uniform() < 0.5) w[b / 64] |= uint64_t{1} << (b % 64);
    }
  }
  return cb;
}

}  // namespace

TEST_CASE("median binarization uses the lower median and a strict threshold") {
  DenseMatrix lat(4, 2);
  // column 0: 1,2,3,4 -> lower median 2 -> bits 0,0,1,1; column 1 constant
  for (int r = 0; r < 4; ++r) {
    lat.at(r, 0) = static_cast<float>(r + 1);
    lat.at(r, 1) = 3.5f;
  }
  auto cb = hashing::median_binarize(lat, make_ids(4));
  CHECK_FALSE(cb.get_bit(0, 0));
  CHECK_FALSE(cb.get_bit(1, 0));
  CHECK(cb.get_bit(2, 0));
  CHECK(cb.get_bit(3, 0));
  for (int r = 0; r < 4; ++r) CHECK_FALSE(cb.get_bit(r, 1));
}

TEST_CASE("median binarization balances bits on continuous data") {
  Rng rng(17);
  const int n = 101, m = 8;
  DenseMatrix lat(n, m);
  for (auto& v : lat.data) v = static_cast<float>(rng.normal());
  auto cb = hashing::median_binarize(lat, make_ids(n));
  for (int c = 0; c < m; ++c) {
    int ones = 0;
    for (int r = 0; r < n; ++r) ones += cb.get_bit(r, c);
    CHECK(ones >= n / 2);
    CHECK(ones <= (n + 1) / 2);
  }
}

TEST_CASE("fixed binarization ties to zero and is idempotent") {
  DenseMatrix probs(1, 3);
  probs.at(0, 0) = 0.5f;
  probs.at(0, 1) = 0.2f;
  probs.at(0, 2) = 0.8f;
  auto cb = hashing::fixed_binarize(probs, make_ids(1));
  CHECK_FALSE(cb.get_bit(0, 0));  // exactly 0.5 -> 0
  CHECK_FALSE(cb.get_bit(0, 1));
  CHECK(cb.get_bit(0, 2));

  DenseMatrix again(1, 3);
  for (int c = 0; c < 3; ++c) again.at(0, c) = cb.get_bit(0, c) ? 1.0f : 0.0f;
  auto cb2 = hashing::fixed_binarize(again, make_ids(1));
  CHECK(cb2.words == cb.words);
}

TEST_CASE("hamming distance basics and width mismatch") {
  auto cb = hashing::make_codebook(2, 4, make_ids(2));
  // 1010 vs 0110 (bit 0 = lsb)
  cb.words[0] = 0b1010;
  cb.words[1] = 0b0110;
  CHECK(hashing::hamming(cb, 0, cb, 0) == 0);
  CHECK(hashing::hamming(cb, 0, cb, 1) == 2);

  auto other = hashing::make_codebook(1, 8, make_ids(1));
  CHECK_THROWS_AS(hashing::hamming(cb, 0, other, 0), std::invalid_argument);
}

TEST_CASE("hamming equals the per-bit reference on random wide codes") {
  auto cb = random_codebook(1000, 128, 3);
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    const int a = static_cast<int>(rng.below(1000));
    const int b = static_cast<int>(rng.below(1000));
    CHECK(hashing::hamming(cb, a, cb, b) ==
          ref::hamming(cb.code(a), cb.code(b), 128));
  }
}

TEST_CASE("hamming is a metric on random triples") {
  auto cb = random_codebook(300, 128, 5);
  Rng rng(6);
  for (int t = 0; t < 10000; ++t) {
    const int a = static_cast<int>(rng.below(300));
    const int b = static_cast<int>(rng.below(300));
    const int c = static_cast<int>(rng.below(300));
    const int dab = hashing::hamming(cb, a, cb, b);
    const int dba = hashing::hamming(cb, b, cb, a);
    const int dac = hashing::hamming(cb, a, cb, c);
    const int dbc = hashing::hamming(cb, b, cb, c);
    CHECK(dab == dba);
    CHECK(dab >= 0);
    CHECK(dac <= dab + dbc);
  }
  CHECK(hashing::hamming(cb, 7, cb, 7) == 0);
}

TEST_CASE("topk matches the exhaustive sort oracle") {
  auto cb = random_codebook(1000, 64, 8);
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    std::vector<uint64_t> q(cb.words_per_doc);
    for (auto& w : q) w = rng.next_u64();
    auto got = hashing::topk(cb, q.data(), 64, 100);
    auto want = ref::topk_fullsort(cb.words, cb.words_per_doc, cb.num_docs, q.data(), 64, 100);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].first == want[i].first);
      CHECK(got[i].second == want[i].second);
    }
  }
}

TEST_CASE("topk boundary behaviour") {
  auto cb = random_codebook(20, 32, 10);
  // k == num_docs is a (distance, index)-sorted permutation
  auto all = hashing::topk(cb, cb.code(3), 32, 20);
  CHECK(all.size() == 20);
  for (size_t i = 1; i < all.size(); ++i) {
    const bool ordered = all[i - 1].second < all[i].second ||
                         (all[i - 1].second == all[i].second &&
                          all[i - 1].first < all[i].first);
    CHECK(ordered);
  }
  // a query equal to a database code ranks it first at distance 0
  CHECK(all[0].first == 3);
  CHECK(all[0].second == 0);
  CHECK_THROWS_AS(hashing::topk(cb, cb.code(0), 32, 21), std::invalid_argument);
}

TEST_CASE("precision at k counts label intersections") {
  std::vector<int> query = {1, 5};
  std::vector<std::vector<int>> pool(100);
  for (int i = 0; i < 100; ++i) pool[i] = (i < 37) ? std::vector<int>{5, 9} : std::vector<int>{2};
  std::vector<const std::vector<int>*> retrieved;
  for (const auto& p : pool) retrieved.push_back(&p);
  CHECK(hashing::precision_at_k(retrieved, query, 100) == doctest::Approx(0.37));

  std::vector<const std::vector<int>*> all_match(10, &pool[0]);
  CHECK(hashing::precision_at_k(all_match, {5}, 10) == doctest::Approx(1.0));
  CHECK(hashing::precision_at_k(all_match, {3}, 10) == doctest::Approx(0.0));
}

TEST_CASE("evaluate: self retrieval, skipped queries, mean consistency") {
  auto db = random_codebook(50, 32, 11);
  std::vector<std::vector<int>> db_labels(50);
  for (int i = 0; i < 50; ++i) db_labels[i] = {i};  // unique labels

  hashing::BinaryCodebook q = hashing::make_codebook(2, 32, {"q0", "q1"});
  std::copy_n(db.code(7), db.words_per_doc, q.words.data());
  std::vector<std::vector<int>> q_labels = {{7}, {}};  // q1 has no labels

  auto rep = hashing::evaluate(q, q_labels, db, db_labels, 1);
  CHECK(rep.mean == doctest::Approx(1.0));
  CHECK(rep.num_skipped == 1);
  REQUIRE(rep.precision.size() == 1);
  CHECK(rep.query_ids[0] == "q0");

  double sum = 0.0;
  for (double p : rep.precision) sum += p;
  CHECK(rep.mean == doctest::Approx(sum / rep.precision.size()).epsilon(1e-9));

  CHECK_THROWS_AS(hashing::evaluate(q, q_labels, db, db_labels, 51), std::invalid_argument);
  hashing::BinaryCodebook wrong = hashing::make_codebook(1, 16, {"w"});
  CHECK_THROWS_AS(hashing::evaluate(wrong, {{1}}, db, db_labels, 1), std::invalid_argument);
}

TEST_CASE("evaluate is invariant to database permutation on tie-free instances") {
  // db code i has its low i bits set; query 0 sees distances 0..n-1, all unique
  const int n = 60, bits = 64, k = 10;
  hashing::BinaryCodebook db = hashing::make_codebook(n, bits, make_ids(n));
  for (int i = 0; i < n; ++i) {
    db.words[i] = i == 0 ? 0 : ((i == 64) ? ~uint64_t{0} : ((uint64_t{1} << i) - 1));
  }
  std::vector<std::vector<int>> db_labels(n);
  Rng rng(12);
  for (int i = 0; i < n; ++i) db_labels[i] = {static_cast<int>(rng.below(3))};

  hashing::BinaryCodebook q = hashing::make_codebook(1, bits, {"q"});
  q.words[0] = 0;
  std::vector<std::vector<int>> q_labels = {{0}};

  auto base = hashing::evaluate(q, q_labels, db, db_labels, k);
  auto base_nn = hashing::topk(db, q.code(0), bits, k);
  std::vector<std::string> base_set;
  for (auto& [doc, dist] : base_nn) base_set.push_back(db.ids[doc]);
  std::sort(base_set.begin(), base_set.end());

  // permute the database
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  hashing::BinaryCodebook shuffled = hashing::make_codebook(n, bits, make_ids(n));
  std::vector<std::vector<int>> shuffled_labels(n);
  for (int i = 0; i < n; ++i) {
    shuffled.words[i] = db.words[perm[i]];
    shuffled.ids[i] = db.ids[perm[i]];
    shuffled_labels[i] = db_labels[perm[i]];
  }
  auto moved = hashing::evaluate(q, q_labels, shuffled, shuffled_labels, k);
  CHECK(moved.mean == doctest::Approx(base.mean).epsilon(1e-12));

  auto moved_nn = hashing::topk(shuffled, q.code(0), bits, k);
  std::vector<std::string> moved_set;
  for (auto& [doc, dist] : moved_nn) moved_set.push_back(shuffled.ids[doc]);
  std::sort(moved_set.begin(), moved_set.end());
  CHECK(moved_set == base_set);
}

TEST_CASE("codes file round trip, hex layout and padding validation") {
  auto cb = random_codebook(9, 16, 13);
  const std::string path = (fs::temp_directory_path() / "mixhash_codes_rt").string();
  hashing::save_codes(cb, path);
  auto loaded = hashing::load_codes(path);
  CHECK(loaded.bits == cb.bits);
  CHECK(loaded.words == cb.words);
  CHECK(loaded.ids == cb.ids);

  // all 16 bits set -> low 16 bits of the single word
  hashing::BinaryCodebook full = hashing::make_codebook(1, 16, {"x"});
  full.words[0] = 0xffffull;
  hashing::save_codes(full, path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "mixhash-codes v1 1 16");
  CHECK(row == "x\t000000000000ffff");

  // 128-bit codes use most-significant-word-first hex
  hashing::BinaryCodebook wide = hashing::make_codebook(1, 128, {"y"});
  wide.words[0] = 0x1ull;    // bit 0
  wide.words[1] = 0x80ull;   // bit 71
  hashing::save_codes(wide, path);
  std::ifstream in2(path);
  std::getline(in2, header);
  std::getline(in2, row);
  CHECK(row == "y\t00000000000000800000000000000001");

  // nonzero padding bits are rejected
  std::ofstream bad(path, std::ios::binary);
  bad << "mixhash-codes v1 1 16\n";
  bad << "z\t000000000001ffff\n";  // bit 16 set beyond the 16-bit width
  bad.close();
  CHECK_THROWS_WITH_AS(hashing::load_codes(path), doctest::Contains("padding"),
                       std::runtime_error);
}

TEST_CASE("threshold files round trip exactly") {
  std::vector<double> thr = {0.0, -1.25, 3.14159265358979, 1e-17};
  const std::string path = (fs::temp_directory_path() / "mixhash_med_rt").string();
  hashing::save_thresholds(thr, path);
  auto loaded = hashing::load_thresholds(path);
  REQUIRE(loaded.size() == thr.size());
  for (size_t i = 0; i < thr.size(); ++i) CHECK(loaded[i] == thr[i]);
}

TEST_CASE("eval report file has the documented layout") {
  hashing::EvalReport rep;
  rep.k = 100;
  rep.query_ids = {"a", "b"};
  rep.precision = {0.25, 0.75};
  rep.mean = 0.5;
  const std::string path = (fs::temp_directory_path() / "mixhash_rep").string();
  hashing::save_eval_report(rep, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "id\tprecision");
  std::getline(in, line);
  CHECK(line == "a\t0.250000");
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line == "MEAN\t0.500000");
}
