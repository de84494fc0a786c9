#include "mixhash/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"
#include "mixhash/rng.hpp"

namespace mixhash::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split name '" + s + "'");
}

std::vector<int> DocumentSet::split_indices(Split s) const {
  std::vector<int> out;
  for (int i = 0; i < num_docs(); ++i) {
    if (split[i] == s) out.push_back(i);
  }
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

namespace {

std::vector<std::string> normalize_labels(std::vector<std::string> labels) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

[[noreturn]] void line_error(const std::string& path, size_t lineno, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + what);
}

}  // namespace

std::vector<Document> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open input file '" + path + "'");
  std::vector<Document> docs;
  std::unordered_map<std::string, size_t> seen;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      line_error(path, lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!rec.is_object()) line_error(path, lineno, "record is not a JSON object");
    if (!rec.contains("id")) line_error(path, lineno, "missing 'id'");

    Document d;
    if (rec["id"].is_string()) {
      d.id = rec["id"].get<std::string>();
    } else if (rec["id"].is_number_integer()) {
      d.id = std::to_string(rec["id"].get<int64_t>());
    } else {
      line_error(path, lineno, "'id' must be a string or integer");
    }
    auto prev = seen.find(d.id);
    if (prev != seen.end()) {
      line_error(path, lineno,
                 "duplicate id '" + d.id + "' (first seen on line " +
                     std::to_string(prev->second) + ")");
    }
    seen.emplace(d.id, lineno);

    if (rec.contains("tokens")) {
      if (!rec["tokens"].is_array()) line_error(path, lineno, "'tokens' must be an array");
      for (const auto& t : rec["tokens"]) {
        if (!t.is_string()) line_error(path, lineno, "'tokens' entries must be strings");
        for (auto& tok : tokenize(t.get<std::string>())) d.tokens.push_back(std::move(tok));
      }
    } else if (rec.contains("text")) {
      if (!rec["text"].is_string()) line_error(path, lineno, "'text' must be a string");
      d.tokens = tokenize(rec["text"].get<std::string>());
    } else {
      line_error(path, lineno, "record needs a 'text' or 'tokens' field");
    }

    if (rec.contains("labels")) {
      if (!rec["labels"].is_array()) line_error(path, lineno, "'labels' must be an array");
      std::vector<std::string> labels;
      for (const auto& l : rec["labels"]) {
        if (!l.is_string()) line_error(path, lineno, "'labels' entries must be strings");
        labels.push_back(l.get<std::string>());
      }
      d.labels = normalize_labels(std::move(labels));
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

Vocabulary build_vocabulary(const std::vector<Document>& docs, int max_vocab, int min_df) {
  if (max_vocab < 2) throw std::invalid_argument("max_vocab must be >= 2");
  if (min_df < 1) throw std::invalid_argument("min_df must be >= 1");

  struct Stat {
    int64_t count = 0;
    int df = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  std::unordered_set<std::string> in_doc;
  for (const Document& d : docs) {
    in_doc.clear();
    for (const std::string& t : d.tokens) {
      Stat& s = stats[t];
      s.count += 1;
      if (in_doc.insert(t).second) s.df += 1;
    }
  }

  std::vector<std::pair<std::string, Stat>> kept;
  kept.reserve(stats.size());
  for (auto& kv : stats) {
    if (kv.second.df >= min_df) kept.emplace_back(kv.first, kv.second);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.first < b.first;
  });
  if (static_cast<int>(kept.size()) > max_vocab) kept.resize(max_vocab);
  if (kept.size() < 2) {
    throw std::runtime_error("vocabulary has " + std::to_string(kept.size()) +
                             " terms after filtering; need at least 2");
  }

  Vocabulary v;
  v.index_to_term.reserve(kept.size());
  v.doc_freq.reserve(kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    v.term_to_index.emplace(kept[i].first, static_cast<int>(i));
    v.index_to_term.push_back(kept[i].first);
    v.doc_freq.push_back(kept[i].second.df);
  }
  return v;
}

double tfidf_weight(double count, int num_docs, int df) {
  const double idf = std::log((1.0 + num_docs) / (1.0 + df));
  return count * std::max(0.0, idf);
}

namespace {

// tfidf from counts at a fixed corpus size; returns false if the vector is
// all zero
bool tfidf_from_counts(const SparseVector& counts, const Vocabulary& vocab, int num_docs,
                       SparseVector& out) {
  out.indices.clear();
  out.values.clear();
  double sq = 0.0;
  std::vector<double> weights;
  for (int e = 0; e < counts.nnz(); ++e) {
    const double w = tfidf_weight(counts.values[e], num_docs, vocab.doc_freq[counts.indices[e]]);
    if (w > 0.0) {
      out.indices.push_back(counts.indices[e]);
      weights.push_back(w);
      sq += w * w;
    }
  }
  if (out.indices.empty()) return false;
  const double norm = std::sqrt(sq);
  out.values.reserve(weights.size());
  for (double w : weights) out.values.push_back(static_cast<float>(w / norm));
  return true;
}

}  // namespace

void vectorize(std::vector<Document>& docs, const Vocabulary& vocab,
               std::vector<SparseVector>& counts, std::vector<SparseVector>& tfidf) {
  counts.clear();
  counts.reserve(docs.size());

  std::vector<Document> kept_docs;
  kept_docs.reserve(docs.size());
  std::unordered_map<int, int> acc;
  for (Document& d : docs) {
    acc.clear();
    for (const std::string& t : d.tokens) {
      const int idx = vocab.index_of(t);
      if (idx >= 0) acc[idx] += 1;
    }
    if (acc.empty()) {
      std::cerr << "warning: dropping document '" << d.id << "': no in-vocabulary terms\n";
      continue;
    }
    SparseVector sv;
    sv.indices.reserve(acc.size());
    for (const auto& kv : acc) sv.indices.push_back(kv.first);
    std::sort(sv.indices.begin(), sv.indices.end());
    sv.values.reserve(acc.size());
    for (int32_t idx : sv.indices) sv.values.push_back(static_cast<float>(acc[idx]));
    counts.push_back(std::move(sv));
    kept_docs.push_back(std::move(d));
  }
  docs = std::move(kept_docs);

  // idf depends on the corpus size, so dropping zero-tfidf documents can
  // change the remaining weights; iterate until stable
  for (;;) {
    const int n = static_cast<int>(docs.size());
    tfidf.assign(n, SparseVector{});
    std::vector<char> dead(n, 0);
    bool any_dead = false;
    for (int i = 0; i < n; ++i) {
      if (!tfidf_from_counts(counts[i], vocab, n, tfidf[i])) {
        dead[i] = 1;
        any_dead = true;
        std::cerr << "warning: dropping document '" << docs[i].id << "': tfidf vector is zero\n";
      }
    }
    if (!any_dead) break;
    std::vector<Document> d2;
    std::vector<SparseVector> c2;
    for (int i = 0; i < n; ++i) {
      if (!dead[i]) {
        d2.push_back(std::move(docs[i]));
        c2.push_back(std::move(counts[i]));
      }
    }
    docs = std::move(d2);
    counts = std::move(c2);
  }
}

void assign_splits(DocumentSet& ds, double r_train, double r_val, double r_test, uint64_t seed) {
  if (r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0) {
    throw std::invalid_argument("split ratios must be positive");
  }
  if (std::fabs(r_train + r_val + r_test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  const int n = ds.num_docs();
  const int n_train = static_cast<int>(n * r_train);
  const int n_val = static_cast<int>(n * r_val);
  const int n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw std::invalid_argument("split would leave an empty subset (n=" + std::to_string(n) + ")");
  }
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  ds.split.assign(n, Split::train);
  for (int i = 0; i < n; ++i) {
    Split s = i < n_train ? Split::train : (i < n_train + n_val ? Split::validation : Split::test);
    ds.split[perm[i]] = s;
  }
}

namespace {

void build_label_table(DocumentSet& ds) {
  std::set<std::string> all;
  for (const Document& d : ds.documents) all.insert(d.labels.begin(), d.labels.end());
  ds.label_names.assign(all.begin(), all.end());
  std::unordered_map<std::string, int> idx;
  for (size_t i = 0; i < ds.label_names.size(); ++i) idx[ds.label_names[i]] = static_cast<int>(i);
  ds.label_ids.clear();
  ds.label_ids.reserve(ds.documents.size());
  for (const Document& d : ds.documents) {
    std::vector<int> ids;
    ids.reserve(d.labels.size());
    for (const std::string& l : d.labels) ids.push_back(idx[l]);
    std::sort(ids.begin(), ids.end());
    ds.label_ids.push_back(std::move(ids));
  }
}

}  // namespace

DocumentSet make_document_set(std::vector<Document> docs, int max_vocab, int min_df,
                              double r_train, double r_val, double r_test, uint64_t seed) {
  DocumentSet ds;
  ds.vocab = build_vocabulary(docs, max_vocab, min_df);
  ds.documents = std::move(docs);
  vectorize(ds.documents, ds.vocab, ds.counts, ds.tfidf);
  build_label_table(ds);
  assign_splits(ds, r_train, r_val, r_test, seed);
  return ds;
}

std::vector<Document> synth_documents(int num_clusters, int docs_per_cluster, int vocab_size,
                                      int doc_length, uint64_t seed) {
  if (num_clusters < 1 || docs_per_cluster < 1 || doc_length < 1) {
    throw std::invalid_argument("synth: cluster count, docs per cluster and length must be >= 1");
  }
  if (vocab_size < 2 * num_clusters) {
    throw std::invalid_argument("synth: vocab_size must be >= 2 * num_clusters (" +
                                std::to_string(vocab_size) + " < " +
                                std::to_string(2 * num_clusters) + ")");
  }
  const int slice = vocab_size / num_clusters;
  int term_width = 1;
  for (int v = vocab_size - 1; v >= 10 && term_width < 10; v /= 10) ++term_width;
  const int total = num_clusters * docs_per_cluster;
  int id_width = 1;
  for (int v = total - 1; v >= 10 && id_width < 10; v /= 10) ++id_width;

  char buf[64];
  Rng rng(seed);
  std::vector<Document> docs;
  docs.reserve(total);
  for (int k = 0; k < num_clusters; ++k) {
    for (int d = 0; d < docs_per_cluster; ++d) {
      Document doc;
      std::snprintf(buf, sizeof(buf), "d%0*d", id_width, k * docs_per_cluster + d);
      doc.id = buf;
      doc.labels = {"c" + std::to_string(k)};
      doc.tokens.reserve(doc_length);
      for (int t = 0; t < doc_length; ++t) {
        int term;
        if (rng.uniform() < 0.9) {
          term = k * slice + static_cast<int>(rng.below(slice));
        } else {
          term = static_cast<int>(rng.below(vocab_size));
        }
        std::snprintf(buf, sizeof(buf), "t%0*d", term_width, term);
        doc.tokens.emplace_back(buf);
      }
      docs.push_back(std::move(doc));
    }
  }
  return docs;
}

DocumentSet synth_corpus(int num_clusters, int docs_per_cluster, int vocab_size, int doc_length,
                         uint64_t seed) {
  auto docs = synth_documents(num_clusters, docs_per_cluster, vocab_size, doc_length, seed);
  return make_document_set(std::move(docs), vocab_size, 1, 0.8, 0.1, 0.1, seed ^ 0x51AB5EEDull);
}

// ---- files ------------------------------------------------------------------

namespace {

std::string join_labels(const std::vector<std::string>& labels) {
  std::string out;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (i) out.push_back(',');
    out += labels[i];
  }
  return out;
}

std::vector<std::string> split_labels(const std::string& field) {
  std::vector<std::string> out;
  if (field.empty()) return out;
  size_t pos = 0;
  for (;;) {
    const size_t comma = field.find(',', pos);
    out.push_back(field.substr(pos, comma == std::string::npos ? comma : comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return normalize_labels(std::move(out));
}

void write_sparse_file(const DocumentSet& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "mixhash-sparse v1 " << ds.num_docs() << " " << ds.vocab.size() << "\n";
  char buf[48];
  for (int i = 0; i < ds.num_docs(); ++i) {
    out << ds.documents[i].id << "\t" << join_labels(ds.documents[i].labels) << "\t";
    const SparseVector& sv = ds.counts[i];
    for (int e = 0; e < sv.nnz(); ++e) {
      std::snprintf(buf, sizeof(buf), "%s%d:%.9g", e ? " " : "", sv.indices[e],
                    static_cast<double>(sv.values[e]));
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace

Vocabulary load_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file '" + path + "'");
  Vocabulary v;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string term;
    int index, df;
    if (!std::getline(ss, term, '\t') || !(ss >> index >> df)) {
      line_error(path, lineno, "expected term<TAB>index<TAB>df");
    }
    if (index != static_cast<int>(v.index_to_term.size())) {
      line_error(path, lineno, "vocab indices must be dense and in order");
    }
    v.term_to_index.emplace(term, index);
    v.index_to_term.push_back(term);
    v.doc_freq.push_back(df);
  }
  if (v.size() < 2) throw std::runtime_error("vocab file '" + path + "' has fewer than 2 terms");
  return v;
}

namespace {

void load_sparse_file(const std::string& path, int vocab_size, DocumentSet& ds) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open sparse file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty sparse file '" + path + "'");
  std::istringstream hdr(line);
  std::string magic, version;
  int num_docs = -1, vsz = -1;
  hdr >> magic >> version >> num_docs >> vsz;
  if (magic != "mixhash-sparse" || version != "v1" || num_docs < 0 || vsz < 0) {
    throw std::runtime_error("'" + path + "' is not a mixhash-sparse v1 file");
  }
  if (vsz != vocab_size) {
    throw std::runtime_error("sparse file vocab size " + std::to_string(vsz) +
                             " does not match vocab file size " + std::to_string(vocab_size));
  }
  std::unordered_set<std::string> seen;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) line_error(path, lineno, "expected id<TAB>labels<TAB>entries");
    Document d;
    d.id = line.substr(0, t1);
    if (!seen.insert(d.id).second) line_error(path, lineno, "duplicate id '" + d.id + "'");
    d.labels = split_labels(line.substr(t1 + 1, t2 - t1 - 1));

    SparseVector sv;
    std::istringstream es(line.substr(t2 + 1));
    std::string ent;
    while (es >> ent) {
      const size_t colon = ent.find(':');
      if (colon == std::string::npos) line_error(path, lineno, "bad entry '" + ent + "'");
      const int idx = std::stoi(ent.substr(0, colon));
      const float val = std::stof(ent.substr(colon + 1));
      if (idx < 0 || idx >= vocab_size) line_error(path, lineno, "index out of range");
      if (!sv.indices.empty() && idx <= sv.indices.back()) {
        line_error(path, lineno, "indices must be strictly increasing");
      }
      if (!(val > 0.0f)) line_error(path, lineno, "values must be positive");
      sv.indices.push_back(idx);
      sv.values.push_back(val);
    }
    if (sv.indices.empty()) line_error(path, lineno, "document has no entries");
    ds.documents.push_back(std::move(d));
    ds.counts.push_back(std::move(sv));
  }
  if (static_cast<int>(ds.documents.size()) != num_docs) {
    throw std::runtime_error("'" + path + "' header says " + std::to_string(num_docs) +
                             " docs but " + std::to_string(ds.documents.size()) + " were read");
  }
}

void compute_tfidf_or_die(DocumentSet& ds, const std::string& origin) {
  const int n = ds.num_docs();
  ds.tfidf.assign(n, SparseVector{});
  for (int i = 0; i < n; ++i) {
    if (!tfidf_from_counts(ds.counts[i], ds.vocab, n, ds.tfidf[i])) {
      throw std::runtime_error(origin + ": document '" + ds.documents[i].id +
                               "' has an all-zero tfidf vector");
    }
  }
}

}  // namespace

DocumentSet load_sparse_corpus(const std::string& sparse_path, const std::string& vocab_path) {
  DocumentSet ds;
  ds.vocab = load_vocab_file(vocab_path);
  load_sparse_file(sparse_path, ds.vocab.size(), ds);

  // apply the same drop policy as the token pipeline
  for (;;) {
    const int n = ds.num_docs();
    std::vector<char> dead(n, 0);
    bool any = false;
    ds.tfidf.assign(n, SparseVector{});
    for (int i = 0; i < n; ++i) {
      if (!tfidf_from_counts(ds.counts[i], ds.vocab, n, ds.tfidf[i])) {
        dead[i] = 1;
        any = true;
        std::cerr << "warning: dropping document '" << ds.documents[i].id
                  << "': tfidf vector is zero\n";
      }
    }
    if (!any) break;
    DocumentSet kept;
    kept.vocab = std::move(ds.vocab);
    for (int i = 0; i < n; ++i) {
      if (!dead[i]) {
        kept.documents.push_back(std::move(ds.documents[i]));
        kept.counts.push_back(std::move(ds.counts[i]));
      }
    }
    ds = std::move(kept);
  }
  build_label_table(ds);
  return ds;
}

void save_cache(const DocumentSet& ds, const std::string& dir) {
  fs::create_directories(dir);
  write_sparse_file(ds, (fs::path(dir) / "data.sparse").string());

  const std::string vocab_path = (fs::path(dir) / "vocab.tsv").string();
  std::ofstream vout(vocab_path, std::ios::binary);
  if (!vout) throw std::runtime_error("cannot write '" + vocab_path + "'");
  for (int i = 0; i < ds.vocab.size(); ++i) {
    vout << ds.vocab.index_to_term[i] << "\t" << i << "\t" << ds.vocab.doc_freq[i] << "\n";
  }

  const std::string split_path = (fs::path(dir) / "splits.tsv").string();
  std::ofstream sout(split_path, std::ios::binary);
  if (!sout) throw std::runtime_error("cannot write '" + split_path + "'");
  for (int i = 0; i < ds.num_docs(); ++i) {
    sout << ds.documents[i].id << "\t" << split_name(ds.split[i]) << "\n";
  }
}

DocumentSet load_cache(const std::string& dir) {
  DocumentSet ds;
  ds.vocab = load_vocab_file((fs::path(dir) / "vocab.tsv").string());
  load_sparse_file((fs::path(dir) / "data.sparse").string(), ds.vocab.size(), ds);
  compute_tfidf_or_die(ds, dir);
  build_label_table(ds);

  const std::string split_path = (fs::path(dir) / "splits.tsv").string();
  std::ifstream sin(split_path);
  if (!sin) throw std::runtime_error("cannot open '" + split_path + "'");
  std::unordered_map<std::string, Split> by_id;
  std::string line;
  size_t lineno = 0;
  while (std::getline(sin, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) line_error(split_path, lineno, "expected id<TAB>split");
    by_id.emplace(line.substr(0, tab), split_from_string(line.substr(tab + 1)));
  }
  ds.split.resize(ds.num_docs());
  for (int i = 0; i < ds.num_docs(); ++i) {
    auto it = by_id.find(ds.documents[i].id);
    if (it == by_id.end()) {
      throw std::runtime_error("document '" + ds.documents[i].id + "' missing from splits.tsv");
    }
    ds.split[i] = it->second;
  }
  return ds;
}

void write_jsonl(const std::vector<Document>& docs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const Document& d : docs) {
    json rec;
    rec["id"] = d.id;
    std::string text;
    for (size_t i = 0; i < d.tokens.size(); ++i) {
      if (i) text.push_back(' ');
      text += d.tokens[i];
    }
    rec["text"] = text;
    rec["labels"] = d.labels;
    out << rec.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace mixhash::corpus
