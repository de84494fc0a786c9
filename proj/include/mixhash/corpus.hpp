#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace mixhash::corpus {

struct Document {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> labels;  // sorted, unique; may be empty
};

struct Vocabulary {
  std::unordered_map<std::string, int> term_to_index;
  std::vector<std::string> index_to_term;
  std::vector<int> doc_freq;  // aligned with index_to_term
  int size() const { return static_cast<int>(index_to_term.size()); }
  int index_of(const std::string& term) const {
    auto it = term_to_index.find(term);
    return it == term_to_index.end() ? -1 : it->second;
  }
};

struct SparseVector {
  std::vector<int32_t> indices;  // strictly increasing
  std::vector<float> values;    // > 0
  int nnz() const { return static_cast<int>(indices.size()); }
};

enum class Split { train = 0, validation = 1, test = 2 };
const char* split_name(Split s);
Split split_from_string(const std::string& s);

struct DocumentSet {
  std::vector<Document> documents;
  Vocabulary vocab;
  std::vector<SparseVector> counts;  // aligned with documents
  std::vector<SparseVector> tfidf;
  std::vector<Split> split;
  std::vector<std::string> label_names;        // sorted unique label strings
  std::vector<std::vector<int>> label_ids;     // per doc, sorted

  int num_docs() const { return static_cast<int>(documents.size()); }
  int num_labels() const { return static_cast<int>(label_names.size()); }
  std::vector<int> split_indices(Split s) const;
};

// lowercase + split on non-alphanumeric runs
std::vector<std::string> tokenize(const std::string& text);

// One JSON record per line: {"id": ..., "text" or "tokens": ..., "labels": [...]}.
// Malformed lines and duplicate ids raise errors naming the line.
std::vector<Document> load_jsonl(const std::string& path);

// Terms with doc frequency >= min_df, ranked by total count descending
// (ties lexicographic), truncated to max_vocab.
Vocabulary build_vocabulary(const std::vector<Document>& docs, int max_vocab, int min_df);

// count * ln((1 + N) / (1 + df)), floored at zero
double tfidf_weight(double count, int num_docs, int df);

// Fills counts and L2-normalized tfidf vectors; drops documents whose
// restricted count vector is empty or whose tfidf vector is all zero
// (warning to stderr). label_ids, if non-null, is kept aligned.
void vectorize(std::vector<Document>& docs, const Vocabulary& vocab,
               std::vector<SparseVector>& counts, std::vector<SparseVector>& tfidf);

// Seeded shuffle then contiguous assignment; errors if any split is empty.
void assign_splits(DocumentSet& ds, double r_train, double r_val, double r_test, uint64_t seed);

// Full pipeline: vocabulary, vectors, label table, splits.
DocumentSet make_document_set(std::vector<Document> docs, int max_vocab, int min_df,
                              double r_train, double r_val, double r_test, uint64_t seed);

// Cluster k draws 90% of token mass from its own vocabulary slice and 10%
// uniformly; label = cluster id. Requires vocab_size >= 2 * num_clusters.
std::vector<Document> synth_documents(int num_clusters, int docs_per_cluster, int vocab_size,
                                      int doc_length, uint64_t seed);
DocumentSet synth_corpus(int num_clusters, int docs_per_cluster, int vocab_size, int doc_length,
                         uint64_t seed);

// ---- files ----
// data.sparse: "mixhash-sparse v1 <num_docs> <vocab_size>" header, then per doc
//   id<TAB>label,label<TAB>idx:val idx:val ...
// vocab.tsv: term<TAB>index<TAB>df
// splits.tsv: id<TAB>split
void save_cache(const DocumentSet& ds, const std::string& dir);
DocumentSet load_cache(const std::string& dir);

Vocabulary load_vocab_file(const std::string& path);
// Preprocessed sparse input (+ its vocab); splits still to be assigned.
DocumentSet load_sparse_corpus(const std::string& sparse_path, const std::string& vocab_path);

void write_jsonl(const std::vector<Document>& docs, const std::string& path);

}  // namespace mixhash::corpus
