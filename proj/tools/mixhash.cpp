#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mixhash/corpus.hpp"
#include "mixhash/hashing.hpp"
#include "mixhash/models.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mixhash;

namespace {

// exit codes: 0 success, 1 usage/validation error, 2 runtime failure
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

void write_config_echo(const json& cfg, const std::string& path) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << cfg.dump(2) << "\n";
}

struct PrepareArgs {
  std::string input, input_sparse, input_vocab, out;
  int max_vocab = 10000;
  int min_df = 2;
  std::vector<double> ratios = {0.8, 0.1, 0.1};
  uint64_t seed = 1;
};

int cmd_prepare(const PrepareArgs& a) {
  if (a.ratios.size() != 3) throw std::invalid_argument("--ratios needs exactly 3 values");
  corpus::DocumentSet ds;
  if (!a.input.empty()) {
    auto docs = corpus::load_jsonl(a.input);
    ds = corpus::make_document_set(std::move(docs), a.max_vocab, a.min_df, a.ratios[0],
                                   a.ratios[1], a.ratios[2], a.seed);
  } else {
    ds = corpus::load_sparse_corpus(a.input_sparse, a.input_vocab);
    corpus::assign_splits(ds, a.ratios[0], a.ratios[1], a.ratios[2], a.seed);
  }
  corpus::save_cache(ds, a.out);

  json cfg;
  cfg["subcommand"] = "prepare";
  cfg["input"] = a.input;
  cfg["input_sparse"] = a.input_sparse;
  cfg["input_vocab"] = a.input_vocab;
  cfg["out"] = a.out;
  cfg["max_vocab"] = a.max_vocab;
  cfg["min_df"] = a.min_df;
  cfg["ratios"] = a.ratios;
  cfg["seed"] = a.seed;
  write_config_echo(cfg, (fs::path(a.out) / "config.json").string());

  std::cout << "prepared " << ds.num_docs() << " documents, vocab " << ds.vocab.size()
            << ", labels " << ds.num_labels() << "\n";
  return 0;
}

struct SynthArgs {
  int clusters = 5, per_cluster = 400, vocab = 1000, len = 100;
  uint64_t seed = 7;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  auto docs = corpus::synth_documents(a.clusters, a.per_cluster, a.vocab, a.len, a.seed);
  corpus::write_jsonl(docs, a.out);

  json cfg;
  cfg["subcommand"] = "synth";
  cfg["clusters"] = a.clusters;
  cfg["per_cluster"] = a.per_cluster;
  cfg["vocab"] = a.vocab;
  cfg["len"] = a.len;
  cfg["seed"] = a.seed;
  cfg["out"] = a.out;
  write_config_echo(cfg, a.out + ".config.json");

  std::cout << "wrote " << docs.size() << " documents to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, out;
  std::string model = "gmsh";
  models::TrainConfig cfg;
  std::string noise_source = "encoder";
};

int cmd_train(const TrainArgs& a) {
  models::TrainConfig cfg = a.cfg;
  cfg.kind = models::model_kind_from_string(a.model);
  cfg.noise_source = models::noise_source_from_string(a.noise_source);
  cfg.validate();

  corpus::DocumentSet ds = corpus::load_cache(a.data);
  fs::create_directories(a.out);
  cfg.abort_checkpoint_path = (fs::path(a.out) / "abort.ckpt").string();

  json echo;
  echo["subcommand"] = "train";
  echo["data"] = a.data;
  echo["out"] = a.out;
  echo["model"] = a.model;
  echo["bits"] = cfg.bits;
  echo["components"] = cfg.components;
  echo["alpha"] = cfg.alpha;
  echo["batch"] = cfg.batch_size;
  echo["epochs"] = cfg.epochs;
  echo["seed"] = cfg.seed;
  echo["kl_warmup"] = cfg.kl_warmup;
  echo["noise_source"] = a.noise_source;
  echo["freeze_prior"] = cfg.freeze_prior;
  echo["hidden"] = cfg.hidden;
  echo["lr"] = cfg.learning_rate;
  echo["lr_decay"] = cfg.lr_decay;
  echo["lr_decay_interval"] = cfg.lr_decay_interval;
  echo["grad_clip"] = cfg.grad_clip;
  echo["eval_every"] = cfg.eval_every;
  write_config_echo(echo, (fs::path(a.out) / "config.json").string());

  models::TrainResult result = models::train(cfg, ds);
  models::save_checkpoint(result.params, (fs::path(a.out) / "model.ckpt").string());
  models::save_train_log(result.log, (fs::path(a.out) / "train_log.tsv").string());

  std::cout << "best epoch " << result.best_epoch << " val_loss " << result.best_val_loss
            << "; checkpoint written to " << (fs::path(a.out) / "model.ckpt").string() << "\n";
  return 0;
}

struct HashArgs {
  std::string ckpt, data, split = "train", out;
  std::string medians;            // reuse thresholds from this file
  std::string median_scope = "db";  // db | joint
  std::string db_split = "train";
};

int cmd_hash(const HashArgs& a) {
  models::ModelParams params = models::load_checkpoint(a.ckpt);
  corpus::DocumentSet ds = corpus::load_cache(a.data);
  if (params.vocab_size != ds.vocab.size()) {
    throw std::invalid_argument("checkpoint vocab size " + std::to_string(params.vocab_size) +
                                " does not match dataset vocab size " +
                                std::to_string(ds.vocab.size()));
  }
  if (a.median_scope != "db" && a.median_scope != "joint") {
    throw std::invalid_argument("--median-scope must be 'db' or 'joint'");
  }

  const corpus::Split split = corpus::split_from_string(a.split);
  const std::vector<int> idx = ds.split_indices(split);
  if (idx.empty()) throw std::invalid_argument("split '" + a.split + "' is empty");
  std::vector<std::string> ids;
  ids.reserve(idx.size());
  for (int d : idx) ids.push_back(ds.documents[d].id);

  diffmath::DenseMatrix latents = models::latent_codes(params, ds, idx);
  hashing::BinaryCodebook cb;
  bool wrote_medians = false;
  if (models::is_bernoulli(params.kind)) {
    cb = hashing::fixed_binarize(latents, std::move(ids));
  } else {
    std::vector<double> thresholds;
    if (!a.medians.empty()) {
      thresholds = hashing::load_thresholds(a.medians);
      if (static_cast<int>(thresholds.size()) != params.bits) {
        throw std::invalid_argument("medians file has " + std::to_string(thresholds.size()) +
                                    " entries, expected " + std::to_string(params.bits));
      }
    } else {
      const corpus::Split dbs = corpus::split_from_string(a.db_split);
      std::vector<int> db_idx = ds.split_indices(dbs);
      if (db_idx.empty()) throw std::invalid_argument("db split '" + a.db_split + "' is empty");
      diffmath::DenseMatrix basis;
      if (a.median_scope == "joint" && split != dbs) {
        std::vector<int> joint = db_idx;
        joint.insert(joint.end(), idx.begin(), idx.end());
        basis = models::latent_codes(params, ds, joint);
      } else if (split == dbs) {
        basis = latents;
      } else {
        basis = models::latent_codes(params, ds, db_idx);
      }
      thresholds = hashing::median_thresholds(basis);
      hashing::save_thresholds(thresholds, a.out + ".medians");
      wrote_medians = true;
    }
    cb = hashing::binarize(latents, thresholds, std::move(ids));
  }
  hashing::save_codes(cb, a.out);

  json echo;
  echo["subcommand"] = "hash";
  echo["ckpt"] = a.ckpt;
  echo["data"] = a.data;
  echo["split"] = a.split;
  echo["out"] = a.out;
  echo["medians"] = a.medians;
  echo["median_scope"] = a.median_scope;
  echo["db_split"] = a.db_split;
  write_config_echo(echo, a.out + ".config.json");

  std::cout << "wrote " << cb.num_docs << " codes (" << cb.bits << " bits) to " << a.out;
  if (wrote_medians) std::cout << " (+ " << a.out << ".medians)";
  std::cout << "\n";
  return 0;
}

struct EvalArgs {
  std::string queries, db, data, out;
  int k = 100;
};

int cmd_eval(const EvalArgs& a) {
  hashing::BinaryCodebook q = hashing::load_codes(a.queries);
  hashing::BinaryCodebook db = hashing::load_codes(a.db);
  corpus::DocumentSet ds = corpus::load_cache(a.data);

  std::unordered_map<std::string, const std::vector<int>*> by_id;
  for (int i = 0; i < ds.num_docs(); ++i) by_id[ds.documents[i].id] = &ds.label_ids[i];
  auto lookup = [&](const std::vector<std::string>& ids) {
    std::vector<std::vector<int>> labels;
    labels.reserve(ids.size());
    for (const std::string& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) {
        throw std::invalid_argument("document '" + id + "' is not in the dataset cache");
      }
      labels.push_back(*it->second);
    }
    return labels;
  };

  hashing::EvalReport rep = hashing::evaluate(q, lookup(q.ids), db, lookup(db.ids), a.k);
  hashing::save_eval_report(rep, a.out);

  json echo;
  echo["subcommand"] = "eval";
  echo["queries"] = a.queries;
  echo["db"] = a.db;
  echo["data"] = a.data;
  echo["k"] = a.k;
  echo["out"] = a.out;
  write_config_echo(echo, a.out + ".config.json");

  std::cout << "mean precision@" << a.k << " = " << rep.mean << " over " << rep.precision.size()
            << " queries (" << rep.num_skipped << " skipped)\n";
  return 0;
}

struct GradcheckArgs {
  std::string model = "gmsh";
  uint64_t seed = 1;
  double eps = 1e-3;
  std::string noise_source = "encoder";
  bool inject_bug = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  models::GradCheckReport rep = models::gradcheck_tiny(
      models::model_kind_from_string(a.model), a.seed, a.eps,
      models::noise_source_from_string(a.noise_source), a.inject_bug);
  for (const auto& [name, err] : rep.per_tensor) {
    std::printf("%-22s max rel err %.3e\n", name.c_str(), err);
  }
  std::printf("TOTAL %-16s max rel err %.3e (%.2fs)\n", a.model.c_str(), rep.max_rel_err,
              rep.seconds);
  if (rep.max_rel_err > 1e-3) {
    std::cerr << "gradcheck FAILED: max relative error " << rep.max_rel_err << " > 1e-3\n";
    return kExitValidation;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("MIXHASH_THREADS")) {
#ifdef _OPENMP
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
#endif
  }

  CLI::App app{"mixture-prior generative semantic hashing toolkit"};
  app.require_subcommand(1);

  PrepareArgs pa;
  auto* prepare = app.add_subcommand("prepare", "ingest a corpus into a dataset cache");
  auto* in_json = prepare->add_option("--input", pa.input, "JSON-lines input file");
  auto* in_sparse =
      prepare->add_option("--input-sparse", pa.input_sparse, "preprocessed sparse input file");
  prepare->add_option("--input-vocab", pa.input_vocab, "vocab file for --input-sparse")
      ->needs(in_sparse);
  in_json->excludes(in_sparse);
  prepare->add_option("--out", pa.out, "output directory")->required();
  prepare->add_option("--max-vocab", pa.max_vocab, "vocabulary size cap");
  prepare->add_option("--min-df", pa.min_df, "minimum document frequency");
  prepare->add_option("--ratios", pa.ratios, "train/validation/test fractions")->expected(3);
  prepare->add_option("--seed", pa.seed, "split shuffle seed");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a clustered synthetic corpus");
  synth->add_option("--clusters", sa.clusters, "number of clusters");
  synth->add_option("--per-cluster", sa.per_cluster, "documents per cluster");
  synth->add_option("--vocab", sa.vocab, "vocabulary size");
  synth->add_option("--len", sa.len, "tokens per document");
  synth->add_option("--seed", sa.seed, "generator seed");
  synth->add_option("--out", sa.out, "output jsonl path")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a hashing model");
  train->add_option("--data", ta.data, "dataset cache directory")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--model", ta.model, "gmsh | bmsh | gmsh-s | bmsh-s");
  train->add_option("--bits", ta.cfg.bits, "code length m");
  train->add_option("--components", ta.cfg.components, "mixture components K");
  train->add_option("--alpha", ta.cfg.alpha, "supervised loss weight");
  train->add_option("--batch", ta.cfg.batch_size, "batch size");
  train->add_option("--epochs", ta.cfg.epochs, "training epochs");
  train->add_option("--seed", ta.cfg.seed, "training seed");
  train->add_flag("--kl-warmup", ta.cfg.kl_warmup, "ramp KL weight over the first 10% of steps");
  train->add_option("--noise-source", ta.noise_source, "encoder | component");
  train->add_flag("--freeze-prior", ta.cfg.freeze_prior, "do not update prior parameters");
  train->add_option("--hidden", ta.cfg.hidden, "encoder hidden units");
  train->add_option("--lr", ta.cfg.learning_rate, "Adam base learning rate");
  train->add_option("--lr-decay", ta.cfg.lr_decay, "learning-rate decay factor");
  train->add_option("--lr-decay-interval", ta.cfg.lr_decay_interval,
                    "iterations between decay steps");
  train->add_option("--clip", ta.cfg.grad_clip, "global gradient-norm clip (0 disables)");
  train->add_option("--eval-every", ta.cfg.eval_every,
                    "epochs between validation precision probes (0 disables)");

  HashArgs ha;
  auto* hash = app.add_subcommand("hash", "binarize a split with a trained model");
  hash->add_option("--ckpt", ha.ckpt, "checkpoint file")->required();
  hash->add_option("--data", ha.data, "dataset cache directory")->required();
  hash->add_option("--split", ha.split, "train | validation | test");
  hash->add_option("--out", ha.out, "codes output path")->required();
  hash->add_option("--medians", ha.medians, "reuse binarization thresholds from this file");
  hash->add_option("--median-scope", ha.median_scope, "db | joint threshold statistics");
  hash->add_option("--db-split", ha.db_split, "split providing threshold statistics");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "precision@K retrieval evaluation");
  eval->add_option("--queries", ea.queries, "query codes file")->required();
  eval->add_option("--db", ea.db, "database codes file")->required();
  eval->add_option("--data", ea.data, "dataset cache directory (labels)")->required();
  eval->add_option("--k", ea.k, "retrieved documents per query");
  eval->add_option("--out", ea.out, "report TSV path")->required();

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--model", ga.model, "gmsh | bmsh | gmsh-s | bmsh-s");
  gradcheck->add_option("--seed", ga.seed, "fixture seed");
  gradcheck->add_option("--eps", ga.eps, "central-difference step");
  gradcheck->add_option("--noise-source", ga.noise_source, "encoder | component");
  gradcheck->add_flag("--inject-bug", ga.inject_bug,
                      "corrupt one gradient tensor (test fixture)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (prepare->parsed()) {
      if (pa.input.empty() && pa.input_sparse.empty()) {
        std::cerr << "prepare: provide --input or --input-sparse\n";
        return kExitValidation;
      }
      if (!pa.input_sparse.empty() && pa.input_vocab.empty()) {
        std::cerr << "prepare: --input-sparse requires --input-vocab\n";
        return kExitValidation;
      }
      return cmd_prepare(pa);
    }
    if (synth->parsed()) return cmd_synth(sa);
    if (train->parsed()) return cmd_train(ta);
    if (hash->parsed()) return cmd_hash(ha);
    if (eval->parsed()) return cmd_eval(ea);
    if (gradcheck->parsed()) return cmd_gradcheck(ga);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
