#include "mixhash/models.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mixhash/hashing.hpp"

namespace mixhash::models {

using diffmath::SparseBatch;
using diffmath::SparseRow;
using nlohmann::json;

namespace {

constexpr double kLogvarClamp = 10.0;
constexpr double kAlphaClamp = 1e-6;

double clampd(double x, double lo, double hi) { return x < lo ? lo : (x > hi ? hi : x); }

}  // namespace

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "gmsh") return ModelKind::gmsh;
  if (s == "bmsh") return ModelKind::bmsh;
  if (s == "gmsh-s") return ModelKind::gmsh_s;
  if (s == "bmsh-s") return ModelKind::bmsh_s;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::gmsh: return "gmsh";
    case ModelKind::bmsh: return "bmsh";
    case ModelKind::gmsh_s: return "gmsh-s";
    case ModelKind::bmsh_s: return "bmsh-s";
  }
  return "?";
}

const char* to_string(NoiseSource s) {
  return s == NoiseSource::encoder ? "encoder" : "component";
}

NoiseSource noise_source_from_string(const std::string& s) {
  if (s == "encoder") return NoiseSource::encoder;
  if (s == "component") return NoiseSource::component;
  throw std::invalid_argument("unknown noise source '" + s + "'");
}

bool is_supervised(ModelKind k) { return k == ModelKind::gmsh_s || k == ModelKind::bmsh_s; }
bool is_bernoulli(ModelKind k) { return k == ModelKind::bmsh || k == ModelKind::bmsh_s; }

void TrainConfig::validate() const {
  if (bits < 1) throw std::invalid_argument("bits must be >= 1");
  if (components < 1) throw std::invalid_argument("components must be >= 1");
  if (hidden < 1) throw std::invalid_argument("hidden must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
  if (learning_rate <= 0.0) throw std::invalid_argument("learning rate must be positive");
  if (lr_decay <= 0.0 || lr_decay > 1.0) throw std::invalid_argument("lr decay must be in (0, 1]");
  if (lr_decay_interval < 1) throw std::invalid_argument("lr decay interval must be >= 1");
  if (eval_k < 1) throw std::invalid_argument("eval k must be >= 1");
}

std::vector<ParamTensor*> ModelParams::parameters() {
  std::vector<ParamTensor*> out;
  auto add = [&](ParamTensor& t) {
    if (t.size() > 0) out.push_back(&t);
  };
  add(enc_w1);
  add(enc_b1);
  add(enc_w2);
  add(enc_b2);
  add(head_mu_w);
  add(head_mu_b);
  add(head_logvar_w);
  add(head_logvar_b);
  add(head_logit_w);
  add(head_logit_b);
  add(head_noise_w);
  add(head_noise_b);
  add(head_comp_w);
  add(head_comp_b);
  add(dec_embed);
  add(dec_bias);
  add(prior_pi_logits);
  add(prior_mu);
  add(prior_logvar);
  add(prior_gamma_logits);
  add(prior_noise_logvar);
  add(cls_w1);
  add(cls_b1);
  add(cls_w2);
  add(cls_b2);
  return out;
}

std::vector<const ParamTensor*> ModelParams::parameters() const {
  auto list = const_cast<ModelParams*>(this)->parameters();
  return {list.begin(), list.end()};
}

std::vector<ParamTensor*> ModelParams::prior_parameters() {
  std::vector<ParamTensor*> out;
  for (ParamTensor* t : parameters()) {
    if (t->name.rfind("prior_", 0) == 0) out.push_back(t);
  }
  return out;
}

void ModelParams::zero_grads() {
  for (ParamTensor* t : parameters()) t->zero_grad();
}

ModelParams init_params(ModelKind kind, int vocab_size, int bits, int components, int hidden,
                        int num_labels, double alpha, NoiseSource noise_source, uint64_t seed) {
  if (vocab_size < 2) throw std::invalid_argument("vocab size must be >= 2");
  if (bits < 1) throw std::invalid_argument("bits must be >= 1");
  if (components < 1) throw std::invalid_argument("components must be >= 1");
  if (hidden < 1) throw std::invalid_argument("hidden must be >= 1");
  if (is_supervised(kind) && num_labels < 1) {
    throw std::invalid_argument("supervised model needs at least one label class");
  }
  if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");

  ModelParams P;
  P.kind = kind;
  P.noise_source = noise_source;
  P.vocab_size = vocab_size;
  P.bits = bits;
  P.components = components;
  P.hidden = hidden;
  P.num_labels = is_supervised(kind) ? num_labels : 0;
  P.alpha = is_supervised(kind) ? alpha : 0.0;

  const int V = vocab_size, m = bits, K = components, H = hidden;
  P.enc_w1 = ParamTensor("enc_w1", V, H);
  P.enc_b1 = ParamTensor("enc_b1", 1, H);
  P.enc_w2 = ParamTensor("enc_w2", H, H);
  P.enc_b2 = ParamTensor("enc_b2", 1, H);
  if (!is_bernoulli(kind)) {
    P.head_mu_w = ParamTensor("head_mu_w", H, m);
    P.head_mu_b = ParamTensor("head_mu_b", 1, m);
    P.head_logvar_w = ParamTensor("head_logvar_w", H, m);
    P.head_logvar_b = ParamTensor("head_logvar_b", 1, m);
  } else {
    P.head_logit_w = ParamTensor("head_logit_w", H, m);
    P.head_logit_b = ParamTensor("head_logit_b", 1, m);
    if (noise_source == NoiseSource::encoder) {
      P.head_noise_w = ParamTensor("head_noise_w", H, m);
      P.head_noise_b = ParamTensor("head_noise_b", 1, m);
    } else {
      P.prior_noise_logvar = ParamTensor("prior_noise_logvar", K, m);
    }
    P.prior_gamma_logits = ParamTensor("prior_gamma_logits", K, m);
  }
  P.head_comp_w = ParamTensor("head_comp_w", H, K);
  P.head_comp_b = ParamTensor("head_comp_b", 1, K);
  P.dec_embed = ParamTensor("dec_embed", m, V);
  P.dec_bias = ParamTensor("dec_bias", 1, V);
  P.prior_pi_logits = ParamTensor("prior_pi_logits", 1, K);
  if (!is_bernoulli(kind)) {
    P.prior_mu = ParamTensor("prior_mu", K, m);
    P.prior_logvar = ParamTensor("prior_logvar", K, m);
  }
  if (is_supervised(kind)) {
    P.cls_w1 = ParamTensor("cls_w1", m, H);
    P.cls_b1 = ParamTensor("cls_b1", 1, H);
    P.cls_w2 = ParamTensor("cls_w2", H, num_labels);
    P.cls_b2 = ParamTensor("cls_b2", 1, num_labels);
  }

  Rng rng(seed);
  auto glorot = [&rng](ParamTensor& t) {
    const double limit = std::sqrt(6.0 / (t.value.rows + t.value.cols));
    for (float& v : t.value.data) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * limit);
  };
  auto gauss = [&rng](ParamTensor& t, double sd) {
    for (float& v : t.value.data) v = static_cast<float>(sd * rng.normal());
  };

  glorot(P.enc_w1);
  glorot(P.enc_w2);
  if (!is_bernoulli(kind)) {
    glorot(P.head_mu_w);
    glorot(P.head_logvar_w);
  } else {
    glorot(P.head_logit_w);
    if (noise_source == NoiseSource::encoder) glorot(P.head_noise_w);
  }
  glorot(P.head_comp_w);
  glorot(P.dec_embed);
  if (!is_bernoulli(kind)) {
    gauss(P.prior_mu, 0.1);
  } else {
    gauss(P.prior_gamma_logits, 0.5);
  }
  if (is_supervised(kind)) {
    glorot(P.cls_w1);
    glorot(P.cls_w2);
  }
  return P;
}

NoiseDraws NoiseDraws::draw(ModelKind kind, int batch, int bits, Rng& rng) {
  NoiseDraws nd;
  if (!is_bernoulli(kind)) {
    nd.gauss.resize(batch, bits);
    for (double& v : nd.gauss.data) v = rng.normal();
  } else {
    nd.xi.resize(batch, bits);
    for (double& v : nd.xi.data) v = rng.uniform();
    nd.recon_eps.resize(batch, bits);
    for (double& v : nd.recon_eps.data) v = rng.normal();
  }
  return nd;
}

// ---- shared forward machinery ------------------------------------------------

namespace {

struct Forward {
  SparseBatch x, cnt;
  Mat h1pre, h1, h2pre, h2;
  Mat comp_logits, log_beta, beta;
  std::vector<double> log_pi, pi;
  Mat mu, lv_raw, lv;                       // gaussian
  Mat g, alpha, nlv_raw, nlv, sigma, var_mix;  // bernoulli
  Mat z, zr;
  Mat dec_logits, logp;
  Mat inner;  // B x K inner latent KLs
  Mat c1pre, c1, cls_logits, cls_logp;
  std::vector<double> recon, klcat, kllat, ce;
};

SparseBatch sparse_views(const std::vector<corpus::SparseVector>& vecs,
                         const std::vector<int>& docs) {
  SparseBatch out;
  out.reserve(docs.size());
  for (int d : docs) {
    const corpus::SparseVector& sv = vecs[d];
    out.push_back(SparseRow{sv.indices.data(), sv.values.data(), sv.nnz()});
  }
  return out;
}

void clamp_mat(const Mat& raw, double bound, Mat& out) {
  out.resize(raw.rows, raw.cols);
  for (size_t i = 0; i < raw.size(); ++i) out.data[i] = clampd(raw.data[i], -bound, bound);
}

std::vector<double> log_weights_from_logits(const float* logits, int k) {
  double mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += std::exp(logits[i] - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(k);
  for (int i = 0; i < k; ++i) out[i] = logits[i] - lse;
  return out;
}

// encoder trunk and posterior heads
void forward_posterior(const ModelParams& P, const corpus::DocumentSet& ds,
                       const std::vector<int>& docs, Forward& F) {
  for (int d : docs) {
    if (d < 0 || d >= ds.num_docs()) throw std::invalid_argument("document index out of range");
    if (ds.counts[d].nnz() == 0) {
      throw std::invalid_argument("document '" + ds.documents[d].id +
                                  "' has an empty count vector");
    }
  }
  F.x = sparse_views(ds.tfidf, docs);
  F.cnt = sparse_views(ds.counts, docs);

  diffmath::sparse_affine_forward(F.x, P.enc_w1, P.enc_b1, F.h1pre);
  diffmath::relu_forward(F.h1pre, F.h1);
  diffmath::affine_forward(F.h1, P.enc_w2, P.enc_b2, F.h2pre);
  diffmath::relu_forward(F.h2pre, F.h2);

  diffmath::affine_forward(F.h2, P.head_comp_w, P.head_comp_b, F.comp_logits);
  diffmath::log_softmax_forward(F.comp_logits, F.log_beta);
  F.beta.resize(F.log_beta.rows, F.log_beta.cols);
  for (size_t i = 0; i < F.beta.size(); ++i) F.beta.data[i] = std::exp(F.log_beta.data[i]);

  F.log_pi = log_weights_from_logits(P.prior_pi_logits.value.data.data(), P.components);
  F.pi.resize(F.log_pi.size());
  for (size_t i = 0; i < F.pi.size(); ++i) F.pi[i] = std::exp(F.log_pi[i]);

  if (!is_bernoulli(P.kind)) {
    diffmath::affine_forward(F.h2, P.head_mu_w, P.head_mu_b, F.mu);
    diffmath::affine_forward(F.h2, P.head_logvar_w, P.head_logvar_b, F.lv_raw);
    clamp_mat(F.lv_raw, kLogvarClamp, F.lv);
  } else {
    diffmath::affine_forward(F.h2, P.head_logit_w, P.head_logit_b, F.g);
    diffmath::sigmoid_forward(F.g, F.alpha);
    if (P.noise_source == NoiseSource::encoder) {
      diffmath::affine_forward(F.h2, P.head_noise_w, P.head_noise_b, F.nlv_raw);
      clamp_mat(F.nlv_raw, kLogvarClamp, F.nlv);
    }
  }
}

}  // namespace

LatentBatch encode(const ModelParams& params, const corpus::DocumentSet& ds,
                   const std::vector<int>& docs) {
  Forward F;
  forward_posterior(params, ds, docs, F);
  LatentBatch out;
  out.beta = F.beta;
  if (!is_bernoulli(params.kind)) {
    out.mu = F.mu;
    out.logvar = F.lv;
  } else {
    out.alpha = F.alpha;
    if (params.noise_source == NoiseSource::encoder) {
      out.noise_logvar = F.nlv;
    }
  }
  for (const Mat* m : {&out.mu, &out.logvar, &out.alpha, &out.noise_logvar, &out.beta}) {
    for (double v : m->data) {
      if (!std::isfinite(v)) throw std::runtime_error("encoder produced non-finite activations");
    }
  }
  return out;
}

Mat reparam_gaussian(const Mat& mu, const Mat& logvar, const Mat& noise) {
  if (mu.rows != logvar.rows || mu.cols != logvar.cols || mu.rows != noise.rows ||
      mu.cols != noise.cols) {
    throw std::invalid_argument("reparam_gaussian: shape mismatch");
  }
  Mat z(mu.rows, mu.cols);
  for (size_t i = 0; i < z.size(); ++i) {
    z.data[i] = mu.data[i] + std::exp(0.5 * logvar.data[i]) * noise.data[i];
  }
  return z;
}

Mat sample_bernoulli_st(const Mat& alpha, const Mat& xi) {
  if (alpha.rows != xi.rows || alpha.cols != xi.cols) {
    throw std::invalid_argument("sample_bernoulli_st: shape mismatch");
  }
  Mat z(alpha.rows, alpha.cols);
  for (size_t i = 0; i < z.size(); ++i) {
    z.data[i] = alpha.data[i] - xi.data[i] >= 0.0 ? 1.0 : 0.0;
  }
  return z;
}

Mat st_backward(const Mat& upstream, const Mat& alpha) {
  if (alpha.rows != upstream.rows || alpha.cols != upstream.cols) {
    throw std::invalid_argument("st_backward: shape mismatch");
  }
  Mat g(alpha.rows, alpha.cols);
  for (size_t i = 0; i < g.size(); ++i) {
    const double a = alpha.data[i];
    g.data[i] = upstream.data[i] * 0.5 * a * (1.0 - a);
  }
  return g;
}

Mat inject_noise(const Mat& z, const Mat& noise_logvar, const Mat& eps) {
  if (z.rows != noise_logvar.rows || z.cols != noise_logvar.cols || z.rows != eps.rows ||
      z.cols != eps.cols) {
    throw std::invalid_argument("inject_noise: shape mismatch");
  }
  Mat out(z.rows, z.cols);
  for (size_t i = 0; i < out.size(); ++i) {
    const double lv = clampd(noise_logvar.data[i], -kLogvarClamp, kLogvarClamp);
    out.data[i] = z.data[i] + std::exp(0.5 * lv) * eps.data[i];
  }
  return out;
}

std::vector<double> reconstruction_loglik(const Mat& z, const corpus::DocumentSet& ds,
                                          const std::vector<int>& docs,
                                          const ParamTensor& dec_embed,
                                          const ParamTensor& dec_bias) {
  Mat logits, logp;
  diffmath::affine_forward(z, dec_embed, dec_bias, logits);
  diffmath::log_softmax_forward(logits, logp);
  std::vector<double> out(docs.size());
  for (size_t r = 0; r < docs.size(); ++r) {
    const corpus::SparseVector& cnt = ds.counts[docs[r]];
    if (cnt.nnz() == 0) {
      throw std::invalid_argument("document '" + ds.documents[docs[r]].id + "' is empty");
    }
    double acc = 0.0;
    for (int e = 0; e < cnt.nnz(); ++e) {
      acc += static_cast<double>(cnt.values[e]) * logp.at(static_cast<int>(r), cnt.indices[e]);
    }
    out[r] = acc;
  }
  return out;
}

std::vector<double> mixture_weights(const DenseMatrix& pi_logits) {
  auto lw = log_weights_from_logits(pi_logits.data.data(), static_cast<int>(pi_logits.size()));
  std::vector<double> out(lw.size());
  for (size_t i = 0; i < lw.size(); ++i) out[i] = std::exp(lw[i]);
  return out;
}

std::vector<double> kl_categorical(const Mat& beta, const std::vector<double>& pi) {
  if (beta.cols != static_cast<int>(pi.size())) {
    throw std::invalid_argument("kl_categorical: component count mismatch");
  }
  std::vector<double> out(beta.rows);
  for (int r = 0; r < beta.rows; ++r) {
    double acc = 0.0;
    for (int k = 0; k < beta.cols; ++k) {
      const double b = beta.at(r, k);
      if (b > 0.0) acc += b * (std::log(b) - std::log(pi[k]));
    }
    out[r] = acc;
  }
  return out;
}

std::vector<double> expected_kl_gaussian(const Mat& mu, const Mat& logvar, const Mat& beta,
                                         const DenseMatrix& prior_mu,
                                         const DenseMatrix& prior_logvar) {
  const int B = mu.rows, m = mu.cols, K = prior_mu.rows;
  if (logvar.rows != B || logvar.cols != m || beta.rows != B || beta.cols != K ||
      prior_logvar.rows != K || prior_logvar.cols != m) {
    throw std::invalid_argument("expected_kl_gaussian: shape mismatch");
  }
  std::vector<double> out(B);
  for (int r = 0; r < B; ++r) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
      double kl = 0.0;
      for (int i = 0; i < m; ++i) {
        const double lq = clampd(logvar.at(r, i), -kLogvarClamp, kLogvarClamp);
        const double lp = clampd(prior_logvar.at(k, i), -kLogvarClamp, kLogvarClamp);
        const double diff = mu.at(r, i) - prior_mu.at(k, i);
        kl += 0.5 * (lp - lq + (std::exp(lq) + diff * diff) * std::exp(-lp) - 1.0);
      }
      acc += beta.at(r, k) * kl;
    }
    out[r] = acc;
  }
  return out;
}

std::vector<double> expected_kl_bernoulli(const Mat& alpha, const Mat& beta,
                                          const DenseMatrix& gamma_logits) {
  const int B = alpha.rows, m = alpha.cols, K = gamma_logits.rows;
  if (beta.rows != B || beta.cols != K || gamma_logits.cols != m) {
    throw std::invalid_argument("expected_kl_bernoulli: shape mismatch");
  }
  std::vector<double> out(B);
  // log gamma = -softplus(-logit), log(1 - gamma) = -softplus(logit)
  std::vector<double> lg(static_cast<size_t>(K) * m), l1g(static_cast<size_t>(K) * m);
  for (size_t i = 0; i < lg.size(); ++i) {
    const double x = gamma_logits.data[i];
    const double sp_pos = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    const double sp_neg = x > 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
    lg[i] = -sp_neg;
    l1g[i] = -sp_pos;
  }
  for (int r = 0; r < B; ++r) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
      double kl = 0.0;
      for (int i = 0; i < m; ++i) {
        const double a = clampd(alpha.at(r, i), kAlphaClamp, 1.0 - kAlphaClamp);
        const size_t gi = static_cast<size_t>(k) * m + i;
        kl += a * (std::log(a) - lg[gi]) + (1.0 - a) * (std::log1p(-a) - l1g[gi]);
      }
      acc += beta.at(r, k) * kl;
    }
    out[r] = acc;
  }
  return out;
}

std::vector<double> supervised_loss(const Mat& z,
                                    const std::vector<std::vector<int>>& label_sets,
                                    const ParamTensor& cls_w1, const ParamTensor& cls_b1,
                                    const ParamTensor& cls_w2, const ParamTensor& cls_b2) {
  if (static_cast<int>(label_sets.size()) != z.rows) {
    throw std::invalid_argument("supervised_loss: one label set per row required");
  }
  Mat c1pre, c1, logits, logq;
  diffmath::affine_forward(z, cls_w1, cls_b1, c1pre);
  diffmath::relu_forward(c1pre, c1);
  diffmath::affine_forward(c1, cls_w2, cls_b2, logits);
  diffmath::log_softmax_forward(logits, logq);
  std::vector<double> out(z.rows);
  for (int r = 0; r < z.rows; ++r) {
    const std::vector<int>& labels = label_sets[r];
    if (labels.empty()) throw std::invalid_argument("supervised_loss: empty label set");
    double acc = 0.0;
    for (int y : labels) acc -= logq.at(r, y) / static_cast<double>(labels.size());
    out[r] = acc;
  }
  return out;
}

// ---- elbo ------------------------------------------------------------------

ElboTerms elbo(ModelParams& P, const corpus::DocumentSet& ds, const std::vector<int>& docs,
               const NoiseDraws& noise, const ElboOptions& opt) {
  const int B = static_cast<int>(docs.size());
  if (B < 1) throw std::invalid_argument("elbo: empty batch");
  const int m = P.bits, K = P.components;
  const bool bern = is_bernoulli(P.kind);
  const bool sup = is_supervised(P.kind) && opt.include_supervised;
  const double s = 1.0 / B;
  const double w = opt.kl_weight;

  Forward F;
  forward_posterior(P, ds, docs, F);

  // latent sample
  if (!bern) {
    if (noise.gauss.rows != B || noise.gauss.cols != m) {
      throw std::invalid_argument("elbo: gaussian noise draws have the wrong shape");
    }
    F.z = reparam_gaussian(F.mu, F.lv, noise.gauss);
  } else {
    if (noise.xi.rows != B || noise.xi.cols != m || noise.recon_eps.rows != B ||
        noise.recon_eps.cols != m) {
      throw std::invalid_argument("elbo: bernoulli noise draws have the wrong shape");
    }
    F.z = sample_bernoulli_st(F.alpha, noise.xi);
    if (P.noise_source == NoiseSource::encoder) {
      F.sigma.resize(B, m);
      for (size_t i = 0; i < F.sigma.size(); ++i) F.sigma.data[i] = std::exp(0.5 * F.nlv.data[i]);
    } else {
      F.var_mix.resize(B, m);
      const float* pnlv = P.prior_noise_logvar.value.data.data();
      for (int r = 0; r < B; ++r) {
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          for (int k = 0; k < K; ++k) {
            acc += F.beta.at(r, k) *
                   std::exp(clampd(pnlv[static_cast<size_t>(k) * m + i], -kLogvarClamp,
                                   kLogvarClamp));
          }
          F.var_mix.at(r, i) = acc;
        }
      }
      F.sigma.resize(B, m);
      for (size_t i = 0; i < F.sigma.size(); ++i)
        F.sigma.data[i] = std::sqrt(F.var_mix.data[i]);
    }
    F.zr.resize(B, m);
    for (size_t i = 0; i < F.zr.size(); ++i) {
      F.zr.data[i] = F.z.data[i] + F.sigma.data[i] * noise.recon_eps.data[i];
    }
  }

  // reconstruction
  F.recon.assign(B, 0.0);
  if (opt.include_recon) {
    const Mat& zin = bern ? F.zr : F.z;
    diffmath::affine_forward(zin, P.dec_embed, P.dec_bias, F.dec_logits);
    diffmath::log_softmax_forward(F.dec_logits, F.logp);
    for (int r = 0; r < B; ++r) {
      const SparseRow& cnt = F.cnt[r];
      double acc = 0.0;
      for (int e = 0; e < cnt.nnz; ++e) {
        acc += static_cast<double>(cnt.values[e]) * F.logp.at(r, cnt.indices[e]);
      }
      F.recon[r] = acc;
    }
  }

  // categorical KL
  F.klcat.assign(B, 0.0);
  for (int r = 0; r < B; ++r) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
      acc += F.beta.at(r, k) * (F.log_beta.at(r, k) - F.log_pi[k]);
    }
    F.klcat[r] = acc;
  }

  // expected latent KL; keep per-component inner values for the beta backward
  F.inner.resize(B, K);
  F.kllat.assign(B, 0.0);
  if (!bern) {
    const float* pmu = P.prior_mu.value.data.data();
    const float* plv = P.prior_logvar.value.data.data();
#pragma omp parallel for schedule(static)
    for (int r = 0; r < B; ++r) {
      double tot = 0.0;
      for (int k = 0; k < K; ++k) {
        double kl = 0.0;
        for (int i = 0; i < m; ++i) {
          const double lq = F.lv.at(r, i);
          const double lp = clampd(plv[static_cast<size_t>(k) * m + i], -kLogvarClamp,
                                   kLogvarClamp);
          const double diff = F.mu.at(r, i) - pmu[static_cast<size_t>(k) * m + i];
          kl += 0.5 * (lp - lq + (std::exp(lq) + diff * diff) * std::exp(-lp) - 1.0);
        }
        F.inner.at(r, k) = kl;
        tot += F.beta.at(r, k) * kl;
      }
      F.kllat[r] = tot;
    }
  } else {
    const float* gl = P.prior_gamma_logits.value.data.data();
    std::vector<double> lg(static_cast<size_t>(K) * m), l1g(static_cast<size_t>(K) * m);
    for (size_t i = 0; i < lg.size(); ++i) {
      const double x = gl[i];
      const double sp_pos = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      const double sp_neg = x > 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
      lg[i] = -sp_neg;
      l1g[i] = -sp_pos;
    }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < B; ++r) {
      double tot = 0.0;
      for (int k = 0; k < K; ++k) {
        double kl = 0.0;
        for (int i = 0; i < m; ++i) {
          const double a = clampd(F.alpha.at(r, i), kAlphaClamp, 1.0 - kAlphaClamp);
          const size_t gi = static_cast<size_t>(k) * m + i;
          kl += a * (std::log(a) - lg[gi]) + (1.0 - a) * (std::log1p(-a) - l1g[gi]);
        }
        F.inner.at(r, k) = kl;
        tot += F.beta.at(r, k) * kl;
      }
      F.kllat[r] = tot;
    }
  }

  // supervised cross entropy against a uniform target over the doc's labels
  Mat target;
  F.ce.assign(B, 0.0);
  if (sup) {
    const int L = P.num_labels;
    target.resize(B, L);
    for (int r = 0; r < B; ++r) {
      const std::vector<int>& labels = ds.label_ids[docs[r]];
      if (labels.empty()) {
        throw std::invalid_argument("supervised training: document '" +
                                    ds.documents[docs[r]].id + "' has no labels");
      }
      const double t = 1.0 / static_cast<double>(labels.size());
      for (int y : labels) target.at(r, y) = t;
    }
    diffmath::affine_forward(F.z, P.cls_w1, P.cls_b1, F.c1pre);
    diffmath::relu_forward(F.c1pre, F.c1);
    diffmath::affine_forward(F.c1, P.cls_w2, P.cls_b2, F.cls_logits);
    diffmath::log_softmax_forward(F.cls_logits, F.cls_logp);
    for (int r = 0; r < B; ++r) {
      double acc = 0.0;
      for (int y = 0; y < L; ++y) acc -= target.at(r, y) * F.cls_logp.at(r, y);
      F.ce[r] = acc;
    }
  }

  ElboTerms terms;
  for (int r = 0; r < B; ++r) {
    terms.recon += F.recon[r];
    terms.kl_cat += F.klcat[r];
    terms.kl_latent += F.kllat[r];
    terms.sup_ce += F.ce[r];
  }
  terms.recon *= s;
  terms.kl_cat *= s;
  terms.kl_latent *= s;
  terms.sup_ce *= s;
  terms.loss = -terms.recon + w * (terms.kl_cat + terms.kl_latent) + P.alpha * terms.sup_ce;
  if (!std::isfinite(terms.loss)) {
    std::ostringstream msg;
    msg << "elbo diverged: recon=" << terms.recon << " kl_cat=" << terms.kl_cat
        << " kl_latent=" << terms.kl_latent << " sup_ce=" << terms.sup_ce;
    throw std::runtime_error(msg.str());
  }
  if (!opt.compute_grads) return terms;

  // ---- backward ----
  Mat gh2(B, P.hidden);
  Mat gz(B, m);
  Mat extra_beta(B, K);  // direct dloss/dbeta beyond the KL terms

  if (opt.include_recon) {
    Mat ulogp(B, P.vocab_size);
    for (int r = 0; r < B; ++r) {
      const SparseRow& cnt = F.cnt[r];
      double* u = ulogp.row(r);
      for (int e = 0; e < cnt.nnz; ++e) u[cnt.indices[e]] = -s * cnt.values[e];
    }
    Mat glogits, gzr;
    diffmath::log_softmax_backward(F.logp, ulogp, glogits);
    const Mat& zin = bern ? F.zr : F.z;
    diffmath::affine_backward(zin, P.dec_embed, P.dec_bias, glogits, &gzr);

    for (size_t i = 0; i < gz.size(); ++i) gz.data[i] += gzr.data[i];
    if (bern) {
      if (P.noise_source == NoiseSource::encoder) {
        Mat gnlv(B, m);
        for (size_t i = 0; i < gnlv.size(); ++i) {
          const bool inside = F.nlv_raw.data[i] > -kLogvarClamp &&
                              F.nlv_raw.data[i] < kLogvarClamp;
          gnlv.data[i] = inside
                             ? gzr.data[i] * noise.recon_eps.data[i] * 0.5 * F.sigma.data[i]
                             : 0.0;
        }
        Mat gh2n;
        diffmath::affine_backward(F.h2, P.head_noise_w, P.head_noise_b, gnlv, &gh2n);
        for (size_t i = 0; i < gh2.size(); ++i) gh2.data[i] += gh2n.data[i];
      } else {
        const float* pnlv = P.prior_noise_logvar.value.data.data();
        float* gpnlv = P.prior_noise_logvar.grad.data.data();
        // dloss/dvar = gzr * eps * 0.5 / sigma
        Mat gvar(B, m);
        for (size_t i = 0; i < gvar.size(); ++i) {
          gvar.data[i] = gzr.data[i] * noise.recon_eps.data[i] * 0.5 / F.sigma.data[i];
        }
        for (int k = 0; k < K; ++k) {
          for (int i = 0; i < m; ++i) {
            const double raw = pnlv[static_cast<size_t>(k) * m + i];
            const double pv = std::exp(clampd(raw, -kLogvarClamp, kLogvarClamp));
            const bool inside = raw > -kLogvarClamp && raw < kLogvarClamp;
            double acc = 0.0;
            for (int r = 0; r < B; ++r) acc += gvar.at(r, i) * F.beta.at(r, k);
            if (inside) {
              gpnlv[static_cast<size_t>(k) * m + i] =
                  static_cast<float>(gpnlv[static_cast<size_t>(k) * m + i] + acc * pv);
            }
            for (int r = 0; r < B; ++r) extra_beta.at(r, k) += gvar.at(r, i) * pv;
          }
        }
      }
    }
  }

  if (sup) {
    Mat ulogq(B, P.num_labels);
    for (size_t i = 0; i < ulogq.size(); ++i) ulogq.data[i] = -s * P.alpha * target.data[i];
    Mat gcls_logits, gc1, gc1pre, gz_cls;
    diffmath::log_softmax_backward(F.cls_logp, ulogq, gcls_logits);
    diffmath::affine_backward(F.c1, P.cls_w2, P.cls_b2, gcls_logits, &gc1);
    diffmath::relu_backward(F.c1pre, gc1, gc1pre);
    diffmath::affine_backward(F.z, P.cls_w1, P.cls_b1, gc1pre, &gz_cls);
    for (size_t i = 0; i < gz.size(); ++i) gz.data[i] += gz_cls.data[i];
  }

  // latent heads
  if (!bern) {
    const float* pmu = P.prior_mu.value.data.data();
    const float* plv = P.prior_logvar.value.data.data();
    Mat gmu(B, m), glv(B, m);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < B; ++r) {
      for (int i = 0; i < m; ++i) {
        const double lq = F.lv.at(r, i);
        double dmu = 0.0, dlv = 0.0;
        for (int k = 0; k < K; ++k) {
          const double b = F.beta.at(r, k);
          const double lp = clampd(plv[static_cast<size_t>(k) * m + i], -kLogvarClamp,
                                   kLogvarClamp);
          const double diff = F.mu.at(r, i) - pmu[static_cast<size_t>(k) * m + i];
          dmu += b * diff * std::exp(-lp);
          dlv += b * 0.5 * (std::exp(lq - lp) - 1.0);
        }
        const bool inside = F.lv_raw.at(r, i) > -kLogvarClamp && F.lv_raw.at(r, i) < kLogvarClamp;
        // KL path plus reparameterization path
        gmu.at(r, i) = s * w * dmu + gz.at(r, i);
        glv.at(r, i) = inside ? s * w * dlv + gz.at(r, i) * 0.5 *
                                                  std::exp(0.5 * lq) * noise.gauss.at(r, i)
                              : 0.0;
      }
    }
    // prior grads
    float* gpmu = P.prior_mu.grad.data.data();
    float* gplv = P.prior_logvar.grad.data.data();
#pragma omp parallel for schedule(static)
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < m; ++i) {
        const double raw = plv[static_cast<size_t>(k) * m + i];
        const double lp = clampd(raw, -kLogvarClamp, kLogvarClamp);
        const bool inside = raw > -kLogvarClamp && raw < kLogvarClamp;
        double dpm = 0.0, dpl = 0.0;
        for (int r = 0; r < B; ++r) {
          const double b = F.beta.at(r, k);
          const double lq = F.lv.at(r, i);
          const double diff = F.mu.at(r, i) - pmu[static_cast<size_t>(k) * m + i];
          dpm += b * (-diff) * std::exp(-lp);
          dpl += b * 0.5 * (1.0 - (std::exp(lq) + diff * diff) * std::exp(-lp));
        }
        const size_t gi = static_cast<size_t>(k) * m + i;
        gpmu[gi] = static_cast<float>(gpmu[gi] + s * w * dpm);
        if (inside) gplv[gi] = static_cast<float>(gplv[gi] + s * w * dpl);
      }
    }
    Mat gh2a, gh2b;
    diffmath::affine_backward(F.h2, P.head_mu_w, P.head_mu_b, gmu, &gh2a);
    diffmath::affine_backward(F.h2, P.head_logvar_w, P.head_logvar_b, glv, &gh2b);
    for (size_t i = 0; i < gh2.size(); ++i) gh2.data[i] += gh2a.data[i] + gh2b.data[i];
  } else {
    const float* gl = P.prior_gamma_logits.value.data.data();
    // gradient into the bit logits: straight-through reconstruction surrogate
    // plus the exact KL term
    Mat gg = st_backward(gz, F.alpha);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < B; ++r) {
      for (int i = 0; i < m; ++i) {
        const double a_raw = F.alpha.at(r, i);
        const bool inside = a_raw > kAlphaClamp && a_raw < 1.0 - kAlphaClamp;
        if (!inside) continue;
        const double a = a_raw;
        double dkl = 0.0;
        for (int k = 0; k < K; ++k) {
          const double x = gl[static_cast<size_t>(k) * m + i];
          const double sp_pos = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
          const double sp_neg =
              x > 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
          // log(a/gamma) - log((1-a)/(1-gamma))
          dkl += F.beta.at(r, k) *
                 ((std::log(a) + sp_neg) - (std::log1p(-a) + sp_pos));
        }
        gg.at(r, i) += s * w * dkl * a * (1.0 - a);
      }
    }
    Mat gh2g;
    diffmath::affine_backward(F.h2, P.head_logit_w, P.head_logit_b, gg, &gh2g);
    for (size_t i = 0; i < gh2.size(); ++i) gh2.data[i] += gh2g.data[i];

    float* ggl = P.prior_gamma_logits.grad.data.data();
#pragma omp parallel for schedule(static)
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < m; ++i) {
        const double gamma = diffmath::sigmoid_scalar(gl[static_cast<size_t>(k) * m + i]);
        double acc = 0.0;
        for (int r = 0; r < B; ++r) {
          const double a = clampd(F.alpha.at(r, i), kAlphaClamp, 1.0 - kAlphaClamp);
          acc += F.beta.at(r, k) * (gamma - a);
        }
        const size_t gi = static_cast<size_t>(k) * m + i;
        ggl[gi] = static_cast<float>(ggl[gi] + s * w * acc);
      }
    }
  }

  // component head: project dloss/dbeta through the softmax
  {
    Mat gcl(B, K);
    for (int r = 0; r < B; ++r) {
      double inner_sum = 0.0;
      std::vector<double> df(K);
      for (int k = 0; k < K; ++k) {
        df[k] = s * w * (F.log_beta.at(r, k) + 1.0 - F.log_pi[k] + F.inner.at(r, k)) +
                extra_beta.at(r, k);
        inner_sum += F.beta.at(r, k) * df[k];
      }
      for (int k = 0; k < K; ++k) {
        gcl.at(r, k) = F.beta.at(r, k) * (df[k] - inner_sum);
      }
    }
    Mat gh2c;
    diffmath::affine_backward(F.h2, P.head_comp_w, P.head_comp_b, gcl, &gh2c);
    for (size_t i = 0; i < gh2.size(); ++i) gh2.data[i] += gh2c.data[i];
  }

  // prior mixture logits
  {
    float* gpi = P.prior_pi_logits.grad.data.data();
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int r = 0; r < B; ++r) acc += F.pi[k] - F.beta.at(r, k);
      gpi[k] = static_cast<float>(gpi[k] + s * w * acc);
    }
  }

  // encoder trunk
  Mat gh2pre, gh1, gh1pre;
  diffmath::relu_backward(F.h2pre, gh2, gh2pre);
  diffmath::affine_backward(F.h1, P.enc_w2, P.enc_b2, gh2pre, &gh1);
  diffmath::relu_backward(F.h1pre, gh1, gh1pre);
  diffmath::sparse_affine_backward(F.x, P.enc_w1, P.enc_b1, gh1pre);

  return terms;
}

DenseMatrix latent_codes(const ModelParams& params, const corpus::DocumentSet& ds,
                         const std::vector<int>& docs) {
  const int n = static_cast<int>(docs.size());
  DenseMatrix out(n, params.bits);
  const int chunk = 512;
  for (int start = 0; start < n; start += chunk) {
    const int end = std::min(start + chunk, n);
    std::vector<int> part(docs.begin() + start, docs.begin() + end);
    LatentBatch lb = encode(params, ds, part);
    const Mat& src = is_bernoulli(params.kind) ? lb.alpha : lb.mu;
    for (int r = 0; r < end - start; ++r) {
      for (int c = 0; c < params.bits; ++c) {
        out.at(start + r, c) = static_cast<float>(src.at(r, c));
      }
    }
  }
  return out;
}

// ---- training ----------------------------------------------------------------

namespace {

double dataset_loss(ModelParams& P, const corpus::DocumentSet& ds, const std::vector<int>& idx,
                    int batch_size, uint64_t noise_seed) {
  Rng rng(noise_seed);
  double total = 0.0;
  ElboOptions opt;  // full objective, no grads
  for (size_t start = 0; start < idx.size(); start += batch_size) {
    const size_t end = std::min(start + batch_size, idx.size());
    std::vector<int> batch(idx.begin() + start, idx.begin() + end);
    NoiseDraws nd = NoiseDraws::draw(P.kind, static_cast<int>(batch.size()), P.bits, rng);
    ElboTerms t = elbo(P, ds, batch, nd, opt);
    total += t.loss * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(idx.size());
}

double validation_precision(ModelParams& P, const corpus::DocumentSet& ds,
                            const std::vector<int>& train_idx, const std::vector<int>& val_idx,
                            int k) {
  if (static_cast<int>(train_idx.size()) < k) return -1.0;
  bool any_labeled = false;
  for (int d : val_idx) any_labeled = any_labeled || !ds.label_ids[d].empty();
  if (!any_labeled) return -1.0;

  auto ids_of = [&](const std::vector<int>& idx) {
    std::vector<std::string> ids;
    ids.reserve(idx.size());
    for (int d : idx) ids.push_back(ds.documents[d].id);
    return ids;
  };
  auto labels_of = [&](const std::vector<int>& idx) {
    std::vector<std::vector<int>> labels;
    labels.reserve(idx.size());
    for (int d : idx) labels.push_back(ds.label_ids[d]);
    return labels;
  };

  DenseMatrix db_lat = latent_codes(P, ds, train_idx);
  DenseMatrix q_lat = latent_codes(P, ds, val_idx);
  hashing::BinaryCodebook db_cb, q_cb;
  if (is_bernoulli(P.kind)) {
    db_cb = hashing::fixed_binarize(db_lat, ids_of(train_idx));
    q_cb = hashing::fixed_binarize(q_lat, ids_of(val_idx));
  } else {
    auto thr = hashing::median_thresholds(db_lat);
    db_cb = hashing::binarize(db_lat, thr, ids_of(train_idx));
    q_cb = hashing::binarize(q_lat, thr, ids_of(val_idx));
  }
  return hashing::evaluate(q_cb, labels_of(val_idx), db_cb, labels_of(train_idx), k).mean;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const corpus::DocumentSet& ds) {
  cfg.validate();
  std::vector<int> train_idx = ds.split_indices(corpus::Split::train);
  std::vector<int> val_idx = ds.split_indices(corpus::Split::validation);
  if (train_idx.empty()) throw std::invalid_argument("train: no documents in the train split");
  if (val_idx.empty()) throw std::invalid_argument("train: no documents in the validation split");
  if (is_supervised(cfg.kind)) {
    if (ds.num_labels() < 1) {
      throw std::invalid_argument("supervised model requires labeled documents");
    }
    for (int d : train_idx) {
      if (ds.label_ids[d].empty()) {
        throw std::invalid_argument("supervised training: document '" + ds.documents[d].id +
                                    "' has no labels");
      }
    }
  }

  ModelParams P = init_params(cfg.kind, ds.vocab.size(), cfg.bits, cfg.components, cfg.hidden,
                              ds.num_labels(), cfg.alpha, cfg.noise_source,
                              cfg.seed * 1000003ull + 1);

  std::vector<ParamTensor*> trainable;
  if (cfg.freeze_prior) {
    for (ParamTensor* t : P.parameters()) {
      if (t->name.rfind("prior_", 0) != 0) trainable.push_back(t);
    }
  } else {
    trainable = P.parameters();
  }

  diffmath::AdamState opt;
  opt.base_lr = cfg.learning_rate;
  opt.decay = cfg.lr_decay;
  opt.decay_interval = cfg.lr_decay_interval;
  opt.init(trainable);

  Rng shuffle_rng(cfg.seed * 1000003ull + 2);
  Rng noise_rng(cfg.seed * 1000003ull + 3);
  const uint64_t val_noise_seed = cfg.seed * 1000003ull + 4;

  const int64_t steps_per_epoch =
      static_cast<int64_t>((train_idx.size() + cfg.batch_size - 1) / cfg.batch_size);
  const int64_t total_iters = steps_per_epoch * cfg.epochs;
  const int64_t warmup_iters = cfg.kl_warmup ? std::max<int64_t>(1, total_iters / 10) : 0;

  TrainResult result;
  result.best_epoch = -1;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  int64_t iter = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const size_t end = std::min(start + cfg.batch_size, train_idx.size());
      std::vector<int> batch(train_idx.begin() + start, train_idx.begin() + end);
      P.zero_grads();
      NoiseDraws nd = NoiseDraws::draw(cfg.kind, static_cast<int>(batch.size()), cfg.bits,
                                       noise_rng);
      ElboOptions eopt;
      eopt.kl_weight = warmup_iters > 0
                           ? std::min(1.0, static_cast<double>(iter) /
                                               static_cast<double>(warmup_iters))
                           : 1.0;
      eopt.compute_grads = true;
      ElboTerms t;
      try {
        t = elbo(P, ds, batch, nd, eopt);
        diffmath::clip_global_norm(trainable, cfg.grad_clip);
        diffmath::adam_step(trainable, opt);
      } catch (const std::runtime_error& e) {
        // divergence: the parameters predate the failed update
        if (!cfg.abort_checkpoint_path.empty()) {
          save_checkpoint(P, cfg.abort_checkpoint_path);
          throw std::runtime_error(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                   "); last-good checkpoint saved to " +
                                   cfg.abort_checkpoint_path);
        }
        throw;
      }
      epoch_loss += t.loss * static_cast<double>(batch.size());
      result.batch_losses.push_back(t.loss);
      ++iter;
    }
    epoch_loss /= static_cast<double>(train_idx.size());

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = epoch_loss;
    row.val_loss = dataset_loss(P, ds, val_idx, cfg.batch_size, val_noise_seed);
    if (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
      row.val_precision = validation_precision(P, ds, train_idx, val_idx, cfg.eval_k);
    }
    result.log.push_back(row);

    if (row.val_loss < result.best_val_loss) {
      result.best_val_loss = row.val_loss;
      result.best_epoch = epoch;
      result.params = P;
    }
  }
  return result;
}

void save_train_log(const std::vector<EpochLog>& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "epoch\ttrain_loss\tval_loss\tval_precision100\n";
  char buf[64];
  for (const EpochLog& row : log) {
    std::snprintf(buf, sizeof(buf), "%d\t%.6f\t%.6f\t", row.epoch, row.train_loss, row.val_loss);
    out << buf;
    if (row.val_precision >= 0.0) {
      std::snprintf(buf, sizeof(buf), "%.6f", row.val_precision);
      out << buf;
    }
    out << "\n";
  }
}

// ---- checkpoints --------------------------------------------------------------

namespace {

void write_f32_le(std::ofstream& out, const std::vector<float>& data) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float f : data) {
      uint32_t u;
      std::memcpy(&u, &f, 4);
      const char bytes[4] = {static_cast<char>(u), static_cast<char>(u >> 8),
                             static_cast<char>(u >> 16), static_cast<char>(u >> 24)};
      out.write(bytes, 4);
    }
  }
}

void read_f32_le(std::ifstream& in, std::vector<float>& data) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float& f : data) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      const uint32_t u = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                         (static_cast<uint32_t>(b[2]) << 16) |
                         (static_cast<uint32_t>(b[3]) << 24);
      std::memcpy(&f, &u, 4);
    }
  }
  if (!in) throw std::runtime_error("checkpoint truncated while reading tensor data");
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "mixhash-ckpt v1\n";
  json manifest;
  manifest["kind"] = to_string(params.kind);
  manifest["bits"] = params.bits;
  manifest["components"] = params.components;
  manifest["vocab_size"] = params.vocab_size;
  manifest["hidden"] = params.hidden;
  manifest["num_labels"] = params.num_labels;
  manifest["alpha"] = params.alpha;
  manifest["noise_source"] = to_string(params.noise_source);
  out << manifest.dump() << "\n";
  for (const ParamTensor* t : params.parameters()) {
    out << t->name << "\n" << t->value.rows << " " << t->value.cols << "\n";
    write_f32_le(out, t->value.data);
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "mixhash-ckpt v1") {
    throw std::runtime_error("'" + path + "' is not a mixhash-ckpt v1 file");
  }
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint missing manifest");
  json manifest;
  try {
    manifest = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }

  ModelParams P = init_params(
      model_kind_from_string(manifest.at("kind").get<std::string>()),
      manifest.at("vocab_size").get<int>(), manifest.at("bits").get<int>(),
      manifest.at("components").get<int>(), manifest.at("hidden").get<int>(),
      std::max(1, manifest.at("num_labels").get<int>()), manifest.at("alpha").get<double>(),
      noise_source_from_string(manifest.at("noise_source").get<std::string>()), 0);

  std::unordered_map<std::string, ParamTensor*> by_name;
  for (ParamTensor* t : P.parameters()) by_name[t->name] = t;
  std::unordered_map<std::string, bool> seen;

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto it = by_name.find(line);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint has unexpected tensor '" + line + "'");
    }
    std::string dims;
    if (!std::getline(in, dims)) throw std::runtime_error("checkpoint truncated at dims line");
    std::istringstream ds(dims);
    int rows = -1, cols = -1;
    ds >> rows >> cols;
    if (rows != it->second->value.rows || cols != it->second->value.cols) {
      throw std::runtime_error("checkpoint tensor '" + line + "' has shape " +
                               std::to_string(rows) + "x" + std::to_string(cols) +
                               ", expected " + std::to_string(it->second->value.rows) + "x" +
                               std::to_string(it->second->value.cols));
    }
    read_f32_le(in, it->second->value.data);
    // consume the newline-free binary block boundary: data is immediately
    // followed by the next name line
    seen[line] = true;
  }
  for (const auto& kv : by_name) {
    if (!seen.count(kv.first)) {
      throw std::runtime_error("checkpoint missing tensor '" + kv.first + "'");
    }
  }
  return P;
}

// ---- gradcheck harness ---------------------------------------------------------

GradCheckReport gradcheck_tiny(ModelKind kind, uint64_t seed, double eps,
                               NoiseSource noise_source, bool inject_bug) {
  const auto t0 = std::chrono::steady_clock::now();
  const int V = 50, m = 8, K = 3, B = 4;

  corpus::DocumentSet ds;
  for (int i = 0; i < V; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "t%02d", i);
    ds.vocab.term_to_index.emplace(buf, i);
    ds.vocab.index_to_term.emplace_back(buf);
    ds.vocab.doc_freq.push_back(2);
  }
  Rng rng(seed * 1000003ull + 17);
  for (int d = 0; d < B; ++d) {
    corpus::Document doc;
    doc.id = "q" + std::to_string(d);
    const int label = static_cast<int>(rng.below(3));
    doc.labels = {"l" + std::to_string(label)};
    ds.documents.push_back(doc);
    ds.label_ids.push_back({label});

    std::vector<int> all(V);
    for (int i = 0; i < V; ++i) all[i] = i;
    rng.shuffle(all);
    const int nnz = 10 + static_cast<int>(rng.below(8));
    std::vector<int> idx(all.begin(), all.begin() + nnz);
    std::sort(idx.begin(), idx.end());
    corpus::SparseVector cnt, tf;
    double sq = 0.0;
    for (int i : idx) {
      cnt.indices.push_back(i);
      const float c = static_cast<float>(1 + rng.below(4));
      cnt.values.push_back(c);
      sq += static_cast<double>(c) * c;
    }
    const double norm = std::sqrt(sq);
    tf.indices = cnt.indices;
    for (float c : cnt.values) tf.values.push_back(static_cast<float>(c / norm));
    ds.counts.push_back(std::move(cnt));
    ds.tfidf.push_back(std::move(tf));
    ds.split.push_back(corpus::Split::train);
  }
  ds.label_names = {"l0", "l1", "l2"};

  ModelParams P = init_params(kind, V, m, K, 500, 3, 0.5, noise_source,
                              seed * 1000003ull + 19);
  Rng noise_rng(seed * 1000003ull + 23);
  NoiseDraws nd = NoiseDraws::draw(kind, B, m, noise_rng);
  std::vector<int> docs = {0, 1, 2, 3};

  auto make_loss = [&](ElboOptions base) {
    return [&, base](bool grads) {
      ElboOptions o = base;
      o.compute_grads = grads;
      if (grads) P.zero_grads();
      const double loss = elbo(P, ds, docs, nd, o).loss;
      if (grads && inject_bug) {
        for (float& g : P.enc_w2.grad.data) g *= 2.0f;
      }
      return loss;
    };
  };

  GradCheckReport report;
  auto run_pass = [&](const std::vector<ParamTensor*>& tensors, ElboOptions base,
                      uint64_t pass_seed) {
    auto loss = make_loss(base);
    for (ParamTensor* t : tensors) {
      auto fd = diffmath::finite_difference_check(loss, {t}, eps, pass_seed ^ t->size(), 100);
      report.per_tensor.emplace_back(t->name, fd.max_rel_err);
      report.max_rel_err = std::max(report.max_rel_err, fd.max_rel_err);
    }
  };

  if (!is_bernoulli(kind)) {
    run_pass(P.parameters(), ElboOptions{}, seed * 7919ull + 1);
  } else {
    std::vector<ParamTensor*> full = {&P.dec_embed, &P.dec_bias, &P.head_comp_w,
                                      &P.head_comp_b, &P.prior_pi_logits,
                                      &P.prior_gamma_logits};
    if (noise_source == NoiseSource::encoder) {
      full.push_back(&P.head_noise_w);
      full.push_back(&P.head_noise_b);
    } else {
      full.push_back(&P.prior_noise_logvar);
    }
    if (is_supervised(kind)) {
      full.push_back(&P.cls_w1);
      full.push_back(&P.cls_b1);
      full.push_back(&P.cls_w2);
      full.push_back(&P.cls_b2);
    }
    run_pass(full, ElboOptions{}, seed * 7919ull + 1);

    ElboOptions kl_only;
    kl_only.include_recon = false;
    kl_only.include_supervised = false;
    run_pass({&P.enc_w1, &P.enc_b1, &P.enc_w2, &P.enc_b2, &P.head_logit_w, &P.head_logit_b},
             kl_only, seed * 7919ull + 2);
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace mixhash::models
