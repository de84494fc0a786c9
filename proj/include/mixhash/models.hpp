#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixhash/corpus.hpp"
#include "mixhash/diffmath.hpp"
#include "mixhash/rng.hpp"

namespace mixhash::models {

using diffmath::DenseMatrix;
using diffmath::Mat;
using diffmath::ParamTensor;

enum class ModelKind { gmsh, bmsh, gmsh_s, bmsh_s };
enum class NoiseSource { encoder, component };

ModelKind model_kind_from_string(const std::string& s);
const char* to_string(ModelKind k);
const char* to_string(NoiseSource s);
NoiseSource noise_source_from_string(const std::string& s);
bool is_supervised(ModelKind k);
bool is_bernoulli(ModelKind k);

struct TrainConfig {
  ModelKind kind = ModelKind::gmsh;
  int bits = 32;
  int components = 20;
  double alpha = 1.0;  // supervised loss weight; ignored for unsupervised kinds
  int batch_size = 100;
  int epochs = 30;
  uint64_t seed = 1;
  bool kl_warmup = false;  // ramp KL weight 0 -> 1 over the first 10% of iterations
  NoiseSource noise_source = NoiseSource::encoder;
  bool freeze_prior = false;
  int hidden = 500;
  double learning_rate = 1e-3;
  double lr_decay = 0.96;
  int64_t lr_decay_interval = 10000;
  double grad_clip = 5.0;
  int eval_every = 10;  // epochs between validation precision probes; 0 disables
  int eval_k = 100;
  std::string abort_checkpoint_path;  // written if training diverges (optional)

  void validate() const;
};

// All parameters of one model. Tensors not used by the configured kind stay
// empty and are excluded from parameters().
struct ModelParams {
  ModelKind kind = ModelKind::gmsh;
  NoiseSource noise_source = NoiseSource::encoder;
  int vocab_size = 0, bits = 0, components = 0, hidden = 0, num_labels = 0;
  double alpha = 0.0;

  // encoder trunk (|V| -> hidden -> hidden, ReLU)
  ParamTensor enc_w1, enc_b1, enc_w2, enc_b2;
  // gaussian posterior heads
  ParamTensor head_mu_w, head_mu_b, head_logvar_w, head_logvar_b;
  // bernoulli posterior heads (bit logits, reconstruction-noise log variance)
  ParamTensor head_logit_w, head_logit_b, head_noise_w, head_noise_b;
  // mixture-component head
  ParamTensor head_comp_w, head_comp_b;
  // decoder (code -> word logits)
  ParamTensor dec_embed, dec_bias;
  // prior
  ParamTensor prior_pi_logits;              // 1 x K
  ParamTensor prior_mu, prior_logvar;       // K x m
  ParamTensor prior_gamma_logits;           // K x m
  ParamTensor prior_noise_logvar;           // K x m (component noise source)
  // classifier (supervised kinds)
  ParamTensor cls_w1, cls_b1, cls_w2, cls_b2;

  std::vector<ParamTensor*> parameters();
  std::vector<const ParamTensor*> parameters() const;
  std::vector<ParamTensor*> prior_parameters();
  void zero_grads();
};

ModelParams init_params(ModelKind kind, int vocab_size, int bits, int components, int hidden,
                        int num_labels, double alpha, NoiseSource noise_source, uint64_t seed);

// Per-document posterior statistics.
struct LatentBatch {
  Mat mu, logvar;            // gaussian kinds
  Mat alpha, noise_logvar;   // bernoulli kinds
  Mat beta;                  // component responsibilities, rows sum to 1
};

struct NoiseDraws {
  Mat gauss;      // reparameterization draws (gaussian kinds)
  Mat xi;         // uniform(0,1) draws (bernoulli sampling)
  Mat recon_eps;  // injected-noise draws (bernoulli reconstruction path)

  static NoiseDraws draw(ModelKind kind, int batch, int bits, Rng& rng);
};

LatentBatch encode(const ModelParams& params, const corpus::DocumentSet& ds,
                   const std::vector<int>& docs);

// z = mu + exp(logvar / 2) * noise
Mat reparam_gaussian(const Mat& mu, const Mat& logvar, const Mat& noise);
// z_i = 0.5 * (sign(alpha_i - xi_i) + 1), sign(0) = +1
Mat sample_bernoulli_st(const Mat& alpha, const Mat& xi);
// straight-through surrogate: upstream * 0.5 * alpha * (1 - alpha)
Mat st_backward(const Mat& upstream, const Mat& alpha);
// z' = z + exp(noise_logvar / 2) * eps
Mat inject_noise(const Mat& z, const Mat& noise_logvar, const Mat& eps);

// per-document sum of count-weighted log softmax word probabilities
std::vector<double> reconstruction_loglik(const Mat& z, const corpus::DocumentSet& ds,
                                          const std::vector<int>& docs,
                                          const ParamTensor& dec_embed,
                                          const ParamTensor& dec_bias);

std::vector<double> mixture_weights(const DenseMatrix& pi_logits);  // softmax of pi logits

// per-document sum_c beta_c ln(beta_c / pi_c), with 0 ln 0 = 0
std::vector<double> kl_categorical(const Mat& beta, const std::vector<double>& pi);

// per-document sum_c beta_c KL(N(mu, diag(e^logvar)) || N(prior_mu_c, diag(e^prior_logvar_c)))
std::vector<double> expected_kl_gaussian(const Mat& mu, const Mat& logvar, const Mat& beta,
                                         const DenseMatrix& prior_mu,
                                         const DenseMatrix& prior_logvar);

// per-document sum_c beta_c sum_i [a ln(a/g) + (1-a) ln((1-a)/(1-g))],
// alpha clamped to [1e-6, 1-1e-6], gamma = sigmoid(gamma_logits)
std::vector<double> expected_kl_bernoulli(const Mat& alpha, const Mat& beta,
                                          const DenseMatrix& gamma_logits);

// per-document softmax cross entropy of the classifier on z against a uniform
// target over each document's label set; label sets must be non-empty
std::vector<double> supervised_loss(const Mat& z,
                                    const std::vector<std::vector<int>>& label_sets,
                                    const ParamTensor& cls_w1, const ParamTensor& cls_b1,
                                    const ParamTensor& cls_w2, const ParamTensor& cls_b2);

struct ElboTerms {
  double loss = 0.0;      // -elbo (+ alpha * ce for supervised kinds), batch mean
  double recon = 0.0;     // batch-mean reconstruction log likelihood
  double kl_cat = 0.0;
  double kl_latent = 0.0;
  double sup_ce = 0.0;
};

struct ElboOptions {
  double kl_weight = 1.0;
  bool include_recon = true;
  bool include_supervised = true;
  bool compute_grads = false;
};

// Negative ELBO over the batch; accumulates analytic gradients into the
// parameters when compute_grads is set. Throws on a non-finite loss with a
// diagnostic of which term diverged.
ElboTerms elbo(ModelParams& params, const corpus::DocumentSet& ds, const std::vector<int>& docs,
               const NoiseDraws& noise, const ElboOptions& opt);

// Deterministic latent representations: gaussian kinds return the posterior
// means, bernoulli kinds the bit probabilities. No sampling, no noise.
DenseMatrix latent_codes(const ModelParams& params, const corpus::DocumentSet& ds,
                         const std::vector<int>& docs);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_precision = -1.0;  // < 0 when not probed this epoch
};

struct TrainResult {
  ModelParams params;  // parameters from the best validation epoch
  std::vector<EpochLog> log;
  std::vector<double> batch_losses;  // per-step batch-mean losses, whole run
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

TrainResult train(const TrainConfig& cfg, const corpus::DocumentSet& ds);

void save_train_log(const std::vector<EpochLog>& log, const std::string& path);

// checkpoint: "mixhash-ckpt v1" line, manifest JSON line, then per tensor a
// name line, a dims line, and little-endian float32 data
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

// ---- verification ----------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::vector<std::pair<std::string, double>> per_tensor;
  double seconds = 0.0;
};

// Builds a tiny fixed instance (|V|=50, m=8, K=3, batch=4, frozen noise) and
// finite-difference checks every parameter tensor reachable through
// continuous paths. For bernoulli kinds the encoder trunk and bit-logit head
// are checked against the KL-only loss, since the reconstruction path crosses
// the hard sampling step whose surrogate gradient is tested separately.
GradCheckReport gradcheck_tiny(ModelKind kind, uint64_t seed, double eps,
                               NoiseSource noise_source = NoiseSource::encoder,
                               bool inject_bug = false);

}  // namespace mixhash::models
