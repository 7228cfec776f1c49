#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cvsim/dataset.hpp"
#include "cvsim/nn.hpp"

namespace cvsim {

// Optimization settings for one network; epoch counts are nominal full-scale
// budgets that scaled_epochs() shrinks in proportion to the dataset size.
struct ModuleConfig {
  Eigen::Index minibatch = 256;
  double lr = 1e-3;
  int epochs = 20000;
  int decay_period = 100;
  double decay_rate = 0.98;
  double weight_decay = 0.0;
};

struct TrainingConfig {
  ModuleConfig emulator{256, 1e-3, 20000, 100, 0.98, 0.0};
  ModuleConfig flow{512, 2e-3, 1500, 200, 0.85, 0.0};
  ModuleConfig vaed{256, 1e-3, 20000, 100, 0.985, 0.0};

  double beta_d = 1.0;
  double beta_v = 2000.0;
  double beta_r = 20.0;
  Eigen::Index latent_dim = 19;

  // architecture: hidden width and number of hidden layers per MLP, and the
  // coupling-flow layout (hidden width, hidden layers per subnet, blocks)
  Eigen::Index emu_hidden = 60;
  int emu_depth = 7;
  Eigen::Index enc_hidden = 32;
  int enc_depth = 5;
  Eigen::Index dec_hidden = 64;
  int dec_depth = 5;
  Eigen::Index flow_hidden = 24;
  int flow_depth = 3;
  int flow_blocks = 16;
  bool flow_bn = false;

  double noise_scale = 0.0;  // delta, in units of the per-output noise stds
  std::uint64_t seed = 1;
  // training-length multiplier; 1 means the nominal budgets above
  double budget_scale = 1.0;
  // early stop when the test loss has not improved for this fraction of the
  // budget; 0 disables
  double patience_frac = 0.1;

  static TrainingConfig synthetic();
  static TrainingConfig ehr();
  // nominal budgets scale with dataset size against the full-scale corpus
  static double budget_scale_for(Eigen::Index n_samples);
  int scaled_epochs(const ModuleConfig& m) const;

  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
};

// The four cooperating networks plus everything needed to use them on
// physical-unit data. All training happens in z-scored space.
struct ModelBundle {
  nn::Mlp emulator;  // v norm (23) -> y norm (16)
  nn::RealNvp flow;  // density over normalized y
  nn::Mlp encoder;   // v norm -> [mu, log sigma^2] (2 * latent)
  nn::Mlp decoder;   // [y norm, w] -> v norm
  bool has_emulator = false;
  bool has_flow = false;
  bool has_vaed = false;

  SplitStats stats;
  PriorBox prior;
  TrainingConfig cfg;

  // convenience passes over physical-unit rows
  MatrixXd emulate(const MatrixXd& v_phys) const;
  MatrixXd decode(const MatrixXd& y_phys, const MatrixXd& w) const;
  VectorXd output_log_density(const MatrixXd& y_phys) const;
  MatrixXd sample_outputs(Eigen::Index n, Rng& rng) const;  // physical units
};

ModelBundle make_bundle(const TrainingConfig& cfg, const SplitStats& stats,
                        const PriorBox& prior);

void save_bundle(const ModelBundle& b, const std::string& path);
ModelBundle load_bundle(const std::string& path);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> curve;
  int epochs_run = 0;
  int best_epoch = -1;
  double best_test = 0.0;
  bool diverged = false;
  bool lr_backed_off = false;
};

// Eq.-style objectives, exposed for direct gradient checks. All inputs are
// normalized; eps is the reparameterization draw, one row per sample.
nn::Var emulator_loss_graph(nn::Tape& t, nn::Mlp& emulator, const MatrixXd& v,
                            const MatrixXd& y);
nn::Var kl_graph(nn::Tape& t, nn::Var mu, nn::Var log_var);  // per-sample
nn::Var vae_loss_graph(nn::Tape& t, nn::Mlp& encoder, nn::Mlp& decoder,
                       nn::Mlp& emulator, const MatrixXd& v, const MatrixXd& y,
                       const MatrixXd& eps, double beta_d, double beta_v,
                       double beta_r);

// fresh heteroskedastic corruption y + delta * s_k * eps, physical units
MatrixXd inject_noise(const MatrixXd& y_phys, double delta, Rng& rng);

TrainResult train_emulator(ModelBundle& b, const Dataset& ds);
TrainResult train_flow(ModelBundle& b, const Dataset& ds);
TrainResult train_vae_decoder(ModelBundle& b, const Dataset& ds);

void save_curve_csv(const std::vector<EpochLog>& curve,
                    const std::string& path);
nlohmann::json training_manifest(
    const ModelBundle& b,
    const std::vector<std::pair<std::string, TrainResult>>& results);

}  // namespace cvsim
