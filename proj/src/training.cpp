#include "cvsim/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cvsim/io.hpp"
#include "cvsim/outputs.hpp"

namespace cvsim {

using nn::Tape;
using nn::Var;

TrainingConfig TrainingConfig::synthetic() { return TrainingConfig{}; }

TrainingConfig TrainingConfig::ehr() {
  TrainingConfig c;
  c.emulator = {256, 3e-3, 25000, 100, 0.98, 0.0};
  c.flow = {512, 4e-3, 1000, 200, 0.5, 2e-4};
  c.vaed = {512, 1e-3, 2000, 100, 0.97, 2e-4};
  c.beta_d = 1.0;
  c.beta_v = 1000.0;
  c.beta_r = 10.0;
  c.emu_hidden = 80;
  c.flow_hidden = 18;
  c.flow_blocks = 10;
  c.flow_bn = true;
  return c;
}

double TrainingConfig::budget_scale_for(Eigen::Index n_samples) {
  // nominal budgets assume the full-scale corpus of 54000 samples
  return std::min(1.0, static_cast<double>(n_samples) / 54000.0);
}

int TrainingConfig::scaled_epochs(const ModuleConfig& m) const {
  return std::max(1, static_cast<int>(std::llround(m.epochs * budget_scale)));
}

namespace {

nlohmann::json module_to_json(const ModuleConfig& m) {
  return {{"minibatch", m.minibatch},   {"lr", m.lr},
          {"epochs", m.epochs},         {"decay_period", m.decay_period},
          {"decay_rate", m.decay_rate}, {"weight_decay", m.weight_decay}};
}

ModuleConfig module_from_json(const nlohmann::json& j) {
  ModuleConfig m;
  m.minibatch = j.at("minibatch").get<Eigen::Index>();
  m.lr = j.at("lr").get<double>();
  m.epochs = j.at("epochs").get<int>();
  m.decay_period = j.at("decay_period").get<int>();
  m.decay_rate = j.at("decay_rate").get<double>();
  m.weight_decay = j.at("weight_decay").get<double>();
  return m;
}

nlohmann::json vector_to_json(const VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

VectorXd vector_from_json(const nlohmann::json& j) {
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v(i) = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

}  // namespace

nlohmann::json TrainingConfig::to_json() const {
  nlohmann::json j;
  j["emulator"] = module_to_json(emulator);
  j["flow"] = module_to_json(flow);
  j["vaed"] = module_to_json(vaed);
  j["beta_d"] = beta_d;
  j["beta_v"] = beta_v;
  j["beta_r"] = beta_r;
  j["latent_dim"] = latent_dim;
  j["emu_hidden"] = emu_hidden;
  j["emu_depth"] = emu_depth;
  j["enc_hidden"] = enc_hidden;
  j["enc_depth"] = enc_depth;
  j["dec_hidden"] = dec_hidden;
  j["dec_depth"] = dec_depth;
  j["flow_hidden"] = flow_hidden;
  j["flow_depth"] = flow_depth;
  j["flow_blocks"] = flow_blocks;
  j["flow_bn"] = flow_bn;
  j["noise_scale"] = noise_scale;
  j["seed"] = seed;
  j["budget_scale"] = budget_scale;
  j["patience_frac"] = patience_frac;
  return j;
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
  TrainingConfig c;
  c.emulator = module_from_json(j.at("emulator"));
  c.flow = module_from_json(j.at("flow"));
  c.vaed = module_from_json(j.at("vaed"));
  c.beta_d = j.at("beta_d").get<double>();
  c.beta_v = j.at("beta_v").get<double>();
  c.beta_r = j.at("beta_r").get<double>();
  c.latent_dim = j.at("latent_dim").get<Eigen::Index>();
  c.emu_hidden = j.at("emu_hidden").get<Eigen::Index>();
  c.emu_depth = j.at("emu_depth").get<int>();
  c.enc_hidden = j.at("enc_hidden").get<Eigen::Index>();
  c.enc_depth = j.at("enc_depth").get<int>();
  c.dec_hidden = j.at("dec_hidden").get<Eigen::Index>();
  c.dec_depth = j.at("dec_depth").get<int>();
  c.flow_hidden = j.at("flow_hidden").get<Eigen::Index>();
  c.flow_depth = j.at("flow_depth").get<int>();
  c.flow_blocks = j.at("flow_blocks").get<int>();
  c.flow_bn = j.at("flow_bn").get<bool>();
  c.noise_scale = j.at("noise_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.budget_scale = j.at("budget_scale").get<double>();
  c.patience_frac = j.at("patience_frac").get<double>();
  return c;
}

namespace {

std::vector<Eigen::Index> mlp_widths(Eigen::Index in, Eigen::Index hidden,
                                     int depth, Eigen::Index out) {
  std::vector<Eigen::Index> w;
  w.push_back(in);
  for (int i = 0; i < depth; ++i) w.push_back(hidden);
  w.push_back(out);
  return w;
}

}  // namespace

ModelBundle make_bundle(const TrainingConfig& cfg, const SplitStats& stats,
                        const PriorBox& prior) {
  if (cfg.latent_dim < 1 || cfg.noise_scale < 0.0)
    throw std::invalid_argument("bad training configuration");
  ModelBundle b;
  b.cfg = cfg;
  b.stats = stats;
  b.prior = prior;
  b.emulator = nn::Mlp(mlp_widths(kNumParams, cfg.emu_hidden, cfg.emu_depth,
                                  kNumOutputs),
                       nn::Activation::kSwish);
  b.encoder = nn::Mlp(mlp_widths(kNumParams, cfg.enc_hidden, cfg.enc_depth,
                                 2 * cfg.latent_dim),
                      nn::Activation::kSwish);
  b.decoder = nn::Mlp(mlp_widths(kNumOutputs + cfg.latent_dim, cfg.dec_hidden,
                                 cfg.dec_depth, kNumParams),
                      nn::Activation::kSwish);
  b.flow = nn::RealNvp(kNumOutputs, cfg.flow_blocks, cfg.flow_hidden,
                       cfg.flow_depth, cfg.flow_bn);
  Rng re(derive_stream_seed(cfg.seed, 101));
  b.emulator.init(re);
  Rng rf(derive_stream_seed(cfg.seed, 102));
  b.flow.init(rf);
  Rng rv(derive_stream_seed(cfg.seed, 103));
  b.encoder.init(rv);
  Rng rd(derive_stream_seed(cfg.seed, 104));
  b.decoder.init(rd);
  return b;
}

MatrixXd ModelBundle::emulate(const MatrixXd& v_phys) const {
  const MatrixXd vn = normalize(v_phys, stats.v_mean, stats.v_std);
  return denormalize(emulator.apply(vn), stats.y_mean, stats.y_std);
}

MatrixXd ModelBundle::decode(const MatrixXd& y_phys, const MatrixXd& w) const {
  if (y_phys.rows() != w.rows() || w.cols() != cfg.latent_dim)
    throw std::invalid_argument("decode: latent block shape mismatch");
  const MatrixXd yn = normalize(y_phys, stats.y_mean, stats.y_std);
  MatrixXd dec_in(yn.rows(), yn.cols() + w.cols());
  dec_in << yn, w;
  return denormalize(decoder.apply(dec_in), stats.v_mean, stats.v_std);
}

VectorXd ModelBundle::output_log_density(const MatrixXd& y_phys) const {
  // density of the z-scored outputs; a fixed monotone rescale, so ranking
  // and comparisons across candidates are unaffected
  return flow.log_prob(normalize(y_phys, stats.y_mean, stats.y_std));
}

MatrixXd ModelBundle::sample_outputs(Eigen::Index n, Rng& rng) const {
  return denormalize(flow.sample(n, rng), stats.y_mean, stats.y_std);
}

Var emulator_loss_graph(Tape& t, nn::Mlp& emulator, const MatrixXd& v,
                        const MatrixXd& y) {
  Var pred = emulator.forward(t, t.input(v));
  Var r = t.sub(pred, t.input(y));
  return t.scale(t.sum_all(t.square(r)), 1.0 / static_cast<double>(v.rows()));
}

Var kl_graph(Tape& t, Var mu, Var log_var) {
  // 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1) per sample
  Var term = t.sub(t.add(t.square(mu), t.exp(log_var)), log_var);
  return t.scale(t.row_sum(t.add_const(term, -1.0)), 0.5);
}

Var vae_loss_graph(Tape& t, nn::Mlp& encoder, nn::Mlp& decoder,
                   nn::Mlp& emulator, const MatrixXd& v, const MatrixXd& y,
                   const MatrixXd& eps, double beta_d, double beta_v,
                   double beta_r) {
  const Eigen::Index latent = eps.cols();
  if (eps.rows() != v.rows() || y.rows() != v.rows())
    throw std::invalid_argument("vae loss: row counts differ");
  Var enc_out = encoder.forward(t, t.input(v));
  if (t.value(enc_out).cols() != 2 * latent)
    throw std::invalid_argument("vae loss: encoder width is not twice the latent dim");
  Var mu = t.slice_cols(enc_out, 0, latent);
  Var log_var = t.slice_cols(enc_out, latent, latent);
  Var sigma = t.exp(t.scale(log_var, 0.5));
  Var w = t.add(mu, t.mul(t.input(eps), sigma));
  Var vhat = decoder.forward(t, t.concat_cols(t.input(y), w));
  Var recon = t.row_sum(t.square(t.sub(vhat, t.input(v))));
  Var kl = kl_graph(t, mu, log_var);
  Var reval = t.row_sum(t.square(t.sub(emulator.forward(t, vhat), t.input(y))));
  Var per_sample = t.add(t.add(t.scale(recon, beta_d), t.scale(kl, beta_v)),
                         t.scale(reval, beta_r));
  return t.scale(t.sum_all(per_sample), 1.0 / static_cast<double>(v.rows()));
}

MatrixXd inject_noise(const MatrixXd& y_phys, double delta, Rng& rng) {
  if (delta == 0.0) return y_phys;
  if (y_phys.cols() != kNumOutputs)
    throw std::invalid_argument("inject_noise: expected the clinical output layout");
  const OutputVector& s = output_noise_std();
  MatrixXd out = y_phys;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      out(i, j) += delta * s(j) * rng.normal();
  return out;
}

namespace {

std::vector<Eigen::Index> shuffled_rows(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const auto j = std::min<Eigen::Index>(
        static_cast<Eigen::Index>(rng.uniform() * static_cast<double>(i + 1)),
        i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

MatrixXd take_rows(const MatrixXd& m, const std::vector<Eigen::Index>& idx,
                   Eigen::Index first, Eigen::Index count) {
  MatrixXd out(count, m.cols());
  for (Eigen::Index k = 0; k < count; ++k)
    out.row(k) = m.row(idx[static_cast<std::size_t>(first + k)]);
  return out;
}

int patience_of(const TrainingConfig& cfg, int budget) {
  if (cfg.patience_frac <= 0.0) return 0;
  return std::max(1, static_cast<int>(std::llround(cfg.patience_frac * budget)));
}

nn::AdamConfig adam_config(const ModuleConfig& m) {
  nn::AdamConfig a;
  a.lr = m.lr;
  a.weight_decay = m.weight_decay;
  a.decay_period = m.decay_period;
  a.decay_rate = m.decay_rate;
  return a;
}

}  // namespace

TrainResult train_emulator(ModelBundle& b, const Dataset& ds) {
  const TrainingConfig& cfg = b.cfg;
  const ModuleConfig& mc = cfg.emulator;
  const MatrixXd v_tr =
      normalize(ds.v_of(Split::kTrain), b.stats.v_mean, b.stats.v_std);
  const MatrixXd y_tr =
      normalize(ds.y_of(Split::kTrain), b.stats.y_mean, b.stats.y_std);
  const bool have_test = ds.rows(Split::kTest) > 0;
  const MatrixXd v_te =
      have_test ? normalize(ds.v_of(Split::kTest), b.stats.v_mean, b.stats.v_std)
                : v_tr;
  const MatrixXd y_te =
      have_test ? normalize(ds.y_of(Split::kTest), b.stats.y_mean, b.stats.y_std)
                : y_tr;
  const Eigen::Index n = v_tr.rows();
  if (n == 0) throw std::invalid_argument("train_emulator: empty train split");

  const int budget = cfg.scaled_epochs(mc);
  const int patience = patience_of(cfg, budget);
  nn::Adam opt(b.emulator.parameters(), adam_config(mc));
  Rng order_rng(derive_stream_seed(cfg.seed, 201));

  TrainResult res;
  nn::Mlp best = b.emulator;
  double best_test = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  for (int epoch = 0; epoch < budget; ++epoch) {
    const auto idx = shuffled_rows(n, order_rng);
    double tr_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += mc.minibatch) {
      const Eigen::Index bn = std::min<Eigen::Index>(mc.minibatch, n - start);
      const MatrixXd vb = take_rows(v_tr, idx, start, bn);
      const MatrixXd yb = take_rows(y_tr, idx, start, bn);
      Tape t;
      Var L = emulator_loss_graph(t, b.emulator, vb, yb);
      opt.zero_grad();
      t.backward(L);
      opt.step(epoch);
      tr_sum += t.value(L)(0, 0) * static_cast<double>(bn);
    }
    const double tr = tr_sum / static_cast<double>(n);
    const double te =
        (b.emulator.apply(v_te) - y_te).array().square().rowwise().sum().mean();
    res.curve.push_back({epoch, opt.lr_at(epoch), tr, te});
    res.epochs_run = epoch + 1;
    if (!std::isfinite(tr) || !std::isfinite(te)) {
      res.diverged = true;
      break;
    }
    if (te < best_test) {
      best_test = te;
      best_epoch = epoch;
      best = b.emulator;
    }
    if (patience > 0 && epoch - best_epoch >= patience) break;
  }
  if (best_epoch >= 0) b.emulator = best;
  res.best_epoch = best_epoch;
  res.best_test = best_test;
  b.has_emulator = true;
  return res;
}

TrainResult train_flow(ModelBundle& b, const Dataset& ds) {
  const TrainingConfig& cfg = b.cfg;
  ModuleConfig mc = cfg.flow;
  const MatrixXd y_tr_phys = ds.y_of(Split::kTrain);
  const bool have_test = ds.rows(Split::kTest) > 0;
  const MatrixXd y_te_phys = have_test ? ds.y_of(Split::kTest) : y_tr_phys;
  const Eigen::Index n = y_tr_phys.rows();
  if (n == 0) throw std::invalid_argument("train_flow: empty train split");

  // test corruption is drawn once so the early-stop metric stays comparable
  Rng te_noise(derive_stream_seed(cfg.seed, 303));
  const MatrixXd y_te = normalize(inject_noise(y_te_phys, cfg.noise_scale, te_noise),
                                  b.stats.y_mean, b.stats.y_std);

  const int budget = cfg.scaled_epochs(mc);
  const int patience = patience_of(cfg, budget);
  auto opt = std::make_unique<nn::Adam>(b.flow.parameters(), adam_config(mc));
  Rng order_rng(derive_stream_seed(cfg.seed, 302));
  Rng noise_rng(derive_stream_seed(cfg.seed, 301));

  TrainResult res;
  nn::RealNvp best = b.flow;
  double best_test = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  for (int epoch = 0; epoch < budget; ++epoch) {
    const MatrixXd y_ep = normalize(
        inject_noise(y_tr_phys, cfg.noise_scale, noise_rng), b.stats.y_mean,
        b.stats.y_std);
    const auto idx = shuffled_rows(n, order_rng);
    double tr_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += mc.minibatch) {
      const Eigen::Index bn = std::min<Eigen::Index>(mc.minibatch, n - start);
      const MatrixXd yb = take_rows(y_ep, idx, start, bn);
      Tape t;
      Var lp = b.flow.log_prob_graph(t, yb, true);
      Var L = t.scale(t.sum_all(lp), -1.0 / static_cast<double>(bn));
      opt->zero_grad();
      t.backward(L);
      opt->step(epoch);
      tr_sum += t.value(L)(0, 0) * static_cast<double>(bn);
    }
    const double tr = tr_sum / static_cast<double>(n);
    const double te = -b.flow.log_prob(y_te).mean();
    res.curve.push_back({epoch, opt->lr_at(epoch), tr, te});
    res.epochs_run = epoch + 1;
    if (!std::isfinite(tr) || !std::isfinite(te)) {
      if (!res.lr_backed_off) {
        // one retry at half the rate from the best state seen so far
        res.lr_backed_off = true;
        if (best_epoch >= 0) b.flow = best;
        mc.lr *= 0.5;
        opt = std::make_unique<nn::Adam>(b.flow.parameters(), adam_config(mc));
        continue;
      }
      res.diverged = true;
      break;
    }
    if (te < best_test) {
      best_test = te;
      best_epoch = epoch;
      best = b.flow;
    }
    if (patience > 0 && epoch - best_epoch >= patience) break;
  }
  if (best_epoch >= 0) b.flow = best;
  res.best_epoch = best_epoch;
  res.best_test = best_test;
  b.has_flow = true;
  return res;
}

TrainResult train_vae_decoder(ModelBundle& b, const Dataset& ds) {
  if (!b.has_emulator)
    throw std::invalid_argument(
        "train_vae_decoder: the emulator must be trained first");
  const TrainingConfig& cfg = b.cfg;
  const ModuleConfig& mc = cfg.vaed;
  const MatrixXd v_tr =
      normalize(ds.v_of(Split::kTrain), b.stats.v_mean, b.stats.v_std);
  const MatrixXd y_tr_phys = ds.y_of(Split::kTrain);
  const bool have_test = ds.rows(Split::kTest) > 0;
  const MatrixXd v_te =
      have_test ? normalize(ds.v_of(Split::kTest), b.stats.v_mean, b.stats.v_std)
                : v_tr;
  const MatrixXd y_te_phys = have_test ? ds.y_of(Split::kTest) : y_tr_phys;
  const Eigen::Index n = v_tr.rows();
  if (n == 0) throw std::invalid_argument("train_vae_decoder: empty train split");

  Rng te_noise(derive_stream_seed(cfg.seed, 403));
  const MatrixXd y_te = normalize(inject_noise(y_te_phys, cfg.noise_scale, te_noise),
                                  b.stats.y_mean, b.stats.y_std);
  Rng te_eps_rng(derive_stream_seed(cfg.seed, 404));
  MatrixXd te_eps(v_te.rows(), cfg.latent_dim);
  for (Eigen::Index i = 0; i < te_eps.rows(); ++i)
    for (Eigen::Index j = 0; j < te_eps.cols(); ++j)
      te_eps(i, j) = te_eps_rng.normal();

  const int budget = cfg.scaled_epochs(mc);
  const int patience = patience_of(cfg, budget);
  std::vector<nn::Parameter*> params = b.encoder.parameters();
  for (nn::Parameter* p : b.decoder.parameters()) params.push_back(p);
  nn::Adam opt(params, adam_config(mc));
  Rng order_rng(derive_stream_seed(cfg.seed, 402));
  Rng noise_rng(derive_stream_seed(cfg.seed, 401));
  Rng eps_rng(derive_stream_seed(cfg.seed, 405));

  TrainResult res;
  nn::Mlp best_enc = b.encoder;
  nn::Mlp best_dec = b.decoder;
  double best_test = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  for (int epoch = 0; epoch < budget; ++epoch) {
    const MatrixXd y_ep = normalize(
        inject_noise(y_tr_phys, cfg.noise_scale, noise_rng), b.stats.y_mean,
        b.stats.y_std);
    const auto idx = shuffled_rows(n, order_rng);
    double tr_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += mc.minibatch) {
      const Eigen::Index bn = std::min<Eigen::Index>(mc.minibatch, n - start);
      const MatrixXd vb = take_rows(v_tr, idx, start, bn);
      const MatrixXd yb = take_rows(y_ep, idx, start, bn);
      MatrixXd eps(bn, cfg.latent_dim);
      for (Eigen::Index i = 0; i < bn; ++i)
        for (Eigen::Index j = 0; j < cfg.latent_dim; ++j)
          eps(i, j) = eps_rng.normal();
      Tape t;
      Var L = vae_loss_graph(t, b.encoder, b.decoder, b.emulator, vb, yb, eps,
                             cfg.beta_d, cfg.beta_v, cfg.beta_r);
      opt.zero_grad();
      t.backward(L);
      opt.step(epoch);
      tr_sum += t.value(L)(0, 0) * static_cast<double>(bn);
    }
    const double tr = tr_sum / static_cast<double>(n);
    double te;
    {
      Tape t;
      Var L = vae_loss_graph(t, b.encoder, b.decoder, b.emulator, v_te, y_te,
                             te_eps, cfg.beta_d, cfg.beta_v, cfg.beta_r);
      te = t.value(L)(0, 0);
    }
    res.curve.push_back({epoch, opt.lr_at(epoch), tr, te});
    res.epochs_run = epoch + 1;
    if (!std::isfinite(tr) || !std::isfinite(te)) {
      res.diverged = true;
      break;
    }
    if (te < best_test) {
      best_test = te;
      best_epoch = epoch;
      best_enc = b.encoder;
      best_dec = b.decoder;
    }
    if (patience > 0 && epoch - best_epoch >= patience) break;
  }
  if (best_epoch >= 0) {
    b.encoder = best_enc;
    b.decoder = best_dec;
  }
  // the frozen emulator accumulated adjoints through the re-evaluation term;
  // its values were never stepped
  for (nn::Parameter* p : b.emulator.parameters()) p->zero_grad();
  res.best_epoch = best_epoch;
  res.best_test = best_test;
  b.has_vaed = true;
  return res;
}

void save_bundle(const ModelBundle& b, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cvsim-bundle-1";
  j["config"] = b.cfg.to_json();
  j["prior"] = {{"name", b.prior.name},
                {"lo", vector_to_json(b.prior.lo)},
                {"hi", vector_to_json(b.prior.hi)}};
  j["normalization"] = {{"v_mean", vector_to_json(b.stats.v_mean)},
                        {"v_std", vector_to_json(b.stats.v_std)},
                        {"y_mean", vector_to_json(b.stats.y_mean)},
                        {"y_std", vector_to_json(b.stats.y_std)}};
  j["trained"] = {{"emulator", b.has_emulator},
                  {"flow", b.has_flow},
                  {"vaed", b.has_vaed}};
  j["modules"] = {{"emulator", b.emulator.to_json()},
                  {"flow", b.flow.to_json()},
                  {"encoder", b.encoder.to_json()},
                  {"decoder", b.decoder.to_json()}};
  io::write_text(path, j.dump(2) + "\n");
}

ModelBundle load_bundle(const std::string& path) {
  const nlohmann::json j = nlohmann::json::parse(io::read_text(path));
  if (j.value("format", "") != "cvsim-bundle-1")
    throw std::runtime_error("unrecognized model bundle format");
  ModelBundle b;
  b.cfg = TrainingConfig::from_json(j.at("config"));
  b.prior.name = j.at("prior").at("name").get<std::string>();
  const VectorXd lo = vector_from_json(j.at("prior").at("lo"));
  const VectorXd hi = vector_from_json(j.at("prior").at("hi"));
  if (lo.size() != kNumParams || hi.size() != kNumParams)
    throw std::runtime_error("model bundle prior has the wrong width");
  b.prior.lo = lo;
  b.prior.hi = hi;
  b.stats.v_mean = vector_from_json(j.at("normalization").at("v_mean"));
  b.stats.v_std = vector_from_json(j.at("normalization").at("v_std"));
  b.stats.y_mean = vector_from_json(j.at("normalization").at("y_mean"));
  b.stats.y_std = vector_from_json(j.at("normalization").at("y_std"));
  b.has_emulator = j.at("trained").at("emulator").get<bool>();
  b.has_flow = j.at("trained").at("flow").get<bool>();
  b.has_vaed = j.at("trained").at("vaed").get<bool>();
  b.emulator = nn::Mlp::from_json(j.at("modules").at("emulator"));
  b.flow = nn::RealNvp::from_json(j.at("modules").at("flow"));
  b.encoder = nn::Mlp::from_json(j.at("modules").at("encoder"));
  b.decoder = nn::Mlp::from_json(j.at("modules").at("decoder"));

  // the dimension chain must be intact before anything consumes the bundle
  const bool chain_ok =
      !b.emulator.layers.empty() && !b.encoder.layers.empty() &&
      !b.decoder.layers.empty() &&
      b.emulator.layers.front().w.value.rows() == kNumParams &&
      b.emulator.layers.back().w.value.cols() == kNumOutputs &&
      b.encoder.layers.front().w.value.rows() == kNumParams &&
      b.encoder.layers.back().w.value.cols() == 2 * b.cfg.latent_dim &&
      b.decoder.layers.front().w.value.rows() ==
          kNumOutputs + b.cfg.latent_dim &&
      b.decoder.layers.back().w.value.cols() == kNumParams &&
      b.flow.dim == kNumOutputs;
  if (!chain_ok) throw std::runtime_error("model bundle dimension chain broken");
  return b;
}

void save_curve_csv(const std::vector<EpochLog>& curve,
                    const std::string& path) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,test_loss\n";
  for (const EpochLog& e : curve) {
    os << e.epoch << ',' << io::format_double(e.lr) << ','
       << io::format_double(e.train_loss) << ',' << io::format_double(e.test_loss)
       << '\n';
  }
  io::write_text(path, os.str());
}

nlohmann::json training_manifest(
    const ModelBundle& b,
    const std::vector<std::pair<std::string, TrainResult>>& results) {
  nlohmann::json j;
  j["format"] = "cvsim-training-1";
  j["config"] = b.cfg.to_json();
  j["prior"] = b.prior.name;
  nlohmann::json mods = nlohmann::json::object();
  for (const auto& [name, r] : results) {
    nlohmann::json m;
    m["epochs_run"] = r.epochs_run;
    m["best_epoch"] = r.best_epoch;
    m["best_test_loss"] = r.best_test;
    if (!r.curve.empty()) {
      m["final_train_loss"] = r.curve.back().train_loss;
      m["final_test_loss"] = r.curve.back().test_loss;
    }
    m["diverged"] = r.diverged;
    m["lr_backed_off"] = r.lr_backed_off;
    mods[name] = m;
  }
  j["modules"] = mods;
  return j;
}

}  // namespace cvsim
