#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cvsim/io.hpp"
#include "cvsim/outputs.hpp"
#include "cvsim/training.hpp"

using namespace cvsim;

namespace {

SplitStats identity_stats() {
  SplitStats s;
  s.v_mean = VectorXd::Zero(kNumParams);
  s.v_std = VectorXd::Ones(kNumParams);
  s.y_mean = VectorXd::Zero(kNumOutputs);
  s.y_std = VectorXd::Ones(kNumOutputs);
  return s;
}

Dataset toy_dataset(const MatrixXd& v, const MatrixXd& y,
                    Eigen::Index n_test) {
  Dataset ds;
  ds.v = v;
  ds.y = y;
  ds.split.assign(static_cast<std::size_t>(v.rows()), Split::kTrain);
  for (Eigen::Index i = v.rows() - n_test; i < v.rows(); ++i)
    ds.split[static_cast<std::size_t>(i)] = Split::kTest;
  ds.stats = identity_stats();
  ds.prior = PriorBox::structural();
  ds.prior_name = ds.prior.name;
  return ds;
}

MatrixXd uniform_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo,
                        double hi) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// small architectures so toy problems train in well under a second
TrainingConfig tiny_cfg() {
  TrainingConfig c;
  c.emulator = {64, 3e-2, 2500, 150, 0.85, 0.0};
  c.flow = {512, 1e-2, 300, 100, 0.85, 0.0};
  c.vaed = {256, 5e-3, 200, 100, 0.9, 0.0};
  c.emu_hidden = 8;
  c.emu_depth = 1;
  c.enc_hidden = 8;
  c.enc_depth = 1;
  c.dec_hidden = 12;
  c.dec_depth = 1;
  c.flow_hidden = 10;
  c.flow_depth = 1;
  c.flow_blocks = 4;
  c.flow_bn = false;
  c.patience_frac = 0.0;
  c.seed = 7;
  return c;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("cvsim_train_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

}  // namespace

TEST_CASE("training config presets pin the published hyperparameters") {
  const TrainingConfig s = TrainingConfig::synthetic();
  CHECK(s.emulator.minibatch == 256);
  CHECK(s.emulator.lr == 1e-3);
  CHECK(s.emulator.epochs == 20000);
  CHECK(s.emulator.decay_period == 100);
  CHECK(s.emulator.decay_rate == 0.98);
  CHECK(s.flow.minibatch == 512);
  CHECK(s.flow.lr == 2e-3);
  CHECK(s.flow.epochs == 1500);
  CHECK(s.flow.decay_period == 200);
  CHECK(s.flow.decay_rate == 0.85);
  CHECK(s.vaed.minibatch == 256);
  CHECK(s.vaed.lr == 1e-3);
  CHECK(s.vaed.epochs == 20000);
  CHECK(s.vaed.decay_rate == 0.985);
  CHECK(s.beta_d == 1.0);
  CHECK(s.beta_v == 2000.0);
  CHECK(s.beta_r == 20.0);
  CHECK(s.latent_dim == 19);
  CHECK(s.flow_bn == false);
  CHECK(s.emulator.weight_decay == 0.0);

  const TrainingConfig e = TrainingConfig::ehr();
  CHECK(e.emulator.lr == 3e-3);
  CHECK(e.emulator.epochs == 25000);
  CHECK(e.flow.lr == 4e-3);
  CHECK(e.flow.epochs == 1000);
  CHECK(e.flow.decay_rate == 0.5);
  CHECK(e.flow.weight_decay == 2e-4);
  CHECK(e.vaed.minibatch == 512);
  CHECK(e.vaed.epochs == 2000);
  CHECK(e.vaed.decay_rate == 0.97);
  CHECK(e.vaed.weight_decay == 2e-4);
  CHECK(e.beta_v == 1000.0);
  CHECK(e.beta_r == 10.0);
  CHECK(e.emu_hidden == 80);
  CHECK(e.flow_hidden == 18);
  CHECK(e.flow_blocks == 10);
  CHECK(e.flow_bn == true);

  SUBCASE("budget scaling") {
    CHECK(TrainingConfig::budget_scale_for(54000) == 1.0);
    CHECK(TrainingConfig::budget_scale_for(108000) == 1.0);
    CHECK(TrainingConfig::budget_scale_for(10000) ==
          doctest::Approx(10000.0 / 54000.0).epsilon(1e-15));
    TrainingConfig c = s;
    c.budget_scale = TrainingConfig::budget_scale_for(10000);
    CHECK(c.scaled_epochs(c.emulator) == 3704);
    c.budget_scale = 1.0;
    CHECK(c.scaled_epochs(c.flow) == 1500);
  }

  SUBCASE("json round trip") {
    TrainingConfig c = TrainingConfig::ehr();
    c.noise_scale = 0.5;
    c.seed = 99;
    c.budget_scale = 0.25;
    const nlohmann::json j = nlohmann::json::parse(c.to_json().dump());
    const TrainingConfig back = TrainingConfig::from_json(j);
    CHECK(back.to_json() == c.to_json());
  }
}

TEST_CASE("bundle factory builds the published shapes deterministically") {
  const SplitStats st = identity_stats();
  const PriorBox prior = PriorBox::structural();

  ModelBundle syn = make_bundle(TrainingConfig::synthetic(), st, prior);
  CHECK(syn.emulator.count() == 24376);
  CHECK(syn.encoder.count() == 6246);
  CHECK(syn.decoder.count() == 20439);
  CHECK(syn.flow.count() == 51712);
  CHECK(syn.has_emulator == false);

  ModelBundle ehr = make_bundle(TrainingConfig::ehr(), st, prior);
  CHECK(ehr.emulator.count() == 42096);
  CHECK(ehr.encoder.count() == 6246);
  CHECK(ehr.decoder.count() == 20439);
  CHECK(ehr.flow.count() == 20280);

  ModelBundle again = make_bundle(TrainingConfig::synthetic(), st, prior);
  CHECK((again.emulator.layers[0].w.value - syn.emulator.layers[0].w.value)
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((again.decoder.layers[1].w.value - syn.decoder.layers[1].w.value)
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("kl term closed forms") {
  nn::Tape t;
  const Eigen::Index n = 3, d = 19;
  nn::Var mu1 = t.input(MatrixXd::Ones(n, d));
  nn::Var lv0 = t.input(MatrixXd::Zero(n, d));
  nn::Var kl = kl_graph(t, mu1, lv0);
  for (Eigen::Index i = 0; i < n; ++i)
    CHECK(t.value(kl)(i, 0) == doctest::Approx(9.5).epsilon(1e-15));

  nn::Var mu0 = t.input(MatrixXd::Zero(n, d));
  nn::Var kl0 = kl_graph(t, mu0, lv0);
  CHECK(t.value(kl0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("emulator loss graph equals the plain-evaluation mean") {
  Rng rng(3);
  nn::Mlp net({kNumParams, 6, kNumOutputs}, nn::Activation::kSwish);
  net.init(rng);
  const MatrixXd v = uniform_matrix(rng, 10, kNumParams, -1.0, 1.0);
  const MatrixXd y = uniform_matrix(rng, 10, kNumOutputs, -1.0, 1.0);
  nn::Tape t;
  nn::Var L = emulator_loss_graph(t, net, v, y);
  const double manual =
      (net.apply(v) - y).array().square().rowwise().sum().mean();
  CHECK(t.value(L)(0, 0) == doctest::Approx(manual).epsilon(1e-14));
}

TEST_CASE("vae loss gradients pass finite differences") {
  Rng rng(5);
  nn::Mlp enc({3, 6, 4}, nn::Activation::kSwish);
  nn::Mlp dec({4, 8, 3}, nn::Activation::kSwish);
  nn::Mlp emu({3, 6, 2}, nn::Activation::kSwish);
  enc.init(rng);
  dec.init(rng);
  emu.init(rng);
  const MatrixXd v = uniform_matrix(rng, 5, 3, -1.0, 1.0);
  const MatrixXd y = uniform_matrix(rng, 5, 2, -1.0, 1.0);
  MatrixXd eps(5, 2);
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) eps(i, j) = rng.normal();

  std::vector<nn::Parameter*> params = enc.parameters();
  for (nn::Parameter* p : dec.parameters()) params.push_back(p);

  auto loss = [&](bool back) {
    nn::Tape t;
    nn::Var L = vae_loss_graph(t, enc, dec, emu, v, y, eps, 1.0, 2.5, 0.7);
    if (back) t.backward(L);
    return t.value(L)(0, 0);
  };

  for (nn::Parameter* p : params) p->zero_grad();
  loss(true);
  std::vector<MatrixXd> analytic;
  for (nn::Parameter* p : params) analytic.push_back(p->grad);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Parameter& p = *params[k];
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
        const double keep = p.value(i, j);
        p.value(i, j) = keep + h;
        const double f1 = loss(false);
        p.value(i, j) = keep - h;
        const double f0 = loss(false);
        p.value(i, j) = keep;
        const double fd = (f1 - f0) / (2.0 * h);
        worst = std::max(worst,
                         std::abs(analytic[k](i, j) - fd) /
                             std::max({1.0, std::abs(fd)}));
      }
  }
  CHECK(worst < 1e-6);

  SUBCASE("row mismatch is rejected") {
    nn::Tape t;
    CHECK_THROWS_AS((void)vae_loss_graph(t, enc, dec, emu, v,
                                         y.topRows(3), eps, 1, 1, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("noise injection contract") {
  Rng rng(11);
  const MatrixXd y = uniform_matrix(rng, 50, kNumOutputs, 50.0, 120.0);

  SUBCASE("zero scale is the identity") {
    Rng r(1);
    const MatrixXd out = inject_noise(y, 0.0, r);
    CHECK((out - y).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("consecutive draws differ for the same rows") {
    Rng r(2);
    const MatrixXd a = inject_noise(y, 1.0, r);
    const MatrixXd b = inject_noise(y, 1.0, r);
    CHECK((a - b).cwiseAbs().minCoeff() > 0.0);
  }

  SUBCASE("per-component spread follows the published stds") {
    Rng r(3);
    const Eigen::Index n = 4000;
    const MatrixXd base = MatrixXd::Zero(n, kNumOutputs);
    const MatrixXd noised = inject_noise(base, 2.0, r);
    const OutputVector& s = output_noise_std();
    for (Eigen::Index j = 0; j < kNumOutputs; ++j) {
      const double mean = noised.col(j).mean();
      const double sd = std::sqrt(
          (noised.col(j).array() - mean).square().sum() / double(n - 1));
      CHECK(sd == doctest::Approx(2.0 * s(j)).epsilon(0.06));
      CHECK(std::abs(mean) < 4.0 * 2.0 * s(j) / std::sqrt(double(n)));
    }
  }

  SUBCASE("wrong width is rejected") {
    Rng r(4);
    CHECK_THROWS_AS((void)inject_noise(MatrixXd::Zero(2, 5), 1.0, r),
                    std::invalid_argument);
  }
}

TEST_CASE("emulator training drives a constant-output toy to machine floor") {
  Rng rng(21);
  const Eigen::Index n = 48;
  const MatrixXd v = uniform_matrix(rng, n, kNumParams, -1.0, 1.0);
  MatrixXd y(n, kNumOutputs);
  for (Eigen::Index j = 0; j < kNumOutputs; ++j)
    y.col(j).setConstant(0.1 * static_cast<double>(j) - 0.7);
  const Dataset ds = toy_dataset(v, y, 0);

  TrainingConfig cfg = tiny_cfg();
  cfg.emulator = {64, 3e-2, 20000, 400, 0.9, 0.0};
  ModelBundle b = make_bundle(cfg, identity_stats(), PriorBox::structural());
  const TrainResult res = train_emulator(b, ds);
  CHECK(b.has_emulator);
  CHECK(res.epochs_run > 0);
  CHECK(res.best_epoch >= 0);
  const double mse =
      (b.emulator.apply(v) - y).array().square().rowwise().sum().mean();
  CHECK(mse < 1e-8);
}

TEST_CASE("emulator training fits a linear map to sub-percent error") {
  Rng rng(23);
  const Eigen::Index n = 600, n_test = 88;
  const MatrixXd v = uniform_matrix(rng, n, kNumParams, -1.0, 1.0);
  const MatrixXd M = uniform_matrix(rng, kNumOutputs, kNumParams, -0.5, 0.5);
  const MatrixXd y = v * M.transpose();
  const Dataset ds = toy_dataset(v, y, n_test);

  TrainingConfig cfg = tiny_cfg();
  cfg.emu_hidden = 32;
  cfg.emu_depth = 1;
  cfg.emulator = {128, 5e-3, 4000, 250, 0.88, 0.0};
  ModelBundle b = make_bundle(cfg, identity_stats(), PriorBox::structural());
  const TrainResult res = train_emulator(b, ds);

  const MatrixXd v_te = ds.v_of(Split::kTest);
  const MatrixXd y_te = ds.y_of(Split::kTest);
  const MatrixXd pred = b.emulator.apply(v_te);
  VectorXd rel(n_test);
  for (Eigen::Index i = 0; i < n_test; ++i)
    rel(i) = (pred.row(i) - y_te.row(i)).norm() / y_te.row(i).norm();
  std::sort(rel.data(), rel.data() + rel.size());
  CHECK(rel(n_test / 2) < 5e-3);

  // best checkpoint is the minimum of the logged test losses
  double lo = res.curve.front().test_loss;
  for (const EpochLog& e : res.curve) lo = std::min(lo, e.test_loss);
  CHECK(res.best_test == lo);
}

TEST_CASE("early stopping halts an overfitting run and restores the best") {
  Rng rng(25);
  // few noisy rows and a roomy net: the held-out loss bottoms out and climbs
  const Eigen::Index n = 40, n_test = 16;
  const MatrixXd v = uniform_matrix(rng, n, kNumParams, -1.0, 1.0);
  const MatrixXd B = uniform_matrix(rng, kNumOutputs, kNumParams, -0.4, 0.4);
  MatrixXd y = v * B.transpose();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < kNumOutputs; ++j) y(i, j) += 0.3 * rng.normal();
  const Dataset ds = toy_dataset(v, y, n_test);

  TrainingConfig cfg = tiny_cfg();
  cfg.emu_hidden = 32;
  cfg.emu_depth = 2;
  cfg.emulator = {64, 1e-2, 4000, 1000000, 1.0, 0.0};
  cfg.patience_frac = 0.03;
  ModelBundle b = make_bundle(cfg, identity_stats(), PriorBox::structural());
  const TrainResult res = train_emulator(b, ds);
  CHECK(res.epochs_run < 4000);
  CHECK(res.best_epoch >= 0);
  CHECK(res.epochs_run - 1 - res.best_epoch >= 120);  // the patience window

  // the returned weights are the checkpoint, not the last epoch
  const MatrixXd pred = b.emulator.apply(ds.v_of(Split::kTest));
  const double te = (pred - ds.y_of(Split::kTest))
                        .array()
                        .square()
                        .rowwise()
                        .sum()
                        .mean();
  CHECK(te == doctest::Approx(res.best_test).epsilon(1e-12));
  double last = res.curve.back().test_loss;
  CHECK(res.best_test < last);
}

TEST_CASE("flow training matches first moments of a diagonal gaussian") {
  Rng rng(31);
  const Eigen::Index n = 2048;
  MatrixXd y(n, kNumOutputs);
  VectorXd mu(kNumOutputs), sd(kNumOutputs);
  for (Eigen::Index j = 0; j < kNumOutputs; ++j) {
    mu(j) = 0.4 * std::sin(1.0 + static_cast<double>(j));
    sd(j) = 0.6 + 0.05 * static_cast<double>(j);
  }
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < kNumOutputs; ++j)
      y(i, j) = mu(j) + sd(j) * rng.normal();
  const Dataset ds = toy_dataset(
      uniform_matrix(rng, n, kNumParams, -1.0, 1.0), y, 512);

  ModelBundle b = make_bundle(tiny_cfg(), identity_stats(),
                              PriorBox::structural());
  const double nll_before = -b.flow.log_prob(ds.y_of(Split::kTest)).mean();
  const TrainResult res = train_flow(b, ds);
  CHECK(b.has_flow);
  CHECK_FALSE(res.diverged);
  CHECK(res.best_test < nll_before);

  Rng sample_rng(77);
  const MatrixXd draws = b.sample_outputs(4000, sample_rng);
  for (Eigen::Index j = 0; j < kNumOutputs; ++j) {
    const double m = draws.col(j).mean();
    CHECK(std::abs(m - mu(j)) < 0.25 * sd(j));
  }
}

TEST_CASE("noise scale widens the learned output distribution") {
  Rng rng(33);
  const Eigen::Index n = 1024;
  // a tight cluster: spread far below the published noise stds
  MatrixXd y(n, kNumOutputs);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < kNumOutputs; ++j)
      y(i, j) = 0.3 * rng.normal();
  const MatrixXd v = uniform_matrix(rng, n, kNumParams, -1.0, 1.0);
  const Dataset ds = toy_dataset(v, y, 256);

  auto train_with = [&](double delta) {
    TrainingConfig cfg = tiny_cfg();
    cfg.flow.epochs = 250;
    cfg.noise_scale = delta;
    ModelBundle b = make_bundle(cfg, identity_stats(), PriorBox::structural());
    (void)train_flow(b, ds);
    Rng sr(55);
    return b.sample_outputs(4000, sr);
  };
  const MatrixXd tight = train_with(0.0);
  const MatrixXd wide = train_with(1.0);

  // heart-rate column: noise std 3.0 versus data spread 0.3
  auto col_sd = [](const MatrixXd& m, Eigen::Index j) {
    const double mean = m.col(j).mean();
    return std::sqrt((m.col(j).array() - mean).square().sum() /
                     static_cast<double>(m.rows() - 1));
  };
  CHECK(col_sd(wide, 0) > 3.0 * col_sd(tight, 0));
}

TEST_CASE("vae training freezes the emulator and is seed reproducible") {
  Rng rng(41);
  const Eigen::Index n = 300;
  const MatrixXd v = uniform_matrix(rng, n, kNumParams, -1.0, 1.0);
  const MatrixXd B = uniform_matrix(rng, kNumOutputs, kNumParams, -0.4, 0.4);
  const MatrixXd y = v * B.transpose();
  const Dataset ds = toy_dataset(v, y, 44);

  TrainingConfig cfg = tiny_cfg();
  cfg.emulator.epochs = 300;
  cfg.vaed.epochs = 120;
  cfg.noise_scale = 0.5;

  ModelBundle b = make_bundle(cfg, identity_stats(), PriorBox::structural());
  CHECK_THROWS_AS((void)train_vae_decoder(b, ds), std::invalid_argument);

  (void)train_emulator(b, ds);
  std::vector<MatrixXd> frozen;
  for (nn::Parameter* p : b.emulator.parameters()) frozen.push_back(p->value);

  const TrainResult res = train_vae_decoder(b, ds);
  CHECK(b.has_vaed);
  CHECK_FALSE(res.diverged);
  CHECK(res.best_epoch >= 0);
  std::size_t k = 0;
  for (nn::Parameter* p : b.emulator.parameters()) {
    CHECK((p->value - frozen[k]).cwiseAbs().maxCoeff() == 0.0);
    ++k;
  }
  for (nn::Parameter* p : b.emulator.parameters())
    CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0);

  // identical seeds give a bitwise identical pipeline
  ModelBundle c = make_bundle(cfg, identity_stats(), PriorBox::structural());
  (void)train_emulator(c, ds);
  (void)train_vae_decoder(c, ds);
  for (std::size_t l = 0; l < b.decoder.layers.size(); ++l) {
    CHECK((b.decoder.layers[l].w.value - c.decoder.layers[l].w.value)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }

  ModelBundle d = make_bundle(cfg, identity_stats(), PriorBox::structural());
  d.cfg.seed = 8;
  (void)train_emulator(d, ds);
  CHECK((b.emulator.layers[0].w.value - d.emulator.layers[0].w.value)
            .cwiseAbs()
            .maxCoeff() > 0.0);
}

TEST_CASE("joint encoder-decoder inverts a bijective linear map") {
  Rng rng(43);
  const Eigen::Index n = 512, dv = 3, dy = 3, latent = 2;
  MatrixXd A(3, 3);
  A << 2.0, 0.3, 0.0, 0.1, 1.5, 0.2, 0.0, 0.4, 1.2;
  const MatrixXd V = uniform_matrix(rng, n, dv, -1.0, 1.0);
  const MatrixXd Y = V * A.transpose();

  nn::Mlp emu({dv, 16, 16, dy}, nn::Activation::kSwish);
  nn::Mlp enc({dv, 16, 16, 2 * latent}, nn::Activation::kSwish);
  nn::Mlp dec({dy + latent, 24, 24, dv}, nn::Activation::kSwish);
  emu.init(rng);
  enc.init(rng);
  dec.init(rng);

  {
    nn::AdamConfig ac;
    ac.lr = 1e-2;
    ac.decay_period = 200;
    ac.decay_rate = 0.7;
    nn::Adam opt(emu.parameters(), ac);
    for (int k = 0; k < 3000; ++k) {
      nn::Tape t;
      nn::Var L = emulator_loss_graph(t, emu, V, Y);
      opt.zero_grad();
      t.backward(L);
      opt.step(k);
    }
  }

  std::vector<nn::Parameter*> params = enc.parameters();
  for (nn::Parameter* p : dec.parameters()) params.push_back(p);
  nn::AdamConfig ac;
  ac.lr = 5e-3;
  ac.decay_period = 1200;
  ac.decay_rate = 0.65;
  ac.weight_decay = 1e-3;  // keeps the unused latent inputs suppressed
  nn::Adam opt(params, ac);
  for (int k = 0; k < 20000; ++k) {
    MatrixXd eps(n, latent);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < latent; ++j) eps(i, j) = rng.normal();
    nn::Tape t;
    nn::Var L = vae_loss_graph(t, enc, dec, emu, V, Y, eps, 1.0, 2000.0, 20.0);
    opt.zero_grad();
    t.backward(L);
    opt.step(k);
  }

  // fresh latents: the decoder must rely on y alone
  MatrixXd w(n, latent);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < latent; ++j) w(i, j) = rng.normal();
  MatrixXd dec_in(n, dy + latent);
  dec_in << Y, w;
  const MatrixXd vhat = dec.apply(dec_in);
  double rel = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    rel += (vhat.row(i) - V.row(i)).norm() / V.row(i).norm();
  rel /= static_cast<double>(n);
  CHECK(rel < 0.01);

  // the latent space collapsed toward the prior
  nn::Tape t;
  nn::Var out = enc.forward(t, t.input(V));
  nn::Var kl = kl_graph(t, t.slice_cols(out, 0, latent),
                        t.slice_cols(out, latent, latent));
  const double kl_per_dim =
      t.value(kl).mean() / static_cast<double>(latent);
  CHECK(kl_per_dim < 0.05);
}

TEST_CASE("bundle persistence round trips bitwise") {
  TempDir tmp;
  Rng rng(51);
  TrainingConfig cfg = tiny_cfg();
  cfg.noise_scale = 0.25;
  cfg.flow_bn = true;  // exercise running-stat serialization
  ModelBundle b = make_bundle(cfg, identity_stats(), PriorBox::ehr());
  b.has_emulator = true;
  b.has_flow = true;
  // non-default running stats must survive the trip
  b.flow.blocks[1].bn.run_mean.setConstant(0.21);
  b.flow.blocks[1].bn.run_var.setConstant(1.37);

  const std::string path = tmp.file("bundle.json");
  save_bundle(b, path);
  const ModelBundle back = load_bundle(path);

  CHECK(back.has_emulator);
  CHECK(back.has_flow);
  CHECK_FALSE(back.has_vaed);
  CHECK(back.cfg.noise_scale == 0.25);
  CHECK(back.prior.name == b.prior.name);
  CHECK((back.prior.lo - b.prior.lo).cwiseAbs().maxCoeff() == 0.0);

  const MatrixXd v = uniform_matrix(rng, 4, kNumParams, -1.0, 1.0);
  const MatrixXd y = uniform_matrix(rng, 4, kNumOutputs, -1.0, 1.0);
  MatrixXd w(4, cfg.latent_dim);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal();

  CHECK((back.emulate(v) - b.emulate(v)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.decode(y, w) - b.decode(y, w)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.output_log_density(y) - b.output_log_density(y))
            .cwiseAbs()
            .maxCoeff() == 0.0);

  SUBCASE("format and dimension-chain guards") {
    io::write_text(tmp.file("bad.json"), "{\"format\": \"other\"}\n");
    CHECK_THROWS_AS((void)load_bundle(tmp.file("bad.json")),
                    std::runtime_error);

    nlohmann::json j = nlohmann::json::parse(io::read_text(path));
    j["config"]["latent_dim"] = 7;  // decoder width no longer matches
    io::write_text(tmp.file("broken.json"), j.dump());
    CHECK_THROWS_AS((void)load_bundle(tmp.file("broken.json")),
                    std::runtime_error);
  }
}

TEST_CASE("curve csv and manifest formats") {
  TempDir tmp;
  TrainResult r;
  r.curve = {{0, 1e-3, 2.5, 2.6}, {1, 1e-3, 1.5, 1.7}};
  r.epochs_run = 2;
  r.best_epoch = 1;
  r.best_test = 1.7;
  const std::string path = tmp.file("curve.csv");
  save_curve_csv(r.curve, path);
  const std::string text = io::read_text(path);
  CHECK(text.rfind("epoch,lr,train_loss,test_loss\n", 0) == 0);
  CHECK(text.find("\n1,0.001,1.5,1.7\n") != std::string::npos);

  ModelBundle b = make_bundle(tiny_cfg(), identity_stats(),
                              PriorBox::structural());
  const nlohmann::json m = training_manifest(b, {{"emulator", r}});
  CHECK(m.at("format") == "cvsim-training-1");
  CHECK(m.at("modules").at("emulator").at("best_epoch") == 1);
  CHECK(m.at("modules").at("emulator").at("final_test_loss") == 1.7);
  CHECK(m.at("prior") == "structural");
}
