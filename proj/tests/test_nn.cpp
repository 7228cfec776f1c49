#include <doctest.h>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cvsim/nn.hpp"
#include "cvsim/rng.hpp"

using namespace cvsim;
using namespace cvsim::nn;

namespace {

MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo,
                       double hi) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

double rel_gap(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central finite differences against the tape gradient. loss(true) must
// build the graph and backpropagate; loss(false) only evaluates.
double worst_grad_gap(const std::vector<Parameter*>& params,
                      const std::function<double(bool)>& loss,
                      double h = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  loss(true);
  std::vector<MatrixXd> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
        const double keep = p.value(i, j);
        p.value(i, j) = keep + h;
        const double f_hi = loss(false);
        p.value(i, j) = keep - h;
        const double f_lo = loss(false);
        p.value(i, j) = keep;
        const double fd = (f_hi - f_lo) / (2.0 * h);
        worst = std::max(worst, rel_gap(analytic[k](i, j), fd));
      }
    }
  }
  return worst;
}

void perturb(std::vector<Parameter*> params, Rng& rng, double scale) {
  for (Parameter* p : params)
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j)
        p->value(i, j) += scale * rng.normal();
}

}  // namespace

TEST_CASE("tape gradients match finite differences across the op set") {
  Rng rng(11);
  Parameter P, Q, R;
  P.resize(4, 3);
  Q.resize(1, 3);
  R.resize(1, 1);
  P.value = random_matrix(rng, 4, 3, 0.2, 0.9);
  Q.value = random_matrix(rng, 1, 3, 0.4, 1.1);
  R.value(0, 0) = 0.7;
  const MatrixXd A = random_matrix(rng, 5, 4, 0.2, 1.1);

  auto loss = [&](bool back) {
    Tape t;
    Var a = t.input(A);
    Var p = t.param(P);
    Var q = t.param(Q);
    Var r = t.param(R);
    Var z1 = t.matmul(a, p);
    Var z2 = t.add_row(z1, q);
    Var z3 = t.swish(z2);
    Var z4 = t.tanh(t.relu(t.add_const(z1, 0.3)));
    Var z5 = t.sigmoid(z1);
    Var z6 = t.mul(z3, z4);
    Var z7 = t.sub(t.add(z6, z5), z4);
    Var z8 = t.sub_row(t.mul_row(z7, q), q);
    Var z9 = t.exp(t.scale(z8, 0.1));
    Var z10 = t.log(t.add_const(t.square(z9), 1.0));
    Var s1 = t.slice_cols(z10, 0, 2);
    Var s2 = t.slice_cols(z10, 2, 1);
    Var cc = t.concat_cols(s2, s1);
    Var L = t.sum_all(t.row_sum(cc));
    L = t.add(L, t.scale(t.sum_all(t.add_bscalar(z10, r)), 0.25));
    L = t.add(L, t.sum_all(t.col_mean(z10)));
    if (back) t.backward(L);
    return t.value(L)(0, 0);
  };

  CHECK(worst_grad_gap({&P, &Q, &R}, loss) < 1e-6);
}

TEST_CASE("linear mean-square gradient matches the closed form") {
  Rng rng(3);
  Linear lin(4, 3);
  lin.init(rng);
  const MatrixXd X = random_matrix(rng, 16, 4, -1.0, 1.0);
  const MatrixXd Y = random_matrix(rng, 16, 3, -1.0, 1.0);
  const double n = 16.0;

  Tape t;
  Var r = t.sub(lin(t, t.input(X)), t.input(Y));
  Var L = t.scale(t.sum_all(t.square(r)), 1.0 / n);
  lin.w.zero_grad();
  lin.b.zero_grad();
  t.backward(L);

  const MatrixXd resid = (X * lin.w.value).rowwise() + lin.b.value.row(0);
  const MatrixXd R = resid - Y;
  const MatrixXd gw = 2.0 * X.transpose() * R / n;
  const MatrixXd gb = 2.0 * R.colwise().sum() / n;
  CHECK((lin.w.grad - gw).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((lin.b.grad - gb).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("swish fixes value 0 and slope one half at the origin") {
  Parameter x;
  x.resize(1, 1);
  Tape t;
  Var L = t.sum_all(t.swish(t.param(x)));
  CHECK(t.value(L)(0, 0) == 0.0);
  t.backward(L);
  CHECK(x.grad(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("tape misuse is rejected") {
  Tape t;
  Var a = t.input(MatrixXd::Zero(2, 3));
  Var b = t.input(MatrixXd::Zero(2, 3));
  CHECK_THROWS_AS((void)t.matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)t.add(a, t.input(MatrixXd::Zero(3, 3))),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)t.add_row(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)t.slice_cols(a, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(t.backward(a), std::invalid_argument);

  t.reset();
  CHECK(t.size() == 0);
}

TEST_CASE("pinned parameter counts for the model architectures") {
  const Mlp emu({23, 60, 60, 60, 60, 60, 60, 60, 16}, Activation::kSwish);
  CHECK(emu.count() == 24376);
  const Mlp enc({23, 32, 32, 32, 32, 32, 38}, Activation::kSwish);
  CHECK(enc.count() == 6246);
  const Mlp dec({35, 64, 64, 64, 64, 64, 23}, Activation::kSwish);
  CHECK(dec.count() == 20439);
  const RealNvp flow(16, 16, 24, 3, false);
  CHECK(flow.count() == 51712);
  const Mlp emu_ehr({23, 80, 80, 80, 80, 80, 80, 80, 16}, Activation::kSwish);
  CHECK(emu_ehr.count() == 42096);
  const RealNvp flow_ehr(16, 10, 18, 3, true);
  CHECK(flow_ehr.count() == 20280);
}

TEST_CASE("freshly initialized flow is the identity map") {
  Rng rng(4);
  RealNvp flow(6, 4, 8, 2, false);
  flow.init(rng);
  const MatrixXd z = random_matrix(rng, 7, 6, -2.0, 2.0);
  const auto [y, ld] = flow.forward(z);
  CHECK((y - z).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ld.cwiseAbs().maxCoeff() == 0.0);
  const VectorXd lp = flow.log_prob(z);
  const VectorXd ref = gaussian_log_density(z);
  CHECK((lp - ref).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("perturbed flow stays bijective") {
  Rng rng(9);
  auto run = [&](bool use_bn) {
    RealNvp flow(6, 5, 10, 2, use_bn);
    flow.init(rng);
    perturb(flow.parameters(), rng, 0.2);
    if (use_bn) {
      for (CouplingBlock& blk : flow.blocks) {
        blk.bn.run_mean.setConstant(0.3);
        blk.bn.run_var.setConstant(1.7);
      }
    }
    const MatrixXd y = random_matrix(rng, 9, 6, -2.0, 2.0);
    const auto [z, ld_inv] = flow.inverse(y);
    const auto [back, ld_fwd] = flow.forward(z);
    CHECK((back - y).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((ld_inv + ld_fwd).cwiseAbs().maxCoeff() < 1e-8);
  };
  run(false);
  run(true);
}

TEST_CASE("two-block scaling flow matches the change-of-variables formula") {
  // zeroed subnets with the scale net's final bias at atanh(log 2): each
  // block doubles its changed half, so the map is y = 2 z overall
  RealNvp flow(2, 2, 4, 1, false);
  Rng rng(1);
  flow.init(rng);
  const double bias = std::atanh(std::log(2.0));
  for (CouplingBlock& blk : flow.blocks)
    blk.s_net.layers.back().b.value.setConstant(bias);

  MatrixXd z(2, 2);
  z << 0.7, -1.2, 0.1, 2.0;
  const auto [y, ld] = flow.forward(z);
  CHECK((y - 2.0 * z).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(ld(0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));

  const VectorXd lp = flow.log_prob(y);
  const VectorXd ref =
      (gaussian_log_density((y / 2.0).eval()).array() - 2.0 * std::log(2.0))
          .matrix();
  CHECK((lp - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batch norm running statistics and normalization contract") {
  RealNvp flow(2, 1, 4, 1, true);
  Rng rng(13);
  flow.init(rng);  // couplings start as the identity
  const MatrixXd y = random_matrix(rng, 8, 2, -1.5, 1.5);

  const Eigen::RowVectorXd mu = y.colwise().mean();
  Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(2);
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    var += (y.row(i) - mu).cwiseAbs2();
  var /= static_cast<double>(y.rows());  // biased, as used for normalization

  SUBCASE("training mode uses batch statistics and refreshes running ones") {
    Tape t;
    Var lp = flow.log_prob_graph(t, y, true);
    const FlowBatchNorm& bn = flow.blocks[0].bn;
    CHECK((bn.run_mean - 0.1 * mu).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((bn.run_var -
           (0.9 * Eigen::RowVectorXd::Ones(2) + 0.1 * var))
              .cwiseAbs()
              .maxCoeff() < 1e-14);

    const double eps = bn.eps;
    const Eigen::RowVectorXd sd = (var.array() + eps).sqrt().matrix();
    MatrixXd z = y.rowwise() - mu;
    z.array().rowwise() /= sd.array();
    const VectorXd ref = (gaussian_log_density(z).array() -
                          0.5 * (var.array() + eps).log().sum())
                             .matrix();
    CHECK((t.value(lp) - ref).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("eval mode reproduces the running-statistics affine map") {
    FlowBatchNorm& bn = flow.blocks[0].bn;
    bn.run_mean << 0.4, -0.1;
    bn.run_var << 2.0, 0.5;
    bn.log_s.value << 0.2, -0.3;
    bn.beta.value << 0.05, 0.1;

    const Eigen::RowVectorXd sd = (bn.run_var.array() + bn.eps).sqrt().matrix();
    const Eigen::RowVectorXd gain = bn.log_s.value.row(0).array().exp().matrix();
    MatrixXd z = y.rowwise() - bn.run_mean;
    z.array().rowwise() /= sd.array();
    z.array().rowwise() *= gain.array();
    z = z.rowwise() + bn.beta.value.row(0);
    const VectorXd ref = (gaussian_log_density(z).array() +
                          bn.log_s.value.sum() -
                          0.5 * (bn.run_var.array() + bn.eps).log().sum())
                             .matrix();
    CHECK((flow.log_prob(y) - ref).cwiseAbs().maxCoeff() < 1e-12);

    Tape t;
    Var lp = flow.log_prob_graph(t, y, false);
    CHECK((t.value(lp) - ref).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((bn.run_mean(0) == 0.4));  // eval mode must not touch the stats
  }
}

TEST_CASE("graph and plain log-density agree on a perturbed flow") {
  Rng rng(21);
  auto run = [&](bool use_bn) {
    RealNvp flow(4, 3, 8, 2, use_bn);
    flow.init(rng);
    perturb(flow.parameters(), rng, 0.15);
    if (use_bn) {
      for (CouplingBlock& blk : flow.blocks) {
        blk.bn.run_mean.setConstant(-0.2);
        blk.bn.run_var.setConstant(1.4);
      }
    }
    const MatrixXd y = random_matrix(rng, 6, 4, -2.0, 2.0);
    Tape t;
    Var lp = flow.log_prob_graph(t, y, false);
    const VectorXd plain = flow.log_prob(y);
    for (Eigen::Index i = 0; i < plain.size(); ++i)
      CHECK(t.value(lp)(i, 0) ==
            doctest::Approx(plain(i)).epsilon(1e-10));
  };
  run(false);
  run(true);
}

TEST_CASE("flow log-density gradients pass finite differences") {
  Rng rng(17);
  RealNvp flow(4, 2, 6, 1, true);
  flow.init(rng);
  perturb(flow.parameters(), rng, 0.1);
  const MatrixXd y = random_matrix(rng, 8, 4, -1.5, 1.5);
  const std::vector<Parameter*> params = flow.parameters();

  SUBCASE("training mode, through the batch statistics") {
    auto loss = [&](bool back) {
      Tape t;
      Var lp = flow.log_prob_graph(t, y, true);
      Var L = t.scale(t.sum_all(lp), -1.0 / static_cast<double>(y.rows()));
      if (back) t.backward(L);
      return t.value(L)(0, 0);
    };
    CHECK(worst_grad_gap(params, loss) < 1e-6);
  }

  SUBCASE("eval mode, running statistics frozen") {
    for (CouplingBlock& blk : flow.blocks) {
      blk.bn.run_mean.setConstant(0.1);
      blk.bn.run_var.setConstant(0.9);
    }
    auto loss = [&](bool back) {
      Tape t;
      Var lp = flow.log_prob_graph(t, y, false);
      Var L = t.scale(t.sum_all(lp), -1.0 / static_cast<double>(y.rows()));
      if (back) t.backward(L);
      return t.value(L)(0, 0);
    };
    CHECK(worst_grad_gap(params, loss) < 1e-6);
  }
}

TEST_CASE("mlp gradients pass finite differences") {
  Rng rng(29);
  Mlp net({3, 5, 4}, Activation::kSwish);
  net.init(rng);
  const MatrixXd X = random_matrix(rng, 6, 3, -1.0, 1.0);
  const MatrixXd Y = random_matrix(rng, 6, 4, -1.0, 1.0);
  auto loss = [&](bool back) {
    Tape t;
    Var r = t.sub(net.forward(t, t.input(X)), t.input(Y));
    Var L = t.scale(t.sum_all(t.square(r)), 1.0 / 6.0);
    if (back) t.backward(L);
    return t.value(L)(0, 0);
  };
  CHECK(worst_grad_gap(net.parameters(), loss) < 1e-6);

  // the two forward routes must agree exactly
  Tape t;
  Var out = net.forward(t, t.input(X));
  CHECK((t.value(out) - net.apply(X)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("normalized density integrates to one on a 2d grid") {
  Rng rng(31);
  auto run = [&](bool use_bn) {
    RealNvp flow(2, 3, 6, 1, use_bn);
    flow.init(rng);
    perturb(flow.parameters(), rng, 0.05);
    if (use_bn) {
      for (CouplingBlock& blk : flow.blocks) {
        blk.bn.run_mean << 0.3, -0.2;
        blk.bn.run_var << 1.5, 0.7;
      }
    }
    const double step = 0.05;
    const int n = 321;  // [-8, 8] inclusive
    MatrixXd grid(n * n, 2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        grid(i * n + j, 0) = -8.0 + step * i;
        grid(i * n + j, 1) = -8.0 + step * j;
      }
    const VectorXd lp = flow.log_prob(grid);
    const double mass = lp.array().exp().sum() * step * step;
    CHECK(mass == doctest::Approx(1.0).epsilon(5e-3));
  };
  run(false);
  run(true);
}

TEST_CASE("flow trained on a diagonal gaussian recovers its likelihood") {
  Rng rng(41);
  const double mu0 = 0.5, mu1 = -0.3, sd0 = 1.3, sd1 = 0.8;
  auto draw = [&](Eigen::Index n) {
    MatrixXd y(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      y(i, 0) = mu0 + sd0 * rng.normal();
      y(i, 1) = mu1 + sd1 * rng.normal();
    }
    return y;
  };
  const MatrixXd train = draw(4096);
  const MatrixXd held = draw(4096);

  RealNvp flow(2, 4, 8, 1, false);
  flow.init(rng);
  AdamConfig cfg;
  cfg.lr = 2e-2;
  cfg.decay_period = 100;
  cfg.decay_rate = 0.8;
  Adam opt(flow.parameters(), cfg);
  for (int epoch = 0; epoch < 800; ++epoch) {
    Tape t;
    Var lp = flow.log_prob_graph(t, train, true);
    Var L = t.scale(t.sum_all(lp), -1.0 / static_cast<double>(train.rows()));
    opt.zero_grad();
    t.backward(L);
    opt.step(epoch);
  }

  const double fit = flow.log_prob(held).mean();
  const double analytic = -(std::log(2.0 * M_PI) + std::log(sd0 * sd1) + 1.0);
  CHECK(std::abs(fit - analytic) < 0.1);
}

TEST_CASE("adam optimizer behaves per definition") {
  SUBCASE("zero gradient leaves parameters untouched") {
    Parameter p;
    p.resize(2, 2);
    p.value << 1.0, -2.0, 3.0, 0.5;
    const MatrixXd before = p.value;
    Adam opt({&p}, AdamConfig{});
    opt.zero_grad();
    opt.step(0);
    CHECK((p.value - before).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("first step moves by lr times the sign, up to epsilon") {
    Parameter p;
    p.resize(1, 3);
    p.value << 1.0, -1.0, 2.0;
    p.grad << 0.3, -0.7, 1.9;
    AdamConfig cfg;
    cfg.lr = 0.01;
    Adam opt({&p}, cfg);
    opt.step(0);
    for (int j = 0; j < 3; ++j) {
      const double g = (MatrixXd(1, 3) << 0.3, -0.7, 1.9).finished()(0, j);
      const double expect = g / (std::abs(g) + cfg.eps);
      const double moved = ((MatrixXd(1, 3) << 1.0, -1.0, 2.0).finished()(0, j) -
                            p.value(0, j)) /
                           cfg.lr;
      CHECK(moved == doctest::Approx(expect).epsilon(1e-12));
    }
  }

  SUBCASE("weight decay pulls an ungraded parameter toward zero") {
    Parameter p;
    p.resize(1, 1);
    p.value(0, 0) = 5.0;
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 1e-2;
    Adam opt({&p}, cfg);
    opt.zero_grad();
    opt.step(0);
    CHECK(p.value(0, 0) < 5.0);
    CHECK(p.value(0, 0) > 4.0);
  }

  SUBCASE("step decay schedule") {
    AdamConfig cfg;
    cfg.lr = 1.0;
    cfg.decay_period = 100;
    cfg.decay_rate = 0.5;
    Adam opt({}, cfg);
    CHECK(opt.lr_at(0) == 1.0);
    CHECK(opt.lr_at(99) == 1.0);
    CHECK(opt.lr_at(100) == 0.5);
    CHECK(opt.lr_at(250) == 0.25);
  }

  SUBCASE("quadratic bowl converges") {
    Parameter x;
    x.resize(1, 1);
    x.value(0, 0) = -4.0;
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam opt({&x}, cfg);
    for (int k = 0; k < 500; ++k) {
      Tape t;
      Var L = t.scale(t.square(t.add_const(t.param(x), -3.0)), 0.5);
      opt.zero_grad();
      t.backward(L);
      opt.step(k);
    }
    CHECK(std::abs(x.value(0, 0) - 3.0) < 1e-3);
  }
}

TEST_CASE("json round trips preserve network behavior bitwise") {
  Rng rng(51);

  SUBCASE("mlp") {
    Mlp net({4, 7, 7, 3}, Activation::kSwish);
    net.init(rng);
    const MatrixXd X = random_matrix(rng, 5, 4, -1.0, 1.0);
    const nlohmann::json j = nlohmann::json::parse(net.to_json().dump());
    const Mlp back = Mlp::from_json(j);
    CHECK(back.hidden == Activation::kSwish);
    CHECK((back.apply(X) - net.apply(X)).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("flow with batch norm and mutated running stats") {
    RealNvp flow(4, 3, 6, 1, true);
    flow.init(rng);
    perturb(flow.parameters(), rng, 0.1);
    flow.blocks[1].bn.run_mean.setConstant(0.37);
    flow.blocks[1].bn.run_var.setConstant(2.21);
    const MatrixXd y = random_matrix(rng, 5, 4, -1.0, 1.0);
    const nlohmann::json j = nlohmann::json::parse(flow.to_json().dump());
    RealNvp back = RealNvp::from_json(j);
    CHECK(back.dim == 4);
    CHECK(back.blocks.size() == 3);
    CHECK(back.blocks[1].keep_first == false);
    CHECK((back.log_prob(y) - flow.log_prob(y)).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("unknown activation name is rejected") {
    CHECK_THROWS_AS((void)activation_from_name("gelu"), std::invalid_argument);
    CHECK(activation_from_name(activation_name(Activation::kRelu)) ==
          Activation::kRelu);
  }
}

TEST_CASE("initialization and sampling are seed deterministic") {
  Mlp a({5, 9, 2}, Activation::kRelu);
  Mlp b({5, 9, 2}, Activation::kRelu);
  Rng r1(7), r2(7);
  a.init(r1);
  b.init(r2);
  CHECK((a.layers[0].w.value - b.layers[0].w.value).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK(a.layers[0].b.value.cwiseAbs().maxCoeff() == 0.0);
  // fan-in bound on the uniform init
  const double bound = std::sqrt(6.0 / 5.0);
  CHECK(a.layers[0].w.value.cwiseAbs().maxCoeff() <= bound);

  RealNvp flow(4, 2, 6, 1, false);
  Rng r3(5);
  flow.init(r3);
  Rng r4(99), r5(99);
  const MatrixXd s1 = flow.sample(3, r4);
  const MatrixXd s2 = flow.sample(3, r5);
  CHECK((s1 - s2).cwiseAbs().maxCoeff() == 0.0);
  // identity flow samples are the base normal draws in row-major order
  Rng r6(99);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 4; ++j)
      CHECK(s1(i, j) == r6.normal());
}

TEST_CASE("flow construction guards") {
  CHECK_THROWS_AS(RealNvp(1, 2, 4, 1, false), std::invalid_argument);
  CHECK_THROWS_AS(RealNvp(4, 0, 4, 1, false), std::invalid_argument);
  CHECK_THROWS_AS(Mlp({3}, Activation::kSwish), std::invalid_argument);
}
