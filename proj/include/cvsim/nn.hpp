#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvsim/rng.hpp"
#include "cvsim/types.hpp"
#include "json.hpp"

namespace cvsim::nn {

// A learnable tensor plus its gradient accumulator.
struct Parameter {
  MatrixXd value;
  MatrixXd grad;

  void resize(Eigen::Index r, Eigen::Index c) {
    value.setZero(r, c);
    grad.setZero(r, c);
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index count() const { return value.size(); }
};

// Reverse-mode tape over dense matrices. Each op appends a node; backward
// walks the nodes in reverse and accumulates exact adjoints. The op set is
// only what the MLP, coupling-flow, and loss constructions below need.
class Tape {
 public:
  struct Var {
    int id = -1;
  };

  Var input(const MatrixXd& x);
  Var param(Parameter& p);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);       // same shape
  Var sub(Var a, Var b);       // same shape
  Var mul(Var a, Var b);       // same shape, elementwise
  Var add_row(Var x, Var r);   // n x c plus 1 x c broadcast
  Var sub_row(Var x, Var r);
  Var mul_row(Var x, Var r);
  Var relu(Var x);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var swish(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var square(Var x);
  Var scale(Var x, double c);
  Var add_const(Var x, double c);
  Var col_mean(Var x);            // n x c -> 1 x c
  Var row_sum(Var x);             // n x c -> n x 1
  Var sum_all(Var x);             // -> 1 x 1
  Var slice_cols(Var x, Eigen::Index first, Eigen::Index width);
  Var concat_cols(Var a, Var b);
  Var add_bscalar(Var x, Var s);  // broadcast-add a 1 x 1 node

  const MatrixXd& value(Var v) const;
  // Backpropagate from a 1 x 1 loss; accumulates into Parameter::grad.
  void backward(Var loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    kInput, kParam, kMatmul, kAdd, kSub, kMul, kAddRow, kSubRow, kMulRow,
    kRelu, kTanh, kSigmoid, kSwish, kExp, kLog, kSquare, kScale, kAddConst,
    kColMean, kRowSum, kSumAll, kSliceCols, kConcatCols, kAddBScalar,
  };
  struct Node {
    Op op;
    int a = -1, b = -1;
    double c = 0.0;
    Eigen::Index i0 = 0, i1 = 0;
    MatrixXd value;
    MatrixXd grad;
  };
  Var push(Node&& n);
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Parameter*>> params_;
};

using Var = Tape::Var;

enum class Activation { kIdentity, kSwish, kRelu, kTanh };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct Linear {
  Parameter w;  // in x out
  Parameter b;  // 1 x out

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out);
  // Kaiming-style uniform fan-in init; zero leaves weights and biases at 0
  void init(Rng& rng, bool zero = false);
  Var operator()(Tape& t, Var x) const;
  MatrixXd apply(const MatrixXd& x) const;
  Eigen::Index count() const { return w.count() + b.count(); }
};

// Dense network: hidden layers share one activation, output is linear.
struct Mlp {
  std::vector<Linear> layers;
  Activation hidden = Activation::kSwish;

  Mlp() = default;
  Mlp(const std::vector<Eigen::Index>& widths, Activation hidden_act);
  void init(Rng& rng, bool zero_last = false);
  Var forward(Tape& t, Var x) const;
  MatrixXd apply(const MatrixXd& x) const;
  Eigen::Index count() const;
  std::vector<Parameter*> parameters();
  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);
};

// Per-feature affine normalization with a log-parametrized scale, so the
// Jacobian log-determinant is just sum(log_s) - 0.5 sum(log(var + eps)).
struct FlowBatchNorm {
  Parameter log_s;  // 1 x dim
  Parameter beta;   // 1 x dim
  Eigen::RowVectorXd run_mean;
  Eigen::RowVectorXd run_var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit FlowBatchNorm(Eigen::Index dim = 0);
  Eigen::Index count() const { return log_s.count() + beta.count(); }
};

struct CouplingBlock {
  Mlp s_net;  // scale subnet, output squashed by tanh
  Mlp t_net;  // shift subnet, linear output
  bool keep_first = true;
  FlowBatchNorm bn;
  bool use_bn = false;
};

// Real-NVP with half-split masks alternating between blocks. The density
// direction (data -> base) applies inverse couplings then batch norm; the
// sampling direction inverts that chain with running statistics.
struct RealNvp {
  Eigen::Index dim = 0;
  std::vector<CouplingBlock> blocks;

  RealNvp() = default;
  RealNvp(Eigen::Index dim, int n_blocks, Eigen::Index hidden, int depth,
          bool use_bn);
  void init(Rng& rng);

  // eval-mode maps; log_det is per sample, of the direction called
  std::pair<MatrixXd, VectorXd> forward(const MatrixXd& z) const;   // z -> y
  std::pair<MatrixXd, VectorXd> inverse(const MatrixXd& y) const;   // y -> z
  // standard-normal base log-density plus inverse log-determinant
  VectorXd log_prob(const MatrixXd& y) const;
  // graph route used by training; training mode differentiates through
  // batch statistics and refreshes the running averages as a side effect
  Var log_prob_graph(Tape& t, const MatrixXd& y, bool training);
  MatrixXd sample(Eigen::Index n, Rng& rng) const;

  Eigen::Index count() const;
  std::vector<Parameter*> parameters();
  nlohmann::json to_json() const;
  static RealNvp from_json(const nlohmann::json& j);
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // additive L2 on the gradient
  int decay_period = 0;       // epochs per step decay; 0 disables
  double decay_rate = 1.0;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, const AdamConfig& cfg);
  // applies one update using the gradients currently in the parameters
  void step(int epoch);
  double lr_at(int epoch) const;
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  std::vector<MatrixXd> m_, v_;
  AdamConfig cfg_;
  long steps_ = 0;
};

// standard-normal log-density per row
VectorXd gaussian_log_density(const MatrixXd& x);

}  // namespace cvsim::nn
