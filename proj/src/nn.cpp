#include "cvsim/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cvsim::nn {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

MatrixXd sigmoid_of(const MatrixXd& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

}  // namespace

Tape::Var Tape::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::input(const MatrixXd& x) {
  Node n;
  n.op = Op::kInput;
  n.value = x;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.op = Op::kParam;
  n.value = p.value;
  const Var v = push(std::move(n));
  params_.emplace_back(v.id, &p);
  return v;
}

const MatrixXd& Tape::value(Var v) const { return nodes_.at(v.id).value; }

#define CVSIM_UNARY(name, OP, expr)                      \
  Var Tape::name(Var x) {                                \
    Node n;                                              \
    n.op = Op::OP;                                       \
    n.a = x.id;                                          \
    const auto& X = nodes_[x.id].value;                  \
    n.value = (expr);                                    \
    return push(std::move(n));                           \
  }

CVSIM_UNARY(relu, kRelu, X.cwiseMax(0.0))
CVSIM_UNARY(tanh, kTanh, X.array().tanh().matrix())
CVSIM_UNARY(sigmoid, kSigmoid, sigmoid_of(X))
CVSIM_UNARY(swish, kSwish, (X.array() * sigmoid_of(X).array()).matrix())
CVSIM_UNARY(exp, kExp, X.array().exp().matrix())
CVSIM_UNARY(log, kLog, X.array().log().matrix())
CVSIM_UNARY(square, kSquare, X.array().square().matrix())
#undef CVSIM_UNARY

Var Tape::matmul(Var a, Var b) {
  const auto& A = nodes_[a.id].value;
  const auto& B = nodes_[b.id].value;
  require(A.cols() == B.rows(), "matmul: inner dimensions differ");
  Node n;
  n.op = Op::kMatmul;
  n.a = a.id;
  n.b = b.id;
  n.value = A * B;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const auto& A = nodes_[a.id].value;
  const auto& B = nodes_[b.id].value;
  require(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.value = A + B;
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const auto& A = nodes_[a.id].value;
  const auto& B = nodes_[b.id].value;
  require(A.rows() == B.rows() && A.cols() == B.cols(), "sub: shape mismatch");
  Node n;
  n.op = Op::kSub;
  n.a = a.id;
  n.b = b.id;
  n.value = A - B;
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const auto& A = nodes_[a.id].value;
  const auto& B = nodes_[b.id].value;
  require(A.rows() == B.rows() && A.cols() == B.cols(), "mul: shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  n.value = A.cwiseProduct(B);
  return push(std::move(n));
}

namespace {
void require_rowvec(const MatrixXd& x, const MatrixXd& r, const char* what) {
  require(r.rows() == 1 && r.cols() == x.cols(), what);
}
}  // namespace

Var Tape::add_row(Var x, Var r) {
  const auto& X = nodes_[x.id].value;
  const auto& R = nodes_[r.id].value;
  require_rowvec(X, R, "add_row: need a 1 x cols row vector");
  Node n;
  n.op = Op::kAddRow;
  n.a = x.id;
  n.b = r.id;
  n.value = X.rowwise() + R.row(0);
  return push(std::move(n));
}

Var Tape::sub_row(Var x, Var r) {
  const auto& X = nodes_[x.id].value;
  const auto& R = nodes_[r.id].value;
  require_rowvec(X, R, "sub_row: need a 1 x cols row vector");
  Node n;
  n.op = Op::kSubRow;
  n.a = x.id;
  n.b = r.id;
  n.value = X.rowwise() - R.row(0);
  return push(std::move(n));
}

Var Tape::mul_row(Var x, Var r) {
  const auto& X = nodes_[x.id].value;
  const auto& R = nodes_[r.id].value;
  require_rowvec(X, R, "mul_row: need a 1 x cols row vector");
  Node n;
  n.op = Op::kMulRow;
  n.a = x.id;
  n.b = r.id;
  n.value = (X.array().rowwise() * R.row(0).array()).matrix();
  return push(std::move(n));
}

Var Tape::scale(Var x, double c) {
  Node n;
  n.op = Op::kScale;
  n.a = x.id;
  n.c = c;
  n.value = c * nodes_[x.id].value;
  return push(std::move(n));
}

Var Tape::add_const(Var x, double c) {
  Node n;
  n.op = Op::kAddConst;
  n.a = x.id;
  n.c = c;
  n.value = (nodes_[x.id].value.array() + c).matrix();
  return push(std::move(n));
}

Var Tape::col_mean(Var x) {
  const auto& X = nodes_[x.id].value;
  require(X.rows() > 0, "col_mean: empty input");
  Node n;
  n.op = Op::kColMean;
  n.a = x.id;
  n.value = X.colwise().mean();
  return push(std::move(n));
}

Var Tape::row_sum(Var x) {
  Node n;
  n.op = Op::kRowSum;
  n.a = x.id;
  n.value = nodes_[x.id].value.rowwise().sum();
  return push(std::move(n));
}

Var Tape::sum_all(Var x) {
  Node n;
  n.op = Op::kSumAll;
  n.a = x.id;
  n.value.setConstant(1, 1, nodes_[x.id].value.sum());
  return push(std::move(n));
}

Var Tape::slice_cols(Var x, Eigen::Index first, Eigen::Index width) {
  const auto& X = nodes_[x.id].value;
  require(first >= 0 && width >= 0 && first + width <= X.cols(),
          "slice_cols: range out of bounds");
  Node n;
  n.op = Op::kSliceCols;
  n.a = x.id;
  n.i0 = first;
  n.i1 = width;
  n.value = X.middleCols(first, width);
  return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
  const auto& A = nodes_[a.id].value;
  const auto& B = nodes_[b.id].value;
  require(A.rows() == B.rows(), "concat_cols: row counts differ");
  Node n;
  n.op = Op::kConcatCols;
  n.a = a.id;
  n.b = b.id;
  n.value.resize(A.rows(), A.cols() + B.cols());
  n.value << A, B;
  return push(std::move(n));
}

Var Tape::add_bscalar(Var x, Var s) {
  const auto& S = nodes_[s.id].value;
  require(S.rows() == 1 && S.cols() == 1, "add_bscalar: scalar must be 1 x 1");
  Node n;
  n.op = Op::kAddBScalar;
  n.a = x.id;
  n.b = s.id;
  n.value = (nodes_[x.id].value.array() + S(0, 0)).matrix();
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  Node& top = nodes_.at(loss.id);
  require(top.value.rows() == 1 && top.value.cols() == 1,
          "backward: loss must be scalar");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  top.grad.setOnes(1, 1);

  auto grad_of = [&](int id) -> MatrixXd& {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  };

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    const MatrixXd& g = n.grad;
    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
        break;
      case Op::kMatmul:
        grad_of(n.a) += g * nodes_[n.b].value.transpose();
        grad_of(n.b) += nodes_[n.a].value.transpose() * g;
        break;
      case Op::kAdd:
        grad_of(n.a) += g;
        grad_of(n.b) += g;
        break;
      case Op::kSub:
        grad_of(n.a) += g;
        grad_of(n.b) -= g;
        break;
      case Op::kMul:
        grad_of(n.a) += g.cwiseProduct(nodes_[n.b].value);
        grad_of(n.b) += g.cwiseProduct(nodes_[n.a].value);
        break;
      case Op::kAddRow:
        grad_of(n.a) += g;
        grad_of(n.b) += g.colwise().sum();
        break;
      case Op::kSubRow:
        grad_of(n.a) += g;
        grad_of(n.b) -= g.colwise().sum();
        break;
      case Op::kMulRow:
        grad_of(n.a) +=
            (g.array().rowwise() * nodes_[n.b].value.row(0).array()).matrix();
        grad_of(n.b) +=
            g.cwiseProduct(nodes_[n.a].value).colwise().sum();
        break;
      case Op::kRelu:
        grad_of(n.a) +=
            (g.array() * (nodes_[n.a].value.array() > 0.0).cast<double>())
                .matrix();
        break;
      case Op::kTanh:
        grad_of(n.a) += (g.array() * (1.0 - n.value.array().square())).matrix();
        break;
      case Op::kSigmoid:
        grad_of(n.a) +=
            (g.array() * n.value.array() * (1.0 - n.value.array())).matrix();
        break;
      case Op::kSwish: {
        const MatrixXd s = sigmoid_of(nodes_[n.a].value);
        grad_of(n.a) +=
            (g.array() *
             (s.array() + nodes_[n.a].value.array() * s.array() *
                              (1.0 - s.array())))
                .matrix();
        break;
      }
      case Op::kExp:
        grad_of(n.a) += g.cwiseProduct(n.value);
        break;
      case Op::kLog:
        grad_of(n.a) += g.cwiseQuotient(nodes_[n.a].value);
        break;
      case Op::kSquare:
        grad_of(n.a) += 2.0 * g.cwiseProduct(nodes_[n.a].value);
        break;
      case Op::kScale:
        grad_of(n.a) += n.c * g;
        break;
      case Op::kAddConst:
        grad_of(n.a) += g;
        break;
      case Op::kColMean:
        grad_of(n.a) +=
            g.replicate(nodes_[n.a].value.rows(), 1) /
            static_cast<double>(nodes_[n.a].value.rows());
        break;
      case Op::kRowSum:
        grad_of(n.a) += g.replicate(1, nodes_[n.a].value.cols());
        break;
      case Op::kSumAll:
        grad_of(n.a).array() += g(0, 0);
        break;
      case Op::kSliceCols:
        grad_of(n.a).middleCols(n.i0, n.i1) += g;
        break;
      case Op::kConcatCols:
        grad_of(n.a) += g.leftCols(nodes_[n.a].value.cols());
        grad_of(n.b) += g.rightCols(nodes_[n.b].value.cols());
        break;
      case Op::kAddBScalar:
        grad_of(n.a) += g;
        grad_of(n.b)(0, 0) += g.sum();
        break;
    }
  }

  for (const auto& [id, p] : params_) {
    if (nodes_[id].grad.size() != 0) p->grad += nodes_[id].grad;
  }
}

void Tape::reset() {
  nodes_.clear();
  params_.clear();
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kSwish: return "swish";
    case Activation::kRelu: return "relu";
    default: return "tanh";
  }
}

Activation activation_from_name(const std::string& name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "swish") return Activation::kSwish;
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation: " + name);
}

Linear::Linear(Eigen::Index in, Eigen::Index out) {
  require(in > 0 && out > 0, "linear: widths must be positive");
  w.resize(in, out);
  b.resize(1, out);
}

void Linear::init(Rng& rng, bool zero) {
  if (zero) {
    w.value.setZero();
    b.value.setZero();
    return;
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(w.value.rows()));
  for (Eigen::Index i = 0; i < w.value.rows(); ++i)
    for (Eigen::Index j = 0; j < w.value.cols(); ++j)
      w.value(i, j) = bound * (2.0 * rng.uniform() - 1.0);
  b.value.setZero();
}

Var Linear::operator()(Tape& t, Var x) const {
  return t.add_row(t.matmul(x, t.param(const_cast<Parameter&>(w))),
                   t.param(const_cast<Parameter&>(b)));
}

MatrixXd Linear::apply(const MatrixXd& x) const {
  return (x * w.value).rowwise() + b.value.row(0);
}

Mlp::Mlp(const std::vector<Eigen::Index>& widths, Activation hidden_act)
    : hidden(hidden_act) {
  require(widths.size() >= 2, "mlp: need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    layers.emplace_back(widths[i], widths[i + 1]);
}

void Mlp::init(Rng& rng, bool zero_last) {
  for (std::size_t i = 0; i < layers.size(); ++i)
    layers[i].init(rng, zero_last && i + 1 == layers.size());
}

namespace {

Var activate(Tape& t, Var x, Activation a) {
  switch (a) {
    case Activation::kIdentity: return x;
    case Activation::kSwish: return t.swish(x);
    case Activation::kRelu: return t.relu(x);
    default: return t.tanh(x);
  }
}

MatrixXd activate_plain(const MatrixXd& x, Activation a) {
  switch (a) {
    case Activation::kIdentity: return x;
    case Activation::kSwish: return x.cwiseProduct(sigmoid_of(x));
    case Activation::kRelu: return x.cwiseMax(0.0);
    default: return x.array().tanh().matrix();
  }
}

}  // namespace

Var Mlp::forward(Tape& t, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i](t, x);
    if (i + 1 < layers.size()) x = activate(t, x, hidden);
  }
  return x;
}

MatrixXd Mlp::apply(const MatrixXd& x) const {
  MatrixXd h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].apply(h);
    if (i + 1 < layers.size()) h = activate_plain(h, hidden);
  }
  return h;
}

Eigen::Index Mlp::count() const {
  Eigen::Index c = 0;
  for (const Linear& l : layers) c += l.count();
  return c;
}

std::vector<Parameter*> Mlp::parameters() {
  std::vector<Parameter*> out;
  for (Linear& l : layers) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  return out;
}

namespace {

nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json flat = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", flat}};
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& flat = j.at("data");
  if (static_cast<Eigen::Index>(flat.size()) != rows * cols)
    throw std::runtime_error("matrix payload size mismatch");
  MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = flat[k++].get<double>();
  return m;
}

}  // namespace

nlohmann::json Mlp::to_json() const {
  nlohmann::json j;
  j["hidden"] = activation_name(hidden);
  j["layers"] = nlohmann::json::array();
  for (const Linear& l : layers) {
    j["layers"].push_back(
        {{"w", matrix_to_json(l.w.value)}, {"b", matrix_to_json(l.b.value)}});
  }
  return j;
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  Mlp net;
  net.hidden = activation_from_name(j.at("hidden").get<std::string>());
  for (const auto& lj : j.at("layers")) {
    Linear l;
    l.w.value = matrix_from_json(lj.at("w"));
    l.b.value = matrix_from_json(lj.at("b"));
    l.w.grad.setZero(l.w.value.rows(), l.w.value.cols());
    l.b.grad.setZero(l.b.value.rows(), l.b.value.cols());
    net.layers.push_back(std::move(l));
  }
  return net;
}

FlowBatchNorm::FlowBatchNorm(Eigen::Index dim) {
  log_s.resize(1, dim);
  beta.resize(1, dim);
  run_mean.setZero(dim);
  run_var.setOnes(dim);
}

RealNvp::RealNvp(Eigen::Index d, int n_blocks, Eigen::Index hidden, int depth,
                 bool use_bn)
    : dim(d) {
  require(dim >= 2, "flow: dimension must be at least 2");
  require(n_blocks >= 1 && hidden >= 1 && depth >= 1, "flow: bad architecture");
  const Eigen::Index half = dim / 2;
  for (int k = 0; k < n_blocks; ++k) {
    CouplingBlock blk;
    blk.keep_first = (k % 2 == 0);
    const Eigen::Index keep = blk.keep_first ? half : dim - half;
    const Eigen::Index change = dim - keep;
    std::vector<Eigen::Index> widths;
    widths.push_back(keep);
    for (int h = 0; h < depth; ++h) widths.push_back(hidden);
    widths.push_back(change);
    blk.s_net = Mlp(widths, Activation::kRelu);
    blk.t_net = Mlp(widths, Activation::kRelu);
    blk.use_bn = use_bn;
    if (use_bn) blk.bn = FlowBatchNorm(dim);
    blocks.push_back(std::move(blk));
  }
}

void RealNvp::init(Rng& rng) {
  for (CouplingBlock& blk : blocks) {
    blk.s_net.init(rng, true);
    blk.t_net.init(rng, true);
    if (blk.use_bn) {
      blk.bn.log_s.value.setZero();
      blk.bn.beta.value.setZero();
      blk.bn.run_mean.setZero();
      blk.bn.run_var.setOnes();
    }
  }
}

namespace {

struct ColRange {
  Eigen::Index keep0, keepw, chg0, chgw;
};

ColRange ranges(Eigen::Index dim, bool keep_first) {
  const Eigen::Index half = dim / 2;
  if (keep_first) return {0, half, half, dim - half};
  return {half, dim - half, 0, half};
}

MatrixXd merge(const MatrixXd& keep, const MatrixXd& change,
               const ColRange& r) {
  MatrixXd out(keep.rows(), keep.cols() + change.cols());
  out.middleCols(r.keep0, r.keepw) = keep;
  out.middleCols(r.chg0, r.chgw) = change;
  return out;
}

}  // namespace

std::pair<MatrixXd, VectorXd> RealNvp::forward(const MatrixXd& z) const {
  require(z.cols() == dim, "flow forward: dimension mismatch");
  MatrixXd h = z;
  VectorXd ld = VectorXd::Zero(z.rows());
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    const CouplingBlock& blk = *it;
    if (blk.use_bn) {
      // undo the normalization using the running statistics
      const Eigen::RowVectorXd sd =
          (blk.bn.run_var.array() + blk.bn.eps).sqrt().matrix();
      const Eigen::RowVectorXd gain =
          blk.bn.log_s.value.row(0).array().exp().matrix();
      MatrixXd u = h.rowwise() - blk.bn.beta.value.row(0);
      u.array().rowwise() /= gain.row(0).array();
      u.array().rowwise() *= sd.row(0).array();
      h = u.rowwise() + blk.bn.run_mean;
      ld.array() -= blk.bn.log_s.value.sum() -
                    0.5 * (blk.bn.run_var.array() + blk.bn.eps).log().sum();
    }
    const ColRange r = ranges(dim, blk.keep_first);
    const MatrixXd keep = h.middleCols(r.keep0, r.keepw);
    const MatrixXd change = h.middleCols(r.chg0, r.chgw);
    const MatrixXd s = blk.s_net.apply(keep).array().tanh().matrix();
    const MatrixXd t = blk.t_net.apply(keep);
    const MatrixXd moved =
        (change.array() * s.array().exp()).matrix() + t;
    h = merge(keep, moved, r);
    ld += s.rowwise().sum();
  }
  return {h, ld};
}

std::pair<MatrixXd, VectorXd> RealNvp::inverse(const MatrixXd& y) const {
  require(y.cols() == dim, "flow inverse: dimension mismatch");
  MatrixXd h = y;
  VectorXd ld = VectorXd::Zero(y.rows());
  for (const CouplingBlock& blk : blocks) {
    const ColRange r = ranges(dim, blk.keep_first);
    const MatrixXd keep = h.middleCols(r.keep0, r.keepw);
    const MatrixXd change = h.middleCols(r.chg0, r.chgw);
    const MatrixXd s = blk.s_net.apply(keep).array().tanh().matrix();
    const MatrixXd t = blk.t_net.apply(keep);
    const MatrixXd moved =
        ((change - t).array() * (-s).array().exp()).matrix();
    h = merge(keep, moved, r);
    ld -= s.rowwise().sum();
    if (blk.use_bn) {
      const Eigen::RowVectorXd inv_sd =
          (blk.bn.run_var.array() + blk.bn.eps).rsqrt().matrix();
      const Eigen::RowVectorXd gain =
          blk.bn.log_s.value.row(0).array().exp().matrix();
      MatrixXd xhat = h.rowwise() - blk.bn.run_mean;
      xhat.array().rowwise() *= inv_sd.row(0).array();
      xhat.array().rowwise() *= gain.row(0).array();
      h = xhat.rowwise() + blk.bn.beta.value.row(0);
      ld.array() += blk.bn.log_s.value.sum() -
                    0.5 * (blk.bn.run_var.array() + blk.bn.eps).log().sum();
    }
  }
  return {h, ld};
}

VectorXd gaussian_log_density(const MatrixXd& x) {
  const double c =
      -0.5 * static_cast<double>(x.cols()) * std::log(2.0 * 3.14159265358979323846);
  return (-0.5 * x.array().square().rowwise().sum() + c).matrix();
}

VectorXd RealNvp::log_prob(const MatrixXd& y) const {
  const auto [z, ld] = inverse(y);
  return gaussian_log_density(z) + ld;
}

Var RealNvp::log_prob_graph(Tape& t, const MatrixXd& y, bool training) {
  require(y.cols() == dim, "flow log_prob: dimension mismatch");
  Var h = t.input(y);
  Var ld = t.input(MatrixXd::Zero(y.rows(), 1));
  for (CouplingBlock& blk : blocks) {
    const ColRange r = ranges(dim, blk.keep_first);
    Var keep = t.slice_cols(h, r.keep0, r.keepw);
    Var change = t.slice_cols(h, r.chg0, r.chgw);
    Var s = t.tanh(blk.s_net.forward(t, keep));
    Var shift = blk.t_net.forward(t, keep);
    Var moved = t.mul(t.sub(change, shift), t.exp(t.scale(s, -1.0)));
    h = blk.keep_first ? t.concat_cols(keep, moved) : t.concat_cols(moved, keep);
    ld = t.sub(ld, t.row_sum(s));
    if (blk.use_bn) {
      Var mu, var;
      if (training) {
        mu = t.col_mean(h);
        var = t.col_mean(t.square(t.sub_row(h, mu)));
        // running statistics are refreshed outside the graph
        blk.bn.run_mean = (1.0 - blk.bn.momentum) * blk.bn.run_mean +
                          blk.bn.momentum * t.value(mu).row(0);
        blk.bn.run_var = (1.0 - blk.bn.momentum) * blk.bn.run_var +
                         blk.bn.momentum * t.value(var).row(0);
      } else {
        mu = t.input(blk.bn.run_mean);
        var = t.input(blk.bn.run_var);
      }
      Var log_var_eps = t.log(t.add_const(var, blk.bn.eps));
      Var inv_sd = t.exp(t.scale(log_var_eps, -0.5));
      Var ls = t.param(blk.bn.log_s);
      Var xhat = t.mul_row(t.sub_row(h, mu), inv_sd);
      h = t.add_row(t.mul_row(xhat, t.exp(ls)), t.param(blk.bn.beta));
      Var bn_ld = t.sub(t.sum_all(ls), t.scale(t.sum_all(log_var_eps), 0.5));
      ld = t.add_bscalar(ld, bn_ld);
    }
  }
  // standard-normal base density of the final coordinates
  Var quad = t.scale(t.row_sum(t.square(h)), -0.5);
  const double c =
      -0.5 * static_cast<double>(dim) * std::log(2.0 * 3.14159265358979323846);
  return t.add(t.add_const(quad, c), ld);
}

MatrixXd RealNvp::sample(Eigen::Index n, Rng& rng) const {
  MatrixXd z(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) z(i, j) = rng.normal();
  return forward(z).first;
}

Eigen::Index RealNvp::count() const {
  Eigen::Index c = 0;
  for (const CouplingBlock& blk : blocks) {
    c += blk.s_net.count() + blk.t_net.count();
    if (blk.use_bn) c += blk.bn.count();
  }
  return c;
}

std::vector<Parameter*> RealNvp::parameters() {
  std::vector<Parameter*> out;
  for (CouplingBlock& blk : blocks) {
    for (Parameter* p : blk.s_net.parameters()) out.push_back(p);
    for (Parameter* p : blk.t_net.parameters()) out.push_back(p);
    if (blk.use_bn) {
      out.push_back(&blk.bn.log_s);
      out.push_back(&blk.bn.beta);
    }
  }
  return out;
}

nlohmann::json RealNvp::to_json() const {
  nlohmann::json j;
  j["dim"] = dim;
  j["blocks"] = nlohmann::json::array();
  for (const CouplingBlock& blk : blocks) {
    nlohmann::json bj;
    bj["keep_first"] = blk.keep_first;
    bj["s_net"] = blk.s_net.to_json();
    bj["t_net"] = blk.t_net.to_json();
    bj["use_bn"] = blk.use_bn;
    if (blk.use_bn) {
      nlohmann::json bn;
      bn["log_s"] = matrix_to_json(blk.bn.log_s.value);
      bn["beta"] = matrix_to_json(blk.bn.beta.value);
      bn["run_mean"] = matrix_to_json(blk.bn.run_mean);
      bn["run_var"] = matrix_to_json(blk.bn.run_var);
      bn["eps"] = blk.bn.eps;
      bn["momentum"] = blk.bn.momentum;
      bj["bn"] = bn;
    }
    j["blocks"].push_back(bj);
  }
  return j;
}

RealNvp RealNvp::from_json(const nlohmann::json& j) {
  RealNvp flow;
  flow.dim = j.at("dim").get<Eigen::Index>();
  for (const auto& bj : j.at("blocks")) {
    CouplingBlock blk;
    blk.keep_first = bj.at("keep_first").get<bool>();
    blk.s_net = Mlp::from_json(bj.at("s_net"));
    blk.t_net = Mlp::from_json(bj.at("t_net"));
    blk.use_bn = bj.at("use_bn").get<bool>();
    if (blk.use_bn) {
      const auto& bn = bj.at("bn");
      blk.bn = FlowBatchNorm(flow.dim);
      blk.bn.log_s.value = matrix_from_json(bn.at("log_s"));
      blk.bn.beta.value = matrix_from_json(bn.at("beta"));
      blk.bn.run_mean = matrix_from_json(bn.at("run_mean")).row(0);
      blk.bn.run_var = matrix_from_json(bn.at("run_var")).row(0);
      blk.bn.eps = bn.at("eps").get<double>();
      blk.bn.momentum = bn.at("momentum").get<double>();
    }
    flow.blocks.push_back(std::move(blk));
  }
  return flow;
}

Adam::Adam(std::vector<Parameter*> params, const AdamConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
  }
}

double Adam::lr_at(int epoch) const {
  if (cfg_.decay_period <= 0) return cfg_.lr;
  return cfg_.lr * std::pow(cfg_.decay_rate, epoch / cfg_.decay_period);
}

void Adam::step(int epoch) {
  ++steps_;
  const double lr = lr_at(epoch);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    MatrixXd g = p.grad;
    if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * p.value;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p.value.array() -= lr * (m_[i].array() / bc1) /
                       ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace cvsim::nn
