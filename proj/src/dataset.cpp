#include "cvsim/dataset.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "cvsim/io.hpp"
#include "cvsim/radau.hpp"
#include "json.hpp"

namespace cvsim {

namespace {

using nlohmann::json;

bool is_compliance(int i) { return i >= kParClDia && i <= kParCpv; }
bool is_resistance(int i) { return i >= kParRlIn && i <= kParRpv; }

PriorBox scaled_box(const std::string& name,
                    const std::function<void(int, double&, double&)>& fracs) {
  const ParameterVector d = default_parameters();
  PriorBox box;
  box.name = name;
  for (int i = 0; i < kNumParams; ++i) {
    double a = -0.3, b = 0.3;
    fracs(i, a, b);
    const double x0 = d[i] * (1.0 + a), x1 = d[i] * (1.0 + b);
    box.lo[i] = std::min(x0, x1);
    box.hi[i] = std::max(x0, x1);
  }
  return box;
}

}  // namespace

PriorBox PriorBox::structural() {
  return scaled_box("structural", [](int i, double& a, double& b) {
    if (is_compliance(i)) {
      a = -0.5;
      b = 0.5;
    }
  });
}

PriorBox PriorBox::ehr() {
  return scaled_box("ehr", [](int i, double& a, double& b) {
    if (i == kParHr) {
      a = -0.2;
      b = 0.6;
    } else if (is_compliance(i) || is_resistance(i)) {
      a = -0.8;
      b = 0.6;
    }
  });
}

bool PriorBox::contains(const ParameterVector& v) const {
  for (int i = 0; i < kNumParams; ++i) {
    if (v[i] < lo[i] || v[i] > hi[i]) return false;
  }
  return true;
}

PriorBox PriorBox::widened(double frac) const {
  PriorBox out = *this;
  for (int i = 0; i < kNumParams; ++i) {
    const double w = hi[i] - lo[i];
    out.lo[i] = lo[i] - frac * w;
    out.hi[i] = hi[i] + frac * w;
  }
  return out;
}

PriorBox prior_preset(const std::string& name) {
  if (name == "structural") return PriorBox::structural();
  if (name == "ehr") return PriorBox::ehr();
  throw std::invalid_argument("unknown prior preset: " + name);
}

ParameterVector sample_from_prior(const PriorBox& prior, Rng& rng) {
  ParameterVector v;
  for (int i = 0; i < kNumParams; ++i)
    v.values[i] = prior.lo[i] + rng.uniform() * (prior.hi[i] - prior.lo[i]);
  return v;
}

MatrixXd sample_prior(const PriorBox& prior, Eigen::Index n,
                      std::uint64_t seed) {
  MatrixXd m(n, kNumParams);
  for (Eigen::Index i = 0; i < n; ++i) {
    Rng rng(derive_stream_seed(seed, static_cast<std::uint64_t>(i)));
    m.row(i) = sample_from_prior(prior, rng).values.transpose();
  }
  return m;
}

Eigen::Index Dataset::rows(Split s) const {
  Eigen::Index c = 0;
  for (const Split tag : split) c += tag == s;
  return c;
}

MatrixXd Dataset::v_of(Split s) const {
  MatrixXd out(rows(s), v.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    if (split[i] == s) out.row(r++) = v.row(i);
  }
  return out;
}

MatrixXd Dataset::y_of(Split s) const {
  MatrixXd out(rows(s), y.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (split[i] == s) out.row(r++) = y.row(i);
  }
  return out;
}

namespace {

// mean and unbiased std per column; degenerate row counts fall back to
// mean 0 / std 1 so tiny smoke datasets stay loadable
void column_stats(const MatrixXd& m, VectorXd& mean, VectorXd& std) {
  const Eigen::Index n = m.rows(), k = m.cols();
  mean.setZero(k);
  std.setOnes(k);
  if (n == 0) return;
  mean = m.colwise().mean();
  if (n < 2) return;
  for (Eigen::Index j = 0; j < k; ++j) {
    const double ss = (m.col(j).array() - mean[j]).square().sum();
    std[j] = std::sqrt(ss / static_cast<double>(n - 1));
  }
}


}  // namespace

PriorDraw simulate_prior_draw(const PriorBox& prior, const SolverConfig& cfg,
                              std::uint64_t seed, std::uint64_t index,
                              int max_attempts) {
  PriorDraw out;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng(derive_stream_seed(seed, index, static_cast<std::uint64_t>(attempt)));
    out.v = sample_from_prior(prior, rng);
    out.attempts = attempt + 1;
    if (!validate(out.v)) continue;
    try {
      const StateTrajectory traj = simulate(out.v, cfg);
      const OutputResult res = extract_outputs(traj, out.v);
      if (!res.y.allFinite()) continue;
      out.y = res.y;
      out.periodicity_warning = res.periodicity_warning;
      return out;
    } catch (const IntegrationError&) {
    } catch (const std::invalid_argument&) {
    } catch (const std::runtime_error&) {
    }
  }
  throw std::runtime_error("sample " + std::to_string(index) + " failed " +
                           std::to_string(max_attempts) + " attempts");
}

Dataset generate(const PriorBox& prior, Eigen::Index n, const SolverConfig& cfg,
                 std::uint64_t seed, int workers) {
  if (n <= 0) throw std::invalid_argument("dataset size must be positive");
  Dataset ds;
  ds.v.resize(n, kNumParams);
  ds.y.resize(n, kNumOutputs);
  ds.split.resize(n);
  ds.prior_name = prior.name;
  ds.prior = prior;
  ds.seed = seed;
  ds.cfg = cfg;

  const int max_attempts = 64;
  std::atomic<std::int64_t> resampled{0};
  std::atomic<std::int64_t> warned{0};
  std::atomic<bool> over_budget{false};
  const auto failure_budget =
      static_cast<std::int64_t>(std::ceil(0.05 * static_cast<double>(n)));

  const int nw = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  std::vector<std::string> errors(nw);
  auto work = [&](int w) {
    try {
      for (Eigen::Index i = w; i < n; i += nw) {
        if (over_budget.load()) return;
        const PriorDraw s = simulate_prior_draw(prior, cfg, seed,
                                                static_cast<std::uint64_t>(i),
                                                max_attempts);
        ds.v.row(i) = s.v.values.transpose();
        ds.y.row(i) = s.y.transpose();
        warned += s.periodicity_warning;
        if (s.attempts > 1 &&
            (resampled += s.attempts - 1) > failure_budget) {
          over_budget.store(true);
          return;
        }
      }
    } catch (const std::exception& e) {
      errors[w] = e.what();
      over_budget.store(true);
    }
  };

  if (nw == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nw);
    for (int w = 0; w < nw; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const std::string& e : errors) {
    if (!e.empty()) throw std::runtime_error("dataset generation failed: " + e);
  }
  if (over_budget.load()) {
    throw std::runtime_error(
        "dataset generation aborted: " + std::to_string(resampled.load()) +
        " resampled draws exceed the 5% failure budget for n=" +
        std::to_string(n));
  }
  ds.n_resampled = resampled.load();
  ds.n_periodicity_warnings = warned.load();

  // splits keep the 37500/12500/4000 proportions of the reference corpus
  const auto n_train = static_cast<Eigen::Index>(
      std::llround(static_cast<double>(n) * 37500.0 / 54000.0));
  const auto n_test = static_cast<Eigen::Index>(
      std::llround(static_cast<double>(n) * 12500.0 / 54000.0));
  for (Eigen::Index i = 0; i < n; ++i) {
    ds.split[i] = i < n_train            ? Split::kTrain
                  : i < n_train + n_test ? Split::kTest
                                         : Split::kValidation;
  }
  const MatrixXd vt = ds.v_of(Split::kTrain);
  const MatrixXd yt = ds.y_of(Split::kTrain);
  column_stats(vt, ds.stats.v_mean, ds.stats.v_std);
  column_stats(yt, ds.stats.y_mean, ds.stats.y_std);
  return ds;
}

MatrixXd normalize(const MatrixXd& x, const VectorXd& mean, const VectorXd& std,
                   const std::vector<std::string>* names) {
  if (x.cols() != mean.size() || x.cols() != std.size())
    throw std::invalid_argument("normalization stats shape mismatch");
  for (Eigen::Index j = 0; j < std.size(); ++j) {
    if (!(std[j] > 0.0) || !std::isfinite(std[j]) || !std::isfinite(mean[j])) {
      std::string col = names && j < static_cast<Eigen::Index>(names->size())
                            ? (*names)[j]
                            : std::to_string(j);
      throw std::invalid_argument("unusable standard deviation in column " +
                                  col);
    }
  }
  MatrixXd out = x;
  out.rowwise() -= mean.transpose();
  out.array().rowwise() /= std.transpose().array();
  return out;
}

MatrixXd denormalize(const MatrixXd& x, const VectorXd& mean,
                     const VectorXd& std) {
  if (x.cols() != mean.size() || x.cols() != std.size())
    throw std::invalid_argument("normalization stats shape mismatch");
  MatrixXd out = x;
  out.array().rowwise() *= std.transpose().array();
  out.rowwise() += mean.transpose();
  return out;
}

namespace {

json to_json(const VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

VectorXd vector_from_json(const json& arr) {
  VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
  return v;
}

std::vector<std::string> dataset_header() {
  std::vector<std::string> h;
  for (const auto& n : parameter_names()) h.push_back("v_" + n);
  for (const auto& n : output_names()) h.push_back("y_" + n);
  return h;
}

void write_split_csv(const std::string& path, const Dataset& ds, Split s) {
  MatrixXd m(ds.rows(s), kNumParams + kNumOutputs);
  m.leftCols(kNumParams) = ds.v_of(s);
  m.rightCols(kNumOutputs) = ds.y_of(s);
  io::write_csv(path, dataset_header(), m);
}

const char* split_file(Split s) {
  switch (s) {
    case Split::kTrain: return "train.csv";
    case Split::kTest: return "test.csv";
    default: return "validation.csv";
  }
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  for (const Split s :
       {Split::kTrain, Split::kTest, Split::kValidation}) {
    write_split_csv(dir + "/" + split_file(s), ds, s);
  }
  json meta;
  meta["format"] = "cvsim-dataset-1";
  meta["prior"]["name"] = ds.prior_name;
  meta["prior"]["lo"] = to_json(ds.prior.lo);
  meta["prior"]["hi"] = to_json(ds.prior.hi);
  meta["seed"] = ds.seed;
  meta["n"] = ds.v.rows();
  meta["splits"] = {{"train", ds.rows(Split::kTrain)},
                    {"test", ds.rows(Split::kTest)},
                    {"validation", ds.rows(Split::kValidation)}};
  meta["solver"] = {{"method", ds.cfg.method == Method::kRadau ? "radau" : "rk4"},
                    {"dt", ds.cfg.dt},
                    {"rtol", ds.cfg.rtol},
                    {"atol", ds.cfg.atol},
                    {"n_cycles", ds.cfg.n_cycles},
                    {"output_dt", ds.cfg.output_dt}};
  meta["stats"] = {{"v_mean", to_json(ds.stats.v_mean)},
                   {"v_std", to_json(ds.stats.v_std)},
                   {"y_mean", to_json(ds.stats.y_mean)},
                   {"y_std", to_json(ds.stats.y_std)}};
  meta["n_resampled"] = ds.n_resampled;
  meta["n_periodicity_warnings"] = ds.n_periodicity_warnings;
  io::write_text(dir + "/metadata.json", meta.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const json meta = json::parse(io::read_text(dir + "/metadata.json"));
  if (meta.at("format").get<std::string>() != "cvsim-dataset-1")
    throw std::runtime_error("unrecognized dataset format in " + dir);

  Dataset ds;
  ds.prior_name = meta.at("prior").at("name").get<std::string>();
  ds.prior.name = ds.prior_name;
  ds.prior.lo = vector_from_json(meta.at("prior").at("lo"));
  ds.prior.hi = vector_from_json(meta.at("prior").at("hi"));
  ds.seed = meta.at("seed").get<std::uint64_t>();
  const json& solver = meta.at("solver");
  ds.cfg.method = solver.at("method").get<std::string>() == "radau"
                      ? Method::kRadau
                      : Method::kRk4;
  ds.cfg.dt = solver.at("dt").get<double>();
  ds.cfg.rtol = solver.at("rtol").get<double>();
  ds.cfg.atol = solver.at("atol").get<double>();
  ds.cfg.n_cycles = solver.at("n_cycles").get<int>();
  ds.cfg.output_dt = solver.at("output_dt").get<double>();
  ds.stats.v_mean = vector_from_json(meta.at("stats").at("v_mean"));
  ds.stats.v_std = vector_from_json(meta.at("stats").at("v_std"));
  ds.stats.y_mean = vector_from_json(meta.at("stats").at("y_mean"));
  ds.stats.y_std = vector_from_json(meta.at("stats").at("y_std"));
  ds.n_resampled = meta.at("n_resampled").get<std::int64_t>();
  ds.n_periodicity_warnings =
      meta.at("n_periodicity_warnings").get<std::int64_t>();

  const std::vector<std::string> want = dataset_header();
  std::vector<MatrixXd> parts;
  std::vector<Split> tags;
  for (const Split s :
       {Split::kTrain, Split::kTest, Split::kValidation}) {
    std::vector<std::string> header;
    MatrixXd m = io::read_csv(dir + "/" + std::string(split_file(s)), &header);
    if (m.rows() > 0 && header != want)
      throw std::runtime_error("unexpected dataset columns in " +
                               std::string(split_file(s)));
    for (Eigen::Index i = 0; i < m.rows(); ++i) tags.push_back(s);
    parts.push_back(std::move(m));
  }
  const Eigen::Index n = static_cast<Eigen::Index>(tags.size());
  ds.v.resize(n, kNumParams);
  ds.y.resize(n, kNumOutputs);
  ds.split = std::move(tags);
  Eigen::Index r = 0;
  for (const MatrixXd& m : parts) {
    for (Eigen::Index i = 0; i < m.rows(); ++i, ++r) {
      ds.v.row(r) = m.row(i).leftCols(kNumParams);
      ds.y.row(r) = m.row(i).rightCols(kNumOutputs);
    }
  }
  return ds;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool parse_cell(const std::string& cell, double& out) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  while (end && *end == ' ') ++end;
  return end != begin && end && *end == '\0';
}

}  // namespace

std::vector<EhrRecord> load_ehr_csv(const std::string& path, bool allow_extra,
                                    std::vector<std::string>* ignored) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("empty EHR file " + path);

  const std::vector<std::string> header = split_line(line);
  std::vector<int> target(header.size(), -1);  // output index or -1
  int id_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "id") {
      id_col = static_cast<int>(c);
      continue;
    }
    const int k = output_index(header[c]);
    if (k < 0) {
      if (!allow_extra)
        throw std::runtime_error("unknown EHR column '" + header[c] + "' in " +
                                 path);
      if (ignored) ignored->push_back(header[c]);
      continue;
    }
    target[c] = k;
  }

  std::vector<EhrRecord> records;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() > header.size())
      throw std::runtime_error("row " + std::to_string(row) + " of " + path +
                               " has more cells than the header");
    EhrRecord rec;
    rec.id = "row" + std::to_string(row - 1);
    rec.y.setConstant(std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (static_cast<int>(c) == id_col) {
        if (!cells[c].empty()) rec.id = cells[c];
        continue;
      }
      if (target[c] < 0 || cells[c].empty()) continue;
      double val = 0.0;
      if (!parse_cell(cells[c], val))
        throw std::runtime_error("non-numeric cell at row " +
                                 std::to_string(row) + ", column '" +
                                 header[c] + "' in " + path);
      rec.y[target[c]] = val;
      rec.present[target[c]] = true;
      ++rec.n_present;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_ehr_csv(const std::string& path,
                   const std::vector<EhrRecord>& records) {
  std::string text = "id";
  for (const auto& n : output_names()) text += "," + n;
  text += "\n";
  for (const EhrRecord& rec : records) {
    text += rec.id;
    for (int k = 0; k < kNumOutputs; ++k) {
      text += ",";
      if (rec.present[k]) text += io::format_double(rec.y[k]);
    }
    text += "\n";
  }
  io::write_text(path, text);
}

std::vector<EhrRecord> filter_by_present(const std::vector<EhrRecord>& records,
                                         int min_present) {
  std::vector<EhrRecord> out;
  for (const EhrRecord& rec : records) {
    if (rec.n_present > min_present) out.push_back(rec);
  }
  return out;
}

}  // namespace cvsim
