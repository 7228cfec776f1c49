// cvsim command line: every run resolves its configuration (defaults, then
// config file, then explicit flags), writes the resolved form beside its
// outputs, and reruns byte-identically from that file.
//
// exit codes: 0 ok, 1 domain error (solver, validation, training), 2 usage
// error (unknown flag, missing file, malformed config).

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvsim/dataset.hpp"
#include "cvsim/inference.hpp"
#include "cvsim/io.hpp"
#include "cvsim/model.hpp"
#include "cvsim/outputs.hpp"
#include "cvsim/parameters.hpp"
#include "cvsim/solvers.hpp"
#include "cvsim/stiffness.hpp"
#include "cvsim/training.hpp"

using nlohmann::json;
using namespace cvsim;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_json_file(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw UsageError("file not found: " + path);
  try {
    return json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " path is required");
  if (!std::filesystem::exists(path))
    throw UsageError(what + " not found: " + path);
}

void reject_unknown_keys(const json& f,
                         const std::vector<std::string>& allowed) {
  if (!f.is_object()) throw UsageError("config root must be a JSON object");
  for (const auto& item : f.items()) {
    bool ok = false;
    for (const std::string& k : allowed) ok = ok || k == item.key();
    if (!ok) throw UsageError("unknown config key '" + item.key() + "'");
  }
}

void check_command(const json& f, const std::string& command) {
  if (f.contains("command") && f.at("command") != command)
    throw UsageError("config is for command '" +
                     f.at("command").get<std::string>() + "', not '" +
                     command + "'");
}

// config-file values fill a flag variable only when the flag was not given
// explicitly, so flags always win
template <class T>
void take(const json& f, const char* key, const CLI::App* cmd,
          const std::string& flag, T& var) {
  if (!f.contains(key) || cmd->count(flag) > 0) return;
  try {
    var = f.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError(std::string("config key '") + key +
                     "' has the wrong type");
  }
}

std::string out_file(const std::string& out_dir, const std::string& name) {
  std::filesystem::create_directories(out_dir);
  return (std::filesystem::path(out_dir) / name).string();
}

void write_resolved(const json& j, const std::string& out_dir,
                    const std::string& command) {
  io::write_text(out_file(out_dir, command + "-config.json"), j.dump(2) + "\n");
}

// global flags shared by every command
struct CommonArgs {
  std::string config;
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  int workers = 1;
};

void add_common_flags(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "JSON config; flags override it");
  cmd->add_option("--out-dir", a.out_dir, "output directory");
  cmd->add_option("--seed", a.seed, "RNG seed");
  cmd->add_option("--workers", a.workers, "worker threads")
      ->check(CLI::PositiveNumber);
}

void merge_common(const json& f, const CLI::App* cmd, CommonArgs& a) {
  take(f, "out_dir", cmd, "--out-dir", a.out_dir);
  take(f, "seed", cmd, "--seed", a.seed);
  take(f, "workers", cmd, "--workers", a.workers);
}

json common_json(const std::string& command, const CommonArgs& a) {
  return json{{"command", command},
              {"out_dir", a.out_dir},
              {"seed", a.seed},
              {"workers", a.workers}};
}

struct SolverFlags {
  std::string method = "radau";
  double dt = 1e-3;
  double rtol = 1e-7;
  double atol = 1e-9;
  int cycles = 12;
  double output_dt = 1e-3;
};

void add_solver_flags(CLI::App* cmd, SolverFlags& s) {
  cmd->add_option("--method", s.method, "integrator")
      ->check(CLI::IsMember({"rk4", "radau"}));
  cmd->add_option("--dt", s.dt, "fixed step (rk4)")->check(CLI::PositiveNumber);
  cmd->add_option("--rtol", s.rtol, "relative tolerance (radau)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--atol", s.atol, "absolute tolerance (radau)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--cycles", s.cycles, "cardiac cycles to integrate")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--output-dt", s.output_dt, "output grid spacing")
      ->check(CLI::PositiveNumber);
}

void merge_solver(const json& f, const CLI::App* cmd, SolverFlags& s) {
  take(f, "method", cmd, "--method", s.method);
  take(f, "dt", cmd, "--dt", s.dt);
  take(f, "rtol", cmd, "--rtol", s.rtol);
  take(f, "atol", cmd, "--atol", s.atol);
  take(f, "cycles", cmd, "--cycles", s.cycles);
  take(f, "output_dt", cmd, "--output-dt", s.output_dt);
}

const std::vector<std::string> kSolverKeys = {"method", "dt",     "rtol",
                                              "atol",   "cycles", "output_dt"};

void solver_into_json(json& j, const SolverFlags& s) {
  j["method"] = s.method;
  j["dt"] = s.dt;
  j["rtol"] = s.rtol;
  j["atol"] = s.atol;
  j["cycles"] = s.cycles;
  j["output_dt"] = s.output_dt;
}

SolverConfig to_solver_config(const SolverFlags& s) {
  if (s.method != "rk4" && s.method != "radau")
    throw UsageError("method must be rk4 or radau, got '" + s.method + "'");
  SolverConfig cfg;
  cfg.method = s.method == "rk4" ? Method::kRk4 : Method::kRadau;
  cfg.dt = s.dt;
  cfg.rtol = s.rtol;
  cfg.atol = s.atol;
  cfg.n_cycles = s.cycles;
  cfg.output_dt = s.output_dt;
  return cfg;
}

// model parameters come either inline ("params": 23 numbers or a name map)
// or from a separate file via --params; the resolved config always inlines
// the 23 values actually used
ParameterVector params_from_json(const json& p) {
  ParameterVector v = default_parameters();
  if (p.is_array()) {
    if (p.size() != static_cast<std::size_t>(kNumParams))
      throw UsageError("params array must hold exactly 23 values");
    for (Eigen::Index i = 0; i < kNumParams; ++i)
      v.values[i] = p.at(static_cast<std::size_t>(i)).get<double>();
    return v;
  }
  if (!p.is_object())
    throw UsageError("params must be an array or a name-value object");
  const auto& names = parameter_names();
  for (const auto& item : p.items()) {
    bool found = false;
    for (Eigen::Index i = 0; i < kNumParams; ++i) {
      if (names[static_cast<std::size_t>(i)] == item.key()) {
        v.values[i] = item.value().get<double>();
        found = true;
        break;
      }
    }
    if (!found) throw UsageError("unknown parameter '" + item.key() + "'");
  }
  return v;
}

ParameterVector resolve_params(const json& file, const CLI::App* cmd,
                               const std::string& params_path) {
  if (cmd->count("--params") > 0) {
    require_file(params_path, "params file");
    return params_from_json(load_json_file(params_path));
  }
  if (file.contains("params")) return params_from_json(file.at("params"));
  return default_parameters();
}

json params_to_json(const ParameterVector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < kNumParams; ++i) a.push_back(v.values[i]);
  return a;
}

// output targets: array of 16 (null = missing) or a name-value map where
// absent names are the missing components
struct TargetSpec {
  OutputVector y = OutputVector::Zero();
  std::vector<int> missing;
};

TargetSpec target_from_json(const json& t) {
  TargetSpec spec;
  const auto& names = output_names();
  if (t.is_array()) {
    if (t.size() != static_cast<std::size_t>(kNumOutputs))
      throw UsageError("target array must hold exactly 16 entries");
    for (int k = 0; k < kNumOutputs; ++k) {
      const json& e = t.at(static_cast<std::size_t>(k));
      if (e.is_null()) {
        spec.y(k) = std::numeric_limits<double>::quiet_NaN();
        spec.missing.push_back(k);
      } else {
        spec.y(k) = e.get<double>();
      }
    }
    return spec;
  }
  if (!t.is_object())
    throw UsageError("target must be an array or a name-value object");
  std::vector<bool> seen(static_cast<std::size_t>(kNumOutputs), false);
  for (const auto& item : t.items()) {
    bool found = false;
    for (int k = 0; k < kNumOutputs; ++k) {
      if (names[static_cast<std::size_t>(k)] == item.key()) {
        spec.y(k) = item.value().get<double>();
        seen[static_cast<std::size_t>(k)] = true;
        found = true;
        break;
      }
    }
    if (!found)
      throw UsageError("unknown output component '" + item.key() + "'");
  }
  for (int k = 0; k < kNumOutputs; ++k)
    if (!seen[static_cast<std::size_t>(k)]) {
      spec.y(k) = std::numeric_limits<double>::quiet_NaN();
      spec.missing.push_back(k);
    }
  return spec;
}

TargetSpec resolve_target(const json& file, const CLI::App* cmd,
                          const std::string& y_path) {
  if (cmd->count("--y") > 0) {
    require_file(y_path, "target file");
    return target_from_json(load_json_file(y_path));
  }
  if (file.contains("y")) return target_from_json(file.at("y"));
  throw UsageError("a target vector is required (--y or config key 'y')");
}

json target_to_json(const TargetSpec& spec) {
  json a = json::array();
  for (int k = 0; k < kNumOutputs; ++k) {
    if (std::isfinite(spec.y(k)))
      a.push_back(spec.y(k));
    else
      a.push_back(nullptr);
  }
  return a;
}

int parse_component(const std::string& token) {
  const auto& names = output_names();
  for (int k = 0; k < kNumOutputs; ++k)
    if (names[static_cast<std::size_t>(k)] == token) return k;
  try {
    std::size_t pos = 0;
    const int k = std::stoi(token, &pos);
    if (pos == token.size() && k >= 0 && k < kNumOutputs) return k;
  } catch (const std::exception&) {
  }
  throw UsageError("unknown output component '" + token + "'");
}

ReconSource parse_source(const std::string& s) {
  if (s == "emulator") return ReconSource::kEmulator;
  if (s == "simulator") return ReconSource::kSimulator;
  throw UsageError("source must be emulator or simulator, got '" + s + "'");
}

ModelBundle load_bundle_checked(const std::string& path) {
  require_file(path, "bundle");
  return load_bundle(path);
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  CommonArgs common;
  SolverFlags solver;
  std::string params_path;
  bool use_defaults = false;
};

int run_simulate(const CLI::App* cmd, SimulateArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "simulate");
    std::vector<std::string> keys = {"command", "out_dir", "seed",
                                     "workers", "params"};
    keys.insert(keys.end(), kSolverKeys.begin(), kSolverKeys.end());
    reject_unknown_keys(file, keys);
    merge_common(file, cmd, a.common);
    merge_solver(file, cmd, a.solver);
  }
  const ParameterVector v = resolve_params(file, cmd, a.params_path);
  const SolverConfig cfg = to_solver_config(a.solver);

  json resolved = common_json("simulate", a.common);
  solver_into_json(resolved, a.solver);
  resolved["params"] = params_to_json(v);
  write_resolved(resolved, a.common.out_dir, "simulate");

  const StateTrajectory traj = simulate(v, cfg);
  io::write_trajectory_csv(out_file(a.common.out_dir, "trajectory.csv"), traj);

  const OutputResult outs = extract_outputs(traj, v);
  std::ostringstream os;
  os << "name,value,unit\n";
  for (int k = 0; k < kNumOutputs; ++k)
    os << output_names()[static_cast<std::size_t>(k)] << ','
       << io::format_double(outs.y(k)) << ','
       << output_units()[static_cast<std::size_t>(k)] << '\n';
  io::write_text(out_file(a.common.out_dir, "outputs.csv"), os.str());
  if (outs.periodicity_warning)
    std::cerr << "warning: output window is not periodic to tolerance\n";
  std::cout << "wrote trajectory.csv and outputs.csv to " << a.common.out_dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- stiffness

struct StiffnessArgs {
  CommonArgs common;
  SolverFlags solver;
  std::string params_path;
  int window = 2;
};

int run_stiffness(const CLI::App* cmd, StiffnessArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "stiffness");
    std::vector<std::string> keys = {"command", "out_dir", "seed",
                                     "workers", "params",  "window"};
    keys.insert(keys.end(), kSolverKeys.begin(), kSolverKeys.end());
    reject_unknown_keys(file, keys);
    merge_common(file, cmd, a.common);
    merge_solver(file, cmd, a.solver);
    take(file, "window", cmd, "--window", a.window);
  }
  const ParameterVector v = resolve_params(file, cmd, a.params_path);
  const SolverConfig cfg = to_solver_config(a.solver);

  json resolved = common_json("stiffness", a.common);
  solver_into_json(resolved, a.solver);
  resolved["params"] = params_to_json(v);
  resolved["window"] = a.window;
  write_resolved(resolved, a.common.out_dir, "stiffness");

  const StiffnessScan scan = stiffness_scan(v, cfg, a.window);

  std::ostringstream os;
  os << "t";
  for (int j = 1; j <= 6; ++j) os << ",re" << j;
  for (int j = 1; j <= 6; ++j) os << ",im" << j;
  os << ",sr,rho\n";
  for (Eigen::Index i = 0; i < scan.t.size(); ++i) {
    os << io::format_double(scan.t(i));
    for (Eigen::Index j = 0; j < 6; ++j)
      os << ',' << io::format_double(scan.re(i, j));
    for (Eigen::Index j = 0; j < 6; ++j)
      os << ',' << io::format_double(scan.im(i, j));
    os << ',' << io::format_double(scan.sr(i)) << ','
       << io::format_double(scan.rho(i)) << '\n';
  }
  io::write_text(out_file(a.common.out_dir, "spectrum.csv"), os.str());

  // polar view over the cardiac cycle phase
  const double ttot = 60.0 / v.hr();
  std::ostringstream rs;
  rs << "phase_deg,t,sr,rho\n";
  for (Eigen::Index i = 0; i < scan.t.size(); ++i) {
    const double phase = std::fmod(scan.t(i), ttot) / ttot * 360.0;
    rs << io::format_double(phase) << ',' << io::format_double(scan.t(i))
       << ',' << io::format_double(scan.sr(i)) << ','
       << io::format_double(scan.rho(i)) << '\n';
  }
  io::write_text(out_file(a.common.out_dir, "radar.csv"), rs.str());

  const auto extremum_json = [](const StiffnessExtremum& e) {
    json lam_re = json::array(), lam_im = json::array();
    for (int j = 0; j < 6; ++j) {
      lam_re.push_back(e.values(j).real());
      lam_im.push_back(e.values(j).imag());
    }
    return json{{"t", e.t},
                {"stiffness_ratio", e.sr},
                {"lambda_re", lam_re},
                {"lambda_im", lam_im}};
  };
  json summary = {{"sr_max", extremum_json(scan.sr_max)},
                  {"sr_min", extremum_json(scan.sr_min)},
                  {"tau1", scan.tau1},
                  {"tau2", scan.tau2},
                  {"any_degenerate", scan.any_degenerate}};
  io::write_text(out_file(a.common.out_dir, "summary.json"),
                 summary.dump(2) + "\n");
  std::cout << "wrote spectrum.csv, radar.csv, summary.json to "
            << a.common.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  CommonArgs common;
  SolverFlags solver;
  std::string prior = "structural";
  std::int64_t n = 54000;
};

int run_gen_data(const CLI::App* cmd, GenDataArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "gen-data");
    std::vector<std::string> keys = {"command", "out_dir", "seed",
                                     "workers", "prior",   "n"};
    keys.insert(keys.end(), kSolverKeys.begin(), kSolverKeys.end());
    reject_unknown_keys(file, keys);
    merge_common(file, cmd, a.common);
    merge_solver(file, cmd, a.solver);
    take(file, "prior", cmd, "--prior", a.prior);
    take(file, "n", cmd, "--n", a.n);
  }
  if (a.n < 10) throw UsageError("need at least 10 samples");
  PriorBox prior;
  try {
    prior = prior_preset(a.prior);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const SolverConfig cfg = to_solver_config(a.solver);

  json resolved = common_json("gen-data", a.common);
  solver_into_json(resolved, a.solver);
  resolved["prior"] = a.prior;
  resolved["n"] = a.n;
  write_resolved(resolved, a.common.out_dir, "gen-data");

  const Dataset ds =
      generate(prior, a.n, cfg, a.common.seed, a.common.workers);
  save_dataset(ds, a.common.out_dir);
  std::cout << "wrote dataset (" << a.n << " samples, prior " << a.prior
            << ") to " << a.common.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  CommonArgs common;
  std::string which = "all";
  std::string data;
  std::string bundle_in;
  std::string preset = "synthetic";
  double delta = 0.0;
  double budget_scale = 1.0;
  double patience_frac = 0.1;
  std::int64_t latent = 19;
};

int run_train(const CLI::App* cmd, TrainArgs& a) {
  json file;
  TrainingConfig tc = TrainingConfig::synthetic();
  bool tc_from_file = false;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "train");
    reject_unknown_keys(
        file, {"command", "out_dir", "seed", "workers", "which", "data",
               "bundle", "preset", "delta", "budget_scale", "patience_frac",
               "latent", "training"});
    merge_common(file, cmd, a.common);
    take(file, "which", cmd, "which", a.which);
    take(file, "data", cmd, "--data", a.data);
    take(file, "bundle", cmd, "--bundle", a.bundle_in);
    take(file, "preset", cmd, "--preset", a.preset);
    take(file, "delta", cmd, "--delta", a.delta);
    take(file, "budget_scale", cmd, "--budget-scale", a.budget_scale);
    take(file, "patience_frac", cmd, "--patience", a.patience_frac);
    take(file, "latent", cmd, "--latent", a.latent);
    if (file.contains("training")) {
      try {
        tc = TrainingConfig::from_json(file.at("training"));
        tc_from_file = true;
      } catch (const json::exception& e) {
        throw UsageError(std::string("config key 'training': ") + e.what());
      }
    }
  }
  if (!tc_from_file) {
    if (a.preset == "synthetic")
      tc = TrainingConfig::synthetic();
    else if (a.preset == "ehr")
      tc = TrainingConfig::ehr();
    else
      throw UsageError("preset must be synthetic or ehr, got '" + a.preset +
                       "'");
  }
  // scalar knobs override the preset or training block only when given
  // explicitly, by flag or by config key
  if (cmd->count("--delta") > 0 || file.contains("delta"))
    tc.noise_scale = a.delta;
  if (cmd->count("--budget-scale") > 0 || file.contains("budget_scale"))
    tc.budget_scale = a.budget_scale;
  if (cmd->count("--patience") > 0 || file.contains("patience_frac"))
    tc.patience_frac = a.patience_frac;
  if (cmd->count("--latent") > 0 || file.contains("latent"))
    tc.latent_dim = a.latent;
  if (cmd->count("--seed") > 0 || file.contains("seed"))
    tc.seed = a.common.seed;

  if (a.which != "emulator" && a.which != "flow" && a.which != "vaed" &&
      a.which != "all")
    throw UsageError("train target must be emulator, flow, vaed, or all");
  require_file(a.data, "dataset directory");

  json resolved = common_json("train", a.common);
  resolved["which"] = a.which;
  resolved["data"] = a.data;
  resolved["bundle"] = a.bundle_in;
  resolved["training"] = tc.to_json();
  write_resolved(resolved, a.common.out_dir, "train");

  const Dataset ds = load_dataset(a.data);
  // nominal epoch budgets assume the full-scale corpus; shrink them in
  // proportion to this dataset, on top of the user's multiplier (the
  // resolved config stores the multiplier, so reruns repeat this fold)
  tc.budget_scale *= TrainingConfig::budget_scale_for(ds.v.rows());
  ModelBundle b;
  if (!a.bundle_in.empty()) {
    b = load_bundle_checked(a.bundle_in);
    b.cfg = tc;
  } else {
    b = make_bundle(tc, ds.stats, ds.prior);
  }

  std::vector<std::pair<std::string, TrainResult>> results;
  const auto run_one = [&](const std::string& name) {
    TrainResult r;
    if (name == "emulator")
      r = train_emulator(b, ds);
    else if (name == "flow")
      r = train_flow(b, ds);
    else
      r = train_vae_decoder(b, ds);
    save_curve_csv(r.curve, out_file(a.common.out_dir, "curve_" + name + ".csv"));
    std::cout << name << ": " << r.epochs_run << " epochs, best test loss "
              << r.best_test << " at epoch " << r.best_epoch
              << (r.diverged ? " (diverged)" : "") << "\n";
    results.emplace_back(name, r);
  };
  if (a.which == "all") {
    run_one("emulator");
    run_one("flow");
    run_one("vaed");
  } else {
    run_one(a.which);
  }

  save_bundle(b, out_file(a.common.out_dir, "bundle.json"));
  io::write_text(out_file(a.common.out_dir, "manifest.json"),
                 training_manifest(b, results).dump(2) + "\n");
  std::cout << "wrote bundle.json and manifest.json to " << a.common.out_dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- invert

struct InvertArgs {
  CommonArgs common;
  SolverFlags solver;
  std::string bundle;
  std::string y_path;
  std::int64_t nw = 100;
  std::string source = "emulator";
};

int run_invert(const CLI::App* cmd, InvertArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "invert");
    std::vector<std::string> keys = {"command", "out_dir", "seed", "workers",
                                     "bundle",  "y",       "nw",   "source"};
    keys.insert(keys.end(), kSolverKeys.begin(), kSolverKeys.end());
    reject_unknown_keys(file, keys);
    merge_common(file, cmd, a.common);
    merge_solver(file, cmd, a.solver);
    take(file, "bundle", cmd, "--bundle", a.bundle);
    take(file, "nw", cmd, "--nw", a.nw);
    take(file, "source", cmd, "--source", a.source);
  }
  const TargetSpec spec = resolve_target(file, cmd, a.y_path);
  if (!spec.missing.empty())
    throw UsageError(
        "inversion needs all 16 components; use impute for partial targets");
  const ReconSource source = parse_source(a.source);
  const SolverConfig sim_cfg = to_solver_config(a.solver);
  const ModelBundle b = load_bundle_checked(a.bundle);

  json resolved = common_json("invert", a.common);
  solver_into_json(resolved, a.solver);
  resolved["bundle"] = a.bundle;
  resolved["y"] = target_to_json(spec);
  resolved["nw"] = a.nw;
  resolved["source"] = a.source;
  write_resolved(resolved, a.common.out_dir, "invert");

  Rng rng(a.common.seed);
  const InversionResult res =
      invert(b, spec.y, a.nw, rng, source, sim_cfg);
  save_inversion_csv(res, out_file(a.common.out_dir, "inversion.csv"));

  int flagged = 0;
  for (const bool f : res.out_of_range) flagged += f ? 1 : 0;
  std::cout << "wrote inversion.csv (" << a.nw << " draws, " << flagged
            << " out of range) to " << a.common.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- impute

struct ImputeArgs {
  CommonArgs common;
  SolverFlags solver;
  std::string bundle;
  std::string y_path;
  std::string missing_spec;
  std::int64_t m = 100000;
  std::int64_t top_k = 4;
  std::int64_t nw = 5;
  std::string source = "emulator";
};

int run_impute(const CLI::App* cmd, ImputeArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "impute");
    std::vector<std::string> keys = {"command", "out_dir", "seed",
                                     "workers", "bundle",  "y",
                                     "missing", "m",       "top_k",
                                     "nw",      "source"};
    keys.insert(keys.end(), kSolverKeys.begin(), kSolverKeys.end());
    reject_unknown_keys(file, keys);
    merge_common(file, cmd, a.common);
    merge_solver(file, cmd, a.solver);
    take(file, "bundle", cmd, "--bundle", a.bundle);
    take(file, "missing", cmd, "--missing", a.missing_spec);
    take(file, "m", cmd, "--m", a.m);
    take(file, "top_k", cmd, "--top-k", a.top_k);
    take(file, "nw", cmd, "--nw", a.nw);
    take(file, "source", cmd, "--source", a.source);
  }
  TargetSpec spec = resolve_target(file, cmd, a.y_path);
  if (!a.missing_spec.empty()) {
    std::istringstream is(a.missing_spec);
    std::string token;
    while (std::getline(is, token, ',')) {
      if (token.empty()) continue;
      const int k = parse_component(token);
      spec.missing.push_back(k);
      spec.y(k) = std::numeric_limits<double>::quiet_NaN();
    }
  }
  std::sort(spec.missing.begin(), spec.missing.end());
  spec.missing.erase(std::unique(spec.missing.begin(), spec.missing.end()),
                     spec.missing.end());
  // the module sees finite placeholders on masked components
  OutputVector y_in = spec.y;
  for (const int k : spec.missing) y_in(k) = 0.0;

  const ReconSource source = parse_source(a.source);
  const SolverConfig sim_cfg = to_solver_config(a.solver);
  const ModelBundle b = load_bundle_checked(a.bundle);

  json resolved = common_json("impute", a.common);
  solver_into_json(resolved, a.solver);
  resolved["bundle"] = a.bundle;
  // null entries in y carry the missing set; no separate key needed
  resolved["y"] = target_to_json(spec);
  resolved["m"] = a.m;
  resolved["top_k"] = a.top_k;
  resolved["nw"] = a.nw;
  resolved["source"] = a.source;
  write_resolved(resolved, a.common.out_dir, "impute");

  Rng rng(a.common.seed);
  const ImputationResult res = impute(b, y_in, spec.missing, a.m, a.top_k,
                                      a.nw, rng, source, sim_cfg);
  save_imputation_csv(res, out_file(a.common.out_dir, "imputation.csv"));
  for (std::size_t i = 0; i < res.inversions.size(); ++i)
    save_inversion_csv(res.inversions[i],
                       out_file(a.common.out_dir, "inversion_candidate" +
                                                      std::to_string(i) +
                                                      ".csv"));
  std::cout << "wrote imputation.csv and " << res.inversions.size()
            << " candidate inversions to " << a.common.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- manifold

struct ManifoldArgs {
  CommonArgs common;
  std::string bundle;
  std::string y_path;
  std::int64_t k = 5000;
};

int run_manifold(const CLI::App* cmd, ManifoldArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "manifold");
    reject_unknown_keys(file, {"command", "out_dir", "seed", "workers",
                               "bundle", "y", "k"});
    merge_common(file, cmd, a.common);
    take(file, "bundle", cmd, "--bundle", a.bundle);
    take(file, "k", cmd, "--k", a.k);
  }
  const TargetSpec spec = resolve_target(file, cmd, a.y_path);
  if (!spec.missing.empty())
    throw UsageError("manifold sampling needs all 16 components");
  const ModelBundle b = load_bundle_checked(a.bundle);

  json resolved = common_json("manifold", a.common);
  resolved["bundle"] = a.bundle;
  resolved["y"] = target_to_json(spec);
  resolved["k"] = a.k;
  write_resolved(resolved, a.common.out_dir, "manifold");

  Rng rng(a.common.seed);
  const ManifoldSample ms = manifold(b, spec.y, a.k, rng);
  save_manifold_csv(ms, out_file(a.common.out_dir, "points.csv"));
  save_spectrum_csv(ms, out_file(a.common.out_dir, "spectrum.csv"));

  double ce12 = ms.cumulative_energy(11);
  std::cout << "wrote points.csv and spectrum.csv to " << a.common.out_dir
            << " (12-mode cumulative energy " << ce12 << ")\n";
  return 0;
}

// ---------------------------------------------------------------- ehr-report

struct EhrReportArgs {
  CommonArgs common;
  std::string bundle;
  std::string data;
  std::string tag = "cohort";
  std::int64_t m = 100000;
  std::int64_t top_k = 4;
  std::int64_t nw = 100;
  std::int64_t min_present = 10;
  bool allow_extra = false;
  bool dump = false;
};

int run_ehr_report(const CLI::App* cmd, EhrReportArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "ehr-report");
    reject_unknown_keys(
        file, {"command", "out_dir", "seed", "workers", "bundle", "data",
               "tag", "m", "top_k", "nw", "min_present", "allow_extra",
               "dump"});
    merge_common(file, cmd, a.common);
    take(file, "bundle", cmd, "--bundle", a.bundle);
    take(file, "data", cmd, "--data", a.data);
    take(file, "tag", cmd, "--tag", a.tag);
    take(file, "m", cmd, "--m", a.m);
    take(file, "top_k", cmd, "--top-k", a.top_k);
    take(file, "nw", cmd, "--nw", a.nw);
    take(file, "min_present", cmd, "--min-present", a.min_present);
    take(file, "allow_extra", cmd, "--allow-extra", a.allow_extra);
    take(file, "dump", cmd, "--dump", a.dump);
  }
  require_file(a.data, "EHR csv");
  const ModelBundle b = load_bundle_checked(a.bundle);

  std::vector<std::string> ignored;
  std::vector<EhrRecord> records;
  try {
    records = load_ehr_csv(a.data, a.allow_extra, &ignored);
  } catch (const std::exception& e) {
    throw UsageError(a.data + ": " + e.what());
  }
  for (const std::string& col : ignored)
    std::cerr << "warning: ignoring column '" << col << "'\n";

  json resolved = common_json("ehr-report", a.common);
  resolved["bundle"] = a.bundle;
  resolved["data"] = a.data;
  resolved["tag"] = a.tag;
  resolved["m"] = a.m;
  resolved["top_k"] = a.top_k;
  resolved["nw"] = a.nw;
  resolved["min_present"] = a.min_present;
  resolved["allow_extra"] = a.allow_extra;
  resolved["dump"] = a.dump;
  write_resolved(resolved, a.common.out_dir, "ehr-report");

  EhrInferenceConfig cfg;
  cfg.m = a.m;
  cfg.top_k = a.top_k;
  cfg.n_w = a.nw;
  cfg.min_present = static_cast<int>(a.min_present);
  cfg.workers = a.common.workers;
  cfg.tag = a.tag;

  std::vector<PatientPrediction> dumps;
  const ErrorReport rep = ehr_error_report(b, records, cfg, a.common.seed,
                                           a.dump ? &dumps : nullptr);
  save_error_report_csv({rep},
                        out_file(a.common.out_dir, "error_report.csv"));
  if (a.dump)
    save_patient_predictions_csv(
        dumps, out_file(a.common.out_dir, "patients.csv"));
  std::cout << "wrote error_report.csv for " << rep.n_patients
            << " patients to " << a.common.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------- pseudo-ehr

struct PseudoEhrArgs {
  CommonArgs common;
  SolverFlags solver;
  std::string prior = "ehr";
  std::int64_t n_patients = 46;
  double delta = 0.5;
};

int run_pseudo_ehr(const CLI::App* cmd, PseudoEhrArgs& a) {
  json file;
  if (!a.common.config.empty()) {
    file = load_json_file(a.common.config);
    check_command(file, "pseudo-ehr");
    std::vector<std::string> keys = {"command",    "out_dir", "seed",
                                     "workers",    "prior",   "n_patients",
                                     "delta"};
    keys.insert(keys.end(), kSolverKeys.begin(), kSolverKeys.end());
    reject_unknown_keys(file, keys);
    merge_common(file, cmd, a.common);
    merge_solver(file, cmd, a.solver);
    take(file, "prior", cmd, "--prior", a.prior);
    take(file, "n_patients", cmd, "--n-patients", a.n_patients);
    take(file, "delta", cmd, "--delta", a.delta);
  }
  if (a.n_patients < 1) throw UsageError("need at least one patient");

  PseudoEhrConfig cfg;
  try {
    cfg.prior = prior_preset(a.prior);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.n_patients = static_cast<int>(a.n_patients);
  cfg.noise_scale = a.delta;
  cfg.seed = a.common.seed;
  cfg.workers = a.common.workers;
  cfg.solver = to_solver_config(a.solver);

  json resolved = common_json("pseudo-ehr", a.common);
  solver_into_json(resolved, a.solver);
  resolved["prior"] = a.prior;
  resolved["n_patients"] = a.n_patients;
  resolved["delta"] = a.delta;
  write_resolved(resolved, a.common.out_dir, "pseudo-ehr");

  const std::vector<EhrRecord> records = make_pseudo_ehr(cfg);
  write_ehr_csv(out_file(a.common.out_dir, "ehr.csv"), records);
  std::cout << "wrote ehr.csv (" << records.size() << " patients) to "
            << a.common.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "cvsim: six-compartment hemodynamic simulation, stiffness analysis, "
      "and neural inversion"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* c_sim = app.add_subcommand(
      "simulate", "integrate the model and extract clinical outputs");
  add_common_flags(c_sim, sim.common);
  add_solver_flags(c_sim, sim.solver);
  c_sim->add_option("--params", sim.params_path,
                    "JSON parameter file (array of 23 or name map)");
  c_sim->add_flag("--defaults", sim.use_defaults,
                  "use the healthy baseline parameters");

  StiffnessArgs stf;
  CLI::App* c_stf = app.add_subcommand(
      "stiffness", "time-resolved eigenvalue and stiffness-ratio scan");
  add_common_flags(c_stf, stf.common);
  add_solver_flags(c_stf, stf.solver);
  c_stf->add_option("--params", stf.params_path, "JSON parameter file");
  c_stf->add_option("--window", stf.window, "cycles to scan at the end")
      ->check(CLI::PositiveNumber);

  GenDataArgs gen;
  CLI::App* c_gen = app.add_subcommand(
      "gen-data", "sample the prior and simulate a training dataset");
  add_common_flags(c_gen, gen.common);
  add_solver_flags(c_gen, gen.solver);
  c_gen->add_option("--prior", gen.prior, "prior preset (structural|ehr)");
  c_gen->add_option("--n", gen.n, "number of samples");

  TrainArgs trn;
  CLI::App* c_trn = app.add_subcommand(
      "train", "fit the emulator, flow, and decoder on a dataset");
  add_common_flags(c_trn, trn.common);
  c_trn->add_option("which", trn.which, "emulator|flow|vaed|all")
      ->check(CLI::IsMember({"emulator", "flow", "vaed", "all"}));
  c_trn->add_option("--data", trn.data, "dataset directory from gen-data");
  c_trn->add_option("--bundle", trn.bundle_in,
                    "existing bundle to continue from");
  c_trn->add_option("--preset", trn.preset, "config preset (synthetic|ehr)")
      ->check(CLI::IsMember({"synthetic", "ehr"}));
  c_trn->add_option("--delta", trn.delta, "output noise scale");
  c_trn->add_option("--budget-scale", trn.budget_scale,
                    "multiplier on the nominal epoch budgets");
  c_trn->add_option("--patience", trn.patience_frac,
                    "early-stop patience as a budget fraction, 0 disables");
  c_trn->add_option("--latent", trn.latent, "latent dimension");

  InvertArgs inv;
  CLI::App* c_inv = app.add_subcommand(
      "invert", "amortized inversion of one output vector");
  add_common_flags(c_inv, inv.common);
  add_solver_flags(c_inv, inv.solver);
  c_inv->add_option("--bundle", inv.bundle, "trained bundle.json");
  c_inv->add_option("--y", inv.y_path, "JSON target (array of 16 or name map)");
  c_inv->add_option("--nw", inv.nw, "latent draws");
  c_inv->add_option("--source", inv.source,
                    "reconstruction path (emulator|simulator)")
      ->check(CLI::IsMember({"emulator", "simulator"}));

  ImputeArgs imp;
  CLI::App* c_imp = app.add_subcommand(
      "impute", "density-guided completion of a partial output vector");
  add_common_flags(c_imp, imp.common);
  add_solver_flags(c_imp, imp.solver);
  c_imp->add_option("--bundle", imp.bundle, "trained bundle.json");
  c_imp->add_option("--y", imp.y_path,
                    "JSON target; null entries or absent names are missing");
  c_imp->add_option("--missing", imp.missing_spec,
                    "extra missing components (names or indices, commas)");
  c_imp->add_option("--m", imp.m, "flow candidates to draw");
  c_imp->add_option("--top-k", imp.top_k, "candidates to keep");
  c_imp->add_option("--nw", imp.nw, "latent draws per kept candidate");
  c_imp->add_option("--source", imp.source,
                    "reconstruction path (emulator|simulator)")
      ->check(CLI::IsMember({"emulator", "simulator"}));

  ManifoldArgs man;
  CLI::App* c_man = app.add_subcommand(
      "manifold", "sample the non-identifiable set and its spectrum");
  add_common_flags(c_man, man.common);
  c_man->add_option("--bundle", man.bundle, "trained bundle.json");
  c_man->add_option("--y", man.y_path, "JSON target (complete)");
  c_man->add_option("--k", man.k, "points to decode");

  EhrReportArgs ehr;
  CLI::App* c_ehr = app.add_subcommand(
      "ehr-report", "per-component reconstruction errors over a cohort");
  add_common_flags(c_ehr, ehr.common);
  c_ehr->add_option("--bundle", ehr.bundle, "trained bundle.json");
  c_ehr->add_option("--data", ehr.data, "cohort CSV (blank cells = missing)");
  c_ehr->add_option("--tag", ehr.tag, "column label in the report");
  c_ehr->add_option("--m", ehr.m, "flow candidates per patient");
  c_ehr->add_option("--top-k", ehr.top_k, "candidates kept per patient");
  c_ehr->add_option("--nw", ehr.nw, "total decodes per patient");
  c_ehr->add_option("--min-present", ehr.min_present,
                    "keep patients with strictly more measurements");
  c_ehr->add_flag("--allow-extra", ehr.allow_extra,
                  "skip unknown CSV columns instead of failing");
  c_ehr->add_flag("--dump", ehr.dump, "also write per-patient predictions");

  PseudoEhrArgs pse;
  CLI::App* c_pse = app.add_subcommand(
      "pseudo-ehr", "synthetic cohort with clinic-shaped missingness");
  add_common_flags(c_pse, pse.common);
  add_solver_flags(c_pse, pse.solver);
  c_pse->add_option("--prior", pse.prior, "prior preset (structural|ehr)");
  c_pse->add_option("--n-patients", pse.n_patients, "cohort size");
  c_pse->add_option("--delta", pse.delta, "measurement noise scale");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(c_sim)) return run_simulate(c_sim, sim);
    if (app.got_subcommand(c_stf)) return run_stiffness(c_stf, stf);
    if (app.got_subcommand(c_gen)) return run_gen_data(c_gen, gen);
    if (app.got_subcommand(c_trn)) return run_train(c_trn, trn);
    if (app.got_subcommand(c_inv)) return run_invert(c_inv, inv);
    if (app.got_subcommand(c_imp)) return run_impute(c_imp, imp);
    if (app.got_subcommand(c_man)) return run_manifold(c_man, man);
    if (app.got_subcommand(c_ehr)) return run_ehr_report(c_ehr, ehr);
    if (app.got_subcommand(c_pse)) return run_pseudo_ehr(c_pse, pse);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
