#include "cvsim/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cvsim::io {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  // prefer the shortest representation that still round-trips
  for (int prec = 1; prec < 17; ++prec) {
    char probe[40];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, x);
    if (std::strtod(probe, nullptr) == x) return probe;
  }
  return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const MatrixXd& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  for (size_t i = 0; i < header.size(); ++i)
    f << (i ? "," : "") << header[i];
  f << "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) f << ",";
      const double x = m(r, c);
      if (std::isnan(x)) continue;  // blank field
      f << format_double(x);
    }
    f << "\n";
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

MatrixXd read_csv(const std::string& path, std::vector<std::string>* header) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty csv: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (!line.empty() && line.back() == ',') cols.push_back("");
  }
  if (header) *header = cols;
  const size_t width = cols.size();

  std::vector<double> data;
  size_t rows = 0;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t start = 0, col = 0;
    while (col < width) {
      size_t end = line.find(',', start);
      if (end == std::string::npos) end = line.size();
      if (end == start) {
        data.push_back(std::numeric_limits<double>::quiet_NaN());
      } else {
        data.push_back(std::strtod(line.c_str() + start, nullptr));
      }
      start = end + 1;
      ++col;
      if (end == line.size() && col < width) {
        // short row: pad with NaN
        for (; col < width; ++col)
          data.push_back(std::numeric_limits<double>::quiet_NaN());
        break;
      }
    }
    ++rows;
  }

  MatrixXd m(rows, width);
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < width; ++c) m(r, c) = data[r * width + c];
  return m;
}

void write_trajectory_csv(const std::string& path, const StateTrajectory& traj) {
  const Eigen::Index n = traj.t.size();
  MatrixXd m(n, 1 + 6 + 6 + 6 + 1 + 2);
  m.col(0) = traj.t;
  m.block(0, 1, n, 6) = traj.p * kBaryeToMmHg;
  m.block(0, 7, n, 6) = traj.q;
  m.block(0, 13, n, 6) = traj.vol;
  m.col(19) = traj.v_total;
  m.block(0, 20, n, 2) = traj.compliance;
  write_csv(path,
            {"t",      "P_l",    "P_a",   "P_v",   "P_r",   "P_pa",
             "P_pv",   "Q_l_in", "Q_l_out", "Q_a", "Q_r_in", "Q_r_out",
             "Q_pv",   "V_l",    "V_a",   "V_v",   "V_r",   "V_pa",
             "V_pv",   "V_total", "C_l",  "C_r"},
            m);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace cvsim::io
