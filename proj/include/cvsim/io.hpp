#pragma once

#include <string>
#include <vector>

#include "cvsim/solvers.hpp"

namespace cvsim::io {

// shortest decimal string that round-trips a double
std::string format_double(double x);

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const MatrixXd& m);

// Blank fields parse as NaN. Returns the header through `header` when given.
MatrixXd read_csv(const std::string& path,
                  std::vector<std::string>* header = nullptr);

// Grid samples with pressures converted to mmHg for plotting.
void write_trajectory_csv(const std::string& path, const StateTrajectory& traj);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace cvsim::io
