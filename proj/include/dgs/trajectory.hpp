#pragma once

#include "dgs/camera.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace dgs {

/// Ordered, timestamped camera poses.
struct Trajectory {
  std::vector<CameraPose> poses;

  size_t size() const { return poses.size(); }
  bool empty() const { return poses.empty(); }
  CameraPose& operator[](size_t i) { return poses[i]; }
  const CameraPose& operator[](size_t i) const { return poses[i]; }
};

// TUM line format: timestamp tx ty tz qx qy qz qw

inline void save_tum(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << std::setprecision(17);
  for (const auto& p : traj.poses) {
    out << p.timestamp << ' ' << p.t.x() << ' ' << p.t.y() << ' ' << p.t.z() << ' '
        << p.r.x() << ' ' << p.r.y() << ' ' << p.r.z() << ' ' << p.r.w() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline Trajectory load_tum(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  Trajectory traj;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    CameraPose p;
    double qx, qy, qz, qw;
    if (!(ss >> p.timestamp >> p.t.x() >> p.t.y() >> p.t.z() >> qx >> qy >> qz >> qw))
      throw ParseError("bad TUM line in " + path + ": " + line);
    p.r = Quat(qw, qx, qy, qz).normalized();
    traj.poses.push_back(p);
  }
  return traj;
}

}  // namespace dgs
