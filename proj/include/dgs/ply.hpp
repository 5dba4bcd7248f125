#pragma once

#include "dgs/scene.hpp"

#include <fstream>
#include <sstream>

namespace dgs {

// Binary little-endian PLY, one vertex per Gaussian, all fields float32.
// Property order: x y z, log_scale_0..2, rot_0..3 (quaternion w x y z),
// logit_opacity, sh_0..sh_{3K-1} (coefficient-major: sh_{3k+c}),
// vx vy vz, tau, log_beta.

namespace ply_detail {

inline std::vector<std::string> property_names(int sh_coeffs) {
  std::vector<std::string> n = {"x", "y", "z", "log_scale_0", "log_scale_1", "log_scale_2",
                                "rot_0", "rot_1", "rot_2", "rot_3", "logit_opacity"};
  for (int i = 0; i < sh_coeffs * 3; ++i) n.push_back("sh_" + std::to_string(i));
  n.insert(n.end(), {"vx", "vy", "vz", "tau", "log_beta"});
  return n;
}

}  // namespace ply_detail

inline void save_ply(const GaussianScene& scene, const std::string& path) {
  const int K = scene.config.sh_coeff_count();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "comment dynamic gaussian scene, quaternion order w x y z\n";
  out << "element vertex " << scene.size() << "\n";
  for (const auto& name : ply_detail::property_names(K))
    out << "property float " << name << "\n";
  out << "end_header\n";

  std::vector<float> row(16 + size_t(K) * 3);
  for (const auto& g : scene.gaussians()) {
    size_t i = 0;
    for (int k = 0; k < 3; ++k) row[i++] = float(g.mu[k]);
    for (int k = 0; k < 3; ++k) row[i++] = float(g.log_scale[k]);
    row[i++] = float(g.rot_q.w());
    row[i++] = float(g.rot_q.x());
    row[i++] = float(g.rot_q.y());
    row[i++] = float(g.rot_q.z());
    row[i++] = float(g.logit_opacity);
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < 3; ++c) row[i++] = float(g.sh[k][c]);
    for (int k = 0; k < 3; ++k) row[i++] = float(g.v[k]);
    row[i++] = float(g.tau);
    row[i++] = float(g.log_beta);
    out.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
  }
  if (!out) throw IoError("write failed: " + path);
}

inline GaussianScene load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw ParseError("not a PLY file: " + path);
  size_t vertex_count = 0;
  std::vector<std::string> props;
  bool little_endian = false;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      little_endian = (fmt == "binary_little_endian");
    } else if (tok == "element") {
      std::string what;
      ss >> what >> vertex_count;
      if (what != "vertex") throw ParseError("unexpected PLY element in " + path);
    } else if (tok == "property") {
      std::string type, name;
      ss >> type >> name;
      if (type != "float") throw ParseError("non-float PLY property in " + path);
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!little_endian) throw ParseError("PLY must be binary little-endian: " + path);

  // infer the SH coefficient count and validate the full layout
  int sh_values = 0;
  for (const auto& p : props)
    if (p.rfind("sh_", 0) == 0) ++sh_values;
  if (sh_values % 3 != 0) throw ParseError("PLY sh property count not divisible by 3");
  const int K = sh_values / 3;
  if (props != ply_detail::property_names(K))
    throw ParseError("unexpected PLY property layout in " + path);

  int degree = int(std::lround(std::sqrt(double(K)))) - 1;
  if ((degree + 1) * (degree + 1) != K || degree < 0 || degree > 3)
    throw ParseError("PLY sh coefficient count is not a supported degree");

  SceneConfig cfg;
  cfg.sh_degree = degree;
  GaussianScene scene(cfg);
  auto& gs = scene.mutable_gaussians();
  gs.reserve(vertex_count);
  std::vector<float> row(props.size());
  for (size_t v = 0; v < vertex_count; ++v) {
    in.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
    if (!in) throw IoError("truncated PLY: " + path);
    DynamicGaussian g;
    size_t i = 0;
    for (int k = 0; k < 3; ++k) g.mu[k] = row[i++];
    for (int k = 0; k < 3; ++k) g.log_scale[k] = row[i++];
    const double qw = row[i++], qx = row[i++], qy = row[i++], qz = row[i++];
    g.rot_q = Quat(qw, qx, qy, qz).normalized();
    g.logit_opacity = row[i++];
    g.sh.resize(K);
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < 3; ++c) g.sh[k][c] = row[i++];
    for (int k = 0; k < 3; ++k) g.v[k] = row[i++];
    g.tau = row[i++];
    g.log_beta = row[i++];
    gs.push_back(std::move(g));
  }
  return scene;
}

}  // namespace dgs
