#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Quat = Eigen::Quaterniond;

using Rng = std::mt19937_64;

// ---------------------------------------------------------------- errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BehindCamera : Error { using Error::Error; };
struct NonPositiveDepth : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct StaleState : Error { using Error::Error; };
struct EmptyDataset : Error { using Error::Error; };
struct EmptyScene : Error { using Error::Error; };
struct DegenerateDepth : Error { using Error::Error; };
struct DegenerateGeometry : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };

// ---------------------------------------------------------------- images

/// Dense row-major 2D buffer. Pixel (x, y) covers [x, x+1) x [y, y+1);
/// its sample point is the center (x + 0.5, y + 0.5).
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> px;

  Image() = default;
  Image(int w, int h, const T& fill = T{}) : width(w), height(h), px(size_t(w) * h, fill) {}

  T& at(int x, int y) { return px[size_t(y) * width + x]; }
  const T& at(int x, int y) const { return px[size_t(y) * width + x]; }

  size_t size() const { return px.size(); }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height; }

  void fill(const T& v) { std::fill(px.begin(), px.end(), v); }
};

using ImageRGB = Image<Vec3>;     // channels in [0,1]
using ImageF = Image<double>;
using ImageU8 = Image<uint8_t>;

template <typename T>
void require_same_shape(const Image<T>& a, const Image<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeMismatch(std::string(what) + ": buffer shapes differ");
}

// ---------------------------------------------------------------- scalar helpers

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double sq(double x) { return x * x; }

inline double deg_to_rad(double d) { return d * M_PI / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / M_PI; }

}  // namespace dgs
