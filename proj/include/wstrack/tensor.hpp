#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wstrack {

// Dense 4-D tensor, row-major (n, c, h, w), double precision.
// All training-path arithmetic runs on these; frames may be stored as
// 8-bit images on disk but are widened on load.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(check_dims(n_, c_, h_, w_)), fill) {}

  static int64_t check_dims(int n, int c, int h, int w) {
    if (n <= 0 || c <= 0 || h <= 0 || w <= 0)
      throw std::invalid_argument("Tensor4: dims must be strictly positive, got (" +
                                  std::to_string(n) + "," + std::to_string(c) + "," +
                                  std::to_string(h) + "," + std::to_string(w) + ")");
    return int64_t(n) * c * h * w;
  }

  int64_t size() const { return int64_t(n) * c * h * w; }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }

  double& at(int in, int ic, int iy, int ix) {
    return v[((int64_t(in) * c + ic) * h + iy) * w + ix];
  }
  double at(int in, int ic, int iy, int ix) const {
    return v[((int64_t(in) * c + ic) * h + iy) * w + ix];
  }

  double* channel(int in, int ic) { return v.data() + (int64_t(in) * c + ic) * h * w; }
  const double* channel(int in, int ic) const { return v.data() + (int64_t(in) * c + ic) * h * w; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  Tensor4& operator+=(const Tensor4& o) {
    require_same_shape(o, "operator+=");
    for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
    return *this;
  }
  Tensor4& operator-=(const Tensor4& o) {
    require_same_shape(o, "operator-=");
    for (size_t i = 0; i < v.size(); ++i) v[i] -= o.v[i];
    return *this;
  }
  Tensor4& operator*=(double s) {
    for (double& x : v) x *= s;
    return *this;
  }

  void require_same_shape(const Tensor4& o, const char* who) const {
    if (!same_shape(o))
      throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str() + " vs " +
                                  o.shape_str());
  }
};

inline Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.n, t.c, t.h, t.w); }

inline Tensor4 operator+(Tensor4 a, const Tensor4& b) { return a += b; }
inline Tensor4 operator-(Tensor4 a, const Tensor4& b) { return a -= b; }
inline Tensor4 operator*(Tensor4 a, double s) { return a *= s; }

inline Tensor4 hadamard(const Tensor4& a, const Tensor4& b) {
  a.require_same_shape(b, "hadamard");
  Tensor4 out = zeros_like(a);
  for (size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
  return out;
}

inline double dot(const Tensor4& a, const Tensor4& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
  return s;
}

inline double l2_norm(const Tensor4& t) {
  double s = 0.0;
  for (double x : t.v) s += x * x;
  return std::sqrt(s);
}

// Trainable tensor with gradient and momentum buffers of identical shape.
struct Parameter {
  std::string name;
  Tensor4 value;
  Tensor4 grad;
  Tensor4 velocity;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string name_, Tensor4 value_)
      : name(std::move(name_)), value(std::move(value_)), grad(zeros_like(value)),
        velocity(zeros_like(value)) {}

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace wstrack
