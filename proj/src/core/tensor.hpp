#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfen {

// Rank-4 shape in (batch, channel, height, width) order. Lower-rank values
// (biases, norm scales) use size-1 trailing/leading dims.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(h) * w;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

// Dense row-major rank-4 tensor. Data is public: the op kernels index it
// directly and the constructors keep the size/shape invariant.
template <typename S>
class Tensor {
 public:
  Shape shape;
  std::vector<S> data;

  Tensor() = default;

  explicit Tensor(Shape s, S fill = S(0)) : shape(s), data(s.numel(), fill) {
    require(s.n >= 1 && s.c >= 1 && s.h >= 1 && s.w >= 1,
            "tensor dims must all be >= 1, got " + s.str());
  }

  static Tensor zeros(Shape s) { return Tensor(s); }

  static Tensor full(Shape s, S v) { return Tensor(s, v); }

  std::size_t numel() const { return data.size(); }

  S& at(int in, int ic, int iy, int ix) {
    return data[((static_cast<std::size_t>(in) * shape.c + ic) * shape.h + iy) * shape.w + ix];
  }
  const S& at(int in, int ic, int iy, int ix) const {
    return data[((static_cast<std::size_t>(in) * shape.c + ic) * shape.h + iy) * shape.w + ix];
  }

  // Pointer to the start of one (n,c) plane of h*w scalars.
  S* plane(int in, int ic) {
    return data.data() + (static_cast<std::size_t>(in) * shape.c + ic) * shape.h * shape.w;
  }
  const S* plane(int in, int ic) const {
    return data.data() + (static_cast<std::size_t>(in) * shape.c + ic) * shape.h * shape.w;
  }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const S& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

// Forward ops assert finite outputs in debug builds only.
template <typename S>
inline void debug_check_finite(const Tensor<S>& t, const char* op) {
#ifndef NDEBUG
  if (!t.all_finite())
    throw std::runtime_error(std::string(op) + ": non-finite value in output tensor");
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace mfen
