#pragma once

// Dense 4-D tensor (batch, channel, height, width), row-major with W fastest.
// Storage is 64-bit by default; an optional 32-bit storage mode exists for
// large standing buffers. All arithmetic in the engine runs in f64; f32
// tensors widen on use.
//
// Every owned buffer is registered with AllocLedger, a process-wide byte
// ledger. The ledger's high-water mark is what `measure_peak` in the memory
// model reports, so anything that should count as engine memory must live in
// a Tensor4 (and anything that should not, e.g. dataset backing stores, must
// not).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bicovg {

using std::int64_t;

struct Shape4 {
  int64_t b = 0, c = 0, h = 0, w = 0;

  int64_t elems() const { return b * c * h * w; }

  bool operator==(const Shape4& o) const {
    return b == o.b && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape4& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "(" << b << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

enum class Scalar { f64, f32 };

inline int scalar_bytes(Scalar s) { return s == Scalar::f64 ? 8 : 4; }

class AllocLedger {
 public:
  static void on_alloc(int64_t bytes) {
    int64_t cur = current_.fetch_add(bytes) + bytes;
    int64_t peak = peak_.load();
    while (cur > peak && !peak_.compare_exchange_weak(peak, cur)) {
    }
  }
  static void on_free(int64_t bytes) { current_.fetch_sub(bytes); }

  static int64_t current_bytes() { return current_.load(); }
  static int64_t peak_bytes() { return peak_.load(); }
  static void reset_peak() { peak_.store(current_.load()); }

  // Count of tensors currently held by recording traces. Returns to zero
  // between optimizer steps; tests observe this to prove trace release.
  static void on_trace_hold() { trace_count_.fetch_add(1); }
  static void on_trace_release(int64_t n) { trace_count_.fetch_sub(n); }
  static int64_t trace_count() { return trace_count_.load(); }

 private:
  static inline std::atomic<int64_t> current_{0};
  static inline std::atomic<int64_t> peak_{0};
  static inline std::atomic<int64_t> trace_count_{0};
};

namespace detail {

template <typename T>
struct CountedBuf {
  std::vector<T> v;
  explicit CountedBuf(std::size_t n) : v(n) {
    AllocLedger::on_alloc(static_cast<int64_t>(n * sizeof(T)));
  }
  ~CountedBuf() {
    AllocLedger::on_free(static_cast<int64_t>(v.size() * sizeof(T)));
  }
  CountedBuf(const CountedBuf&) = delete;
  CountedBuf& operator=(const CountedBuf&) = delete;
};

}  // namespace detail

class Tensor4 {
 public:
  Tensor4() = default;

  static Tensor4 zeros(Shape4 s, Scalar mode = Scalar::f64) {
    Tensor4 t;
    t.init(s, mode);
    return t;
  }

  static Tensor4 full(Shape4 s, double v, Scalar mode = Scalar::f64) {
    Tensor4 t;
    t.init(s, mode);
    if (mode == Scalar::f64) {
      for (auto& x : t.d64_->v) x = v;
    } else {
      for (auto& x : t.d32_->v) x = static_cast<float>(v);
    }
    return t;
  }

  // Construction from external data validates every entry is finite.
  static Tensor4 from_data(Shape4 s, const double* src, std::size_t n,
                           Scalar mode = Scalar::f64) {
    if (static_cast<int64_t>(n) != s.elems())
      throw std::invalid_argument("Tensor4: data length " + std::to_string(n) +
                                  " does not match shape " + s.str());
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(src[i]))
        throw std::invalid_argument("Tensor4: non-finite entry at flat index " +
                                    std::to_string(i));
    Tensor4 t;
    t.init(s, mode);
    if (mode == Scalar::f64) {
      std::memcpy(t.d64_->v.data(), src, n * sizeof(double));
    } else {
      for (std::size_t i = 0; i < n; ++i)
        t.d32_->v[i] = static_cast<float>(src[i]);
    }
    return t;
  }

  static Tensor4 from_vector(Shape4 s, const std::vector<double>& v,
                             Scalar mode = Scalar::f64) {
    return from_data(s, v.data(), v.size(), mode);
  }

  bool empty() const { return !d64_ && !d32_; }
  const Shape4& shape() const { return shape_; }
  int64_t elems() const { return shape_.elems(); }
  Scalar scalar() const { return d32_ ? Scalar::f32 : Scalar::f64; }
  int64_t bytes() const { return elems() * scalar_bytes(scalar()); }

  // Raw f64 access for kernels. Throws on f32 tensors; widen first.
  double* data() {
    require_f64();
    return d64_->v.data();
  }
  const double* data() const {
    require_f64();
    return d64_->v.data();
  }

  double at(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return flat(index(b, c, h, w));
  }
  void set(int64_t b, int64_t c, int64_t h, int64_t w, double v) {
    check_index(b, c, h, w);
    int64_t i = index_unchecked(b, c, h, w);
    if (d64_)
      d64_->v[static_cast<std::size_t>(i)] = v;
    else
      d32_->v[static_cast<std::size_t>(i)] = static_cast<float>(v);
  }

  double flat(int64_t i) const {
    if (i < 0 || i >= elems())
      throw std::out_of_range("Tensor4: flat index " + std::to_string(i) +
                              " out of range for shape " + shape_.str());
    return d64_ ? d64_->v[static_cast<std::size_t>(i)]
                : static_cast<double>(d32_->v[static_cast<std::size_t>(i)]);
  }

  int64_t index(int64_t b, int64_t c, int64_t h, int64_t w) const {
    check_index(b, c, h, w);
    return index_unchecked(b, c, h, w);
  }

  Tensor4 to_scalar(Scalar mode) const {
    if (empty()) throw std::logic_error("Tensor4: to_scalar on empty tensor");
    if (mode == scalar()) return *this;
    Tensor4 t;
    t.init(shape_, mode);
    int64_t n = elems();
    if (mode == Scalar::f64) {
      for (int64_t i = 0; i < n; ++i)
        t.d64_->v[i] = static_cast<double>(d32_->v[i]);
    } else {
      for (int64_t i = 0; i < n; ++i)
        t.d32_->v[i] = static_cast<float>(d64_->v[i]);
    }
    return t;
  }

  // Same tensor if already f64, otherwise a widened copy.
  Tensor4 as_f64() const { return d64_ ? *this : to_scalar(Scalar::f64); }

  bool shares_storage(const Tensor4& o) const {
    return (d64_ && d64_ == o.d64_) || (d32_ && d32_ == o.d32_);
  }

 private:
  void init(Shape4 s, Scalar mode) {
    if (s.b <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
      throw std::invalid_argument("Tensor4: non-positive dimension in shape " +
                                  s.str());
    shape_ = s;
    auto n = static_cast<std::size_t>(s.elems());
    if (mode == Scalar::f64)
      d64_ = std::make_shared<detail::CountedBuf<double>>(n);
    else
      d32_ = std::make_shared<detail::CountedBuf<float>>(n);
  }

  void require_f64() const {
    if (!d64_)
      throw std::logic_error(
          "Tensor4: raw data access requires f64 storage (tensor is " +
          std::string(d32_ ? "f32" : "empty") + ")");
  }

  void check_index(int64_t b, int64_t c, int64_t h, int64_t w) const {
    if (b < 0 || b >= shape_.b || c < 0 || c >= shape_.c || h < 0 ||
        h >= shape_.h || w < 0 || w >= shape_.w) {
      std::ostringstream os;
      os << "Tensor4: index (" << b << "," << c << "," << h << "," << w
         << ") out of range for shape " << shape_.str();
      throw std::out_of_range(os.str());
    }
  }

  int64_t index_unchecked(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return ((b * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape4 shape_{};
  std::shared_ptr<detail::CountedBuf<double>> d64_;
  std::shared_ptr<detail::CountedBuf<float>> d32_;
};

// Elementwise helpers used across the engine. All operate in f64.

inline Tensor4 zeros_like(const Tensor4& t) {
  return Tensor4::zeros(t.shape());
}

inline void add_into(Tensor4& dst, const Tensor4& src) {
  if (dst.shape() != src.shape())
    throw std::invalid_argument("add_into: shape mismatch " +
                                dst.shape().str() + " vs " +
                                src.shape().str());
  double* d = dst.data();
  const double* s = src.data();
  int64_t n = dst.elems();
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

inline void scale_into(Tensor4& dst, double k) {
  double* d = dst.data();
  int64_t n = dst.elems();
  for (int64_t i = 0; i < n; ++i) d[i] *= k;
}

inline bool all_finite(const Tensor4& t) {
  int64_t n = t.elems();
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(t.flat(i))) return false;
  return true;
}

inline bool bitwise_equal(const Tensor4& a, const Tensor4& b) {
  if (a.shape() != b.shape() || a.scalar() != b.scalar()) return false;
  int64_t n = a.elems();
  for (int64_t i = 0; i < n; ++i) {
    double x = a.flat(i), y = b.flat(i);
    if (std::memcmp(&x, &y, sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace bicovg
