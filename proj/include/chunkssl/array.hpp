#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "chunkssl/error.hpp"

namespace chunkssl {

/// Dense row-major array. Every primitive in this library works on rank-2
/// arrays; vectors are 1 x n rows and scalars are 1 x 1.
template <class T>
class Array {
 public:
  using value_type = T;

  Array() = default;

  Array(std::size_t rows, std::size_t cols, T fill = T(0))
      : shape_{rows, cols}, data_(rows * cols, fill) {}

  Array(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (extent_product(shape_) != data_.size()) {
      throw ConfigError("array: shape " + shape_string(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
    }
  }

  Array(std::initializer_list<std::initializer_list<T>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    shape_ = {r, c};
    data_.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ConfigError("array: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Array scalar(T v) { return Array(1, 1, v); }

  static Array row(std::span<const T> values) {
    return Array({1, values.size()}, std::vector<T>(values.begin(), values.end()));
  }

  static Array identity(std::size_t n) {
    Array a(n, n);
    for (std::size_t i = 0; i < n; ++i) a(i, i) = T(1);
    return a;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row_span(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  T item() const {
    if (data_.size() != 1) throw UsageError("array: item() on non-scalar " + shape_string(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Array& operator+=(const Array& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <class U>
  Array<U> cast() const {
    return Array<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t extent_product(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  static std::string shape_string(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
  }

  static void require_same_shape(const Array& a, const Array& b, const char* what) {
    if (a.shape_ != b.shape_) {
      throw ConfigError(std::string(what) + ": shape mismatch " + shape_string(a.shape_) +
                        " vs " + shape_string(b.shape_));
    }
  }

 private:
  std::vector<std::size_t> shape_{0, 0};
  std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Array<T>& a, const Array<T>& b) {
  Array<T>::require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
Array<T> take_rows(const Array<T>& a, std::size_t begin, std::size_t end) {
  Array<T> out(end - begin, a.cols());
  std::copy(a.data().begin() + begin * a.cols(), a.data().begin() + end * a.cols(),
            out.data().begin());
  return out;
}

}  // namespace chunkssl
