#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ponder {

// Dense row-major 2D array of doubles. Scalars are 1x1, vectors 1xD.
// Value semantics throughout; copies are deep.
class Array {
 public:
  Array() : rows_(0), cols_(0) {}
  Array(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("Array: non-positive shape");
  }
  Array(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("Array: non-positive shape");
    if (data_.size() != static_cast<size_t>(rows) * cols)
      throw std::invalid_argument("Array: data length does not match shape");
  }

  static Array scalar(double v) { return Array(1, 1, {v}); }
  static Array row(std::vector<double> v) {
    int n = static_cast<int>(v.size());
    return Array(1, n, std::move(v));
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }

  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw std::logic_error("Array::item on non-scalar");
    return data_[0];
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool same_shape(const Array& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

 private:
  int rows_, cols_;
  std::vector<double> data_;
};

inline void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace ponder
