#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <vector>

namespace udaseg {

// Dense row-major double tensor, rank 1..4. Small and explicit on purpose:
// every layer in the model spells out its own loops or maps the buffer into
// an Eigen matrix for the GEMM.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_from(shape_), 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  size_t numel() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double& at(int i, int j) {
    return data_[static_cast<size_t>(i) * su(1) + static_cast<size_t>(j)];
  }
  double at(int i, int j) const {
    return data_[static_cast<size_t>(i) * su(1) + static_cast<size_t>(j)];
  }
  double& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * su(1) + static_cast<size_t>(j)) * su(2) +
                 static_cast<size_t>(k)];
  }
  double at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * su(1) + static_cast<size_t>(j)) * su(2) +
                 static_cast<size_t>(k)];
  }
  double& at(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * su(1) + static_cast<size_t>(j)) * su(2) +
                  static_cast<size_t>(k)) *
                     su(3) +
                 static_cast<size_t>(l)];
  }
  double at(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * su(1) + static_cast<size_t>(j)) * su(2) +
                  static_cast<size_t>(k)) *
                     su(3) +
                 static_cast<size_t>(l)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void add_scaled(const Tensor& other, double scale) {
    assert(same_shape(other));
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

 private:
  size_t su(int i) const { return static_cast<size_t>(shape_[static_cast<size_t>(i)]); }

  static size_t numel_from(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

// Per-pixel class IDs. Values are class IDs < num_classes or the taxonomy's
// ignore_id; 8-bit on purpose to match the on-disk label map format.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> ids;

  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill_value = 0)
      : h(height), w(width),
        ids(static_cast<size_t>(height) * static_cast<size_t>(width), fill_value) {}

  std::uint8_t& at(int y, int x) { return ids[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)]; }
  std::uint8_t at(int y, int x) const { return ids[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)]; }
  size_t numel() const { return ids.size(); }

  bool operator==(const LabelMap& o) const { return h == o.h && w == o.w && ids == o.ids; }
};

// H×W images with 3 channels in [0,1], stored as (H, W, 3) tensors.
using Image = Tensor;

inline Image make_image(int h, int w) { return Tensor({h, w, 3}); }

}  // namespace udaseg
