#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace focal {

// Dense row-major N-dimensional array of 64-bit floats. The single numeric
// carrier used throughout the library; all extents are >= 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor full(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  template <typename... Ix>
  double& operator()(Ix... ix) {
    return data_[flat(ix...)];
  }
  template <typename... Ix>
  double operator()(Ix... ix) const {
    return data_[flat(ix...)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

 private:
  template <typename... Ix>
  std::size_t flat(Ix... ix) const {
    static_assert(sizeof...(ix) > 0);
    assert(sizeof...(ix) == shape_.size());
    const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(ix); ++a) {
      assert(idx[a] < shape_[a]);
      off = off * shape_[a] + idx[a];
    }
    return off;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Validity flags; laid out row-major like the tensor they annotate.
using Mask = std::vector<std::uint8_t>;

// y[..., o] = sum_i x[..., i] * weight[o, i] + bias[o]. Leading extents of x
// are preserved; weight is [out, in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias);

// Row-wise softmax over the last dimension with max-subtraction. Masked
// entries come out exactly 0; each row must keep at least one valid entry.
Tensor masked_softmax(const Tensor& logits, const Mask* mask = nullptr);

// Per-row (last dimension) normalization with population variance:
// (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

// Exact Gaussian-error-function GELU: x * Phi(x).
Tensor gelu(const Tensor& x);
double gelu_scalar(double x);

// Align-corners bilinear interpolation of a 2-D table. Resizing to the same
// extents reproduces the input bit-exactly; a 1x1 table broadcasts.
Tensor bilinear_resize(const Tensor& table, std::size_t new_h,
                       std::size_t new_w);

// Worker count used by parallel_for. Results are bit-identical at any
// setting: each output element is produced by exactly one worker with a
// fixed inner summation order.
void set_thread_count(int n);
int thread_count();

// Runs fn(begin, end) over a contiguous partition of [0, n).
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace focal
