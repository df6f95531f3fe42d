#include "focal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace focal {

namespace {

std::size_t checked_count(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e < 1) throw std::invalid_argument("tensor extents must be >= 1");
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_count(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (checked_count(shape_) != data_.size()) {
    throw std::invalid_argument("tensor data length does not match shape " +
                                shape_str());
  }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t a = 0; a < shape_.size(); ++a) {
    if (a) os << ", ";
    os << shape_[a];
  }
  os << "]";
  return os.str();
}

namespace {

std::atomic<int> g_threads{1};

}  // namespace

void set_thread_count(int n) { g_threads.store(n < 1 ? 1 : n); }

int thread_count() { return g_threads.load(); }

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
  if (workers <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  if (weight.rank() != 2) {
    throw std::invalid_argument("linear: weight must be rank-2, got " +
                                weight.shape_str());
  }
  const std::size_t out_dim = weight.extent(0);
  const std::size_t in_dim = weight.extent(1);
  if (x.rank() < 1 || x.extent(x.rank() - 1) != in_dim) {
    throw std::invalid_argument("linear: input " + x.shape_str() +
                                " does not match weight " + weight.shape_str());
  }
  if (bias && (bias->rank() != 1 || bias->extent(0) != out_dim)) {
    throw std::invalid_argument("linear: bias " + bias->shape_str() +
                                " does not match weight " + weight.shape_str());
  }

  std::vector<std::size_t> out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor y(out_shape);

  const std::size_t rows = x.size() / in_dim;
  const double* xd = x.data();
  const double* wd = weight.data();
  const double* bd = bias ? bias->data() : nullptr;
  double* yd = y.data();

  const auto run_rows = [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const double* xr = xd + r * in_dim;
      double* yr = yd + r * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double* wr = wd + o * in_dim;
        double acc = 0.0;
        for (std::size_t i = 0; i < in_dim; ++i) acc += xr[i] * wr[i];
        yr[o] = bd ? acc + bd[o] : acc;
      }
    }
  };
  // Small maps (one window's worth of rows, say) are not worth a spawn.
  if (rows * out_dim * in_dim < (1u << 22)) {
    run_rows(0, rows);
  } else {
    parallel_for(rows, run_rows);
  }
  return y;
}

Tensor masked_softmax(const Tensor& logits, const Mask* mask) {
  if (mask && mask->size() != logits.size()) {
    throw std::invalid_argument(
        "masked_softmax: mask length does not match logits " +
        logits.shape_str());
  }
  const std::size_t n = logits.extent(logits.rank() - 1);
  const std::size_t rows = logits.size() / n;
  Tensor out(logits.shape());
  const double* ld = logits.data();
  const std::uint8_t* md = mask ? mask->data() : nullptr;
  double* od = out.data();

  for (std::size_t r = 0; r < rows; ++r) {
    const double* lr = ld + r * n;
    const std::uint8_t* mr = md ? md + r * n : nullptr;
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!mr || mr[i]) row_max = std::max(row_max, lr[i]);
    }
    if (row_max == -std::numeric_limits<double>::infinity()) {
      throw std::domain_error("masked_softmax: fully masked row");
    }
    double* orow = od + r * n;
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mr || mr[i]) {
        orow[i] = std::exp(lr[i] - row_max);
        denom += orow[i];
      } else {
        orow[i] = 0.0;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!mr || mr[i]) orow[i] /= denom;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::size_t d = x.extent(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d) {
    throw std::invalid_argument("layer_norm: parameter length does not match " +
                                x.shape_str());
  }
  Tensor y(x.shape());
  const std::size_t rows = x.size() / d;
  const double* xd = x.data();
  const double* gd = gamma.data();
  const double* bd = beta.data();
  double* yd = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * d;
    double* yr = yd + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      yr[i] = (xr[i] - mean) * inv * gd[i] + bd[i];
    }
  }
  return y;
}

double gelu_scalar(double x) {
  constexpr double kInvSqrt2 = 0.7071067811865476;
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) yd[i] = gelu_scalar(xd[i]);
  return y;
}

Tensor bilinear_resize(const Tensor& table, std::size_t new_h,
                       std::size_t new_w) {
  if (table.rank() != 2) {
    throw std::invalid_argument("bilinear_resize: table must be rank-2, got " +
                                table.shape_str());
  }
  if (new_h < 1 || new_w < 1) {
    throw std::invalid_argument("bilinear_resize: target extents must be >= 1");
  }
  const std::size_t h = table.extent(0);
  const std::size_t w = table.extent(1);
  Tensor out({new_h, new_w});
  for (std::size_t i = 0; i < new_h; ++i) {
    const double sy = (new_h == 1 || h == 1)
                          ? 0.0
                          : static_cast<double>(i) * static_cast<double>(h - 1) /
                                static_cast<double>(new_h - 1);
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t j = 0; j < new_w; ++j) {
      const double sx = (new_w == 1 || w == 1)
                            ? 0.0
                            : static_cast<double>(j) *
                                  static_cast<double>(w - 1) /
                                  static_cast<double>(new_w - 1);
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      if (fy == 0.0 && fx == 0.0) {
        out(i, j) = table(y0, x0);  // exact-grid hit, keep bit pattern
      } else {
        out(i, j) = (1.0 - fy) * (1.0 - fx) * table(y0, x0) +
                    (1.0 - fy) * fx * table(y0, x1) +
                    fy * (1.0 - fx) * table(y1, x0) + fy * fx * table(y1, x1);
      }
    }
  }
  return out;
}

}  // namespace focal
