#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "shrinkforge/tape.hpp"
#include "shrinkforge/tensor.hpp"

namespace shrinkforge {

using MatX = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Collects the relu activation pattern of one forward pass. Used by the
// gradient checker to detect kink crossings between perturbed evaluations.
struct ForwardProbe {
  std::vector<std::uint8_t> relu_pattern;
};

namespace detail {

struct ConvDims {
  std::size_t n, c_in, h, w;  // input
  std::size_t c_out, k;       // kernel
  std::size_t stride, pad;
  std::size_t h_out, w_out;
};

inline ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride,
                          int padding, const std::string& name) {
  require(input.rank() == 4, ErrorKind::Shape,
          name + ": conv input must be [N,C,H,W], got " + input.shape_str());
  require(kernel.rank() == 4, ErrorKind::Shape,
          name + ": conv kernel must be [Cout,Cin,k,k], got " + kernel.shape_str());
  require(kernel.dim(2) == kernel.dim(3), ErrorKind::Shape,
          name + ": conv kernel must be square, got " + kernel.shape_str());
  require(stride >= 1, ErrorKind::Shape, name + ": stride must be positive");
  require(padding >= 0, ErrorKind::Shape, name + ": padding must be non-negative");
  ConvDims d;
  d.n = input.dim(0);
  d.c_in = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.c_out = kernel.dim(0);
  d.k = kernel.dim(2);
  d.stride = static_cast<std::size_t>(stride);
  d.pad = static_cast<std::size_t>(padding);
  require(kernel.dim(1) == d.c_in, ErrorKind::Shape,
          name + ": kernel expects " + std::to_string(kernel.dim(1)) +
              " input channels, input has " + std::to_string(d.c_in));
  require(d.k <= d.h + 2 * d.pad && d.k <= d.w + 2 * d.pad, ErrorKind::Shape,
          name + ": kernel size " + std::to_string(d.k) +
              " exceeds padded input " + input.shape_str());
  d.h_out = (d.h + 2 * d.pad - d.k) / d.stride + 1;
  d.w_out = (d.w + 2 * d.pad - d.k) / d.stride + 1;
  return d;
}

// Patch matrix: column j = output position (n, oy, ox), rows = (c, ky, kx).
inline void im2col(const Tensor& input, const ConvDims& d, MatX& col) {
  const std::size_t patch = d.c_in * d.k * d.k;
  col.resize(static_cast<Eigen::Index>(patch),
             static_cast<Eigen::Index>(d.n * d.h_out * d.w_out));
  const double* x = input.data.data();
  const std::size_t chw = d.c_in * d.h * d.w;
  const auto sk = static_cast<std::ptrdiff_t>(d.k);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oy = 0; oy < d.h_out; ++oy) {
      const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * d.stride) -
                                 static_cast<std::ptrdiff_t>(d.pad);
      const std::ptrdiff_t ky_lo = std::max<std::ptrdiff_t>(0, -iy0);
      const std::ptrdiff_t ky_hi =
          std::min<std::ptrdiff_t>(sk, static_cast<std::ptrdiff_t>(d.h) - iy0);
      for (std::size_t ox = 0; ox < d.w_out; ++ox) {
        const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * d.stride) -
                                   static_cast<std::ptrdiff_t>(d.pad);
        const std::ptrdiff_t kx_lo = std::max<std::ptrdiff_t>(0, -ix0);
        const std::ptrdiff_t kx_hi =
            std::min<std::ptrdiff_t>(sk, static_cast<std::ptrdiff_t>(d.w) - ix0);
        const std::size_t j = (n * d.h_out + oy) * d.w_out + ox;
        double* dst = col.data() + j * patch;
        if (ky_lo == 0 && kx_lo == 0 && ky_hi == sk && kx_hi == sk) {
          // interior position: every tap valid
          for (std::size_t c = 0; c < d.c_in; ++c) {
            const double* plane = x + n * chw + c * d.h * d.w +
                                  iy0 * static_cast<std::ptrdiff_t>(d.w) + ix0;
            for (std::ptrdiff_t ky = 0; ky < sk; ++ky, dst += d.k) {
              const double* src = plane + ky * static_cast<std::ptrdiff_t>(d.w);
              for (std::ptrdiff_t kx = 0; kx < sk; ++kx) dst[kx] = src[kx];
            }
          }
          continue;
        }
        for (std::size_t c = 0; c < d.c_in; ++c) {
          const double* plane = x + n * chw + c * d.h * d.w;
          for (std::ptrdiff_t ky = 0; ky < sk; ++ky, dst += d.k) {
            if (ky < ky_lo || ky >= ky_hi) {
              for (std::ptrdiff_t kx = 0; kx < sk; ++kx) dst[kx] = 0.0;
              continue;
            }
            const double* src = plane + (iy0 + ky) * static_cast<std::ptrdiff_t>(d.w) + ix0;
            for (std::ptrdiff_t kx = 0; kx < kx_lo; ++kx) dst[kx] = 0.0;
            for (std::ptrdiff_t kx = kx_lo; kx < kx_hi; ++kx) dst[kx] = src[kx];
            for (std::ptrdiff_t kx = kx_hi; kx < sk; ++kx) dst[kx] = 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const MatX& dcol, const ConvDims& d, Tensor& dx) {
  const std::size_t patch = d.c_in * d.k * d.k;
  double* g = dx.data.data();
  const std::size_t chw = d.c_in * d.h * d.w;
  const auto sk = static_cast<std::ptrdiff_t>(d.k);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oy = 0; oy < d.h_out; ++oy) {
      const std::ptrdiff_t iy0 = static_cast<std::ptrdiff_t>(oy * d.stride) -
                                 static_cast<std::ptrdiff_t>(d.pad);
      const std::ptrdiff_t ky_lo = std::max<std::ptrdiff_t>(0, -iy0);
      const std::ptrdiff_t ky_hi =
          std::min<std::ptrdiff_t>(sk, static_cast<std::ptrdiff_t>(d.h) - iy0);
      for (std::size_t ox = 0; ox < d.w_out; ++ox) {
        const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(ox * d.stride) -
                                   static_cast<std::ptrdiff_t>(d.pad);
        const std::ptrdiff_t kx_lo = std::max<std::ptrdiff_t>(0, -ix0);
        const std::ptrdiff_t kx_hi =
            std::min<std::ptrdiff_t>(sk, static_cast<std::ptrdiff_t>(d.w) - ix0);
        const std::size_t j = (n * d.h_out + oy) * d.w_out + ox;
        const double* src = dcol.data() + j * patch;
        for (std::size_t c = 0; c < d.c_in; ++c) {
          double* plane = g + n * chw + c * d.h * d.w;
          for (std::ptrdiff_t ky = ky_lo; ky < ky_hi; ++ky) {
            double* row = plane + (iy0 + ky) * static_cast<std::ptrdiff_t>(d.w) + ix0;
            const double* s = src + c * d.k * d.k + ky * sk;
            for (std::ptrdiff_t kx = kx_lo; kx < kx_hi; ++kx) row[kx] += s[kx];
          }
        }
      }
    }
  }
}

// Deterministic 4-lane sum; breaks the FP dependency chain without changing
// the result across runs.
inline double lane_sum(const double* p, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += p[i];
    s1 += p[i + 1];
    s2 += p[i + 2];
    s3 += p[i + 3];
  }
  for (; i < n; ++i) s0 += p[i];
  return (s0 + s1) + (s2 + s3);
}

inline void lane_sum_sq(const double* p, std::size_t n, double& sum, double& sumsq) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  double q0 = 0.0, q1 = 0.0, q2 = 0.0, q3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += p[i];
    q0 += p[i] * p[i];
    s1 += p[i + 1];
    q1 += p[i + 1] * p[i + 1];
    s2 += p[i + 2];
    q2 += p[i + 2] * p[i + 2];
    s3 += p[i + 3];
    q3 += p[i + 3] * p[i + 3];
  }
  for (; i < n; ++i) {
    s0 += p[i];
    q0 += p[i] * p[i];
  }
  sum += (s0 + s1) + (s2 + s3);
  sumsq += (q0 + q1) + (q2 + q3);
}

inline void lane_dot2(const double* a, const double* b, std::size_t n, double& sum_a,
                      double& dot) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  double d0 = 0.0, d1 = 0.0, d2 = 0.0, d3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i];
    d0 += a[i] * b[i];
    s1 += a[i + 1];
    d1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2];
    d2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3];
    d3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) {
    s0 += a[i];
    d0 += a[i] * b[i];
  }
  sum_a += (s0 + s1) + (s2 + s3);
  dot += (d0 + d1) + (d2 + d3);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value functions (tape-free); the tape ops below wrap them.
// ---------------------------------------------------------------------------

inline Tensor conv2d_value(const Tensor& input, const Tensor& kernel, int stride,
                           int padding, const std::string& name = "conv",
                           std::shared_ptr<MatX>* keep_col = nullptr,
                           std::uint64_t* macs = nullptr) {
  const auto d = detail::conv_dims(input, kernel, stride, padding, name);
  auto col = std::make_shared<MatX>();
  detail::im2col(input, d, *col);
  const std::size_t patch = d.c_in * d.k * d.k;
  const std::size_t hw = d.h_out * d.w_out;
  Eigen::Map<const RowMat> kmat(kernel.data.data(),
                                static_cast<Eigen::Index>(d.c_out),
                                static_cast<Eigen::Index>(patch));
  MatX y = kmat * (*col);  // c_out x (n*hw)
  Tensor out = Tensor::uninit({d.n, d.c_out, d.h_out, d.w_out});
  for (std::size_t n = 0; n < d.n; ++n) {
    Eigen::Map<RowMat> block(out.data.data() + n * d.c_out * hw,
                             static_cast<Eigen::Index>(d.c_out),
                             static_cast<Eigen::Index>(hw));
    block = y.middleCols(static_cast<Eigen::Index>(n * hw),
                         static_cast<Eigen::Index>(hw));
  }
  if (macs) *macs += static_cast<std::uint64_t>(d.n) * patch * d.c_out * hw;
  if (keep_col) *keep_col = std::move(col);
  return out;
}

struct BnStats {
  std::vector<double> mean, inv_std;
};

// Train-mode batch normalization over N*H*W per channel (biased variance).
// Updates the running stats in place: new = momentum*old + (1-momentum)*batch.
inline Tensor batchnorm_train_value(const Tensor& input, const Tensor& gamma,
                                    const Tensor& beta, Tensor& running_mean,
                                    Tensor& running_var, double momentum,
                                    double epsilon, BnStats* stats_out = nullptr) {
  require(input.rank() == 4, ErrorKind::Shape, "batchnorm input must be [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  require(gamma.numel() == c && beta.numel() == c, ErrorKind::Shape,
          "batchnorm gamma/beta length must equal channel count " + std::to_string(c));
  require(epsilon > 0.0, ErrorKind::Config, "batchnorm epsilon must be positive");
  const std::size_t m = n * h * w;
  const std::size_t hw = h * w;
  BnStats stats;
  stats.mean.assign(c, 0.0);
  stats.inv_std.assign(c, 0.0);
  std::vector<double> var(c, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t ni = 0; ni < n; ++ni)
      detail::lane_sum_sq(input.data.data() + (ni * c + ci) * hw, hw, sum, sumsq);
    const double mean = sum / static_cast<double>(m);
    stats.mean[ci] = mean;
    var[ci] = std::max(0.0, sumsq / static_cast<double>(m) - mean * mean);
    stats.inv_std[ci] = 1.0 / std::sqrt(var[ci] + epsilon);
  }
  for (std::size_t ci = 0; ci < c; ++ci) {
    running_mean.data[ci] =
        momentum * running_mean.data[ci] + (1.0 - momentum) * stats.mean[ci];
    running_var.data[ci] = momentum * running_var.data[ci] + (1.0 - momentum) * var[ci];
  }
  Tensor out = Tensor::uninit({n, c, h, w});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* p = input.data.data() + (ni * c + ci) * hw;
      double* o = out.data.data() + (ni * c + ci) * hw;
      const double mean = stats.mean[ci], istd = stats.inv_std[ci];
      const double g = gamma.data[ci], b = beta.data[ci];
      for (std::size_t i = 0; i < hw; ++i) o[i] = g * (p[i] - mean) * istd + b;
    }
  if (stats_out) *stats_out = std::move(stats);
  return out;
}

inline Tensor batchnorm_eval_value(const Tensor& input, const Tensor& gamma,
                                   const Tensor& beta, const Tensor& running_mean,
                                   const Tensor& running_var, double epsilon) {
  require(input.rank() == 4, ErrorKind::Shape, "batchnorm input must be [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1),
                    hw = input.dim(2) * input.dim(3);
  require(gamma.numel() == c && beta.numel() == c, ErrorKind::Shape,
          "batchnorm gamma/beta length must equal channel count " + std::to_string(c));
  Tensor out = Tensor::uninit(input.shape);
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double istd = 1.0 / std::sqrt(running_var.data[ci] + epsilon);
    const double g = gamma.data[ci], b = beta.data[ci], mean = running_mean.data[ci];
    for (std::size_t ni = 0; ni < n; ++ni) {
      const double* p = input.data.data() + (ni * c + ci) * hw;
      double* o = out.data.data() + (ni * c + ci) * hw;
      for (std::size_t i = 0; i < hw; ++i) o[i] = g * (p[i] - mean) * istd + b;
    }
  }
  return out;
}

inline Tensor relu_value(const Tensor& input, ForwardProbe* probe = nullptr) {
  Tensor out = Tensor::uninit(input.shape);
  for (std::size_t i = 0; i < input.numel(); ++i)
    out.data[i] = input.data[i] > 0.0 ? input.data[i] : 0.0;
  if (probe)
    for (std::size_t i = 0; i < input.numel(); ++i)
      probe->relu_pattern.push_back(input.data[i] > 0.0 ? 1 : 0);
  return out;
}

inline Tensor avgpool2_value(const Tensor& input) {
  require(input.rank() == 4, ErrorKind::Shape, "avgpool input must be [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  require(h >= 2 && w >= 2, ErrorKind::Shape, "avgpool needs at least 2x2 input");
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out = Tensor::uninit({n, c, ho, wo});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = input.data.data() + p * h * w;
    double* dst = out.data.data() + p * ho * wo;
    for (std::size_t y = 0; y < ho; ++y) {
      const double* r0 = src + 2 * y * w;
      const double* r1 = r0 + w;
      for (std::size_t x = 0; x < wo; ++x)
        dst[y * wo + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
    }
  }
  return out;
}

inline Tensor dense_value(const Tensor& input, const Tensor& weight,
                          const Tensor& bias, std::uint64_t* macs = nullptr) {
  require(input.rank() == 2, ErrorKind::Shape, "dense input must be [N,F]");
  const std::size_t n = input.dim(0), f = input.dim(1), o = weight.dim(0);
  require(weight.rank() == 2 && weight.dim(1) == f, ErrorKind::Shape,
          "dense weight must be [out," + std::to_string(f) + "], got " +
              weight.shape_str());
  require(bias.numel() == o, ErrorKind::Shape, "dense bias length mismatch");
  Tensor out = Tensor::uninit({n, o});
  Eigen::Map<const RowMat> x(input.data.data(), static_cast<Eigen::Index>(n),
                             static_cast<Eigen::Index>(f));
  Eigen::Map<const RowMat> wm(weight.data.data(), static_cast<Eigen::Index>(o),
                              static_cast<Eigen::Index>(f));
  Eigen::Map<RowMat> y(out.data.data(), static_cast<Eigen::Index>(n),
                       static_cast<Eigen::Index>(o));
  y.noalias() = x * wm.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) out.at2(i, j) += bias.data[j];
  if (macs) *macs += static_cast<std::uint64_t>(n) * f * o;
  return out;
}

inline Tensor softmax_value(const Tensor& logits, double temperature = 1.0) {
  require(logits.rank() == 2, ErrorKind::Shape, "softmax input must be [N,C]");
  require(temperature > 0.0, ErrorKind::Config, "softmax temperature must be positive");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor out = Tensor::uninit({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits.at2(i, j) / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(logits.at2(i, j) / temperature - mx);
      out.at2(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) out.at2(i, j) /= sum;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------

inline Var conv2d(Tape& tape, Var input, Var kernel, int stride, int padding,
                  const std::string& name = "conv") {
  const Tensor& x = tape.value(input);
  const Tensor& k = tape.value(kernel);
  const auto d = detail::conv_dims(x, k, stride, padding, name);
  std::shared_ptr<MatX> col;
  std::uint64_t macs = 0;
  Tensor out = conv2d_value(x, k, stride, padding, name, &col, &macs);
  tape.add_macs(macs);
  const int xid = input.id, kid = kernel.id;
  return tape.push(std::move(out), {xid, kid},
                   [d, col, xid, kid](Tape& t, const Tape::Node& node) {
                     const std::size_t patch = d.c_in * d.k * d.k;
                     const std::size_t hw = d.h_out * d.w_out;
                     MatX dy(static_cast<Eigen::Index>(d.c_out),
                             static_cast<Eigen::Index>(d.n * hw));
                     for (std::size_t n = 0; n < d.n; ++n) {
                       Eigen::Map<const RowMat> block(
                           node.grad.data.data() + n * d.c_out * hw,
                           static_cast<Eigen::Index>(d.c_out),
                           static_cast<Eigen::Index>(hw));
                       dy.middleCols(static_cast<Eigen::Index>(n * hw),
                                     static_cast<Eigen::Index>(hw)) = block;
                     }
                     if (t.needs_grad(kid)) {
                       Eigen::Map<RowMat> kg(t.grad(Var{kid}).data.data(),
                                             static_cast<Eigen::Index>(d.c_out),
                                             static_cast<Eigen::Index>(patch));
                       kg.noalias() += dy * col->transpose();
                     }
                     if (t.needs_grad(xid)) {
                       Eigen::Map<const RowMat> km(t.value(Var{kid}).data.data(),
                                                   static_cast<Eigen::Index>(d.c_out),
                                                   static_cast<Eigen::Index>(patch));
                       MatX dcol = km.transpose() * dy;
                       detail::col2im_add(dcol, d, t.grad(Var{xid}));
                     }
                   });
}

inline Var batchnorm_train(Tape& tape, Var input, Var gamma, Var beta,
                           Tensor& running_mean, Tensor& running_var,
                           double momentum = 0.9, double epsilon = 1e-5) {
  BnStats stats;
  Tensor out = batchnorm_train_value(tape.value(input), tape.value(gamma),
                                     tape.value(beta), running_mean, running_var,
                                     momentum, epsilon, &stats);
  auto stats_ptr = std::make_shared<BnStats>(std::move(stats));
  const int xid = input.id, gid = gamma.id, bid = beta.id;
  return tape.push(
      std::move(out), {xid, gid, bid},
      [stats_ptr, xid, gid, bid](Tape& t, const Tape::Node& node) {
        const Tensor& x = t.value(Var{xid});
        const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        const double m = static_cast<double>(n * hw);
        Tensor& dg = t.grad(Var{gid});
        Tensor& db = t.grad(Var{bid});
        Tensor& dx = t.grad(Var{xid});
        const Tensor& g = t.value(Var{gid});
        for (std::size_t ci = 0; ci < c; ++ci) {
          const double mean = stats_ptr->mean[ci], istd = stats_ptr->inv_std[ci];
          double sum_dy = 0.0, dot_dy_x = 0.0;
          for (std::size_t ni = 0; ni < n; ++ni)
            detail::lane_dot2(node.grad.data.data() + (ni * c + ci) * hw,
                              x.data.data() + (ni * c + ci) * hw, hw, sum_dy,
                              dot_dy_x);
          const double sum_dy_xhat = (dot_dy_x - mean * sum_dy) * istd;
          dg.data[ci] += sum_dy_xhat;
          db.data[ci] += sum_dy;
          const double k1 = sum_dy / m, k2 = sum_dy_xhat / m;
          const double scale = g.data[ci] * istd;
          for (std::size_t ni = 0; ni < n; ++ni) {
            const double* dyp = node.grad.data.data() + (ni * c + ci) * hw;
            const double* xp = x.data.data() + (ni * c + ci) * hw;
            double* dxp = dx.data.data() + (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i)
              dxp[i] += scale * (dyp[i] - k1 - (xp[i] - mean) * istd * k2);
          }
        }
      });
}

inline Var relu(Tape& tape, Var input, ForwardProbe* probe = nullptr) {
  Tensor out = relu_value(tape.value(input), probe);
  const int xid = input.id;
  return tape.push(std::move(out), {xid}, [xid](Tape& t, const Tape::Node& node) {
    const Tensor& x = t.value(Var{xid});
    Tensor& dx = t.grad(Var{xid});
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (x.data[i] > 0.0) dx.data[i] += node.grad.data[i];
  });
}

inline Var avgpool2(Tape& tape, Var input) {
  Tensor out = avgpool2_value(tape.value(input));
  const int xid = input.id;
  return tape.push(std::move(out), {xid}, [xid](Tape& t, const Tape::Node& node) {
    Tensor& dx = t.grad(Var{xid});
    const std::size_t n = node.grad.dim(0), c = node.grad.dim(1),
                      ho = node.grad.dim(2), wo = node.grad.dim(3);
    const std::size_t h = dx.dim(2), w = dx.dim(3);
    for (std::size_t p = 0; p < n * c; ++p) {
      const double* src = node.grad.data.data() + p * ho * wo;
      double* dst = dx.data.data() + p * h * w;
      for (std::size_t y = 0; y < ho; ++y) {
        double* r0 = dst + 2 * y * w;
        double* r1 = r0 + w;
        for (std::size_t x = 0; x < wo; ++x) {
          const double v = 0.25 * src[y * wo + x];
          r0[2 * x] += v;
          r0[2 * x + 1] += v;
          r1[2 * x] += v;
          r1[2 * x + 1] += v;
        }
      }
    }
  });
}

inline Var dense(Tape& tape, Var input, Var weight, Var bias) {
  std::uint64_t macs = 0;
  Tensor out = dense_value(tape.value(input), tape.value(weight), tape.value(bias), &macs);
  tape.add_macs(macs);
  const int xid = input.id, wid = weight.id, bid = bias.id;
  return tape.push(
      std::move(out), {xid, wid, bid},
      [xid, wid, bid](Tape& t, const Tape::Node& node) {
        const Tensor& x = t.value(Var{xid});
        const Tensor& wt = t.value(Var{wid});
        const std::size_t n = x.dim(0), f = x.dim(1), o = wt.dim(0);
        Eigen::Map<const RowMat> dy(node.grad.data.data(),
                                    static_cast<Eigen::Index>(n),
                                    static_cast<Eigen::Index>(o));
        Eigen::Map<const RowMat> xm(x.data.data(), static_cast<Eigen::Index>(n),
                                    static_cast<Eigen::Index>(f));
        Eigen::Map<const RowMat> wm(wt.data.data(), static_cast<Eigen::Index>(o),
                                    static_cast<Eigen::Index>(f));
        if (t.needs_grad(xid)) {
          Eigen::Map<RowMat> dxm(t.grad(Var{xid}).data.data(),
                                 static_cast<Eigen::Index>(n),
                                 static_cast<Eigen::Index>(f));
          dxm.noalias() += dy * wm;
        }
        if (t.needs_grad(wid)) {
          Eigen::Map<RowMat> dwm(t.grad(Var{wid}).data.data(),
                                 static_cast<Eigen::Index>(o),
                                 static_cast<Eigen::Index>(f));
          dwm.noalias() += dy.transpose() * xm;
        }
        Tensor& db = t.grad(Var{bid});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < o; ++j) db.data[j] += node.grad.at2(i, j);
      });
}

inline Var flatten(Tape& tape, Var input) {
  const Tensor& x = tape.value(input);
  require(x.rank() >= 2, ErrorKind::Shape, "flatten input must have rank >= 2");
  const std::size_t n = x.dim(0);
  Tensor out = x.reshaped({n, x.numel() / n});
  const int xid = input.id;
  return tape.push(std::move(out), {xid}, [xid](Tape& t, const Tape::Node& node) {
    Tensor& dx = t.grad(Var{xid});
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += node.grad.data[i];
  });
}

inline Var softmax(Tape& tape, Var logits) {
  Tensor out = softmax_value(tape.value(logits));
  const int lid = logits.id;
  return tape.push(std::move(out), {lid}, [lid](Tape& t, const Tape::Node& node) {
    const Tensor& s = node.value;
    Tensor& dl = t.grad(Var{lid});
    const std::size_t n = s.dim(0), c = s.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += node.grad.at2(i, j) * s.at2(i, j);
      for (std::size_t j = 0; j < c; ++j)
        dl.at2(i, j) += s.at2(i, j) * (node.grad.at2(i, j) - dot);
    }
  });
}

namespace detail {

// Mean over the batch of -sum_c target * log softmax(logits / T).
inline Var cross_entropy_impl(Tape& tape, Var logits, Tensor targets,
                              double temperature) {
  require(temperature > 0.0, ErrorKind::Config, "temperature must be positive");
  const Tensor& l = tape.value(logits);
  require(l.rank() == 2, ErrorKind::Shape, "cross-entropy logits must be [N,C]");
  require(targets.same_shape(l), ErrorKind::Shape,
          "cross-entropy targets must match logits shape");
  const std::size_t n = l.dim(0), c = l.dim(1);
  Tensor probs = softmax_value(l, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, l.at2(i, j) / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      sum += std::exp(l.at2(i, j) / temperature - mx);
    const double lse = std::log(sum) + mx;
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      row += targets.at2(i, j) * (l.at2(i, j) / temperature - lse);
    total -= row;
  }
  auto probs_ptr = std::make_shared<Tensor>(std::move(probs));
  auto targets_ptr = std::make_shared<Tensor>(std::move(targets));
  const int lid = logits.id;
  return tape.push(
      Tensor({1}, {total / static_cast<double>(n)}), {lid},
      [probs_ptr, targets_ptr, temperature, lid](Tape& t, const Tape::Node& node) {
        const double outer = node.grad.data[0];
        const Tensor& p = *probs_ptr;
        const std::size_t n = p.dim(0), c = p.dim(1);
        Tensor& dl = t.grad(Var{lid});
        const double k = outer / (static_cast<double>(n) * temperature);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            dl.at2(i, j) += k * (p.at2(i, j) - targets_ptr->at2(i, j));
      });
}

}  // namespace detail

inline Var cross_entropy_labels(Tape& tape, Var logits, const std::vector<int>& labels,
                                double temperature = 1.0) {
  const Tensor& l = tape.value(logits);
  require(l.rank() == 2 && labels.size() == l.dim(0), ErrorKind::Shape,
          "label count must match batch size");
  Tensor onehot({l.dim(0), l.dim(1)});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < static_cast<int>(l.dim(1)), ErrorKind::Shape,
            "label out of range");
    onehot.at2(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return detail::cross_entropy_impl(tape, logits, std::move(onehot), temperature);
}

inline Var cross_entropy_soft(Tape& tape, Var logits, const Tensor& targets,
                              double temperature = 1.0) {
  return detail::cross_entropy_impl(tape, logits, targets, temperature);
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  require(ta.same_shape(tb), ErrorKind::Shape, "add: shape mismatch");
  Tensor out = Tensor::uninit(ta.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = ta.data[i] + tb.data[i];
  const int aid = a.id, bid = b.id;
  return tape.push(std::move(out), {aid, bid},
                   [aid, bid](Tape& t, const Tape::Node& node) {
                     if (t.needs_grad(aid)) {
                       Tensor& da = t.grad(Var{aid});
                       for (std::size_t i = 0; i < node.grad.numel(); ++i)
                         da.data[i] += node.grad.data[i];
                     }
                     if (t.needs_grad(bid)) {
                       Tensor& db = t.grad(Var{bid});
                       for (std::size_t i = 0; i < node.grad.numel(); ++i)
                         db.data[i] += node.grad.data[i];
                     }
                   });
}

inline Var scale(Tape& tape, Var a, double factor) {
  const Tensor& ta = tape.value(a);
  Tensor out = Tensor::uninit(ta.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = factor * ta.data[i];
  const int aid = a.id;
  return tape.push(std::move(out), {aid}, [aid, factor](Tape& t, const Tape::Node& node) {
    Tensor& da = t.grad(Var{aid});
    for (std::size_t i = 0; i < node.grad.numel(); ++i)
      da.data[i] += factor * node.grad.data[i];
  });
}

// Scalar node with a fixed, externally computed gradient for each listed
// parameter. Used to feed the relaxed-cost penalty into the objective: the
// alive counts are frozen within a step, so the penalty is locally linear
// in the gammas and a constant gradient is exact.
inline Var add_linear_term(Tape& tape, double value,
                           std::vector<std::pair<Var, Tensor>> terms) {
  std::vector<int> parents;
  parents.reserve(terms.size());
  for (auto& [v, g] : terms) {
    require(tape.value(v).same_shape(g), ErrorKind::Shape,
            "linear term gradient shape mismatch");
    parents.push_back(v.id);
  }
  auto terms_ptr =
      std::make_shared<std::vector<std::pair<Var, Tensor>>>(std::move(terms));
  return tape.push(Tensor({1}, {value}), std::move(parents),
                   [terms_ptr](Tape& t, const Tape::Node& node) {
                     const double outer = node.grad.data[0];
                     for (const auto& [v, g] : *terms_ptr) {
                       Tensor& dv = t.grad(v);
                       for (std::size_t i = 0; i < g.numel(); ++i)
                         dv.data[i] += outer * g.data[i];
                     }
                   });
}

// Adds a constant per-channel spatial map to every sample in the batch.
// Carries the bias corrections of pruned channels; gradient passes through.
inline Var add_channel_map(Tape& tape, Var input, const Tensor& map) {
  const Tensor& x = tape.value(input);
  require(x.rank() == 4 && map.rank() == 3 && x.dim(1) == map.dim(0) &&
              x.dim(2) == map.dim(1) && x.dim(3) == map.dim(2),
          ErrorKind::Shape, "channel map must be [C,H,W] matching the input");
  Tensor out = Tensor::uninit(x.shape);
  const std::size_t n = x.dim(0), chw = map.numel();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t i = 0; i < chw; ++i)
      out.data[ni * chw + i] = x.data[ni * chw + i] + map.data[i];
  const int xid = input.id;
  return tape.push(std::move(out), {xid}, [xid](Tape& t, const Tape::Node& node) {
    Tensor& dx = t.grad(Var{xid});
    for (std::size_t i = 0; i < node.grad.numel(); ++i)
      dx.data[i] += node.grad.data[i];
  });
}

inline Tensor add_channel_map_value(const Tensor& x, const Tensor& map) {
  Tensor out = Tensor::uninit(x.shape);
  const std::size_t n = x.dim(0), chw = map.numel();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t i = 0; i < chw; ++i)
      out.data[ni * chw + i] = x.data[ni * chw + i] + map.data[i];
  return out;
}

}  // namespace shrinkforge
