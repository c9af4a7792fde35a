#pragma once

#include "gxn/ops.hpp"

namespace gxn {

/// Geometry of a strided square-kernel convolution over NHWC images.
struct ConvGeometry {
  std::size_t height = 0, width = 0, channels = 0;
  std::size_t kernel = 4, stride = 2, pad = 1;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return kernel * kernel * channels; }
  bool valid() const { return height + 2 * pad >= kernel && width + 2 * pad >= kernel && stride > 0; }
};

namespace detail {

// Unfolds `batch` images into rows of patches: [batch * Ho * Wo, k * k * C].
template <typename S>
RowMat<S> im2col(const S* images, std::size_t batch, const ConvGeometry& g) {
  const auto ho = g.out_height(), wo = g.out_width();
  RowMat<S> cols = RowMat<S>::Zero(static_cast<Eigen::Index>(batch * ho * wo), static_cast<Eigen::Index>(g.patch()));
  const std::size_t image_size = g.height * g.width * g.channels;
  for (std::size_t b = 0; b < batch; ++b) {
    const S* img = images + b * image_size;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        S* row = cols.row(static_cast<Eigen::Index>((b * ho + oy) * wo + ox)).data();
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            const S* src = img + (static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)) * g.channels;
            std::copy(src, src + g.channels, row + (ky * g.kernel + kx) * g.channels);
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatters patch rows back onto the images (accumulating).
template <typename S>
void col2im(const RowMat<S>& cols, std::size_t batch, const ConvGeometry& g, S* images) {
  const auto ho = g.out_height(), wo = g.out_width();
  const std::size_t image_size = g.height * g.width * g.channels;
  for (std::size_t b = 0; b < batch; ++b) {
    S* img = images + b * image_size;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const S* row = cols.row(static_cast<Eigen::Index>((b * ho + oy) * wo + ox)).data();
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            S* dst = img + (static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)) * g.channels;
            const S* src = row + (ky * g.kernel + kx) * g.channels;
            for (std::size_t c = 0; c < g.channels; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x[B,H,W,Cin] (*) w[Cout,k,k,Cin] + bias[Cout] -> [B,Ho,Wo,Cout].
template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& x, const BasicTensor<S>& w, const BasicTensor<S>& bias, std::size_t stride,
                      std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(3) != x.dim(3) || w.dim(1) != w.dim(2)) detail::shape_mismatch("conv2d", x.shape(), w.shape());
  const auto batch = x.dim(0), cout = w.dim(0);
  if (bias.size() != cout) detail::shape_mismatch("conv2d bias", w.shape(), bias.shape());
  const ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(1), stride, pad};
  if (!g.valid()) throw ShapeError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  const auto ho = g.out_height(), wo = g.out_width();
  const auto positions = batch * ho * wo;
  detail::Vec<S> out(static_cast<Eigen::Index>(positions * cout));
  {
    const auto cols = detail::im2col(x.values().data(), batch, g);
    auto om = detail::as_matrix<S>(out, positions, cout);
    om.noalias() = cols * detail::as_matrix<S>(w.values(), cout, g.patch()).transpose();
    om.rowwise() += bias.values().transpose();
  }
  return BasicTensor<S>::make_result({batch, ho, wo, cout}, std::move(out), {x, w, bias}, [g, batch, positions, cout](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto gm = detail::as_matrix<S>(self.grad, positions, cout);
    const auto wm = detail::as_matrix<S>(pw.value, cout, g.patch());
    if (pw.tracked) {
      const auto cols = detail::im2col(px.value.data(), batch, g);
      pw.ensure_grad();
      detail::as_matrix<S>(pw.grad, cout, g.patch()).noalias() += gm.transpose() * cols;
    }
    if (pb.tracked) {
      pb.ensure_grad();
      pb.grad += gm.colwise().sum().transpose();
    }
    if (px.tracked) {
      detail::RowMat<S> gcols = gm * wm;
      px.ensure_grad();
      detail::col2im(gcols, batch, g, px.grad.data());
    }
  });
}

/// Transposed convolution: x[B,H,W,Cin], w[Cin,k,k,Cout], bias[Cout] ->
/// [B, (H-1)s - 2p + k, (W-1)s - 2p + k, Cout]. Adjoint of conv2d in x.
template <typename S>
BasicTensor<S> conv_transpose2d(const BasicTensor<S>& x, const BasicTensor<S>& w, const BasicTensor<S>& bias, std::size_t stride,
                                std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != x.dim(3) || w.dim(1) != w.dim(2)) {
    detail::shape_mismatch("conv_transpose2d", x.shape(), w.shape());
  }
  const auto batch = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3), k = w.dim(1), cout = w.dim(3);
  if (bias.size() != cout) detail::shape_mismatch("conv_transpose2d bias", w.shape(), bias.shape());
  if ((h - 1) * stride + k < 2 * pad + 1) throw ShapeError("conv_transpose2d: empty output for " + to_string(x.shape()));
  const auto ho = (h - 1) * stride + k - 2 * pad, wo = (wd - 1) * stride + k - 2 * pad;
  // The output image seen as the input of a forward convolution.
  const ConvGeometry g{ho, wo, cout, k, stride, pad};
  if (g.out_height() != h || g.out_width() != wd) throw ShapeError("conv_transpose2d: inconsistent geometry");
  const auto in_positions = batch * h * wd;
  const auto patch = g.patch();
  detail::Vec<S> out = detail::Vec<S>::Zero(static_cast<Eigen::Index>(batch * ho * wo * cout));
  {
    detail::RowMat<S> cols = detail::as_matrix<S>(x.values(), in_positions, cin) * detail::as_matrix<S>(w.values(), cin, patch);
    detail::col2im(cols, batch, g, out.data());
    detail::as_matrix<S>(out, batch * ho * wo, cout).rowwise() += bias.values().transpose();
  }
  return BasicTensor<S>::make_result(
      {batch, ho, wo, cout}, std::move(out), {x, w, bias}, [g, batch, in_positions, cin, patch, cout](Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto gcols = detail::im2col(self.grad.data(), batch, g);
        if (px.tracked) {
          px.ensure_grad();
          detail::as_matrix<S>(px.grad, in_positions, cin).noalias() += gcols * detail::as_matrix<S>(pw.value, cin, patch).transpose();
        }
        if (pw.tracked) {
          pw.ensure_grad();
          detail::as_matrix<S>(pw.grad, cin, patch).noalias() += detail::as_matrix<S>(px.value, in_positions, cin).transpose() * gcols;
        }
        if (pb.tracked) {
          pb.ensure_grad();
          pb.grad += detail::as_matrix<S>(self.grad, self.grad.size() / static_cast<Eigen::Index>(cout), cout).colwise().sum().transpose();
        }
      });
}

/// Running statistics owned by a batch-norm layer.
template <typename S>
struct BatchNormStats {
  detail::Vec<S> mean;
  detail::Vec<S> var;

  explicit BatchNormStats(std::size_t channels = 0)
      : mean(detail::Vec<S>::Zero(static_cast<Eigen::Index>(channels))), var(detail::Vec<S>::Ones(static_cast<Eigen::Index>(channels))) {}
};

/// Normalizes over every dimension but the last (channels). Training mode uses
/// batch statistics and updates `stats`; evaluation mode uses `stats`.
template <typename S>
BasicTensor<S> batch_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta, BatchNormStats<S>& stats,
                          bool training, S momentum = S(0.1), S eps = S(1e-5)) {
  if (x.rank() == 0) throw ShapeError("batch_norm of a scalar");
  const auto ch = x.shape().back();
  if (gamma.size() != ch || beta.size() != ch || static_cast<std::size_t>(stats.mean.size()) != ch) {
    detail::shape_mismatch("batch_norm", x.shape(), gamma.shape());
  }
  const auto rows = x.size() / ch;
  const auto xm = detail::as_matrix<S>(x.values(), rows, ch);
  detail::Vec<S> mu, var;
  if (training) {
    if (rows < 2) throw ShapeError("batch_norm in training mode needs at least two rows per channel");
    mu = xm.colwise().mean().transpose();
    var = (xm.rowwise() - mu.transpose()).array().square().colwise().mean().transpose();
    const S unbias = static_cast<S>(rows) / static_cast<S>(rows - 1);
    stats.mean = (S(1) - momentum) * stats.mean + momentum * mu;
    stats.var = (S(1) - momentum) * stats.var + momentum * unbias * var;
  } else {
    mu = stats.mean;
    var = stats.var;
  }
  const detail::Vec<S> inv_std = (var.array() + eps).rsqrt().matrix();
  detail::RowMat<S> xhat = (xm.rowwise() - mu.transpose()).array().rowwise() * inv_std.transpose().array();
  detail::Vec<S> out(static_cast<Eigen::Index>(x.size()));
  auto om = detail::as_matrix<S>(out, rows, ch);
  om = (xhat.array().rowwise() * gamma.values().transpose().array()).rowwise() + beta.values().transpose().array();
  return BasicTensor<S>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, rows, ch, training](Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto gm = detail::as_matrix<S>(self.grad, rows, ch);
        if (pb.tracked) {
          pb.ensure_grad();
          pb.grad += gm.colwise().sum().transpose();
        }
        if (pg.tracked) {
          pg.ensure_grad();
          pg.grad += (gm.array() * xhat.array()).colwise().sum().transpose().matrix();
        }
        if (!px.tracked) return;
        px.ensure_grad();
        auto gx = detail::as_matrix<S>(px.grad, rows, ch);
        const auto scale = (pg.value.array() * inv_std.array()).eval();
        if (!training) {
          gx.array() += gm.array().rowwise() * scale.transpose();
          return;
        }
        const S n = static_cast<S>(rows);
        const auto gsum = gm.colwise().sum().array().eval();
        const auto gxhat = (gm.array() * xhat.array()).colwise().sum().eval();
        gx.array() += ((n * gm.array()).rowwise() - gsum - (xhat.array().rowwise() * gxhat)).rowwise() * (scale.transpose() / n);
      });
}

}  // namespace gxn
