#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "unsq/ops.hpp"
#include "unsq/tape.hpp"
#include "unsq/tensor.hpp"

namespace unsq {

enum class Mode { Train, Eval };
enum class Padding { Same, Valid };

template <typename Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 2-D convolution parameters. Weight layout is (c_out, c_in, k_h, k_w) in the
// tensor's (n, c, h, w) slots; bias is one value per output channel.
template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Eigen::Index out_channels() const { return weight.shape().n; }
  Eigen::Index in_channels() const { return weight.shape().c; }
  Eigen::Index kh() const { return weight.shape().h; }
  Eigen::Index kw() const { return weight.shape().w; }

  static void validate_kernel(Eigen::Index kh, Eigen::Index kw) {
    if (kh < 1 || kh > 3 || kw < 1 || kw > 3) {
      throw ShapeError("conv: kernel sizes are limited to 1..3, got " + std::to_string(kh) + "x" +
                       std::to_string(kw));
    }
  }

  static ConvParams zeros(Eigen::Index c_out, Eigen::Index c_in, Eigen::Index k) {
    validate_kernel(k, k);
    return ConvParams{Tensor<Scalar>::zeros(Shape{c_out, c_in, k, k}, true),
                      Tensor<Scalar>::zeros(Shape{1, c_out, 1, 1}, true)};
  }

  // He initialization: weights ~ N(0, 2/(k^2 * c_in)), zero bias.
  static ConvParams he_init(Eigen::Index c_out, Eigen::Index c_in, Eigen::Index k, std::mt19937_64& rng) {
    ConvParams p = zeros(c_out, c_in, k);
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(k * k) * static_cast<double>(c_in)));
    std::normal_distribution<double> dist(0.0, std_dev);
    auto& w = p.weight.values();
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(dist(rng));
    return p;
  }
};

template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma;         // trainable scale, (1, c, 1, 1)
  Tensor<Scalar> beta;          // trainable shift
  Tensor<Scalar> running_mean;  // not trainable
  Tensor<Scalar> running_var;   // not trainable, >= 0 elementwise
  Scalar momentum = Scalar(0.1);
  Scalar epsilon = Scalar(1e-5);

  Eigen::Index channels() const { return gamma.shape().c; }

  static BatchNormParams init(Eigen::Index c, Scalar momentum = Scalar(0.1), Scalar epsilon = Scalar(1e-5)) {
    if (!(momentum > Scalar(0) && momentum <= Scalar(1))) throw Error("batch_norm: momentum must be in (0,1]");
    if (!(epsilon > Scalar(0))) throw Error("batch_norm: epsilon must be positive");
    BatchNormParams p;
    p.gamma = Tensor<Scalar>::ones(Shape{1, c, 1, 1}, true);
    p.beta = Tensor<Scalar>::zeros(Shape{1, c, 1, 1}, true);
    p.running_mean = Tensor<Scalar>::zeros(Shape{1, c, 1, 1}, false);
    p.running_var = Tensor<Scalar>::ones(Shape{1, c, 1, 1}, false);
    p.momentum = momentum;
    p.epsilon = epsilon;
    return p;
  }
};

// Loss multipliers for the two classes of a binary segmentation problem.
struct ClassWeights {
  double foreground = 1.0;
  double background = 1.0;

  void validate() const {
    if (foreground < 0 || background < 0 || (foreground == 0 && background == 0)) {
      throw Error("class weights: must be non-negative and not both zero");
    }
  }
};

namespace detail {

struct ConvGeometry {
  Eigen::Index oh = 0, ow = 0;
  Eigen::Index pad_top = 0, pad_left = 0;
};

inline ConvGeometry conv_geometry(Eigen::Index h, Eigen::Index w, Eigen::Index kh, Eigen::Index kw,
                                  Padding padding, Eigen::Index stride) {
  ConvGeometry g;
  if (padding == Padding::Same) {
    g.oh = (h + stride - 1) / stride;
    g.ow = (w + stride - 1) / stride;
    const Eigen::Index pad_h = std::max<Eigen::Index>((g.oh - 1) * stride + kh - h, 0);
    const Eigen::Index pad_w = std::max<Eigen::Index>((g.ow - 1) * stride + kw - w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (h < kh || w < kw) {
      throw ShapeError("conv2d: non-positive output size for valid padding (input " + std::to_string(h) +
                       "x" + std::to_string(w) + ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                       ")");
    }
    g.oh = (h - kh) / stride + 1;
    g.ow = (w - kw) / stride + 1;
  }
  if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv2d: non-positive output size");
  return g;
}

// Unrolls one sample's receptive fields into a (c_in*k_h*k_w) x (oh*ow)
// row-major matrix; out-of-image taps read as zero.
template <typename Scalar>
void im2col(const Scalar* in, Eigen::Index cin, Eigen::Index h, Eigen::Index w, Eigen::Index kh,
            Eigen::Index kw, Eigen::Index stride, const ConvGeometry& g, Scalar* cols) {
  Scalar* dst = cols;
  for (Eigen::Index ci = 0; ci < cin; ++ci) {
    const Scalar* plane = in + ci * h * w;
    for (Eigen::Index kr = 0; kr < kh; ++kr) {
      for (Eigen::Index kc = 0; kc < kw; ++kc) {
        for (Eigen::Index oy = 0; oy < g.oh; ++oy) {
          const Eigen::Index iy = oy * stride - g.pad_top + kr;
          if (iy < 0 || iy >= h) {
            for (Eigen::Index ox = 0; ox < g.ow; ++ox) *dst++ = Scalar(0);
            continue;
          }
          const Scalar* row = plane + iy * w;
          for (Eigen::Index ox = 0; ox < g.ow; ++ox) {
            const Eigen::Index ix = ox * stride - g.pad_left + kc;
            *dst++ = (ix >= 0 && ix < w) ? row[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds column gradients back onto the image.
template <typename Scalar>
void col2im_add(const Scalar* cols, Eigen::Index cin, Eigen::Index h, Eigen::Index w, Eigen::Index kh,
                Eigen::Index kw, Eigen::Index stride, const ConvGeometry& g, Scalar* out) {
  const Scalar* src = cols;
  for (Eigen::Index ci = 0; ci < cin; ++ci) {
    Scalar* plane = out + ci * h * w;
    for (Eigen::Index kr = 0; kr < kh; ++kr) {
      for (Eigen::Index kc = 0; kc < kw; ++kc) {
        for (Eigen::Index oy = 0; oy < g.oh; ++oy) {
          const Eigen::Index iy = oy * stride - g.pad_top + kr;
          if (iy < 0 || iy >= h) {
            src += g.ow;
            continue;
          }
          Scalar* row = plane + iy * w;
          for (Eigen::Index ox = 0; ox < g.ow; ++ox) {
            const Eigen::Index ix = ox * stride - g.pad_left + kc;
            if (ix >= 0 && ix < w) row[ix] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d(Tape<Scalar>& tape, const Tensor<Scalar>& input, const ConvParams<Scalar>& params,
                      Padding padding, Eigen::Index stride = 1) {
  const Shape in_s = input.shape();
  ConvParams<Scalar>::validate_kernel(params.kh(), params.kw());
  if (stride < 1) throw Error("conv2d: stride must be >= 1");
  if (in_s.c != params.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(in_s.c) + " channels, kernel expects " +
                     std::to_string(params.in_channels()));
  }
  const Eigen::Index cout = params.out_channels(), cin = in_s.c, kh = params.kh(), kw = params.kw();
  const auto g = detail::conv_geometry(in_s.h, in_s.w, kh, kw, padding, stride);
  const Eigen::Index K = cin * kh * kw, P = g.oh * g.ow;

  auto out = Tensor<Scalar>::zeros(Shape{in_s.n, cout, g.oh, g.ow});
  {
    MatRM<Scalar> cols(K, P);
    Eigen::Map<const MatRM<Scalar>> wmap(params.weight.data(), cout, K);
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bvec(params.bias.data(), cout);
    for (Eigen::Index s = 0; s < in_s.n; ++s) {
      detail::im2col(input.data() + s * cin * in_s.plane(), cin, in_s.h, in_s.w, kh, kw, stride, g,
                     cols.data());
      Eigen::Map<MatRM<Scalar>> omap(out.data() + s * cout * P, cout, P);
      omap.noalias() = wmap * cols;
      omap.colwise() += bvec;
    }
  }
  detail::finite_check("conv2d", out);

  const bool any_grad = input.requires_grad() || params.weight.requires_grad() || params.bias.requires_grad();
  if (tape.recording() && any_grad) {
    out.set_requires_grad(true);
    auto xi = input.impl(), wi = params.weight.impl(), bi = params.bias.impl(), oi = out.impl();
    tape.record("conv2d", oi, [xi, wi, bi, oi, g, stride, cout, cin, kh, kw, K, P] {
      const Eigen::Index n = xi->shape.n, h = xi->shape.h, w = xi->shape.w;
      MatRM<Scalar> cols(K, P), colsg(K, P);
      Eigen::Map<const MatRM<Scalar>> wmap(wi->values.data(), cout, K);
      if (wi->requires_grad) wi->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      if (xi->requires_grad) xi->ensure_grad();
      for (Eigen::Index s = 0; s < n; ++s) {
        Eigen::Map<const MatRM<Scalar>> gmap(oi->grad.data() + s * cout * P, cout, P);
        if (wi->requires_grad) {
          detail::im2col(xi->values.data() + s * cin * h * w, cin, h, w, kh, kw, stride, g, cols.data());
          Eigen::Map<MatRM<Scalar>> gw(wi->grad.data(), cout, K);
          gw.noalias() += gmap * cols.transpose();
        }
        if (bi->requires_grad) {
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gb(bi->grad.data(), cout);
          gb.noalias() += gmap.rowwise().sum();
        }
        if (xi->requires_grad) {
          colsg.noalias() = wmap.transpose() * gmap;
          detail::col2im_add(colsg.data(), cin, h, w, kh, kw, stride, g,
                             xi->grad.data() + s * cin * h * w);
        }
      }
    });
  }
  return out;
}

// Stride-2 2x2 transposed convolution, the up-sampling step of the expansive
// path. Output pixels partition cleanly (no overlapping taps):
//   out[co][2i+a][2j+b] = sum_ci w[co][ci][a][b] * in[ci][i][j] + bias[co]
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(Tape<Scalar>& tape, const Tensor<Scalar>& input,
                                const ConvParams<Scalar>& params, Eigen::Index stride = 2) {
  const Shape in_s = input.shape();
  if (params.kh() != 2 || params.kw() != 2 || stride != 2) {
    throw Error("conv_transpose2d: only 2x2 kernels with stride 2 are supported");
  }
  if (in_s.c != params.in_channels()) {
    throw ShapeError("conv_transpose2d: input has " + std::to_string(in_s.c) + " channels, kernel expects " +
                     std::to_string(params.in_channels()));
  }
  const Eigen::Index cout = params.out_channels(), cin = in_s.c;
  const Eigen::Index h = in_s.h, w = in_s.w, oh = 2 * h, ow = 2 * w, P = h * w;

  // Permuted weight view: row (co*4 + a*2 + b), column ci.
  MatRM<Scalar> w2(cout * 4, cin);
  for (Eigen::Index co = 0; co < cout; ++co)
    for (Eigen::Index ci = 0; ci < cin; ++ci)
      for (Eigen::Index a = 0; a < 2; ++a)
        for (Eigen::Index b = 0; b < 2; ++b)
          w2(co * 4 + a * 2 + b, ci) = params.weight.data()[((co * cin + ci) * 2 + a) * 2 + b];

  auto out = Tensor<Scalar>::zeros(Shape{in_s.n, cout, oh, ow});
  {
    MatRM<Scalar> outcols(cout * 4, P);
    for (Eigen::Index s = 0; s < in_s.n; ++s) {
      Eigen::Map<const MatRM<Scalar>> xmap(input.data() + s * cin * P, cin, P);
      outcols.noalias() = w2 * xmap;
      Scalar* osample = out.data() + s * cout * oh * ow;
      for (Eigen::Index co = 0; co < cout; ++co) {
        const Scalar b0 = params.bias.data()[co];
        for (Eigen::Index a = 0; a < 2; ++a)
          for (Eigen::Index b = 0; b < 2; ++b) {
            const Scalar* src = outcols.data() + (co * 4 + a * 2 + b) * P;
            for (Eigen::Index i = 0; i < h; ++i) {
              Scalar* dst = osample + co * oh * ow + (2 * i + a) * ow + b;
              for (Eigen::Index j = 0; j < w; ++j) dst[2 * j] = src[i * w + j] + b0;
            }
          }
      }
    }
  }
  detail::finite_check("conv_transpose2d", out);

  const bool any_grad = input.requires_grad() || params.weight.requires_grad() || params.bias.requires_grad();
  if (tape.recording() && any_grad) {
    out.set_requires_grad(true);
    auto xi = input.impl(), wi = params.weight.impl(), bi = params.bias.impl(), oi = out.impl();
    tape.record("conv_transpose2d", oi, [xi, wi, bi, oi, w2, cout, cin, h, w, P] {
      const Eigen::Index n = xi->shape.n, oh = 2 * h, ow = 2 * w;
      if (wi->requires_grad) wi->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      if (xi->requires_grad) xi->ensure_grad();
      MatRM<Scalar> gcols(cout * 4, P);
      MatRM<Scalar> gw2 = MatRM<Scalar>::Zero(cout * 4, cin);
      for (Eigen::Index s = 0; s < n; ++s) {
        const Scalar* gsample = oi->grad.data() + s * cout * oh * ow;
        for (Eigen::Index co = 0; co < cout; ++co)
          for (Eigen::Index a = 0; a < 2; ++a)
            for (Eigen::Index b = 0; b < 2; ++b) {
              Scalar* dst = gcols.data() + (co * 4 + a * 2 + b) * P;
              for (Eigen::Index i = 0; i < h; ++i) {
                const Scalar* src = gsample + co * oh * ow + (2 * i + a) * ow + b;
                for (Eigen::Index j = 0; j < w; ++j) dst[i * w + j] = src[2 * j];
              }
            }
        if (wi->requires_grad) {
          Eigen::Map<const MatRM<Scalar>> xmap(xi->values.data() + s * cin * P, cin, P);
          gw2.noalias() += gcols * xmap.transpose();
        }
        if (bi->requires_grad) {
          for (Eigen::Index co = 0; co < cout; ++co) {
            Scalar acc = 0;
            const Scalar* gplane = gsample + co * oh * ow;
            for (Eigen::Index i = 0; i < oh * ow; ++i) acc += gplane[i];
            bi->grad[co] += acc;
          }
        }
        if (xi->requires_grad) {
          Eigen::Map<MatRM<Scalar>> gx(xi->grad.data() + s * cin * P, cin, P);
          gx.noalias() += w2.transpose() * gcols;
        }
      }
      if (wi->requires_grad) {
        for (Eigen::Index co = 0; co < cout; ++co)
          for (Eigen::Index ci = 0; ci < cin; ++ci)
            for (Eigen::Index a = 0; a < 2; ++a)
              for (Eigen::Index b = 0; b < 2; ++b)
                wi->grad[((co * cin + ci) * 2 + a) * 2 + b] += gw2(co * 4 + a * 2 + b, ci);
      }
    });
  }
  return out;
}

template <typename Scalar>
struct PoolResult {
  Tensor<Scalar> output;
  // Flat input index of each window's maximum, in output flat order.
  std::shared_ptr<const std::vector<Eigen::Index>> argmax;
};

// 2x2 max pooling with stride 2. Ties go to the lowest flat index so the
// backward routing is deterministic.
template <typename Scalar>
PoolResult<Scalar> max_pool2d(Tape<Scalar>& tape, const Tensor<Scalar>& input) {
  const Shape s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("max_pool2d: spatial dims must be even, got " + s.str() +
                     "; resize the input to even dimensions");
  }
  const Eigen::Index oh = s.h / 2, ow = s.w / 2;
  auto out = Tensor<Scalar>::zeros(Shape{s.n, s.c, oh, ow});
  auto argmax = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(s.n * s.c * oh * ow));

  const Scalar* in = input.data();
  Scalar* o = out.data();
  Eigen::Index k = 0;
  for (Eigen::Index nc = 0; nc < s.n * s.c; ++nc) {
    const Eigen::Index base = nc * s.plane();
    for (Eigen::Index oy = 0; oy < oh; ++oy) {
      for (Eigen::Index ox = 0; ox < ow; ++ox) {
        Eigen::Index best = base + (2 * oy) * s.w + 2 * ox;
        Scalar best_v = in[best];
        for (Eigen::Index dy = 0; dy < 2; ++dy)
          for (Eigen::Index dx = 0; dx < 2; ++dx) {
            const Eigen::Index idx = base + (2 * oy + dy) * s.w + (2 * ox + dx);
            if (in[idx] > best_v) {
              best_v = in[idx];
              best = idx;
            }
          }
        o[k] = best_v;
        (*argmax)[static_cast<std::size_t>(k)] = best;
        ++k;
      }
    }
  }
  detail::finite_check("max_pool2d", out);

  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    auto xi = input.impl(), oi = out.impl();
    tape.record("max_pool2d", oi, [xi, oi, argmax] {
      xi->ensure_grad();
      for (Eigen::Index k = 0; k < oi->grad.size(); ++k) {
        xi->grad[(*argmax)[static_cast<std::size_t>(k)]] += oi->grad[k];
      }
    });
  }
  return PoolResult<Scalar>{out, argmax};
}

// Channel concatenation, a's channels first (skip connections).
template <typename Scalar>
Tensor<Scalar> concat_channels(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + sa.str() + " vs " + sb.str());
  }
  const Eigen::Index plane = sa.plane(), ca = sa.c, cb = sb.c;
  auto out = Tensor<Scalar>::zeros(Shape{sa.n, ca + cb, sa.h, sa.w});
  for (Eigen::Index s = 0; s < sa.n; ++s) {
    Scalar* dst = out.data() + s * (ca + cb) * plane;
    std::copy_n(a.data() + s * ca * plane, ca * plane, dst);
    std::copy_n(b.data() + s * cb * plane, cb * plane, dst + ca * plane);
  }
  detail::finite_check("concat_channels", out);

  if (detail::wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("concat_channels", oi, [ai, bi, oi, ca, cb, plane] {
      const Eigen::Index n = oi->shape.n;
      if (ai->requires_grad) ai->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      for (Eigen::Index s = 0; s < n; ++s) {
        const Scalar* g = oi->grad.data() + s * (ca + cb) * plane;
        if (ai->requires_grad) {
          Scalar* ga = ai->grad.data() + s * ca * plane;
          for (Eigen::Index i = 0; i < ca * plane; ++i) ga[i] += g[i];
        }
        if (bi->requires_grad) {
          Scalar* gb = bi->grad.data() + s * cb * plane;
          for (Eigen::Index i = 0; i < cb * plane; ++i) gb[i] += g[ca * plane + i];
        }
      }
    });
  }
  return out;
}

// Per-channel batch normalization over (n, h, w). Train mode normalizes by
// the biased batch statistics and folds them into the running estimates:
//   running <- (1 - momentum) * running + momentum * batch
// Eval mode normalizes by the running statistics and mutates nothing.
template <typename Scalar>
Tensor<Scalar> batch_norm2d(Tape<Scalar>& tape, const Tensor<Scalar>& input, BatchNormParams<Scalar>& params,
                            Mode mode) {
  using Array = typename Tensor<Scalar>::Array;
  const Shape s = input.shape();
  const Eigen::Index c = params.channels();
  if (s.c != c) {
    throw ShapeError("batch_norm2d: input has " + std::to_string(s.c) + " channels, params expect " +
                     std::to_string(c));
  }
  const Eigen::Index m = s.n * s.plane();  // elements per channel
  if (mode == Mode::Train && m < 2) {
    throw Error("batch_norm2d: train mode needs at least 2 elements per channel");
  }

  Array mean(c), inv_std(c);
  if (mode == Mode::Train) {
    Array var(c);
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      Scalar acc = 0;
      for (Eigen::Index n = 0; n < s.n; ++n) {
        const Scalar* plane = input.data() + (n * c + ch) * s.plane();
        for (Eigen::Index i = 0; i < s.plane(); ++i) acc += plane[i];
      }
      mean[ch] = acc / static_cast<Scalar>(m);
      Scalar acc2 = 0;
      for (Eigen::Index n = 0; n < s.n; ++n) {
        const Scalar* plane = input.data() + (n * c + ch) * s.plane();
        for (Eigen::Index i = 0; i < s.plane(); ++i) {
          const Scalar d = plane[i] - mean[ch];
          acc2 += d * d;
        }
      }
      var[ch] = acc2 / static_cast<Scalar>(m);
    }
    inv_std = (var + params.epsilon).rsqrt();
    auto& rm = params.running_mean.values();
    auto& rv = params.running_var.values();
    rm = (Scalar(1) - params.momentum) * rm + params.momentum * mean;
    rv = (Scalar(1) - params.momentum) * rv + params.momentum * var;
  } else {
    mean = params.running_mean.values();
    inv_std = (params.running_var.values() + params.epsilon).rsqrt();
  }

  auto xhat = std::make_shared<Array>(s.size());
  auto out = Tensor<Scalar>::zeros(s);
  for (Eigen::Index n = 0; n < s.n; ++n) {
    for (Eigen::Index ch = 0; ch < c; ++ch) {
      const Eigen::Index off = (n * c + ch) * s.plane();
      Eigen::Map<const Array> x(input.data() + off, s.plane());
      Eigen::Map<Array> xh(xhat->data() + off, s.plane());
      Eigen::Map<Array> y(out.data() + off, s.plane());
      xh = (x - mean[ch]) * inv_std[ch];
      y = params.gamma.data()[ch] * xh + params.beta.data()[ch];
    }
  }
  detail::finite_check("batch_norm2d", out);

  const bool any_grad =
      input.requires_grad() || params.gamma.requires_grad() || params.beta.requires_grad();
  if (tape.recording() && any_grad) {
    out.set_requires_grad(true);
    auto xi = input.impl(), gi = params.gamma.impl(), bi = params.beta.impl(), oi = out.impl();
    const bool train = mode == Mode::Train;
    tape.record("batch_norm2d", oi, [xi, gi, bi, oi, xhat, inv_std, c, train] {
      const Shape& s = xi->shape;
      const Eigen::Index m = s.n * s.plane();
      if (xi->requires_grad) xi->ensure_grad();
      if (gi->requires_grad) gi->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      for (Eigen::Index ch = 0; ch < c; ++ch) {
        Scalar s1 = 0, s2 = 0;  // sum(dy), sum(dy * xhat) over the channel
        for (Eigen::Index n = 0; n < s.n; ++n) {
          const Eigen::Index off = (n * c + ch) * s.plane();
          for (Eigen::Index i = 0; i < s.plane(); ++i) {
            const Scalar dy = oi->grad[off + i];
            s1 += dy;
            s2 += dy * (*xhat)[off + i];
          }
        }
        if (gi->requires_grad) gi->grad[ch] += s2;
        if (bi->requires_grad) bi->grad[ch] += s1;
        if (xi->requires_grad) {
          const Scalar k = gi->values[ch] * inv_std[ch];
          if (train) {
            const Scalar mu1 = s1 / static_cast<Scalar>(m), mu2 = s2 / static_cast<Scalar>(m);
            for (Eigen::Index n = 0; n < s.n; ++n) {
              const Eigen::Index off = (n * c + ch) * s.plane();
              for (Eigen::Index i = 0; i < s.plane(); ++i) {
                xi->grad[off + i] += k * (oi->grad[off + i] - mu1 - (*xhat)[off + i] * mu2);
              }
            }
          } else {
            for (Eigen::Index n = 0; n < s.n; ++n) {
              const Eigen::Index off = (n * c + ch) * s.plane();
              for (Eigen::Index i = 0; i < s.plane(); ++i) xi->grad[off + i] += k * oi->grad[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values().max(Scalar(0)));
  detail::finite_check("relu", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("relu", oi, [ai, oi] {
      accumulate_grad<Scalar>(*ai, oi->grad * (ai->values > Scalar(0)).template cast<Scalar>());
    });
  }
  return out;
}

namespace detail {

template <typename Scalar>
void require_two_channels(const char* op, const Tensor<Scalar>& logits) {
  if (logits.shape().c != 2) {
    throw ShapeError(std::string(op) + ": expected 2 channels, got " + std::to_string(logits.shape().c));
  }
}

}  // namespace detail

// Temperature softmax over the 2 class channels, computed per pixel with
// max subtraction:  p_k = exp(z_k / T) / sum_j exp(z_j / T).
template <typename Scalar>
Tensor<Scalar> softmax_temperature(Tape<Scalar>& tape, const Tensor<Scalar>& logits, Scalar temperature) {
  using Array = typename Tensor<Scalar>::Array;
  detail::require_two_channels("softmax_temperature", logits);
  if (!(temperature > Scalar(0))) throw Error("softmax_temperature: temperature must be positive");
  const Shape s = logits.shape();
  const Eigen::Index plane = s.plane();

  auto out = Tensor<Scalar>::zeros(s);
  for (Eigen::Index n = 0; n < s.n; ++n) {
    Eigen::Map<const Array> z0(logits.data() + (n * 2 + 0) * plane, plane);
    Eigen::Map<const Array> z1(logits.data() + (n * 2 + 1) * plane, plane);
    Eigen::Map<Array> p0(out.data() + (n * 2 + 0) * plane, plane);
    Eigen::Map<Array> p1(out.data() + (n * 2 + 1) * plane, plane);
    Array m = z0.max(z1);
    Array e0 = ((z0 - m) / temperature).exp();
    Array e1 = ((z1 - m) / temperature).exp();
    Array inv = (e0 + e1).inverse();
    p0 = e0 * inv;
    p1 = e1 * inv;
  }
  detail::finite_check("softmax_temperature", out);

  if (detail::wants_grad(tape, logits)) {
    out.set_requires_grad(true);
    auto zi = logits.impl(), oi = out.impl();
    tape.record("softmax_temperature", oi, [zi, oi, temperature] {
      const Shape& s = zi->shape;
      const Eigen::Index plane = s.plane();
      zi->ensure_grad();
      for (Eigen::Index n = 0; n < s.n; ++n) {
        const Eigen::Index o0 = (n * 2 + 0) * plane, o1 = (n * 2 + 1) * plane;
        for (Eigen::Index i = 0; i < plane; ++i) {
          const Scalar p0 = oi->values[o0 + i], p1 = oi->values[o1 + i];
          const Scalar d0 = oi->grad[o0 + i], d1 = oi->grad[o1 + i];
          const Scalar dot = d0 * p0 + d1 * p1;
          zi->grad[o0 + i] += p0 * (d0 - dot) / temperature;
          zi->grad[o1 + i] += p1 * (d1 - dot) / temperature;
        }
      }
    });
  }
  return out;
}

namespace detail {

// Per-pixel log-softmax of 2-channel logits at temperature T via
// log-sum-exp; never takes log of a stored probability.
template <typename Scalar>
void log_softmax_planes(const Scalar* z0, const Scalar* z1, Eigen::Index n, Scalar temperature, Scalar* lp0,
                        Scalar* lp1) {
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar u0 = z0[i] / temperature, u1 = z1[i] / temperature;
    const Scalar m = u0 > u1 ? u0 : u1;
    const Scalar lse = m + std::log(std::exp(u0 - m) + std::exp(u1 - m));
    lp0[i] = u0 - lse;
    lp1[i] = u1 - lse;
  }
}

}  // namespace detail

// Class-weighted pixel cross-entropy against a hard binary mask, computed at
// temperature 1 and averaged over batch and pixels:
//   -(1/(n*h*w)) * sum [ w_f * y * log p_1 + w_b * (1-y) * log p_0 ]
template <typename Scalar>
Tensor<Scalar> weighted_cross_entropy(Tape<Scalar>& tape, const Tensor<Scalar>& logits,
                                      const Tensor<Scalar>& targets, const ClassWeights& weights) {
  detail::require_two_channels("weighted_cross_entropy", logits);
  weights.validate();
  const Shape s = logits.shape();
  const Shape ts = targets.shape();
  if (ts.n != s.n || ts.c != 1 || ts.h != s.h || ts.w != s.w) {
    throw ShapeError("weighted_cross_entropy: targets " + ts.str() + " do not match logits " + s.str());
  }
  for (Eigen::Index i = 0; i < targets.size(); ++i) {
    const Scalar v = targets.data()[i];
    if (v != Scalar(0) && v != Scalar(1)) {
      throw Error("weighted_cross_entropy: non-binary target at flat index " + std::to_string(i));
    }
  }
  const Eigen::Index plane = s.plane();
  const Scalar n_pix = static_cast<Scalar>(s.n * plane);
  const Scalar wf = static_cast<Scalar>(weights.foreground), wb = static_cast<Scalar>(weights.background);

  std::vector<Scalar> lp0(static_cast<std::size_t>(plane)), lp1(static_cast<std::size_t>(plane));
  Scalar acc = 0;
  for (Eigen::Index n = 0; n < s.n; ++n) {
    const Scalar* z0 = logits.data() + (n * 2 + 0) * plane;
    const Scalar* z1 = logits.data() + (n * 2 + 1) * plane;
    const Scalar* y = targets.data() + n * plane;
    detail::log_softmax_planes(z0, z1, plane, Scalar(1), lp0.data(), lp1.data());
    for (Eigen::Index i = 0; i < plane; ++i) {
      acc += wf * y[i] * lp1[static_cast<std::size_t>(i)] +
             wb * (Scalar(1) - y[i]) * lp0[static_cast<std::size_t>(i)];
    }
  }
  auto out = Tensor<Scalar>::full(Shape{1, 1, 1, 1}, -acc / n_pix);
  detail::finite_check("weighted_cross_entropy", out);

  if (detail::wants_grad(tape, logits)) {
    out.set_requires_grad(true);
    auto zi = logits.impl(), yi = targets.impl(), oi = out.impl();
    tape.record("weighted_cross_entropy", oi, [zi, yi, oi, wf, wb, n_pix] {
      const Shape& s = zi->shape;
      const Eigen::Index plane = s.plane();
      zi->ensure_grad();
      const Scalar g = oi->grad[0] / n_pix;
      std::vector<Scalar> lp0(static_cast<std::size_t>(plane)), lp1(static_cast<std::size_t>(plane));
      for (Eigen::Index n = 0; n < s.n; ++n) {
        const Eigen::Index o0 = (n * 2 + 0) * plane, o1 = (n * 2 + 1) * plane;
        const Scalar* y = yi->values.data() + n * plane;
        detail::log_softmax_planes(zi->values.data() + o0, zi->values.data() + o1, plane, Scalar(1),
                                   lp0.data(), lp1.data());
        for (Eigen::Index i = 0; i < plane; ++i) {
          const Scalar p0 = std::exp(lp0[static_cast<std::size_t>(i)]);
          const Scalar p1 = std::exp(lp1[static_cast<std::size_t>(i)]);
          const Scalar w = y[i] == Scalar(1) ? wf : wb;
          zi->grad[o0 + i] += g * w * (p0 - (Scalar(1) - y[i]));
          zi->grad[o1 + i] += g * w * (p1 - y[i]);
        }
      }
    });
  }
  return out;
}

// Cross-entropy of the student's temperature-T softmax against teacher
// probability maps:
//   -(1/(n*h*w)) * sum_pixels sum_k omega_k * y*_k * log p_k
// with omega_1 = w_f, omega_0 = w_b. At unit weights the gradient w.r.t. a
// student logit is (p - y*) / (T * n * h * w).
template <typename Scalar>
Tensor<Scalar> soft_cross_entropy(Tape<Scalar>& tape, const Tensor<Scalar>& student_logits,
                                  const Tensor<Scalar>& teacher_probs, Scalar temperature,
                                  const ClassWeights& weights) {
  detail::require_two_channels("soft_cross_entropy", student_logits);
  detail::require_two_channels("soft_cross_entropy", teacher_probs);
  weights.validate();
  if (!(temperature > Scalar(0))) throw Error("soft_cross_entropy: temperature must be positive");
  detail::check_same_shape("soft_cross_entropy", student_logits, teacher_probs);
  const Shape s = student_logits.shape();
  const Eigen::Index plane = s.plane();
  for (Eigen::Index n = 0; n < s.n; ++n) {
    const Scalar* t0 = teacher_probs.data() + (n * 2 + 0) * plane;
    const Scalar* t1 = teacher_probs.data() + (n * 2 + 1) * plane;
    for (Eigen::Index i = 0; i < plane; ++i) {
      if (std::abs(static_cast<double>(t0[i] + t1[i]) - 1.0) > 1e-6) {
        throw Error("soft_cross_entropy: teacher probabilities not normalized at sample " +
                    std::to_string(n) + ", pixel " + std::to_string(i));
      }
    }
  }
  const Scalar n_pix = static_cast<Scalar>(s.n * plane);
  const Scalar wf = static_cast<Scalar>(weights.foreground), wb = static_cast<Scalar>(weights.background);

  std::vector<Scalar> lp0(static_cast<std::size_t>(plane)), lp1(static_cast<std::size_t>(plane));
  Scalar acc = 0;
  for (Eigen::Index n = 0; n < s.n; ++n) {
    const Scalar* z0 = student_logits.data() + (n * 2 + 0) * plane;
    const Scalar* z1 = student_logits.data() + (n * 2 + 1) * plane;
    const Scalar* t0 = teacher_probs.data() + (n * 2 + 0) * plane;
    const Scalar* t1 = teacher_probs.data() + (n * 2 + 1) * plane;
    detail::log_softmax_planes(z0, z1, plane, temperature, lp0.data(), lp1.data());
    for (Eigen::Index i = 0; i < plane; ++i) {
      acc += wf * t1[i] * lp1[static_cast<std::size_t>(i)] + wb * t0[i] * lp0[static_cast<std::size_t>(i)];
    }
  }
  auto out = Tensor<Scalar>::full(Shape{1, 1, 1, 1}, -acc / n_pix);
  detail::finite_check("soft_cross_entropy", out);

  if (detail::wants_grad(tape, student_logits)) {
    out.set_requires_grad(true);
    auto zi = student_logits.impl(), ti = teacher_probs.impl(), oi = out.impl();
    tape.record("soft_cross_entropy", oi, [zi, ti, oi, wf, wb, temperature, n_pix] {
      const Shape& s = zi->shape;
      const Eigen::Index plane = s.plane();
      zi->ensure_grad();
      const Scalar g = oi->grad[0] / (temperature * n_pix);
      std::vector<Scalar> lp0(static_cast<std::size_t>(plane)), lp1(static_cast<std::size_t>(plane));
      for (Eigen::Index n = 0; n < s.n; ++n) {
        const Eigen::Index o0 = (n * 2 + 0) * plane, o1 = (n * 2 + 1) * plane;
        const Scalar* t0 = ti->values.data() + o0;
        const Scalar* t1 = ti->values.data() + o1;
        detail::log_softmax_planes(zi->values.data() + o0, zi->values.data() + o1, plane, temperature,
                                   lp0.data(), lp1.data());
        for (Eigen::Index i = 0; i < plane; ++i) {
          const Scalar p0 = std::exp(lp0[static_cast<std::size_t>(i)]);
          const Scalar p1 = std::exp(lp1[static_cast<std::size_t>(i)]);
          const Scalar mass = wf * t1[i] + wb * t0[i];
          zi->grad[o0 + i] += g * (p0 * mass - wb * t0[i]);
          zi->grad[o1 + i] += g * (p1 * mass - wf * t1[i]);
        }
      }
    });
  }
  return out;
}

}  // namespace unsq
