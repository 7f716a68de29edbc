#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "myotracker/ops.hpp"

namespace myo::ops {
namespace {

// Sum with a fixed lane layout. Eigen's reductions peel to the pointer's
// alignment, which would make identical rows at different addresses round
// differently.
template <typename S, typename F>
S lane_sum(Index n, F&& f) {
  constexpr int kLanes = 16;
  S acc[kLanes] = {};
  Index i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int j = 0; j < kLanes; ++j) acc[j] += f(i + j);
  S total = 0;
  for (int j = 0; j < kLanes; ++j) total += acc[j];
  for (; i < n; ++i) total += f(i);
  return total;
}


using detail::finish;
using detail::grad_of;

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<Mat<S>>;
template <typename S>
using CMapM = Eigen::Map<const Mat<S>>;

void require(bool cond, const std::string& message) {
  if (!cond) throw ShapeError(message);
}

// Output columns [lo, hi) whose input column ox * stride - pad + kx is inside the image.
inline std::pair<Index, Index> valid_range(Index out_w, Index width, int kx, int stride, int pad) {
  const Index first = pad - kx;  // ox * stride >= first
  const Index lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const Index last = width - 1 + pad - kx;  // ox * stride <= last
  const Index hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  return {std::min(lo, hi), hi};
}

// Unfolds one [C, H, W] image into columns [C*k*k, Ho*Wo].
template <typename S>
void im2col(const S* img, Index channels, Index height, Index width, int k, int stride, int pad,
            Index out_h, Index out_w, S* col) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* row = col + ((c * k + ky) * k + kx) * plane;
        const auto [lo, hi] = valid_range(out_w, width, kx, stride, pad);
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          S* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill_n(dst, out_w, S(0));
            continue;
          }
          const S* src = img + (c * height + iy) * width + kx - pad;
          std::fill_n(dst, lo, S(0));
          if (stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride];
          }
          std::fill(dst + hi, dst + out_w, S(0));
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into a [C, H, W] image.
template <typename S>
void col2im(const S* col, Index channels, Index height, Index width, int k, int stride, int pad,
            Index out_h, Index out_w, S* img) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* row = col + ((c * k + ky) * k + kx) * plane;
        const auto [lo, hi] = valid_range(out_w, width, kx, stride, pad);
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          S* dst = img + (c * height + iy) * width + kx - pad;
          const S* src = row + oy * out_w;
          for (Index ox = lo; ox < hi; ++ox) dst[ox * stride] += src[ox];
        }
      }
    }
  }
}

// Bilinear corner indices and weights for a clamped (x, y) sample.
template <typename S>
struct Corners {
  Index x0, y0, x1, y1;
  S fx, fy;
  bool clamp_x, clamp_y;  // coordinate was outside the valid rectangle
};

template <typename S>
Corners<S> corners(S x, S y, Index height, Index width) {
  Corners<S> c{};
  const S max_x = static_cast<S>(width - 1);
  const S max_y = static_cast<S>(height - 1);
  c.clamp_x = x < S(0) || x > max_x;
  c.clamp_y = y < S(0) || y > max_y;
  x = std::clamp(x, S(0), max_x);
  y = std::clamp(y, S(0), max_y);
  c.x0 = std::min(static_cast<Index>(std::floor(x)), std::max<Index>(width - 2, 0));
  c.y0 = std::min(static_cast<Index>(std::floor(y)), std::max<Index>(height - 2, 0));
  c.x1 = std::min(c.x0 + 1, width - 1);
  c.y1 = std::min(c.y0 + 1, height - 1);
  c.fx = x - static_cast<S>(c.x0);
  c.fy = y - static_cast<S>(c.y0);
  return c;
}

}  // namespace

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  require(weight.rank() == 2, "linear: weight must be [d_out, d_in], got " + to_string(weight.shape()));
  require(x.rank() >= 1, "linear: input must have at least one dimension");
  const Index d_out = weight.dim(0);
  const Index d_in = weight.dim(1);
  require(x.shape().back() == d_in, "linear: input trailing dimension " +
                                        std::to_string(x.shape().back()) + " does not match weight d_in " +
                                        std::to_string(d_in));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == d_out,
            "linear: bias must be [" + std::to_string(d_out) + "], got " + to_string(bias.shape()));
  }
  const Index rows = x.numel() / std::max<Index>(d_in, 1);
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  std::vector<S> out(static_cast<std::size_t>(rows * d_out));
  MapM<S> y(out.data(), rows, d_out);
  CMapM<S> xm(x.data().data(), rows, d_in);
  CMapM<S> wm(weight.data().data(), d_out, d_in);
  y.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(bias.data().data(), d_out);
    y.rowwise() += b;
  }
  return finish<S>(out_shape, std::move(out), {&x, &weight, &bias},
                   [x, weight, bias, rows, d_in, d_out](TensorNode<S>* o) {
                     return [x, weight, bias, rows, d_in, d_out, o] {
                       CMapM<S> g(o->grad.data(), rows, d_out);
                       if (S* gx = grad_of(x)) {
                         MapM<S> gxm(gx, rows, d_in);
                         gxm.noalias() += g * CMapM<S>(weight.data().data(), d_out, d_in);
                       }
                       if (S* gw = grad_of(weight)) {
                         MapM<S> gwm(gw, d_out, d_in);
                         gwm.noalias() += g.transpose() * CMapM<S>(x.data().data(), rows, d_in);
                       }
                       if (S* gb = grad_of(bias)) {
                         for (Index j = 0; j < d_out; ++j) gb[j] += lane_sum<S>(rows, [&](Index i) { return g(i, j); });
                       }
                     };
                   });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias, int stride,
                 int padding) {
  require(kernel.rank() == 4, "conv2d: kernel must be [C_out, C_in, k, k], got " + to_string(kernel.shape()));
  require(input.rank() == 3 || input.rank() == 4,
          "conv2d: input must be [C_in, H, W] or [B, C_in, H, W], got " + to_string(input.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  const bool batched = input.rank() == 4;
  const Index batch = batched ? input.dim(0) : 1;
  const Index c_in = input.dim(batched ? 1 : 0);
  const Index height = input.dim(batched ? 2 : 1);
  const Index width = input.dim(batched ? 3 : 2);
  const Index c_out = kernel.dim(0);
  const int k = static_cast<int>(kernel.dim(2));
  require(kernel.dim(3) == k, "conv2d: kernel must be square, got " + to_string(kernel.shape()));
  require(kernel.dim(1) == c_in, "conv2d: input has " + std::to_string(c_in) +
                                     " channels but kernel expects " + std::to_string(kernel.dim(1)) +
                                     " (input " + to_string(input.shape()) + ", kernel " +
                                     to_string(kernel.shape()) + ")");
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == c_out, "conv2d: bias must be [C_out]");
  }
  const Index out_h = (height + 2 * padding - k) / stride + 1;
  const Index out_w = (width + 2 * padding - k) / stride + 1;
  require(out_h >= 1 && out_w >= 1, "conv2d: kernel larger than padded input");
  const Index plane = out_h * out_w;
  const Index patch = c_in * k * k;

  std::vector<S> out(static_cast<std::size_t>(batch * c_out * plane));
  CMapM<S> wm(kernel.data().data(), c_out, patch);
#pragma omp parallel
  {
    std::vector<S> col(static_cast<std::size_t>(patch * plane));
#pragma omp for schedule(static)
    for (Index b = 0; b < batch; ++b) {
      im2col(input.data().data() + b * c_in * height * width, c_in, height, width, k, stride,
             padding, out_h, out_w, col.data());
      MapM<S> y(out.data() + b * c_out * plane, c_out, plane);
      y.noalias() = wm * CMapM<S>(col.data(), patch, plane);
      if (bias.defined()) {
        for (Index c = 0; c < c_out; ++c) y.row(c).array() += bias.data()[c];
      }
    }
  }
  Shape out_shape = batched ? Shape{batch, c_out, out_h, out_w} : Shape{c_out, out_h, out_w};
  return finish<S>(
      out_shape, std::move(out), {&input, &kernel, &bias},
      [=](TensorNode<S>* o) {
        return [=] {
          S* gx = grad_of(input);
          S* gw = grad_of(kernel);
          S* gb = grad_of(bias);
          std::vector<S> col(static_cast<std::size_t>(patch * plane));
          CMapM<S> wmat(kernel.data().data(), c_out, patch);
          for (Index b = 0; b < batch; ++b) {
            CMapM<S> g(o->grad.data() + b * c_out * plane, c_out, plane);
            if (gw != nullptr) {
              im2col(input.data().data() + b * c_in * height * width, c_in, height, width, k, stride,
                     padding, out_h, out_w, col.data());
              MapM<S>(gw, c_out, patch).noalias() += g * CMapM<S>(col.data(), patch, plane).transpose();
            }
            if (gb != nullptr) {
              for (Index c = 0; c < c_out; ++c) {
                const S* gr = g.data() + c * plane;
                gb[c] += lane_sum<S>(plane, [&](Index i) { return gr[i]; });
              }
            }
            if (gx != nullptr) {
              MapM<S> cm(col.data(), patch, plane);
              cm.noalias() = wmat.transpose() * g;
              col2im(col.data(), c_in, height, width, k, stride, padding, out_h, out_w,
                     gx + b * c_in * height * width);
            }
          }
        };
      });
}

namespace {

// Shared normalization kernel over `rows` independent vectors of length `len`.
// Each row is a run of len / per_channel channel segments; segment s of row r
// is channel (r % groups) * per_group + s.
template <typename S>
void softmax_row(S* row, Index n) {
  const S mx = *std::max_element(row, row + n);
  for (Index i = 0; i < n; ++i) row[i] = std::exp(row[i] - mx);
  const S inv = S(1) / lane_sum<S>(n, [&](Index i) { return row[i]; });
  for (Index i = 0; i < n; ++i) row[i] *= inv;
}

template <typename S>
Tensor<S> normalize_rows(const Tensor<S>& input, Index rows, Index len, Index per_channel,
                         Index groups, Index per_group, const Tensor<S>& gain, const Tensor<S>& offset,
                         S eps) {
  using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
  using CMapA = Eigen::Map<const Arr>;
  using MapA = Eigen::Map<Arr>;
  auto x = input.data();
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto rstd = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  std::vector<S> out(x.size());
  const S* gn = gain.defined() ? gain.data().data() : nullptr;
  const S* of = offset.defined() ? offset.data().data() : nullptr;
  const Index segments = len / per_channel;
  for (Index r = 0; r < rows; ++r) {
    CMapA xr(x.data() + r * len, len);
    const S* xp = x.data() + r * len;
    const S m = lane_sum<S>(len, [&](Index i) { return xp[i]; }) / S(len);
    const S v = lane_sum<S>(len, [&](Index i) { return (xp[i] - m) * (xp[i] - m); }) / S(len);
    const S rs = S(1) / std::sqrt(v + eps);
    (*rstd)[r] = rs;
    MapA h(xhat->data() + r * len, len);
    h = (xr - m) * rs;
    for (Index s = 0; s < segments; ++s) {
      const Index c = (r % groups) * per_group + s;
      MapA(out.data() + r * len + s * per_channel, per_channel) =
          h.segment(s * per_channel, per_channel) * (gn ? gn[c] : S(1)) + (of ? of[c] : S(0));
    }
  }
  return finish<S>(input.shape(), std::move(out), {&input, &gain, &offset},
                   [=](TensorNode<S>* o) {
                     return [=] {
                       S* gx = grad_of(input);
                       S* gg = grad_of(gain);
                       S* go = grad_of(offset);
                       const S* gn = gain.defined() ? gain.data().data() : nullptr;
                       Arr gh(len);
                       for (Index r = 0; r < rows; ++r) {
                         CMapA g(o->grad.data() + r * len, len);
                         CMapA h(xhat->data() + r * len, len);
                         for (Index s = 0; s < segments; ++s) {
                           const Index c = (r % groups) * per_group + s;
                           const Index base = s * per_channel;
                           gh.segment(base, per_channel) = g.segment(base, per_channel) * (gn ? gn[c] : S(1));
                           if (gg) gg[c] += lane_sum<S>(per_channel, [&](Index i) { return g[base + i] * h[base + i]; });
                           if (go) go[c] += lane_sum<S>(per_channel, [&](Index i) { return g[base + i]; });
                         }
                         if (!gx) continue;
                         const S mean_gh = lane_sum<S>(len, [&](Index i) { return gh[i]; }) / S(len);
                         const S mean_ghh = lane_sum<S>(len, [&](Index i) { return gh[i] * h[i]; }) / S(len);
                         MapA(gx + r * len, len) += (*rstd)[r] * (gh - mean_gh - h * mean_ghh);
                       }
                     };
                   });
}

}  // namespace

template <typename S>
Tensor<S> group_norm(const Tensor<S>& input, int groups, const Tensor<S>& gain,
                     const Tensor<S>& offset, S epsilon) {
  require(input.rank() == 4, "group_norm: input must be [B, C, H, W], got " + to_string(input.shape()));
  const Index channels = input.dim(1);
  require(groups >= 1 && channels % groups == 0,
          "group_norm: " + std::to_string(channels) + " channels not divisible into " +
              std::to_string(groups) + " groups");
  require(!gain.defined() || (gain.rank() == 1 && gain.dim(0) == channels), "group_norm: gain must be [C]");
  require(!offset.defined() || (offset.rank() == 1 && offset.dim(0) == channels),
          "group_norm: offset must be [C]");
  const Index plane = input.dim(2) * input.dim(3);
  const Index per_group = channels / groups;
  return normalize_rows(input, input.dim(0) * groups, per_group * plane, plane, groups, per_group, gain,
                        offset, epsilon);
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& input, const Tensor<S>& gain, const Tensor<S>& offset,
                     S epsilon) {
  require(input.rank() >= 1, "layer_norm: input must have a trailing dimension");
  const Index d = input.shape().back();
  require(d >= 1, "layer_norm: trailing dimension must be >= 1");
  require(!gain.defined() || (gain.rank() == 1 && gain.dim(0) == d), "layer_norm: gain must be [d]");
  require(!offset.defined() || (offset.rank() == 1 && offset.dim(0) == d), "layer_norm: offset must be [d]");
  return normalize_rows(input, input.numel() / d, d, 1, 1, 0, gain, offset, epsilon);
}

template <typename S>
Tensor<S> softmax_attention(const Tensor<S>& queries, const Tensor<S>& keys, const Tensor<S>& values) {
  const bool batched = queries.rank() == 3;
  require(queries.rank() == keys.rank() && keys.rank() == values.rank() && (batched || queries.rank() == 2),
          "softmax_attention: q, k, v must all be [L, d] or all [B, L, d]");
  const Index batch = batched ? queries.dim(0) : 1;
  const std::size_t o = batched ? 1 : 0;
  const Index lq = queries.dim(o), d = queries.dim(o + 1);
  const Index lk = keys.dim(o), dv = values.dim(o + 1);
  require(keys.dim(o + 1) == d, "softmax_attention: query width " + std::to_string(d) +
                                    " does not match key width " + std::to_string(keys.dim(o + 1)));
  require(values.dim(o) == lk, "softmax_attention: key count and value count differ");
  require(!batched || (keys.dim(0) == batch && values.dim(0) == batch),
          "softmax_attention: batch sizes differ");
  require(lk >= 1, "softmax_attention: need at least one key");
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));

  auto weights = std::make_shared<std::vector<S>>(static_cast<std::size_t>(batch * lq * lk));
  std::vector<S> out(static_cast<std::size_t>(batch * lq * dv));
  for (Index b = 0; b < batch; ++b) {
    CMapM<S> q(queries.data().data() + b * lq * d, lq, d);
    CMapM<S> k(keys.data().data() + b * lk * d, lk, d);
    CMapM<S> v(values.data().data() + b * lk * dv, lk, dv);
    MapM<S> a(weights->data() + b * lq * lk, lq, lk);
    a.noalias() = (q * k.transpose()) * inv_sqrt_d;
    for (Index r = 0; r < lq; ++r) softmax_row(&a(r, 0), lk);
    MapM<S>(out.data() + b * lq * dv, lq, dv).noalias() = a * v;
  }
  Shape out_shape = batched ? Shape{batch, lq, dv} : Shape{lq, dv};
  return finish<S>(out_shape, std::move(out), {&queries, &keys, &values}, [=](TensorNode<S>* node) {
    return [=] {
      S* gq = grad_of(queries);
      S* gk = grad_of(keys);
      S* gv = grad_of(values);
      Mat<S> ga(lq, lk);
      for (Index b = 0; b < batch; ++b) {
        CMapM<S> g(node->grad.data() + b * lq * dv, lq, dv);
        CMapM<S> a(weights->data() + b * lq * lk, lq, lk);
        CMapM<S> v(values.data().data() + b * lk * dv, lk, dv);
        if (gv) MapM<S>(gv + b * lk * dv, lk, dv).noalias() += a.transpose() * g;
        if (!gq && !gk) continue;
        ga.noalias() = g * v.transpose();
        for (Index r = 0; r < lq; ++r) {
          const S dot = lane_sum<S>(lk, [&](Index c) { return ga(r, c) * a(r, c); });
          ga.row(r) = (a.row(r).array() * (ga.row(r).array() - dot)).matrix();
        }
        ga *= inv_sqrt_d;
        if (gq) {
          MapM<S>(gq + b * lq * d, lq, d).noalias() += ga * CMapM<S>(keys.data().data() + b * lk * d, lk, d);
        }
        if (gk) {
          MapM<S>(gk + b * lk * d, lk, d).noalias() +=
              ga.transpose() * CMapM<S>(queries.data().data() + b * lq * d, lq, d);
        }
      }
    };
  });
}

template <typename S>
Tensor<S> attention_weights(const Tensor<S>& queries, const Tensor<S>& keys) {
  const bool batched = queries.rank() == 3;
  const Index batch = batched ? queries.dim(0) : 1;
  const std::size_t o = batched ? 1 : 0;
  const Index lq = queries.dim(o), d = queries.dim(o + 1), lk = keys.dim(o);
  require(keys.dim(o + 1) == d, "attention_weights: query/key width mismatch");
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));
  std::vector<S> w(static_cast<std::size_t>(batch * lq * lk));
  for (Index b = 0; b < batch; ++b) {
    MapM<S> a(w.data() + b * lq * lk, lq, lk);
    a.noalias() = (CMapM<S>(queries.data().data() + b * lq * d, lq, d) *
                   CMapM<S>(keys.data().data() + b * lk * d, lk, d).transpose()) *
                  inv_sqrt_d;
    for (Index r = 0; r < lq; ++r) softmax_row(&a(r, 0), lk);
  }
  return Tensor<S>({batch, lq, lk}, std::move(w));
}

template <typename S>
Tensor<S> avg_pool2(const Tensor<S>& input) {
  require(input.rank() >= 2, "avg_pool2: input needs two spatial axes");
  const Shape& in = input.shape();
  const Index h = in[in.size() - 2], w = in[in.size() - 1];
  const Index oh = h / 2, ow = w / 2;
  require(oh >= 1 && ow >= 1, "avg_pool2: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                                  " too small to pool");
  const Index planes = input.numel() / (h * w);
  Shape out_shape = in;
  out_shape[in.size() - 2] = oh;
  out_shape[in.size() - 1] = ow;
  std::vector<S> out(static_cast<std::size_t>(planes * oh * ow));
  auto x = input.data();
  for (Index p = 0; p < planes; ++p) {
    const S* src = x.data() + p * h * w;
    S* dst = out.data() + p * oh * ow;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        const S* r0 = src + (2 * i) * w + 2 * j;
        dst[i * ow + j] = S(0.25) * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
    }
  }
  return finish<S>(out_shape, std::move(out), {&input}, [=](TensorNode<S>* o) {
    return [=] {
      S* gx = grad_of(input);
      for (Index p = 0; p < planes; ++p) {
        const S* g = o->grad.data() + p * oh * ow;
        S* dst = gx + p * h * w;
        for (Index i = 0; i < oh; ++i) {
          for (Index j = 0; j < ow; ++j) {
            const S v = S(0.25) * g[i * ow + j];
            S* r0 = dst + (2 * i) * w + 2 * j;
            r0[0] += v;
            r0[1] += v;
            r0[w] += v;
            r0[w + 1] += v;
          }
        }
      }
    };
  });
}

template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& map, const Tensor<S>& coords) {
  const bool batched = map.rank() == 4;
  require(map.rank() == 3 || batched, "bilinear_sample: map must be [C, H, W] or [B, C, H, W], got " +
                                          to_string(map.shape()));
  require(coords.rank() == (batched ? 3u : 2u) && coords.shape().back() == 2,
          "bilinear_sample: coords must be [P, 2] (or [B, P, 2] for batched maps), got " +
              to_string(coords.shape()));
  const Index batch = batched ? map.dim(0) : 1;
  require(!batched || coords.dim(0) == batch, "bilinear_sample: batch sizes differ");
  const std::size_t o = batched ? 1 : 0;
  const Index channels = map.dim(o), height = map.dim(o + 1), width = map.dim(o + 2);
  const Index points = coords.dim(o);
  for (S c : coords.data()) {
    require(std::isfinite(static_cast<double>(c)), "bilinear_sample: coordinates must be finite");
  }
  const Index plane = height * width;
  std::vector<S> out(static_cast<std::size_t>(batch * points * channels));
  auto m = map.data();
  auto xy = coords.data();
  for (Index b = 0; b < batch; ++b) {
    const S* mb = m.data() + b * channels * plane;
    for (Index p = 0; p < points; ++p) {
      const auto cn = corners(xy[(b * points + p) * 2], xy[(b * points + p) * 2 + 1], height, width);
      const S w00 = (1 - cn.fx) * (1 - cn.fy), w01 = cn.fx * (1 - cn.fy);
      const S w10 = (1 - cn.fx) * cn.fy, w11 = cn.fx * cn.fy;
      S* dst = out.data() + (b * points + p) * channels;
      for (Index c = 0; c < channels; ++c) {
        const S* mc = mb + c * plane;
        dst[c] = w00 * mc[cn.y0 * width + cn.x0] + w01 * mc[cn.y0 * width + cn.x1] +
                 w10 * mc[cn.y1 * width + cn.x0] + w11 * mc[cn.y1 * width + cn.x1];
      }
    }
  }
  Shape out_shape = batched ? Shape{batch, points, channels} : Shape{points, channels};
  return finish<S>(out_shape, std::move(out), {&map, &coords}, [=](TensorNode<S>* node) {
    return [=] {
      S* gm = grad_of(map);
      S* gc = grad_of(coords);
      auto m = map.data();
      auto xy = coords.data();
      for (Index b = 0; b < batch; ++b) {
        const S* mb = m.data() + b * channels * plane;
        for (Index p = 0; p < points; ++p) {
          const Index pi = b * points + p;
          const auto cn = corners(xy[pi * 2], xy[pi * 2 + 1], height, width);
          const S w00 = (1 - cn.fx) * (1 - cn.fy), w01 = cn.fx * (1 - cn.fy);
          const S w10 = (1 - cn.fx) * cn.fy, w11 = cn.fx * cn.fy;
          const S* g = node->grad.data() + pi * channels;
          S dx = 0, dy = 0;
          for (Index c = 0; c < channels; ++c) {
            const Index base = b * channels * plane + c * plane;
            if (gm) {
              gm[base + cn.y0 * width + cn.x0] += w00 * g[c];
              gm[base + cn.y0 * width + cn.x1] += w01 * g[c];
              gm[base + cn.y1 * width + cn.x0] += w10 * g[c];
              gm[base + cn.y1 * width + cn.x1] += w11 * g[c];
            }
            if (gc) {
              const S* mc = mb + c * plane;
              const S v00 = mc[cn.y0 * width + cn.x0], v01 = mc[cn.y0 * width + cn.x1];
              const S v10 = mc[cn.y1 * width + cn.x0], v11 = mc[cn.y1 * width + cn.x1];
              dx += g[c] * ((1 - cn.fy) * (v01 - v00) + cn.fy * (v11 - v10));
              dy += g[c] * ((1 - cn.fx) * (v10 - v00) + cn.fx * (v11 - v01));
            }
          }
          if (gc) {
            if (!cn.clamp_x && width > 1) gc[pi * 2] += dx;
            if (!cn.clamp_y && height > 1) gc[pi * 2 + 1] += dy;
          }
        }
      }
    };
  });
}

template <typename S>
Tensor<S> local_correlation(const Tensor<S>& features, const Tensor<S>& vectors, const Tensor<S>& centers,
                            int radius) {
  require(features.rank() == 4, "local_correlation: features must be [T, C, H, W], got " +
                                    to_string(features.shape()));
  require(vectors.rank() == 2 && vectors.dim(1) == features.dim(1),
          "local_correlation: vectors must be [N, C] with C = " + std::to_string(features.dim(1)) + ", got " +
              to_string(vectors.shape()));
  require(centers.rank() == 3 && centers.dim(0) == features.dim(0) && centers.dim(1) == vectors.dim(0) &&
              centers.dim(2) == 2,
          "local_correlation: centers must be [T, N, 2], got " + to_string(centers.shape()));
  require(radius >= 0, "local_correlation: radius must be >= 0");
  const Index frames = features.dim(0), channels = features.dim(1);
  const Index height = features.dim(2), width = features.dim(3);
  const Index points = vectors.dim(0);
  const int side = 2 * radius + 1;
  const Index taps = static_cast<Index>(side) * side;
  const Index plane = height * width;

  // Channels-last copy so each corner read is one contiguous C-vector.
  auto nhwc = std::make_shared<std::vector<S>>(features.data().size());
  {
    auto f = features.data();
    for (Index t = 0; t < frames; ++t)
      for (Index c = 0; c < channels; ++c)
        for (Index p = 0; p < plane; ++p)
          (*nhwc)[(t * plane + p) * channels + c] = f[(t * channels + c) * plane + p];
  }
  std::vector<S> out(static_cast<std::size_t>(frames * points * taps));
  auto q = vectors.data();
  auto ctr = centers.data();
  for (Index t = 0; t < frames; ++t) {
    const S* ft = nhwc->data() + t * plane * channels;
    for (Index n = 0; n < points; ++n) {
      const S* qn = q.data() + n * channels;
      const S cx = ctr[(t * points + n) * 2], cy = ctr[(t * points + n) * 2 + 1];
      S* dst = out.data() + (t * points + n) * taps;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const auto cn = corners(cx + S(dx), cy + S(dy), height, width);
          auto dot = [&](Index yy, Index xx) {
            const S* v = ft + (yy * width + xx) * channels;
            S acc = 0;
            for (Index c = 0; c < channels; ++c) acc += qn[c] * v[c];
            return acc;
          };
          *dst++ = (1 - cn.fx) * (1 - cn.fy) * dot(cn.y0, cn.x0) + cn.fx * (1 - cn.fy) * dot(cn.y0, cn.x1) +
                   (1 - cn.fx) * cn.fy * dot(cn.y1, cn.x0) + cn.fx * cn.fy * dot(cn.y1, cn.x1);
        }
      }
    }
  }
  return finish<S>({frames, points, taps}, std::move(out), {&features, &vectors, &centers},
                   [=](TensorNode<S>* node) {
                     return [=] {
                       S* gf = grad_of(features);
                       S* gq = grad_of(vectors);
                       S* gc = grad_of(centers);
                       std::vector<S> gf_nhwc(gf ? nhwc->size() : 0, S(0));
                       auto q = vectors.data();
                       auto ctr = centers.data();
                       for (Index t = 0; t < frames; ++t) {
                         const S* ft = nhwc->data() + t * plane * channels;
                         for (Index n = 0; n < points; ++n) {
                           const S* qn = q.data() + n * channels;
                           const Index pi = t * points + n;
                           const S cx = ctr[pi * 2], cy = ctr[pi * 2 + 1];
                           const S* g = node->grad.data() + pi * taps;
                           Index tap = 0;
                           for (int dy = -radius; dy <= radius; ++dy) {
                             for (int dx = -radius; dx <= radius; ++dx, ++tap) {
                               const S gt = g[tap];
                               if (gt == S(0)) continue;
                               const auto cn = corners(cx + S(dx), cy + S(dy), height, width);
                               const Index idx[4] = {cn.y0 * width + cn.x0, cn.y0 * width + cn.x1,
                                                     cn.y1 * width + cn.x0, cn.y1 * width + cn.x1};
                               const S w[4] = {(1 - cn.fx) * (1 - cn.fy), cn.fx * (1 - cn.fy),
                                               (1 - cn.fx) * cn.fy, cn.fx * cn.fy};
                               S d[4] = {0, 0, 0, 0};
                               for (int j = 0; j < 4; ++j) {
                                 const S* v = ft + idx[j] * channels;
                                 if (gq || gc) {
                                   for (Index c = 0; c < channels; ++c) d[j] += qn[c] * v[c];
                                 }
                                 if (gq) {
                                   S* gqn = gq + n * channels;
                                   for (Index c = 0; c < channels; ++c) gqn[c] += gt * w[j] * v[c];
                                 }
                                 if (gf) {
                                   S* gv = gf_nhwc.data() + (t * plane + idx[j]) * channels;
                                   for (Index c = 0; c < channels; ++c) gv[c] += gt * w[j] * qn[c];
                                 }
                               }
                               if (gc) {
                                 if (!cn.clamp_x && width > 1)
                                   gc[pi * 2] += gt * ((1 - cn.fy) * (d[1] - d[0]) + cn.fy * (d[3] - d[2]));
                                 if (!cn.clamp_y && height > 1)
                                   gc[pi * 2 + 1] += gt * ((1 - cn.fx) * (d[2] - d[0]) + cn.fx * (d[3] - d[1]));
                               }
                             }
                           }
                         }
                       }
                       if (gf) {
                         for (Index t = 0; t < frames; ++t)
                           for (Index c = 0; c < channels; ++c)
                             for (Index p = 0; p < plane; ++p)
                               gf[(t * channels + c) * plane + p] += gf_nhwc[(t * plane + p) * channels + c];
                       }
                     };
                   });
}

std::vector<double> embedding_frequencies(int count) {
  std::vector<double> w(static_cast<std::size_t>(std::max(count, 0)));
  constexpr double kLongest = 1024.0;
  constexpr double kShortest = 4.0;
  for (int i = 0; i < count; ++i) {
    const double frac = count > 1 ? static_cast<double>(i) / (count - 1) : 0.0;
    const double period = kLongest * std::pow(kShortest / kLongest, frac);
    w[i] = 2.0 * std::numbers::pi / period;
  }
  return w;
}

template <typename S>
Tensor<S> sinusoidal_embedding(const Tensor<S>& points, int width) {
  require(width > 0 && width % 2 == 0, "sinusoidal_embedding: width must be positive and even, got " +
                                           std::to_string(width));
  require(points.rank() == 2 && points.dim(1) == 2, "sinusoidal_embedding: points must be [N, 2], got " +
                                                        to_string(points.shape()));
  const Index n = points.dim(0);
  const int half = width / 2;
  const auto freqs = embedding_frequencies((half + 1) / 2);
  std::vector<S> out(static_cast<std::size_t>(n * width));
  auto xy = points.data();
  for (Index i = 0; i < n; ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      const double v = xy[i * 2 + axis];
      for (int j = 0; j < half; ++j) {
        const double arg = freqs[j / 2] * v;
        out[i * width + axis * half + j] = static_cast<S>(j % 2 == 0 ? std::sin(arg) : std::cos(arg));
      }
    }
  }
  return finish<S>({n, width}, std::move(out), {&points}, [=](TensorNode<S>* node) {
    return [=] {
      S* gp = grad_of(points);
      auto xy = points.data();
      for (Index i = 0; i < n; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
          const double v = xy[i * 2 + axis];
          double acc = 0;
          for (int j = 0; j < half; ++j) {
            const double f = freqs[j / 2];
            const double g = node->grad[i * width + axis * half + j];
            acc += g * (j % 2 == 0 ? f * std::cos(f * v) : -f * std::sin(f * v));
          }
          gp[i * 2 + axis] += static_cast<S>(acc);
        }
      }
    };
  });
}

template <typename S>
Tensor<S> position_encoding(Index length, int width) {
  require(width > 0 && width % 2 == 0, "position_encoding: width must be positive and even");
  std::vector<S> out(static_cast<std::size_t>(length * width));
  for (Index t = 0; t < length; ++t) {
    for (int i = 0; i < width / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / width);
      out[t * width + 2 * i] = static_cast<S>(std::sin(t * freq));
      out[t * width + 2 * i + 1] = static_cast<S>(std::cos(t * freq));
    }
  }
  return Tensor<S>({length, width}, std::move(out));
}

#define MYO_INSTANTIATE(S)                                                                          \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                 \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);       \
  template Tensor<S> group_norm(const Tensor<S>&, int, const Tensor<S>&, const Tensor<S>&, S);     \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);          \
  template Tensor<S> softmax_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);      \
  template Tensor<S> attention_weights(const Tensor<S>&, const Tensor<S>&);                        \
  template Tensor<S> avg_pool2(const Tensor<S>&);                                                   \
  template Tensor<S> bilinear_sample(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> local_correlation(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int); \
  template Tensor<S> sinusoidal_embedding(const Tensor<S>&, int);                                   \
  template Tensor<S> position_encoding<S>(Index, int);

MYO_INSTANTIATE(float)
MYO_INSTANTIATE(double)
#undef MYO_INSTANTIATE

}  // namespace myo::ops
