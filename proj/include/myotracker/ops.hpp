#pragma once

// Differentiable tensor operations. Every function here records a backward
// closure when called under an active GradScope; all are instantiated for
// float (production) and double (gradient checking).

#include <vector>

#include "myotracker/tensor.hpp"

namespace myo::ops {

// Elementwise. `b` must have the same shape as `a` or be a trailing suffix of
// it (broadcast over leading dimensions).
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);

template <typename S> Tensor<S> relu(const Tensor<S>& a);
// Exact (erf) GELU.
template <typename S> Tensor<S> gelu(const Tensor<S>& a);
// Subgradient 0 at the origin.
template <typename S> Tensor<S> abs(const Tensor<S>& a);

template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);

// Layout operations copy their input.
template <typename S> Tensor<S> reshape(const Tensor<S>& a, const Shape& shape);
template <typename S> Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& order);
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <typename S> Tensor<S> slice(const Tensor<S>& a, int axis, Index start, Index length);
// Gathers entries along `axis`; indices may repeat.
template <typename S>
Tensor<S> index_select(const Tensor<S>& a, int axis, const std::vector<Index>& indices);

// y = x W^T + b over the trailing dimension. `bias` may be undefined.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias);

// input [B, C_in, H, W] or [C_in, H, W]; kernel [C_out, C_in, k, k]; zero padding.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 int stride, int padding);

// Normalizes each (sample, group) of a [B, C, H, W] tensor; gain/offset are per channel.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& input, int groups, const Tensor<S>& gain,
                     const Tensor<S>& offset, S epsilon);

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& input, const Tensor<S>& gain, const Tensor<S>& offset,
                     S epsilon);

// Scaled dot-product attention, softmax(q k^T / sqrt(d)) v.
// q [B, Lq, d] or [Lq, d]; k [B, Lk, d]; v [B, Lk, dv].
template <typename S>
Tensor<S> softmax_attention(const Tensor<S>& queries, const Tensor<S>& keys,
                            const Tensor<S>& values);
// The attention weights alone, [B, Lq, Lk] (not differentiable).
template <typename S>
Tensor<S> attention_weights(const Tensor<S>& queries, const Tensor<S>& keys);

// 2x2 mean pooling over the two trailing axes (floor on odd sizes).
template <typename S> Tensor<S> avg_pool2(const Tensor<S>& input);

// Bilinear interpolation at (x, y) pixel coordinates; x indexes the last axis.
// Coordinates are clamped to [0, W-1] x [0, H-1].
// map [C, H, W] with coords [P, 2] -> [P, C]
// map [B, C, H, W] with coords [B, P, 2] -> [B, P, C]
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& map, const Tensor<S>& coords);

// Dot products between per-point vectors and bilinearly sampled feature
// vectors on a (2r+1)x(2r+1) integer-offset grid around each center.
// features [T, C, H, W], vectors [N, C], centers [T, N, 2] -> [T, N, (2r+1)^2]
// with offsets ordered row-major by (dy, dx), each in [-r, r].
template <typename S>
Tensor<S> local_correlation(const Tensor<S>& features, const Tensor<S>& vectors,
                            const Tensor<S>& centers, int radius);

// Sinusoidal embedding of 2-D points: [N, 2] -> [N, width]. The first
// width/2 channels encode x, the rest y; within each half channel 2i is
// sin(w_i v) and 2i+1 is cos(w_i v) over a geometric ladder of angular
// frequencies (periods 1024 px down to 4 px).
template <typename S>
Tensor<S> sinusoidal_embedding(const Tensor<S>& points, int width);
// Frequency ladder used by sinusoidal_embedding for `count` frequencies.
std::vector<double> embedding_frequencies(int count);

// 1-D sinusoidal encoding of positions 0..length-1: [length, width].
template <typename S> Tensor<S> position_encoding(Index length, int width);

}  // namespace myo::ops
