#include <algorithm>
#include <cmath>
#include <numeric>

#include "myotracker/ops.hpp"

namespace myo::ops {
namespace {

using detail::finish;
using detail::grad_of;

// Returns the broadcast period of `b` against `a` (numel(b)), validating that
// b's shape equals a trailing suffix of a's shape.
template <typename S>
Index suffix_period(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape " + to_string(sb) +
                     " is not a trailing suffix of " + to_string(sa));
  }
  return b.numel();
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
  int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

template <typename S, typename F, typename DF>
Tensor<S> unary(const Tensor<S>& a, F f, DF df) {
  std::vector<S> out(a.data().size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return finish<S>(a.shape(), std::move(out), {&a}, [a, df](TensorNode<S>* o) {
    return [a, df, o] {
      S* ga = grad_of(a);
      auto x = a.data();
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += o->grad[i] * df(x[i], o->value[i]);
    };
  });
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const Index period = suffix_period(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i % period];
  return finish<S>(a.shape(), std::move(out), {&a, &b}, [a, b, period](TensorNode<S>* o) {
    return [a, b, period, o] {
      const auto& g = o->grad;
      if (S* ga = grad_of(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (S* gb = grad_of(b)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += g[i];
      }
    };
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  const Index period = suffix_period(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i % period];
  return finish<S>(a.shape(), std::move(out), {&a, &b}, [a, b, period](TensorNode<S>* o) {
    return [a, b, period, o] {
      const auto& g = o->grad;
      if (S* ga = grad_of(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (S* gb = grad_of(b)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] -= g[i];
      }
    };
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  const Index period = suffix_period(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i % period];
  return finish<S>(a.shape(), std::move(out), {&a, &b}, [a, b, period](TensorNode<S>* o) {
    return [a, b, period, o] {
      const auto& g = o->grad;
      auto x = a.data();
      auto y = b.data();
      if (S* ga = grad_of(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i % period];
      }
      if (S* gb = grad_of(b)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += g[i] * x[i];
      }
    };
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return unary(a, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return unary(a, [](S v) { return v > S(0) ? v : S(0); },
               [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](S v) { return S(0.5) * v * (S(1) + std::erf(v * S(kInvSqrt2))); },
      [](S v, S) {
        S cdf = S(0.5) * (S(1) + std::erf(v * S(kInvSqrt2)));
        S pdf = S(kInvSqrt2Pi) * std::exp(S(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return unary(a, [](S v) { return std::abs(v); },
               [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  auto x = a.data();
  S total = std::accumulate(x.begin(), x.end(), S(0));
  return finish<S>({}, {total}, {&a}, [a](TensorNode<S>* o) {
    return [a, o] {
      S* ga = grad_of(a);
      const S g = o->grad[0];
      for (Index i = 0; i < a.numel(); ++i) ga[i] += g;
    };
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  auto x = a.data();
  const S inv = S(1) / static_cast<S>(x.size());
  S total = std::accumulate(x.begin(), x.end(), S(0));
  return finish<S>({}, {total * inv}, {&a}, [a, inv](TensorNode<S>* o) {
    return [a, inv, o] {
      S* ga = grad_of(a);
      const S g = o->grad[0] * inv;
      for (Index i = 0; i < a.numel(); ++i) ga[i] += g;
    };
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<S> out(a.data().begin(), a.data().end());
  return finish<S>(shape, std::move(out), {&a}, [a](TensorNode<S>* o) {
    return [a, o] {
      S* ga = grad_of(a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i];
    };
  });
}

namespace {

// For each output flat index, the flat index of the source element.
std::vector<Index> permutation_map(const Shape& in, const std::vector<int>& order) {
  const std::size_t rank = in.size();
  std::vector<Index> in_strides(rank, 1);
  for (int i = static_cast<int>(rank) - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in[i + 1];
  Shape out(rank);
  std::vector<Index> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[order[i]];
    src_strides[i] = in_strides[order[i]];
  }
  const Index total = numel(in);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> counter(rank, 0);
  Index src = 0;
  for (Index flat = 0; flat < total; ++flat) {
    map[flat] = src;
    for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
      if (++counter[ax] < out[ax]) {
        src += src_strides[ax];
        break;
      }
      src -= src_strides[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& order) {
  const Shape& in = a.shape();
  if (order.size() != in.size()) throw ShapeError("permute: order rank does not match tensor rank");
  std::vector<bool> seen(in.size(), false);
  for (int ax : order) {
    if (ax < 0 || ax >= static_cast<int>(in.size()) || seen[ax]) {
      throw ShapeError("permute: order is not a permutation of the axes");
    }
    seen[ax] = true;
  }
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[order[i]];
  auto map = std::make_shared<std::vector<Index>>(permutation_map(in, order));
  auto x = a.data();
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*map)[i]];
  return finish<S>(out_shape, std::move(out), {&a}, [a, map](TensorNode<S>* o) {
    return [a, map, o] {
      S* ga = grad_of(a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[(*map)[i]] += o->grad[i];
    };
  });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  axis = normalize_axis(axis, first.size(), "concat");
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  Index inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(first) +
                       " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
    widths.push_back(s[axis] * inner);
  }
  const Index row = out_shape[axis] * inner;
  std::vector<S> out(static_cast<std::size_t>(outer * row));
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto x = parts[p].data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(x.begin() + o * widths[p], widths[p], out.begin() + o * row + offset);
    }
    offset += widths[p];
  }
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = out_shape;
  node->value = std::move(out);
  Tape<S>* tape = Tape<S>::active();
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    TensorNode<S>* o = node.get();
    tape->record(node, [parts, widths, outer, row, o] {
      Index offset = 0;
      for (std::size_t p = 0; p < parts.size(); ++p) {
        if (S* gp = grad_of(parts[p])) {
          for (Index r = 0; r < outer; ++r) {
            const S* src = o->grad.data() + r * row + offset;
            S* dst = gp + r * widths[p];
            for (Index i = 0; i < widths[p]; ++i) dst[i] += src[i];
          }
        }
        offset += widths[p];
      }
    });
  }
  return Tensor<S>::from_node(std::move(node));
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, Index start, Index length) {
  const Shape& in = a.shape();
  axis = normalize_axis(axis, in.size(), "slice");
  if (start < 0 || length < 0 || start + length > in[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " + to_string(in));
  }
  std::vector<Index> indices(static_cast<std::size_t>(length));
  std::iota(indices.begin(), indices.end(), start);
  return index_select(a, axis, indices);
}

template <typename S>
Tensor<S> index_select(const Tensor<S>& a, int axis, const std::vector<Index>& indices) {
  const Shape& in = a.shape();
  axis = normalize_axis(axis, in.size(), "index_select");
  for (Index i : indices) {
    if (i < 0 || i >= in[axis]) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for axis " +
                       std::to_string(axis) + " of " + to_string(in));
    }
  }
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= in[i];
  Index inner = 1;
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = static_cast<Index>(indices.size());
  const Index count = static_cast<Index>(indices.size());
  auto x = a.data();
  std::vector<S> out(static_cast<std::size_t>(outer * count * inner));
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < count; ++j) {
      std::copy_n(x.begin() + (o * in[axis] + indices[j]) * inner, inner,
                  out.begin() + (o * count + j) * inner);
    }
  }
  const Index extent = in[axis];
  return finish<S>(out_shape, std::move(out), {&a},
                   [a, indices, outer, inner, count, extent](TensorNode<S>* o) {
                     return [a, indices, outer, inner, count, extent, o] {
                       S* ga = grad_of(a);
                       for (Index r = 0; r < outer; ++r) {
                         for (Index j = 0; j < count; ++j) {
                           const S* src = o->grad.data() + (r * count + j) * inner;
                           S* dst = ga + (r * extent + indices[j]) * inner;
                           for (Index i = 0; i < inner; ++i) dst[i] += src[i];
                         }
                       }
                     };
                   });
}

#define MYO_INSTANTIATE(S)                                                                   \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> scale(const Tensor<S>&, S);                                            \
  template Tensor<S> relu(const Tensor<S>&);                                                \
  template Tensor<S> gelu(const Tensor<S>&);                                                \
  template Tensor<S> abs(const Tensor<S>&);                                                 \
  template Tensor<S> sum(const Tensor<S>&);                                                 \
  template Tensor<S> mean(const Tensor<S>&);                                                \
  template Tensor<S> reshape(const Tensor<S>&, const Shape&);                               \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                    \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                            \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                            \
  template Tensor<S> index_select(const Tensor<S>&, int, const std::vector<Index>&);

MYO_INSTANTIATE(float)
MYO_INSTANTIATE(double)
#undef MYO_INSTANTIATE

}  // namespace myo::ops
