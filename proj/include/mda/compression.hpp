#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mda/ops.hpp"
#include "mda/params.hpp"
#include "mda/tensor.hpp"
#include "mda/volume.hpp"

// Slice-wise compression: the 2r difference images around slice i, ordered by
// L1 norm, are condensed into one residual slice by softmax weights estimated
// with the cSE-style depth-wise squeeze. The squeeze parameters are learned;
// the weights themselves are recomputed per input.
namespace mda {

enum class BoundaryPolicy { kMirror, kClamp, kZero };
enum class DiffOrdering { kDescending, kAscending };

struct CompressionConfig {
  int radius = 5;  // r: neighbors at offsets [-r..-1, 1..r]
  BoundaryPolicy boundary = BoundaryPolicy::kMirror;
  DiffOrdering ordering = DiffOrdering::kDescending;

  int channels() const { return 2 * radius; }

  void validate(std::int64_t slice_count) const {
    if (radius < 1) {
      throw UsageError("compression: radius must be >= 1, got " + std::to_string(radius));
    }
    if (2 * static_cast<std::int64_t>(radius) >= slice_count) {
      throw UsageError("compression: 2r = " + std::to_string(2 * radius) +
                       " must be smaller than the view's slice count " +
                       std::to_string(slice_count));
    }
  }
};

inline const char* boundary_name(BoundaryPolicy p) {
  switch (p) {
    case BoundaryPolicy::kMirror: return "mirror";
    case BoundaryPolicy::kClamp: return "clamp";
    case BoundaryPolicy::kZero: return "zero";
  }
  return "?";
}

inline BoundaryPolicy parse_boundary(const std::string& name) {
  if (name == "mirror") return BoundaryPolicy::kMirror;
  if (name == "clamp") return BoundaryPolicy::kClamp;
  if (name == "zero") return BoundaryPolicy::kZero;
  throw UsageError("unknown boundary policy \"" + name + "\" (mirror|clamp|zero)");
}

// Resolves an out-of-range neighbor index. Mirror reflects about the
// boundary without repeating the edge slice (index -1 -> 1).
inline std::int64_t resolve_neighbor(std::int64_t idx, std::int64_t p,
                                     BoundaryPolicy policy) {
  if (idx >= 0 && idx < p) return idx;
  switch (policy) {
    case BoundaryPolicy::kMirror: {
      std::int64_t r = idx;
      while (r < 0 || r >= p) {
        if (r < 0) r = -r;
        if (r >= p) r = 2 * (p - 1) - r;
      }
      return r;
    }
    case BoundaryPolicy::kClamp:
      return std::clamp<std::int64_t>(idx, 0, p - 1);
    case BoundaryPolicy::kZero:
      return -1;  // caller substitutes a zero slice
  }
  return -1;
}

// Learned squeeze parameters, bound to one (m, n, 2r) view geometry. One set
// is shared across all slices and subjects of a view.
template <typename T>
struct CompressionParams {
  std::int64_t rows = 0, cols = 0, channels = 0;
  Tensor<T> filter_h;  // [m, 2r]
  Tensor<T> filter_w;  // [n, 2r]
  Tensor<T> bias_h;    // [2r]
  Tensor<T> bias_w;    // [2r]

  static CompressionParams create(ParamRegistry<T>& reg, const std::string& prefix,
                                  std::int64_t m, std::int64_t n, std::int64_t channels) {
    CompressionParams p;
    p.rows = m;
    p.cols = n;
    p.channels = channels;
    p.filter_h = reg.create(prefix + "/filter_h", {m, channels}, m);
    p.filter_w = reg.create(prefix + "/filter_w", {n, channels}, n);
    p.bias_h = reg.create_zeros(prefix + "/bias_h", {channels});
    p.bias_w = reg.create_zeros(prefix + "/bias_w", {channels});
    return p;
  }

  // 2r*(m+n) filter taps + 2*2r biases.
  std::int64_t param_count() const {
    return channels * (rows + cols) + 2 * channels;
  }
};

// Difference images around one slice, stored channel-last as [1, m, n, 2r].
template <typename T>
struct DiffStack {
  Tensor<T> diffs;
  std::vector<double> l1;        // per channel
  std::vector<int> offsets;      // signed j per channel
  bool ordered = false;
};

// Builds the unordered stack: channel k holds I(resolve(i+j_k)) - I(i) with
// j enumerated -r..-1, 1..r.
template <typename T>
DiffStack<T> neighborhood_diffs(const VolumeViewF& view, std::int64_t i,
                                const CompressionConfig& cfg) {
  const std::int64_t p = view.plan.p, m = view.plan.m, n = view.plan.n;
  cfg.validate(p);
  if (i < 0 || i >= p) {
    throw DataError("neighborhood_diffs: slice index " + std::to_string(i) +
                    " out of range [0," + std::to_string(p) + ")");
  }
  const std::int64_t ch = cfg.channels();
  const std::int64_t plane = m * n;

  std::vector<int> offsets;
  for (int j = -cfg.radius; j <= cfg.radius; ++j) {
    if (j != 0) offsets.push_back(j);
  }

  std::vector<T> data(static_cast<std::size_t>(plane * ch));
  std::vector<double> l1(static_cast<std::size_t>(ch), 0.0);
  const float* center = view.slice(i);
  for (std::int64_t k = 0; k < ch; ++k) {
    const std::int64_t neighbor =
        resolve_neighbor(i + offsets[static_cast<std::size_t>(k)], p, cfg.boundary);
    const float* other = neighbor >= 0 ? view.slice(neighbor) : nullptr;
    double norm = 0.0;
    for (std::int64_t px = 0; px < plane; ++px) {
      const double d = (other ? static_cast<double>(other[px]) : 0.0) -
                       static_cast<double>(center[px]);
      data[static_cast<std::size_t>(px * ch + k)] = static_cast<T>(d);
      norm += std::abs(d);
    }
    l1[static_cast<std::size_t>(k)] = norm;
  }

  DiffStack<T> stack;
  stack.diffs = Tensor<T>::from_data({1, m, n, ch}, std::move(data));
  stack.l1 = std::move(l1);
  stack.offsets = std::move(offsets);
  return stack;
}

// Permutes channels so the L1 norms are monotone under cfg.ordering. Equal
// norms break ties by signed offset ascending, which makes the result
// independent of the stack's incoming channel order.
template <typename T>
DiffStack<T> order_by_l1(const DiffStack<T>& stack, const CompressionConfig& cfg) {
  const Shape& s = stack.diffs.shape();
  const std::int64_t ch = s[3];
  std::vector<std::size_t> perm(static_cast<std::size_t>(ch));
  std::iota(perm.begin(), perm.end(), 0);
  const bool descending = cfg.ordering == DiffOrdering::kDescending;
  std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
    if (stack.l1[a] != stack.l1[b]) {
      return descending ? stack.l1[a] > stack.l1[b] : stack.l1[a] < stack.l1[b];
    }
    return stack.offsets[a] < stack.offsets[b];
  });

  const std::int64_t plane = s[1] * s[2];
  std::vector<T> data(static_cast<std::size_t>(plane * ch));
  auto src = stack.diffs.values();
  for (std::int64_t px = 0; px < plane; ++px)
    for (std::int64_t k = 0; k < ch; ++k)
      data[static_cast<std::size_t>(px * ch + k)] =
          src[static_cast<std::size_t>(px) * static_cast<std::size_t>(ch) + perm[static_cast<std::size_t>(k)]];

  DiffStack<T> out;
  out.diffs = Tensor<T>::from_data(s, std::move(data));
  out.l1.resize(static_cast<std::size_t>(ch));
  out.offsets.resize(static_cast<std::size_t>(ch));
  for (std::int64_t k = 0; k < ch; ++k) {
    out.l1[static_cast<std::size_t>(k)] = stack.l1[perm[static_cast<std::size_t>(k)]];
    out.offsets[static_cast<std::size_t>(k)] = stack.offsets[perm[static_cast<std::size_t>(k)]];
  }
  out.ordered = true;
  return out;
}

// Squeeze weights for an ordered stack: depth-wise H then W collapse to
// z in R^{2r}, softmax over channels. Shapes [B,1,1,2r].
template <typename T>
struct CompressionWeights {
  Tensor<T> z;
  Tensor<T> w;
};

template <typename T>
CompressionWeights<T> compress_weights(const Tensor<T>& ordered_diffs,
                                       const CompressionParams<T>& params) {
  const Shape& s = ordered_diffs.shape();
  if (s.size() != 4 || s[1] != params.rows || s[2] != params.cols ||
      s[3] != params.channels) {
    throw ShapeError("compress: diff stack " + shape_str(s) +
                     " does not match bound geometry [B," + std::to_string(params.rows) +
                     "," + std::to_string(params.cols) + "," +
                     std::to_string(params.channels) + "]");
  }
  Tensor<T> rows = depthwise_axis_conv(ordered_diffs, params.filter_h, params.bias_h,
                                       Axis2D::kHeight);
  Tensor<T> z = depthwise_axis_conv(rows, params.filter_w, params.bias_w,
                                    Axis2D::kWidth);
  return CompressionWeights<T>{z, softmax(z, {3})};
}

// Weighted average of the ordered diffs (softmax weights sum to 1, so the
// weighted sum is the weighted mean). Differentiable end to end; the diff
// stack itself is data, the filters are parameters. Output [B, m, n, 1].
template <typename T>
Tensor<T> compress_stack(const Tensor<T>& ordered_diffs,
                         const CompressionParams<T>& params) {
  Tensor<T> w = compress_weights(ordered_diffs, params).w;
  return sum_channels(bmul(ordered_diffs, w));
}

// Full per-slice pipeline: diffs -> L1 ordering -> weighted average.
template <typename T>
Tensor<T> compress(const VolumeViewF& view, std::int64_t i,
                   const CompressionParams<T>& params, const CompressionConfig& cfg) {
  DiffStack<T> stack = order_by_l1(neighborhood_diffs<T>(view, i, cfg), cfg);
  return compress_stack(stack.diffs, params);
}

// Two-channel network input for slice i: channel 0 the slice itself,
// channel 1 the compressed residual. Output [1, m, n, 2].
template <typename T>
Tensor<T> make_input_pair(const VolumeViewF& view, std::int64_t i,
                          const CompressionParams<T>& params,
                          const CompressionConfig& cfg) {
  const std::int64_t m = view.plan.m, n = view.plan.n;
  const float* src = view.slice(i);
  std::vector<T> slice_vals(static_cast<std::size_t>(m * n));
  for (std::int64_t px = 0; px < m * n; ++px)
    slice_vals[static_cast<std::size_t>(px)] = static_cast<T>(src[px]);
  Tensor<T> slice = Tensor<T>::from_data({1, m, n, 1}, std::move(slice_vals));
  Tensor<T> condensed = compress(view, i, params, cfg);
  return concat<T>({slice, condensed}, 3);
}

}  // namespace mda
