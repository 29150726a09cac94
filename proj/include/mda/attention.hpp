#pragma once

#include <cstdint>
#include <string>

#include "mda/ops.hpp"
#include "mda/params.hpp"
#include "mda/tensor.hpp"

// Attention blocks: the softmax-normalized MSE block (spatial sSE branch plus
// depth-wise channel cSE branch, combined by addition, no fully-connected
// layers) and the sigmoid-gated scSE/SE baselines used by the ablation.
namespace mda {

// Softmax gates shrink activations by 1/(H*W) or 1/C. kNone keeps the
// literal normalized weights; kCount rescales sSE by H*W and cSE by C so the
// mean gate is 1 while the relative weighting is unchanged.
enum class AttentionScale { kNone, kCount };

template <typename T>
struct MseBlockParams {
  std::int64_t height = 0, width = 0, channels = 0;  // bound feature shape
  Tensor<T> sse_kernel;    // [1,1,C,1] pixel-wise conv
  Tensor<T> sse_bias;      // [1]
  Tensor<T> cse_filter_h;  // [H,C]
  Tensor<T> cse_filter_w;  // [W,C]
  Tensor<T> cse_bias_h;    // [C]
  Tensor<T> cse_bias_w;    // [C]

  static MseBlockParams create(ParamRegistry<T>& reg, const std::string& prefix,
                               std::int64_t h, std::int64_t w, std::int64_t c) {
    MseBlockParams p;
    p.height = h;
    p.width = w;
    p.channels = c;
    p.sse_kernel = reg.create(prefix + "/sse_kernel", {1, 1, c, 1}, c);
    p.sse_bias = reg.create_zeros(prefix + "/sse_bias", {1});
    p.cse_filter_h = reg.create(prefix + "/cse_filter_h", {h, c}, h);
    p.cse_filter_w = reg.create(prefix + "/cse_filter_w", {w, c}, w);
    p.cse_bias_h = reg.create_zeros(prefix + "/cse_bias_h", {c});
    p.cse_bias_w = reg.create_zeros(prefix + "/cse_bias_w", {c});
    return p;
  }

  // (C+1) pixel-wise conv + C*(H+W) squeeze filters + 2C squeeze biases.
  std::int64_t param_count() const {
    return (channels + 1) + channels * height + channels * width + 2 * channels;
  }

  void check_bound(const Tensor<T>& u, const char* op) const {
    const Shape& s = u.shape();
    if (s.size() != 4 || s[1] != height || s[2] != width || s[3] != channels) {
      throw ShapeError(std::string(op) + ": feature map " + shape_str(s) +
                       " does not match the bound shape [N," + std::to_string(height) +
                       "," + std::to_string(width) + "," + std::to_string(channels) + "]");
    }
  }
};

// Pre-normalization squeeze z and its softmax weights w, both [N,1,1,C].
template <typename T>
struct SqueezeVector {
  Tensor<T> z;
  Tensor<T> w;
};

// Spatial attention: 1x1 conv summarizes channels, softmax over the H*W
// positions, then each channel is rescaled by the per-position weight.
template <typename T>
Tensor<T> sse_branch(const Tensor<T>& u, const MseBlockParams<T>& params,
                     AttentionScale scale = AttentionScale::kNone) {
  params.check_bound(u, "sse_branch");
  Tensor<T> map = conv2d(u, params.sse_kernel, params.sse_bias);
  Tensor<T> s = softmax(map, {1, 2});
  if (scale == AttentionScale::kCount) {
    s = affine(s, static_cast<double>(params.height * params.width), 0.0);
  }
  return bmul(u, s);
}

// Channel squeeze: depth-wise H-axis dot, then W-axis dot, then softmax over
// channels. The H pass runs first, mirroring the filter application order.
template <typename T>
SqueezeVector<T> cse_squeeze(const Tensor<T>& u, const MseBlockParams<T>& params) {
  params.check_bound(u, "cse_squeeze");
  Tensor<T> rows = depthwise_axis_conv(u, params.cse_filter_h, params.cse_bias_h,
                                       Axis2D::kHeight);
  Tensor<T> z = depthwise_axis_conv(rows, params.cse_filter_w, params.cse_bias_w,
                                    Axis2D::kWidth);
  return SqueezeVector<T>{z, softmax(z, {3})};
}

// Channel attention: rescale only, so the output shape matches the sSE
// branch for the addition in mse_block.
template <typename T>
Tensor<T> cse_branch(const Tensor<T>& u, const MseBlockParams<T>& params,
                     AttentionScale scale = AttentionScale::kNone) {
  Tensor<T> w = cse_squeeze(u, params).w;
  if (scale == AttentionScale::kCount) {
    w = affine(w, static_cast<double>(params.channels), 0.0);
  }
  return bmul(u, w);
}

template <typename T>
Tensor<T> mse_block(const Tensor<T>& u, const MseBlockParams<T>& params,
                    AttentionScale scale = AttentionScale::kNone) {
  return add(sse_branch(u, params, scale), cse_branch(u, params, scale));
}

// --- sigmoid-gated baselines (cscSE-UNet ablation) ---

template <typename T>
struct ScseBlockParams {
  std::int64_t channels = 0;
  std::int64_t reduced = 0;  // C / r_fc, floor 1
  Tensor<T> sse_kernel;  // [1,1,C,1]
  Tensor<T> sse_bias;    // [1]
  Tensor<T> fc1_weight;  // [C, reduced]
  Tensor<T> fc1_bias;    // [reduced]
  Tensor<T> fc2_weight;  // [reduced, C]
  Tensor<T> fc2_bias;    // [C]

  static constexpr std::int64_t kReductionRatio = 2;

  static ScseBlockParams create(ParamRegistry<T>& reg, const std::string& prefix,
                                std::int64_t c) {
    ScseBlockParams p;
    p.channels = c;
    p.reduced = std::max<std::int64_t>(1, c / kReductionRatio);
    p.sse_kernel = reg.create(prefix + "/sse_kernel", {1, 1, c, 1}, c);
    p.sse_bias = reg.create_zeros(prefix + "/sse_bias", {1});
    p.fc1_weight = reg.create(prefix + "/fc1_weight", {c, p.reduced}, c);
    p.fc1_bias = reg.create_zeros(prefix + "/fc1_bias", {p.reduced});
    p.fc2_weight = reg.create(prefix + "/fc2_weight", {p.reduced, c}, p.reduced);
    p.fc2_bias = reg.create_zeros(prefix + "/fc2_bias", {c});
    return p;
  }

  std::int64_t param_count() const {
    return (channels + 1) + channels * reduced + reduced + reduced * channels + channels;
  }
};

// Global-average-pool squeeze, two FC layers with ReLU between, sigmoid gate.
template <typename T>
Tensor<T> se_channel_gate(const Tensor<T>& u, const ScseBlockParams<T>& params) {
  const std::int64_t n = u.dim(0), c = u.dim(3);
  Tensor<T> pooled = reshape(global_avg_pool(u), {n, c});
  Tensor<T> hidden = relu(dense(pooled, params.fc1_weight, params.fc1_bias));
  Tensor<T> gate = sigmoid(dense(hidden, params.fc2_weight, params.fc2_bias));
  return reshape(gate, {n, 1, 1, c});
}

// Plain SE baseline: channel excitation only.
template <typename T>
Tensor<T> se_block_baseline(const Tensor<T>& u, const ScseBlockParams<T>& params) {
  if (u.dim(3) != params.channels) {
    throw ShapeError("se_block: channel extent " + std::to_string(u.dim(3)) +
                     " does not match the bound " + std::to_string(params.channels));
  }
  return bmul(u, se_channel_gate(u, params));
}

// Concurrent scSE baseline: sigmoid spatial gate + sigmoid channel gate,
// branches combined by addition.
template <typename T>
Tensor<T> scse_block_baseline(const Tensor<T>& u, const ScseBlockParams<T>& params) {
  if (u.dim(3) != params.channels) {
    throw ShapeError("scse_block: channel extent " + std::to_string(u.dim(3)) +
                     " does not match the bound " + std::to_string(params.channels));
  }
  Tensor<T> spatial_gate = sigmoid(conv2d(u, params.sse_kernel, params.sse_bias));
  Tensor<T> spatial = bmul(u, spatial_gate);
  Tensor<T> channel = bmul(u, se_channel_gate(u, params));
  return add(spatial, channel);
}

}  // namespace mda
