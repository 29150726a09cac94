#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mda/attention.hpp"
#include "mda/gradcheck.hpp"
#include "oracles.hpp"

using namespace mda;
using D = Tensor<double>;

namespace {

MseBlockParams<double> make_mse(std::int64_t h, std::int64_t w, std::int64_t c,
                                std::uint64_t seed, ParamRegistry<double>& reg,
                                bool random_biases = false) {
  auto p = MseBlockParams<double>::create(reg, "mse", h, w, c);
  if (random_biases) {
    // Shake the zero-initialized biases so gradients flow through them.
    auto fill = [&](Tensor<double>& t, std::uint64_t s) {
      auto vals = oracle::random_values<double>(static_cast<std::size_t>(t.numel()), s,
                                                -0.3, 0.3);
      std::copy(vals.begin(), vals.end(), t.mutable_values().begin());
    };
    fill(p.sse_bias, seed + 1);
    fill(p.cse_bias_h, seed + 2);
    fill(p.cse_bias_w, seed + 3);
  }
  return p;
}

// Direct loop oracle for the sSE branch: 1x1 conv, spatial softmax, rescale.
std::vector<double> sse_oracle(const std::vector<double>& u, const Shape& us,
                               const std::vector<double>& kernel, double bias) {
  const std::int64_t N = us[0], H = us[1], W = us[2], C = us[3];
  std::vector<double> out(u.size());
  for (std::int64_t n = 0; n < N; ++n) {
    std::vector<double> map(static_cast<std::size_t>(H * W));
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        double s = bias;
        for (std::int64_t c = 0; c < C; ++c)
          s += kernel[static_cast<std::size_t>(c)] *
               u[static_cast<std::size_t>(idx4(us, n, h, w, c))];
        map[static_cast<std::size_t>(h * W + w)] = s;
      }
    const double mx = *std::max_element(map.begin(), map.end());
    double z = 0.0;
    for (double& v : map) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : map) v /= z;
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t c = 0; c < C; ++c) {
          const auto i = static_cast<std::size_t>(idx4(us, n, h, w, c));
          out[i] = u[i] * map[static_cast<std::size_t>(h * W + w)];
        }
  }
  return out;
}

// Direct loop oracle for the cSE squeeze weights.
std::vector<double> cse_weights_oracle(const std::vector<double>& u, const Shape& us,
                                       const std::vector<double>& fh,
                                       const std::vector<double>& fw,
                                       const std::vector<double>& bh,
                                       const std::vector<double>& bw,
                                       std::int64_t batch) {
  const std::int64_t H = us[1], W = us[2], C = us[3];
  std::vector<double> z(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    double acc_w = bw[static_cast<std::size_t>(c)];
    for (std::int64_t w = 0; w < W; ++w) {
      double acc_h = bh[static_cast<std::size_t>(c)];
      for (std::int64_t h = 0; h < H; ++h)
        acc_h += fh[static_cast<std::size_t>(h * C + c)] *
                 u[static_cast<std::size_t>(idx4(us, batch, h, w, c))];
      acc_w += fw[static_cast<std::size_t>(w * C + c)] * acc_h;
    }
    z[static_cast<std::size_t>(c)] = acc_w;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

std::vector<double> tensor_vec(const D& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace

TEST_CASE("sse_branch: constant input rescales by 1/(H*W)") {
  ParamRegistry<double> reg(1);
  auto p = make_mse(4, 5, 3, 10, reg);
  D u = D::full({2, 4, 5, 3}, 1.7);
  D y = sse_branch(u, p);
  REQUIRE(y.shape() == u.shape());
  for (double v : y.values()) CHECK(std::abs(v - 1.7 / 20.0) <= 1e-12);
}

TEST_CASE("sse_branch: 1x1 spatial extent is the identity") {
  ParamRegistry<double> reg(2);
  auto p = make_mse(1, 1, 4, 11, reg, true);
  D u = D::from_data({1, 1, 1, 4},
                     oracle::random_values<double>(4, 12));
  D y = sse_branch(u, p);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(std::abs(y.values()[i] - u.values()[i]) <= 1e-15);
}

TEST_CASE("sse_branch matches the loop oracle on random input") {
  ParamRegistry<double> reg(3);
  auto p = make_mse(4, 4, 3, 13, reg, true);
  D u = D::from_data({1, 4, 4, 3}, oracle::random_values<double>(48, 14));
  D y = sse_branch(u, p);
  auto ref = sse_oracle(tensor_vec(u), u.shape(), tensor_vec(p.sse_kernel),
                        p.sse_bias.values()[0]);
  CHECK(oracle::max_rel_err(tensor_vec(y), ref) <= 1e-12);
}

TEST_CASE("cse_squeeze: mean filters on channel-constant input give means plus bias") {
  const std::int64_t H = 3, W = 5, C = 2;
  ParamRegistry<double> reg(4);
  auto p = make_mse(H, W, C, 15, reg, true);
  std::fill(p.cse_filter_h.mutable_values().begin(), p.cse_filter_h.mutable_values().end(),
            1.0 / static_cast<double>(H));
  std::fill(p.cse_filter_w.mutable_values().begin(), p.cse_filter_w.mutable_values().end(),
            1.0 / static_cast<double>(W));
  const double kconst[C] = {0.8, -1.4};
  std::vector<double> uv;
  for (std::int64_t i = 0; i < H * W; ++i)
    for (std::int64_t c = 0; c < C; ++c) uv.push_back(kconst[c]);
  D u = D::from_data({1, H, W, C}, uv);
  auto sq = cse_squeeze(u, p);
  REQUIRE(sq.z.shape() == Shape{1, 1, 1, C});
  for (std::int64_t c = 0; c < C; ++c) {
    const double expect = kconst[c] + p.cse_bias_h.values()[static_cast<std::size_t>(c)] +
                          p.cse_bias_w.values()[static_cast<std::size_t>(c)];
    CHECK(std::abs(sq.z.values()[static_cast<std::size_t>(c)] - expect) <= 1e-12);
  }
}

TEST_CASE("cse_squeeze: single channel always weights 1") {
  ParamRegistry<double> reg(5);
  auto p = make_mse(3, 4, 1, 16, reg, true);
  D u = D::from_data({2, 3, 4, 1}, oracle::random_values<double>(24, 17));
  auto sq = cse_squeeze(u, p);
  for (double v : sq.w.values()) CHECK(v == 1.0);
}

TEST_CASE("cse_squeeze and cse_branch match the loop oracle") {
  ParamRegistry<double> reg(6);
  auto p = make_mse(3, 4, 2, 18, reg, true);
  D u = D::from_data({2, 3, 4, 2}, oracle::random_values<double>(48, 19));
  auto sq = cse_squeeze(u, p);
  D y = cse_branch(u, p);
  for (std::int64_t n = 0; n < 2; ++n) {
    auto wref = cse_weights_oracle(tensor_vec(u), u.shape(), tensor_vec(p.cse_filter_h),
                                   tensor_vec(p.cse_filter_w), tensor_vec(p.cse_bias_h),
                                   tensor_vec(p.cse_bias_w), n);
    for (std::int64_t c = 0; c < 2; ++c) {
      const auto wi = static_cast<std::size_t>(idx4(sq.w.shape(), n, 0, 0, c));
      CHECK(std::abs(sq.w.values()[wi] - wref[static_cast<std::size_t>(c)]) <= 1e-12);
      for (std::int64_t h = 0; h < 3; ++h)
        for (std::int64_t w = 0; w < 4; ++w) {
          const auto i = static_cast<std::size_t>(idx4(u.shape(), n, h, w, c));
          CHECK(std::abs(y.values()[i] - u.values()[i] * wref[static_cast<std::size_t>(c)]) <=
                1e-12);
        }
    }
  }
}

TEST_CASE("cse_branch: channel-constant input rescales by 1/C") {
  ParamRegistry<double> reg(7);
  auto p = make_mse(2, 3, 4, 20, reg);
  // Uniform weights need both channel-constant input and channel-shared
  // filters: copy each filter's first column across all channels.
  for (auto* f : {&p.cse_filter_h, &p.cse_filter_w}) {
    auto& v = f->mutable_values();
    const std::int64_t rows = f->dim(0);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 1; c < 4; ++c)
        v[static_cast<std::size_t>(r * 4 + c)] = v[static_cast<std::size_t>(r * 4)];
  }
  std::vector<double> uv(2 * 3 * 4);
  auto base = oracle::random_values<double>(6, 21);
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t c = 0; c < 4; ++c)
      uv[static_cast<std::size_t>(i * 4 + c)] = base[static_cast<std::size_t>(i)];
  D u = D::from_data({1, 2, 3, 4}, uv);
  D y = cse_branch(u, p);
  for (std::size_t i = 0; i < uv.size(); ++i)
    CHECK(std::abs(y.values()[i] - uv[i] / 4.0) <= 1e-12);
}

TEST_CASE("mse_block: degenerate 1x1x1 block doubles the input") {
  ParamRegistry<double> reg(8);
  auto p = make_mse(1, 1, 1, 22, reg, true);
  D u = D::from_data({1, 1, 1, 1}, {2.25});
  D y = mse_block(u, p);
  CHECK(std::abs(y.item() - 4.5) <= 1e-15);
}

TEST_CASE("mse_block: zero input gives zero output") {
  ParamRegistry<double> reg(9);
  auto p = make_mse(4, 4, 2, 23, reg, true);
  D u = D::zeros({1, 4, 4, 2});
  D y = mse_block(u, p);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("mse_block equals sse_branch + cse_branch bitwise") {
  ParamRegistry<double> reg(10);
  auto p = make_mse(4, 6, 3, 24, reg, true);
  D u = D::from_data({2, 4, 6, 3}, oracle::random_values<double>(144, 25));
  for (auto scale : {AttentionScale::kNone, AttentionScale::kCount}) {
    D whole = mse_block(u, p, scale);
    D s = sse_branch(u, p, scale);
    D c = cse_branch(u, p, scale);
    for (std::size_t i = 0; i < static_cast<std::size_t>(whole.numel()); ++i)
      CHECK(whole.values()[i] == s.values()[i] + c.values()[i]);
  }
}

TEST_CASE("attention weights sum to 1 over their domains") {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    ParamRegistry<double> reg(100 + trial);
    auto p = make_mse(4, 5, 3, 26 + trial, reg, true);
    D u = D::from_data({2, 4, 5, 3},
                       oracle::random_values<double>(120, 27 + trial, -20.0, 20.0));
    // sSE weights over H*W.
    D smap = softmax(conv2d(u, p.sse_kernel, p.sse_bias), {1, 2});
    for (std::int64_t n = 0; n < 2; ++n) {
      double s = 0.0;
      for (std::int64_t h = 0; h < 4; ++h)
        for (std::int64_t w = 0; w < 5; ++w)
          s += smap.values()[static_cast<std::size_t>(idx4(smap.shape(), n, h, w, 0))];
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
    // cSE weights over C, positive.
    auto sq = cse_squeeze(u, p);
    for (std::int64_t n = 0; n < 2; ++n) {
      double s = 0.0;
      for (std::int64_t c = 0; c < 3; ++c) {
        const double w = sq.w.values()[static_cast<std::size_t>(idx4(sq.w.shape(), n, 0, 0, c))];
        CHECK(w > 0.0);
        s += w;
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("cse_squeeze is equivariant under channel permutation") {
  const std::int64_t H = 3, W = 4, C = 5;
  ParamRegistry<double> reg(11);
  auto p = make_mse(H, W, C, 28, reg, true);
  D u = D::from_data({1, H, W, C}, oracle::random_values<double>(60, 29));
  auto sq = cse_squeeze(u, p);

  const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  ParamRegistry<double> reg2(12);
  auto p2 = make_mse(H, W, C, 30, reg2);
  std::vector<double> uv(static_cast<std::size_t>(u.numel()));
  for (std::int64_t i = 0; i < H * W; ++i)
    for (std::int64_t c = 0; c < C; ++c)
      uv[static_cast<std::size_t>(i * C + c)] =
          u.values()[static_cast<std::size_t>(i * C + perm[static_cast<std::size_t>(c)])];
  D u2 = D::from_data({1, H, W, C}, uv);
  auto permute_cols = [&](const D& src, D& dst, std::int64_t rows) {
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < C; ++c)
        dst.mutable_values()[static_cast<std::size_t>(r * C + c)] =
            src.values()[static_cast<std::size_t>(r * C + perm[static_cast<std::size_t>(c)])];
  };
  permute_cols(p.cse_filter_h, p2.cse_filter_h, H);
  permute_cols(p.cse_filter_w, p2.cse_filter_w, W);
  permute_cols(p.cse_bias_h, p2.cse_bias_h, 1);
  permute_cols(p.cse_bias_w, p2.cse_bias_w, 1);

  auto sq2 = cse_squeeze(u2, p2);
  for (std::int64_t c = 0; c < C; ++c)
    CHECK(std::abs(sq2.w.values()[static_cast<std::size_t>(c)] -
                   sq.w.values()[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])]) <=
          1e-12);
}

TEST_CASE("scse baseline: zero input gives zero output, C=1 stays well-formed") {
  ParamRegistry<double> reg(13);
  auto p = ScseBlockParams<double>::create(reg, "scse", 3);
  D u = D::zeros({1, 4, 4, 3});
  D y = scse_block_baseline(u, p);
  REQUIRE(y.shape() == u.shape());
  for (double v : y.values()) CHECK(v == 0.0);

  auto p1 = ScseBlockParams<double>::create(reg, "scse1", 1);
  CHECK(p1.reduced == 1);
  D u1 = D::from_data({1, 2, 2, 1}, {0.5, -1.0, 2.0, 0.25});
  D y1 = scse_block_baseline(u1, p1);
  REQUIRE(y1.shape() == u1.shape());
  for (double v : y1.values()) CHECK(std::isfinite(v));
}

TEST_CASE("parameter counts follow the closed forms") {
  ParamRegistry<double> reg(14);
  // MSE: (C+1) + C*H + C*W + 2C, checked across the resolutions a depth-5
  // network visits.
  struct Cfg { std::int64_t h, w, c; };
  for (const Cfg cfg : {Cfg{256, 192, 32}, Cfg{128, 96, 64}, Cfg{64, 48, 128},
                        Cfg{32, 24, 256}, Cfg{16, 12, 512}, Cfg{32, 32, 64}}) {
    ParamRegistry<double> r(15);
    auto p = MseBlockParams<double>::create(r, "m", cfg.h, cfg.w, cfg.c);
    const std::int64_t expect =
        (cfg.c + 1) + cfg.c * cfg.h + cfg.c * cfg.w + 2 * cfg.c;
    CHECK(p.param_count() == expect);
    CHECK(r.total_count() == expect);
  }
  // scSE with reduction 2: (C+1) + C*C/2 + C/2 + C/2*C + C = C^2 + 5C/2 + 1.
  for (std::int64_t c : {std::int64_t{32}, std::int64_t{64}, std::int64_t{512}}) {
    ParamRegistry<double> r(16);
    auto p = ScseBlockParams<double>::create(r, "s", c);
    CHECK(p.param_count() == c * c + 5 * c / 2 + 1);
    CHECK(r.total_count() == p.param_count());
  }
  // The FC-based scSE dominates the depth-wise MSE block once C exceeds H+W:
  // at C=64, H=W=16 the scSE block costs 4257 vs 2241 for MSE.
  {
    ParamRegistry<double> r1(17), r2(18);
    auto scse = ScseBlockParams<double>::create(r1, "s", 64);
    auto mse = MseBlockParams<double>::create(r2, "m", 16, 16, 64);
    CHECK(scse.param_count() == 4257);
    CHECK(mse.param_count() == 2241);
    CHECK(scse.param_count() > mse.param_count());
  }
}

TEST_CASE("all attention block gradients pass grad_check") {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    ParamRegistry<double> reg(200 + inst);
    auto p = make_mse(3, 4, 2, 300 + inst, reg, true);
    std::vector<D> leaves{D::from_data({1, 3, 4, 2},
                                       oracle::random_values<double>(24, 400 + inst),
                                       true),
                          p.sse_kernel, p.sse_bias, p.cse_filter_h, p.cse_filter_w,
                          p.cse_bias_h, p.cse_bias_w};
    auto f = [&p](const std::vector<D>& in) { return mean_all(mse_block(in[0], p)); };
    auto report = grad_check(f, leaves, 1e-6, 1e-4);
    CHECK_MESSAGE(report.pass, "mse_block inst ", inst, ": ", report.worst);
  }
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    ParamRegistry<double> reg(500 + inst);
    auto p = ScseBlockParams<double>::create(reg, "scse", 3);
    std::vector<D> leaves{D::from_data({1, 2, 4, 3},
                                       oracle::random_values<double>(24, 600 + inst),
                                       true),
                          p.sse_kernel, p.sse_bias, p.fc1_weight, p.fc1_bias,
                          p.fc2_weight, p.fc2_bias};
    auto fs = [&p](const std::vector<D>& in) {
      return mean_all(scse_block_baseline(in[0], p));
    };
    auto report = grad_check(fs, leaves, 1e-6, 1e-4);
    CHECK_MESSAGE(report.pass, "scse_block inst ", inst, ": ", report.worst);
    auto fse = [&p](const std::vector<D>& in) {
      return mean_all(se_block_baseline(in[0], p));
    };
    auto report2 = grad_check(fse, leaves, 1e-6, 1e-4);
    CHECK_MESSAGE(report2.pass, "se_block inst ", inst, ": ", report2.worst);
  }
}

TEST_CASE("blocks reject feature maps that do not match their bound shape") {
  ParamRegistry<double> reg(19);
  auto p = make_mse(4, 4, 2, 31, reg);
  D wrong = D::zeros({1, 4, 5, 2});
  CHECK_THROWS_AS(sse_branch(wrong, p), ShapeError);
  CHECK_THROWS_AS(cse_squeeze(wrong, p), ShapeError);
  CHECK_THROWS_AS(mse_block(wrong, p), ShapeError);
}
