#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mda/gradcheck.hpp"
#include "mda/train.hpp"
#include "oracles.hpp"

using namespace mda;
using D = Tensor<double>;

namespace {

// Tiny zero-noise phantom cohort for learnability tests.
std::vector<Volume> tiny_phantoms(int count, std::uint64_t seed, bool zero_noise) {
  PhantomConfig cfg;
  cfg.dims = {12, 16, 16};
  if (zero_noise) {
    cfg.noise_sigma = 0.0;
    cfg.bias_amplitude = 0.0;
  }
  std::vector<Volume> out;
  for (int s = 0; s < count; ++s) {
    Volume v = synth_phantom(rng::derive_seed(seed, {static_cast<std::uint64_t>(s)}), cfg);
    v.id = "phantom" + std::to_string(s);
    out.push_back(std::move(v));
  }
  return out;
}

ModelConfig tiny_model_config(Variant variant) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.num_classes = 4;
  cfg.dropout_rate = 0.1;
  cfg.attention_scale = AttentionScale::kCount;
  cfg.view = View::kSagittal;
  cfg.input_height = 16;
  cfg.input_width = 16;
  cfg.compression.radius = 2;
  return cfg;
}

}  // namespace

TEST_CASE("dice_score: identity, disjoint, half overlap, empty convention") {
  std::vector<std::uint8_t> a(200, 0), b(200, 0);
  for (int i = 0; i < 100; ++i) a[static_cast<std::size_t>(i)] = 1;
  CHECK(dice_score(a, a, 1) == 1.0);

  for (int i = 100; i < 200; ++i) b[static_cast<std::size_t>(i)] = 1;
  CHECK(dice_score(a, b, 1) == 0.0);

  // |P| = |T| = 100 with overlap 50.
  std::vector<std::uint8_t> c(300, 0);
  for (int i = 50; i < 150; ++i) c[static_cast<std::size_t>(i)] = 1;
  std::vector<std::uint8_t> d(300, 0);
  for (int i = 100; i < 200; ++i) d[static_cast<std::size_t>(i)] = 1;
  CHECK(dice_score(c, d, 1) == 0.5);

  // Class absent from both masks scores 1.0.
  CHECK(dice_score(a, b, 3) == 1.0);

  // Symmetric, and invariant under a voxel permutation.
  CHECK(dice_score(d, c, 1) == dice_score(c, d, 1));
  std::vector<std::uint8_t> cp(c.rbegin(), c.rend());
  std::vector<std::uint8_t> dp(d.rbegin(), d.rend());
  CHECK(dice_score(cp, dp, 1) == dice_score(c, d, 1));
}

TEST_CASE("dice_loss: zero for perfect predictions, closed form for uniform") {
  // One-hot targets on a 1x4x4x4 map.
  std::vector<double> hot(64, 0.0);
  std::vector<int> labels{0, 1, 2, 3, 1, 1, 2, 0, 3, 2, 1, 0, 2, 2, 1, 3};
  for (int i = 0; i < 16; ++i) hot[static_cast<std::size_t>(i * 4 + labels[static_cast<std::size_t>(i)])] = 1.0;
  D targets = D::from_data({1, 4, 4, 4}, hot);

  D perfect = D::from_data({1, 4, 4, 4}, hot);
  CHECK(dice_loss(perfect, targets).item() <= 1e-6);

  D uniform = D::full({1, 4, 4, 4}, 0.25);
  const double eps = 1e-6, n = 16.0;
  double mean = 0.0;
  for (int cls = 1; cls < 4; ++cls) {
    const double t = static_cast<double>(
        std::count(labels.begin(), labels.end(), cls));
    mean += (2.0 * 0.25 * t + eps) / (0.25 * n + t + eps);
  }
  mean /= 3.0;
  CHECK(std::abs(dice_loss(uniform, targets).item() - (1.0 - mean)) <= 1e-12);

  // Loss stays in [0, 1] for arbitrary probability maps.
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    D logits = D::from_data({1, 4, 4, 4}, oracle::random_values<double>(64, 900 + trial,
                                                                        -4.0, 4.0));
    D probs = softmax(logits, {3});
    const double loss = dice_loss(probs, targets).item();
    CHECK(loss >= 0.0);
    CHECK(loss <= 1.0);
  }
}

TEST_CASE("dice_loss gradient passes grad_check") {
  std::vector<double> hot(2 * 2 * 4 * 1, 0.0);
  std::vector<int> labels{0, 1, 2, 3, 1, 0, 2, 2, 3, 1, 0, 2, 1, 1, 2, 0};
  hot.assign(64, 0.0);
  for (int i = 0; i < 16; ++i) hot[static_cast<std::size_t>(i * 4 + labels[static_cast<std::size_t>(i)])] = 1.0;
  D targets = D::from_data({1, 4, 4, 4}, hot);
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    D probs = D::from_data({1, 4, 4, 4},
                           oracle::random_values<double>(64, 700 + inst, 0.05, 1.0), true);
    auto f = [&targets](const std::vector<D>& in) { return dice_loss(in[0], targets); };
    auto report = grad_check(f, {probs}, 1e-6, 1e-4);
    CHECK_MESSAGE(report.pass, "dice_loss inst ", inst, ": ", report.worst);
  }
}

TEST_CASE("adam: zero gradients leave parameters untouched when lambda is 0") {
  std::vector<double> theta{0.5, -1.25, 3.0};
  const std::vector<double> original = theta;
  std::vector<double> g(3, 0.0), m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 10; ++t) adam_update<double>(theta, g, m, v, t, 1e-3, 0.0);
  CHECK(theta == original);
}

TEST_CASE("adam: first-step update is -lr within the epsilon correction") {
  std::vector<double> theta{0.0};
  std::vector<double> g{1.0}, m{0.0}, v{0.0};
  const double lr = 0.01;
  adam_update<double>(theta, g, m, v, 1, lr, 0.0);
  CHECK(std::abs(theta[0] - (-lr / (1.0 + 1e-8))) <= 1e-15);
}

TEST_CASE("adam: first-step update is invariant to gradient scale") {
  auto step1 = [](double g0) {
    std::vector<double> theta{0.0}, g{g0}, m{0.0}, v{0.0};
    adam_update<double>(theta, g, m, v, 1, 1e-3, 0.0);
    return theta[0];
  };
  const double u1 = step1(1.0);
  const double u10 = step1(10.0);
  CHECK(std::abs(u1 - u10) / std::abs(u1) < 1e-6);
}

TEST_CASE("adam drives a 2-parameter quadratic below 1e-6 within 5000 steps") {
  // f(a, b) = a^2 + 5 b^2, analytic gradient (2a, 10b).
  std::vector<double> theta{1.0, -1.0}, m{0.0, 0.0}, v{0.0, 0.0};
  double best = 1e300;
  for (int t = 1; t <= 5000; ++t) {
    std::vector<double> g{2.0 * theta[0], 10.0 * theta[1]};
    adam_update<double>(theta, g, m, v, t, 0.05, 0.0);
    const double loss = theta[0] * theta[0] + 5.0 * theta[1] * theta[1];
    best = std::min(best, loss);
  }
  CHECK(best <= 1e-6);
}

TEST_CASE("adam applies the L2 term through the gradient") {
  std::vector<double> theta{2.0}, g{0.0}, m{0.0}, v{0.0};
  adam_update<double>(theta, g, m, v, 1, 0.01, 0.1);
  // Effective gradient 0.1*2.0 = 0.2 shrinks the weight.
  CHECK(theta[0] < 2.0);
}

TEST_CASE("fit: one epoch on a few phantom samples runs end to end") {
  auto phantoms = tiny_phantoms(1, 42, false);
  std::vector<const Volume*> ptrs{&phantoms[0]};
  TrainData data = TrainData::build(ptrs, View::kSagittal);
  CHECK(data.samples.size() == 12);

  for (Variant variant : {Variant::kPlain, Variant::kMda}) {
    Model<float> model(tiny_model_config(variant), 5);
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.max_epochs = 1;
    cfg.batch_size = 4;
    cfg.seed = 9;
    FitResult result = fit(model, data, cfg);
    REQUIRE(result.history.size() == 1);
    CHECK(std::isfinite(result.history[0].mean_loss));
    CHECK(result.best_epoch == 1);
  }
}

TEST_CASE("fit: identical seeds give bit-identical loss curves and weights") {
  auto phantoms = tiny_phantoms(2, 77, false);
  std::vector<const Volume*> ptrs{&phantoms[0], &phantoms[1]};
  TrainData data = TrainData::build(ptrs, View::kSagittal);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.max_epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 31;

  Model<float> m1(tiny_model_config(Variant::kMda), 11);
  Model<float> m2(tiny_model_config(Variant::kMda), 11);
  FitResult r1 = fit(m1, data, cfg);
  FitResult r2 = fit(m2, data, cfg);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t e = 0; e < r1.history.size(); ++e) {
    CHECK(r1.history[e].mean_loss == r2.history[e].mean_loss);
  }
  for (std::size_t i = 0; i < m1.params().items().size(); ++i) {
    const auto& t1 = m1.params().items()[i].second;
    const auto& t2 = m2.params().items()[i].second;
    for (std::size_t j = 0; j < static_cast<std::size_t>(t1.numel()); ++j)
      CHECK(t1.values()[j] == t2.values()[j]);
  }
}

TEST_CASE("fit: loss trends downward over 30 epochs on zero-noise phantoms") {
  auto phantoms = tiny_phantoms(2, 99, true);
  std::vector<const Volume*> ptrs{&phantoms[0], &phantoms[1]};
  TrainData data = TrainData::build(ptrs, View::kSagittal);
  Model<float> model(tiny_model_config(Variant::kPlain), 21);
  TrainConfig cfg;
  cfg.lr = 2e-3;
  cfg.max_epochs = 30;
  cfg.batch_size = 8;
  cfg.seed = 13;
  FitResult result = fit(model, data, cfg);
  REQUIRE(result.history.size() == 30);
  std::vector<double> window_means;
  for (int w = 0; w < 6; ++w) {
    double s = 0.0;
    for (int e = 0; e < 5; ++e) s += result.history[static_cast<std::size_t>(w * 5 + e)].mean_loss;
    window_means.push_back(s / 5.0);
  }
  for (std::size_t w = 1; w < window_means.size(); ++w) {
    CHECK(window_means[w] <= window_means[w - 1] + 1e-9);
  }
  CHECK(window_means.back() < window_means.front());
}

TEST_CASE("evaluate: perfect and degenerate predictors hit the Dice extremes") {
  auto phantoms = tiny_phantoms(1, 55, false);
  const Volume& v = phantoms[0];
  // Identical masks: all foreground classes at 1.0.
  auto perfect = dice_per_class(v.labels, v.labels, 4);
  for (double d : perfect) CHECK(d == 1.0);
  // All-background predictions: every nonempty foreground class at 0.0.
  std::vector<std::uint8_t> bg(v.labels.size(), 0);
  auto zeros = dice_per_class(bg, v.labels, 4);
  for (double d : zeros) CHECK(d == 0.0);
}

TEST_CASE("restacked-volume Dice equals the aggregated slice-wise count oracle") {
  auto phantoms = tiny_phantoms(1, 66, false);
  const Volume& v = phantoms[0];
  // A corrupted prediction: flip some labels deterministically.
  std::vector<std::uint8_t> pred = v.labels;
  for (std::size_t i = 0; i < pred.size(); i += 7) pred[i] = (pred[i] + 1) % 4;

  const ViewPlan plan = make_view_plan(v.dims, View::kAxial);
  Volume pv = v;
  pv.labels = pred;
  for (int cls = 1; cls < 4; ++cls) {
    std::int64_t inter = 0, psize = 0, tsize = 0;
    for (std::int64_t i = 0; i < plan.p; ++i) {
      auto pslice = label_slice(pv, plan, i);
      auto tslice = label_slice(v, plan, i);
      for (std::size_t j = 0; j < pslice.size(); ++j) {
        const bool in_p = pslice[j] == cls;
        const bool in_t = tslice[j] == cls;
        inter += in_p && in_t;
        psize += in_p;
        tsize += in_t;
      }
    }
    const double oracle_dice =
        (psize + tsize) == 0 ? 1.0
                             : 2.0 * static_cast<double>(inter) /
                                   static_cast<double>(psize + tsize);
    CHECK(std::abs(dice_score(pred, v.labels, cls) - oracle_dice) <= 1e-15);
  }
}

TEST_CASE("metrics CSV keeps the stable column order and row schema") {
  MetricsWriter writer;
  writer.add_loss_row(0, View::kSagittal, Variant::kMda, 1, 0.75);
  writer.add_dice_row(0, View::kSagittal, Variant::kMda, 30, 2, 0.91, 0.02);
  const std::string csv = writer.to_csv();
  CHECK(csv.rfind("fold,view,variant,epoch,class,dice_mean,dice_std,loss\n", 0) == 0);
  CHECK(csv.find("0,sagittal,mda,1,,,,0.75\n") != std::string::npos);
  CHECK(csv.find("0,sagittal,mda,30,2,0.91") != std::string::npos);
}

TEST_CASE("predict_volume restacks to the source dims and eval is in range") {
  auto phantoms = tiny_phantoms(2, 88, true);
  std::vector<const Volume*> train_ptrs{&phantoms[0]};
  TrainData data = TrainData::build(train_ptrs, View::kSagittal);
  Model<float> model(tiny_model_config(Variant::kPlain), 61);
  TrainConfig cfg;
  cfg.lr = 2e-3;
  cfg.max_epochs = 10;
  cfg.batch_size = 8;
  cfg.seed = 19;
  fit(model, data, cfg);

  LabelVolume pred = predict_volume(model, phantoms[1]);
  CHECK(pred.dims == phantoms[1].dims);
  CHECK(pred.labels.size() == phantoms[1].labels.size());
  for (std::uint8_t l : pred.labels) CHECK(l < 4);

  std::vector<const Volume*> test_ptrs{&phantoms[1]};
  EvalResult result = evaluate(model, test_ptrs);
  REQUIRE(result.per_subject.size() == 1);
  for (double d : result.per_subject[0]) {
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
  CHECK(result.mean_foreground >= 0.0);
  CHECK(result.mean_foreground <= 1.0);
}
