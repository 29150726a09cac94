#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "mda/volume.hpp"
#include "oracles.hpp"

using namespace mda;
namespace fs = std::filesystem;

namespace {

Volume small_volume(std::uint64_t seed, std::array<std::int64_t, 3> dims = {6, 5, 4},
                    bool with_labels = true) {
  Volume v;
  v.id = "test";
  v.dims = dims;
  v.spacing = {1.0, 1.5, 2.0};
  v.image = oracle::random_values<float>(static_cast<std::size_t>(v.numel()), seed,
                                         -3.0f, 7.0f);
  if (with_labels) {
    v.labels.resize(static_cast<std::size_t>(v.numel()));
    mda::rng::Stream stream(seed + 1);
    for (auto& l : v.labels) l = static_cast<std::uint8_t>(stream.next_below(4));
  }
  return v;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("mda_vol_" + std::to_string(rand()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("volume save/load round trip is bit-exact") {
  TempDir dir;
  Volume v = small_volume(61);
  const auto header = dir.path / "subject.json";
  save_volume(v, header);
  Volume back = load_volume(header);
  CHECK(back.dims == v.dims);
  CHECK(back.spacing == v.spacing);
  REQUIRE(back.image.size() == v.image.size());
  for (std::size_t i = 0; i < v.image.size(); ++i) CHECK(back.image[i] == v.image[i]);
  REQUIRE(back.labels.size() == v.labels.size());
  for (std::size_t i = 0; i < v.labels.size(); ++i) CHECK(back.labels[i] == v.labels[i]);
}

TEST_CASE("header/payload size mismatch is a data error") {
  TempDir dir;
  Volume v = small_volume(62, {4, 4, 4}, false);
  const auto header = dir.path / "subject.json";
  save_volume(v, header);
  // Truncate the payload.
  {
    std::ofstream raw(dir.path / "subject.raw", std::ios::binary | std::ios::trunc);
    raw.write("abcd", 4);
  }
  CHECK_THROWS_AS(load_volume(header), DataError);
  // Unknown dtype is rejected up front.
  {
    std::ofstream h(dir.path / "bad.json");
    h << R"({"dims":[2,2,2],"spacing":[1,1,1],"dtype":"i16"})";
  }
  CHECK_THROWS_AS(load_volume(dir.path / "bad.json"), DataError);
}

TEST_CASE("view plans: slice axes, in-plane dims, and published sample counts") {
  const std::array<std::int64_t, 3> iseg{144, 256, 192};
  auto sag = make_view_plan(iseg, View::kSagittal);
  CHECK(sag.p == 144);
  CHECK(sag.m == 256);
  CHECK(sag.n == 192);
  auto axi = make_view_plan(iseg, View::kAxial);
  CHECK(axi.p == 256);
  CHECK(axi.m == 144);
  CHECK(axi.n == 192);
  auto cor = make_view_plan(iseg, View::kCoronal);
  CHECK(cor.p == 192);
  CHECK(cor.m == 144);
  CHECK(cor.n == 256);

  // Eight training subjects reproduce the published per-view totals.
  std::vector<SubjectShape> subjects;
  for (int s = 0; s < 8; ++s) subjects.push_back({"s" + std::to_string(s), iseg});
  CHECK(plan_samples(subjects, View::kSagittal).size() == 1152);
  CHECK(plan_samples(subjects, View::kAxial).size() == 2048);
  CHECK(plan_samples(subjects, View::kCoronal).size() == 1536);

  std::vector<SubjectShape> one{{"only", {10, 6, 4}}};
  CHECK(plan_samples(one, View::kSagittal).size() == 10);
}

TEST_CASE("make_view normalizes to [0,1] and maps constant volumes to zero") {
  Volume v = small_volume(63, {5, 6, 4}, false);
  VolumeViewF view = make_view(v, View::kAxial);
  CHECK(view.plan.p == 6);
  CHECK(view.plan.m == 5);
  CHECK(view.plan.n == 4);
  float lo = 1e9f, hi = -1e9f;
  for (float x : view.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);

  Volume c = small_volume(64, {3, 3, 3}, false);
  std::fill(c.image.begin(), c.image.end(), 42.0f);
  VolumeViewF cview = make_view(c, View::kSagittal);
  for (float x : cview.data) CHECK(x == 0.0f);
}

TEST_CASE("slicing then restacking is the identity") {
  Volume v = small_volume(65, {4, 6, 5});
  for (View view : {View::kSagittal, View::kAxial, View::kCoronal}) {
    const ViewPlan plan = make_view_plan(v.dims, view);
    // Labels round-trip exactly through slice/store.
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(v.numel()), 255);
    for (std::int64_t i = 0; i < plan.p; ++i) {
      store_label_slice(plan, i, label_slice(v, plan, i), v.dims, grid);
    }
    CHECK(grid == v.labels);
    // The normalized image view holds each voxel exactly once.
    VolumeViewF iview = make_view(v, view);
    float vmin = *std::min_element(v.image.begin(), v.image.end());
    float vmax = *std::max_element(v.image.begin(), v.image.end());
    double err = 0.0;
    std::size_t idx = 0;
    for (std::int64_t i = 0; i < plan.p; ++i)
      for (std::int64_t y = 0; y < plan.m; ++y)
        for (std::int64_t x = 0; x < plan.n; ++x, ++idx) {
          std::array<std::int64_t, 3> c{};
          c[static_cast<std::size_t>(plan.slice_axis)] = i;
          c[static_cast<std::size_t>(plan.in_plane_axes[0])] = y;
          c[static_cast<std::size_t>(plan.in_plane_axes[1])] = x;
          const float raw = v.image[static_cast<std::size_t>(
              (c[0] * v.dims[1] + c[1]) * v.dims[2] + c[2])];
          const float expect = (raw - vmin) / (vmax - vmin);
          err = std::max(err, std::abs(static_cast<double>(iview.data[idx]) - expect));
        }
    CHECK(err <= 1e-6);
  }
}

TEST_CASE("kfold_split matches the published fold arithmetic") {
  std::vector<std::string> ten;
  for (int i = 0; i < 10; ++i) ten.push_back("s" + std::to_string(i));
  auto folds = kfold_split(ten, 5, 77);
  REQUIRE(folds.size() == 5);
  std::set<std::string> seen;
  for (const auto& f : folds) {
    CHECK(f.test.size() == 2);
    CHECK(f.train.size() == 8);
    for (const auto& id : f.test) CHECK(seen.insert(id).second);  // disjoint
  }
  CHECK(seen.size() == 10);  // exhaustive

  std::vector<std::string> eighteen;
  for (int i = 0; i < 18; ++i) eighteen.push_back("s" + std::to_string(i));
  auto folds18 = kfold_split(eighteen, 5, 78);
  std::vector<std::size_t> sizes;
  for (const auto& f : folds18) sizes.push_back(f.test.size());
  CHECK(sizes == std::vector<std::size_t>{4, 4, 4, 3, 3});

  // Deterministic from the seed.
  auto again = kfold_split(ten, 5, 77);
  for (std::size_t f = 0; f < 5; ++f) {
    CHECK(again[f].test == folds[f].test);
    CHECK(again[f].train == folds[f].train);
  }
  auto other = kfold_split(ten, 5, 79);
  bool differs = false;
  for (std::size_t f = 0; f < 5; ++f) differs = differs || other[f].test != folds[f].test;
  CHECK(differs);
}

TEST_CASE("phantoms are reproducible and well-labeled") {
  PhantomConfig cfg;
  cfg.dims = {24, 28, 26};
  Volume a = synth_phantom(123, cfg);
  Volume b = synth_phantom(123, cfg);
  CHECK(a.image == b.image);
  CHECK(a.labels == b.labels);
  Volume c = synth_phantom(124, cfg);
  CHECK(a.image != c.image);

  for (std::uint64_t seed : {1ULL, 9ULL, 55ULL, 1234ULL}) {
    Volume v = synth_phantom(seed, cfg);
    std::array<std::int64_t, 4> hist{0, 0, 0, 0};
    for (std::uint8_t l : v.labels) {
      REQUIRE(l < 4);
      ++hist[l];
    }
    for (int cls = 0; cls < 4; ++cls) CHECK(hist[static_cast<std::size_t>(cls)] > 0);
    // Background is the majority class.
    CHECK(hist[0] > v.numel() / 2);
  }
}

TEST_CASE("zero-noise phantom is exactly segmentable by intensity thresholds") {
  PhantomConfig cfg;
  cfg.dims = {20, 24, 22};
  cfg.noise_sigma = 0.0;
  cfg.bias_amplitude = 0.0;
  Volume v = synth_phantom(321, cfg);
  const auto bands = phantom_intensity_bands();
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    const float intensity = v.image[static_cast<std::size_t>(i)];
    int best = 0;
    double best_d = 1e9;
    for (int cls = 0; cls < 4; ++cls) {
      const double d = std::abs(static_cast<double>(intensity) - bands[static_cast<std::size_t>(cls)]);
      if (d < best_d) {
        best_d = d;
        best = cls;
      }
    }
    REQUIRE(best == static_cast<int>(v.labels[static_cast<std::size_t>(i)]));
  }
}
