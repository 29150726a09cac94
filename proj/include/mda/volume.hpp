#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mda/errors.hpp"
#include "mda/tensor.hpp"

// Volume storage, anatomical views, sample planning, subject-level k-fold
// splits, and the synthetic phantom generator.
//
// On-disk format: a JSON sidecar header {"dims":[i,i,i], "spacing":[f,f,f],
// "dtype":"f32"|"u8", "labels": optional path} next to a raw little-endian
// voxel payload (same stem, .raw extension), d0-major. Label volumes are u8
// headers of their own, referenced from the image header.
namespace mda {

struct Volume {
  std::string id;
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> image;          // d0-major
  std::vector<std::uint8_t> labels;  // optional, same layout

  bool has_labels() const { return !labels.empty(); }
  std::int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
};

struct LabelVolume {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;
};

Volume load_volume(const std::filesystem::path& header_path);
void save_volume(const Volume& volume, const std::filesystem::path& header_path);
LabelVolume load_label_volume(const std::filesystem::path& header_path);
void save_label_volume(const LabelVolume& volume,
                       const std::filesystem::path& header_path);

// --- anatomical views ---
//
// The slice axis per view is fixed: sagittal cuts along dim 0, axial along
// dim 1, coronal along dim 2. For 144x256x192 volumes this reproduces the
// published per-view sample counts (144/256/192 slices per subject).
enum class View { kSagittal, kAxial, kCoronal };

const char* view_name(View view);
View parse_view(const std::string& name);

struct ViewPlan {
  View view;
  int slice_axis;                    // dim index sliced over (p)
  std::array<int, 2> in_plane_axes;  // dim indices of (m, n)
  std::int64_t p, m, n;
};

ViewPlan make_view_plan(const std::array<std::int64_t, 3>& dims, View view);

// A subject's image restructured slice-major for one view: slice i occupies
// m*n contiguous values. Intensities are min-max normalized to [0,1] per
// volume (constant volumes map to 0).
struct VolumeViewF {
  ViewPlan plan;
  std::vector<float> data;  // [p][m][n]

  const float* slice(std::int64_t i) const { return data.data() + i * plan.m * plan.n; }
};

VolumeViewF make_view(const Volume& volume, View view);

// Label plane for slice i of a view, row-major (m, n). No normalization.
std::vector<std::uint8_t> label_slice(const Volume& volume, const ViewPlan& plan,
                                      std::int64_t i);

// Writes a predicted label plane back into a d0-major label grid.
void store_label_slice(const ViewPlan& plan, std::int64_t i,
                       const std::vector<std::uint8_t>& plane,
                       const std::array<std::int64_t, 3>& dims,
                       std::vector<std::uint8_t>& grid);

// --- sample planning ---

struct SubjectShape {
  std::string id;
  std::array<std::int64_t, 3> dims;
};

struct SampleKey {
  std::size_t subject;     // index into the subject list
  std::int64_t slice;      // slice index within the view
};

// One sample per slice per subject; edge slices included (the compression
// boundary policy covers their missing neighbors).
std::vector<SampleKey> plan_samples(const std::vector<SubjectShape>& subjects,
                                    View view);

// --- subject-level k-fold cross-validation ---

struct FoldSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Deterministic shuffle, then k contiguous test blocks; the first
// (n mod k) folds take the extra subject. Every subject tests exactly once.
std::vector<FoldSplit> kfold_split(std::vector<std::string> subject_ids, int k,
                                   std::uint64_t seed);

// --- synthetic phantom ---
//
// Nested deformable ellipsoid shells standing in for brain tissue: label 0
// background, 1 outer shell, 2 middle shell, 3 core. Per-class intensity
// bands plus Gaussian noise and a smooth multiplicative-free bias field.
// With noise_sigma = bias_amplitude = 0 the intensity uniquely determines
// the class.
struct PhantomConfig {
  std::array<std::int64_t, 3> dims{48, 64, 56};
  int num_classes = 4;
  double noise_sigma = 0.03;
  double bias_amplitude = 0.05;
  double deform_amplitude = 0.06;
};

Volume synth_phantom(std::uint64_t seed, const PhantomConfig& config);

// Per-class intensity bands used by the phantom (index = class label).
std::array<double, 4> phantom_intensity_bands();

}  // namespace mda
