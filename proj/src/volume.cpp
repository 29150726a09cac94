#include "mda/volume.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "mda/rng.hpp"

namespace mda {

namespace {

using nlohmann::json;

std::filesystem::path raw_path_for(const std::filesystem::path& header) {
  std::filesystem::path p = header;
  p.replace_extension(".raw");
  return p;
}

json read_header(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open volume header: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed volume header " + path.string() + ": " + e.what());
  }
  return j;
}

struct Header {
  std::array<std::int64_t, 3> dims;
  std::array<double, 3> spacing;
  std::string dtype;
  std::optional<std::string> labels;
};

Header parse_header(const json& j, const std::filesystem::path& path) {
  Header h;
  try {
    auto dims = j.at("dims");
    auto spacing = j.at("spacing");
    if (dims.size() != 3 || spacing.size() != 3) {
      throw DataError("volume header " + path.string() + ": dims/spacing must have 3 entries");
    }
    for (int a = 0; a < 3; ++a) {
      h.dims[static_cast<std::size_t>(a)] = dims[static_cast<std::size_t>(a)].get<std::int64_t>();
      h.spacing[static_cast<std::size_t>(a)] =
          spacing[static_cast<std::size_t>(a)].get<double>();
      if (h.dims[static_cast<std::size_t>(a)] <= 0) {
        throw DataError("volume header " + path.string() + ": non-positive dim");
      }
    }
    h.dtype = j.at("dtype").get<std::string>();
    if (j.contains("labels")) h.labels = j.at("labels").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("volume header " + path.string() + ": " + e.what());
  }
  if (h.dtype != "f32" && h.dtype != "u8") {
    throw DataError("volume header " + path.string() + ": unknown dtype \"" + h.dtype +
                    "\" (expected f32 or u8)");
  }
  return h;
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::int64_t count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open voxel payload: " + path.string());
  const auto size = static_cast<std::int64_t>(in.tellg());
  const auto expected = count * static_cast<std::int64_t>(sizeof(T));
  if (size != expected) {
    throw DataError("voxel payload " + path.string() + " holds " + std::to_string(size) +
                    " bytes but the header dims require " + std::to_string(expected));
  }
  std::vector<T> data(static_cast<std::size_t>(count));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), expected);
  if (!in) throw DataError("short read on voxel payload: " + path.string());
  return data;
}

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write voxel payload: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw DataError("short write on voxel payload: " + path.string());
}

void write_header(const std::filesystem::path& path, const Header& h) {
  json j;
  j["dims"] = h.dims;
  j["spacing"] = h.spacing;
  j["dtype"] = h.dtype;
  if (h.labels) j["labels"] = *h.labels;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write volume header: " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

Volume load_volume(const std::filesystem::path& header_path) {
  const Header h = parse_header(read_header(header_path), header_path);
  if (h.dtype != "f32") {
    throw DataError("volume " + header_path.string() +
                    ": image volumes must be dtype f32 (u8 headers are label volumes)");
  }
  Volume v;
  v.id = header_path.stem().string();
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.image = read_raw<float>(raw_path_for(header_path), v.numel());
  for (float x : v.image) {
    if (!std::isfinite(x)) {
      throw DataError("volume " + header_path.string() + ": non-finite voxel");
    }
  }
  if (h.labels) {
    const auto label_header = header_path.parent_path() / *h.labels;
    LabelVolume lv = load_label_volume(label_header);
    if (lv.dims != v.dims) {
      throw DataError("label volume " + label_header.string() +
                      " dims do not match image dims");
    }
    v.labels = std::move(lv.labels);
  }
  return v;
}

void save_volume(const Volume& volume, const std::filesystem::path& header_path) {
  Header h{volume.dims, volume.spacing, "f32", std::nullopt};
  if (volume.has_labels()) {
    std::filesystem::path label_header = header_path;
    label_header.replace_extension("");
    label_header += "_labels.json";
    h.labels = label_header.filename().string();
    LabelVolume lv{volume.dims, volume.spacing, volume.labels};
    save_label_volume(lv, label_header);
  }
  write_header(header_path, h);
  write_raw(raw_path_for(header_path), volume.image);
}

LabelVolume load_label_volume(const std::filesystem::path& header_path) {
  const Header h = parse_header(read_header(header_path), header_path);
  if (h.dtype != "u8") {
    throw DataError("label volume " + header_path.string() + ": dtype must be u8");
  }
  LabelVolume lv;
  lv.dims = h.dims;
  lv.spacing = h.spacing;
  lv.labels = read_raw<std::uint8_t>(raw_path_for(header_path),
                                     lv.dims[0] * lv.dims[1] * lv.dims[2]);
  return lv;
}

void save_label_volume(const LabelVolume& volume,
                       const std::filesystem::path& header_path) {
  write_header(header_path, Header{volume.dims, volume.spacing, "u8", std::nullopt});
  write_raw(raw_path_for(header_path), volume.labels);
}

const char* view_name(View view) {
  switch (view) {
    case View::kSagittal: return "sagittal";
    case View::kAxial: return "axial";
    case View::kCoronal: return "coronal";
  }
  return "?";
}

View parse_view(const std::string& name) {
  if (name == "sagittal") return View::kSagittal;
  if (name == "axial") return View::kAxial;
  if (name == "coronal") return View::kCoronal;
  throw UsageError("unknown view \"" + name + "\" (sagittal|axial|coronal)");
}

ViewPlan make_view_plan(const std::array<std::int64_t, 3>& dims, View view) {
  ViewPlan plan;
  plan.view = view;
  switch (view) {
    case View::kSagittal: plan.slice_axis = 0; plan.in_plane_axes = {1, 2}; break;
    case View::kAxial: plan.slice_axis = 1; plan.in_plane_axes = {0, 2}; break;
    case View::kCoronal: plan.slice_axis = 2; plan.in_plane_axes = {0, 1}; break;
  }
  plan.p = dims[static_cast<std::size_t>(plan.slice_axis)];
  plan.m = dims[static_cast<std::size_t>(plan.in_plane_axes[0])];
  plan.n = dims[static_cast<std::size_t>(plan.in_plane_axes[1])];
  return plan;
}

namespace {

// Maps (slice i, row y, col x) of a view back to a d0-major flat index.
inline std::int64_t view_to_flat(const ViewPlan& plan,
                                 const std::array<std::int64_t, 3>& dims,
                                 std::int64_t i, std::int64_t y, std::int64_t x) {
  std::array<std::int64_t, 3> c{};
  c[static_cast<std::size_t>(plan.slice_axis)] = i;
  c[static_cast<std::size_t>(plan.in_plane_axes[0])] = y;
  c[static_cast<std::size_t>(plan.in_plane_axes[1])] = x;
  return (c[0] * dims[1] + c[1]) * dims[2] + c[2];
}

}  // namespace

VolumeViewF make_view(const Volume& volume, View view) {
  VolumeViewF out;
  out.plan = make_view_plan(volume.dims, view);
  float vmin = std::numeric_limits<float>::max();
  float vmax = std::numeric_limits<float>::lowest();
  for (float v : volume.image) {
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
  }
  const float range = vmax - vmin;
  const float scale = range > 0.0f ? 1.0f / range : 0.0f;  // constant volume -> 0
  out.data.resize(static_cast<std::size_t>(out.plan.p * out.plan.m * out.plan.n));
  std::size_t w = 0;
  for (std::int64_t i = 0; i < out.plan.p; ++i)
    for (std::int64_t y = 0; y < out.plan.m; ++y)
      for (std::int64_t x = 0; x < out.plan.n; ++x) {
        const float v = volume.image[static_cast<std::size_t>(
            view_to_flat(out.plan, volume.dims, i, y, x))];
        out.data[w++] = (v - vmin) * scale;
      }
  return out;
}

std::vector<std::uint8_t> label_slice(const Volume& volume, const ViewPlan& plan,
                                      std::int64_t i) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(plan.m * plan.n));
  std::size_t w = 0;
  for (std::int64_t y = 0; y < plan.m; ++y)
    for (std::int64_t x = 0; x < plan.n; ++x)
      out[w++] = volume.labels[static_cast<std::size_t>(
          view_to_flat(plan, volume.dims, i, y, x))];
  return out;
}

void store_label_slice(const ViewPlan& plan, std::int64_t i,
                       const std::vector<std::uint8_t>& plane,
                       const std::array<std::int64_t, 3>& dims,
                       std::vector<std::uint8_t>& grid) {
  std::size_t r = 0;
  for (std::int64_t y = 0; y < plan.m; ++y)
    for (std::int64_t x = 0; x < plan.n; ++x)
      grid[static_cast<std::size_t>(view_to_flat(plan, dims, i, y, x))] = plane[r++];
}

std::vector<SampleKey> plan_samples(const std::vector<SubjectShape>& subjects,
                                    View view) {
  std::vector<SampleKey> keys;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const ViewPlan plan = make_view_plan(subjects[s].dims, view);
    for (std::int64_t i = 0; i < plan.p; ++i) keys.push_back(SampleKey{s, i});
  }
  return keys;
}

std::vector<FoldSplit> kfold_split(std::vector<std::string> subject_ids, int k,
                                   std::uint64_t seed) {
  if (k < 2 || static_cast<std::size_t>(k) > subject_ids.size()) {
    throw UsageError("kfold_split: k must be in [2, #subjects], got k=" +
                     std::to_string(k) + " with " + std::to_string(subject_ids.size()) +
                     " subjects");
  }
  rng::Stream stream(rng::derive_seed(seed, {rng::fnv1a("kfold")}));
  for (std::size_t i = subject_ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(stream.next_below(i));
    std::swap(subject_ids[i - 1], subject_ids[j]);
  }
  const std::size_t n = subject_ids.size();
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t extra = n % static_cast<std::size_t>(k);
  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  std::size_t pos = 0;
  for (std::size_t f = 0; f < static_cast<std::size_t>(k); ++f) {
    const std::size_t take = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= pos && i < pos + take) {
        folds[f].test.push_back(subject_ids[i]);
      } else {
        folds[f].train.push_back(subject_ids[i]);
      }
    }
    pos += take;
  }
  return folds;
}

}  // namespace mda
