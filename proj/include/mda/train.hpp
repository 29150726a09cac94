#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mda/compression.hpp"
#include "mda/ops.hpp"
#include "mda/segnet.hpp"
#include "mda/tensor.hpp"
#include "mda/volume.hpp"

// Dice metric and loss, Adam with L2, the training loop, and per-fold
// evaluation with CSV metrics output.
namespace mda {

struct TrainConfig {
  double lr = 5e-5;
  double l2_lambda = 1e-5;
  int max_epochs = 300;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int early_stop_patience = 0;  // 0 = off

  void validate() const {
    if (lr <= 0.0) throw UsageError("train: lr must be positive");
    if (batch_size < 1) throw UsageError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw UsageError("train: max_epochs must be >= 1");
  }
};

// --- Dice ---

// Hard Dice between integer label masks for one class: 2|P^T| / (|P|+|T|).
// Both masks empty counts as a perfect 1.0.
inline double dice_score(std::span<const std::uint8_t> pred,
                         std::span<const std::uint8_t> truth, int cls) {
  if (pred.size() != truth.size()) {
    throw ShapeError("dice_score: mask sizes differ");
  }
  std::int64_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_p = pred[i] == cls;
    const bool in_t = truth[i] == cls;
    p += in_p;
    t += in_t;
    both += in_p && in_t;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

// Soft Dice loss: 1 minus the mean over foreground classes (background
// excluded) of (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps). Differentiable.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& one_hot) {
  constexpr double kEps = 1e-6;
  if (probs.shape() != one_hot.shape()) {
    throw ShapeError("dice_loss: probability map " + shape_str(probs.shape()) +
                     " vs targets " + shape_str(one_hot.shape()));
  }
  const std::int64_t classes = probs.shape()[3];
  if (classes < 2) throw ShapeError("dice_loss: need at least 2 classes");
  Tensor<T> intersect = channel_sums(mul(probs, one_hot));
  Tensor<T> size_sum = add(channel_sums(probs), channel_sums(one_hot));
  Tensor<T> dice = div(affine(intersect, 2.0, kEps), affine(size_sum, 1.0, kEps));
  // Average the foreground entries only.
  std::vector<T> mask(static_cast<std::size_t>(classes),
                      static_cast<T>(1.0 / static_cast<double>(classes - 1)));
  mask[0] = T(0);
  Tensor<T> fg_mean = sum_all(mul(dice, Tensor<T>::from_data({classes}, mask)));
  return affine(fg_mean, -1.0, 1.0);
}

// --- Adam ---

struct AdamHyper {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
};

// One bias-corrected Adam update over a flat parameter buffer. The L2 term
// lambda*theta joins the gradient before the moment update.
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m,
                 std::span<T> v, std::int64_t t, double lr, double l2_lambda) {
  const double c1 = 1.0 - std::pow(AdamHyper::kBeta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(AdamHyper::kBeta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = static_cast<double>(grad[i]) +
                     l2_lambda * static_cast<double>(theta[i]);
    const double mi = AdamHyper::kBeta1 * static_cast<double>(m[i]) +
                      (1.0 - AdamHyper::kBeta1) * g;
    const double vi = AdamHyper::kBeta2 * static_cast<double>(v[i]) +
                      (1.0 - AdamHyper::kBeta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / c1;
    const double vhat = vi / c2;
    theta[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + AdamHyper::kEps));
  }
}

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t t = 0;

  template <typename Registry>
  void init(const Registry& params) {
    m.clear();
    v.clear();
    for (const auto& [name, tensor] : params.items()) {
      m.emplace_back(static_cast<std::size_t>(tensor.numel()), T(0));
      v.emplace_back(static_cast<std::size_t>(tensor.numel()), T(0));
    }
    t = 0;
  }
};

// Updates every registered parameter from its accumulated gradient, then
// clears the gradients.
template <typename T>
void adam_step(ParamRegistry<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
  ++state.t;
  std::size_t slot = 0;
  for (const auto& [name, tensor] : params.items()) {
    if (tensor.has_grad()) {
      adam_update<T>(tensor.mutable_values(), tensor.grad(), state.m[slot],
                     state.v[slot], state.t, cfg.lr, cfg.l2_lambda);
    }
    tensor.zero_grad();
    ++slot;
  }
}

// --- batched sample assembly ---

// Pads a (m, n) plane of float data to (hp, wp) with zeros.
template <typename T>
void pad_plane_into(const float* src, std::int64_t m, std::int64_t n, std::int64_t hp,
                    std::int64_t wp, std::int64_t channel, std::int64_t channels,
                    std::vector<T>& dst, std::int64_t batch_index) {
  const std::int64_t plane = hp * wp * channels;
  T* base = dst.data() + batch_index * plane;
  for (std::int64_t y = 0; y < m; ++y)
    for (std::int64_t x = 0; x < n; ++x)
      base[(y * wp + x) * channels + channel] = static_cast<T>(src[y * n + x]);
}

// Per-view training set: one normalized view per subject plus sample keys.
struct TrainData {
  View view = View::kSagittal;
  std::vector<const Volume*> volumes;
  std::vector<VolumeViewF> views;
  std::vector<SampleKey> samples;

  static TrainData build(const std::vector<const Volume*>& subjects, View view) {
    TrainData data;
    data.view = view;
    data.volumes = subjects;
    std::vector<SubjectShape> shapes;
    for (const Volume* v : subjects) {
      if (!v->has_labels()) {
        throw DataError("training subject \"" + v->id + "\" has no label volume");
      }
      data.views.push_back(make_view(*v, view));
      shapes.push_back(SubjectShape{v->id, v->dims});
    }
    data.samples = plan_samples(shapes, view);
    return data;
  }

  const ViewPlan& plan() const { return views.front().plan; }
};

// Assembles the network input for a batch of samples. For the mda variant the
// compressed residual channel is built inside the autodiff graph so the loss
// reaches the compression filters.
template <typename T>
Tensor<T> build_input_batch(const Model<T>& model, const TrainData& data,
                            std::span<const SampleKey> keys) {
  const ModelConfig& cfg = model.config();
  const std::int64_t hp = cfg.input_height, wp = cfg.input_width;
  const auto batch = static_cast<std::int64_t>(keys.size());
  const ViewPlan& plan = data.plan();

  std::vector<T> slices(static_cast<std::size_t>(batch * hp * wp), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& key = keys[static_cast<std::size_t>(b)];
    pad_plane_into(data.views[key.subject].slice(key.slice), plan.m, plan.n, hp, wp,
                   0, 1, slices, b);
  }
  Tensor<T> slice_batch = Tensor<T>::from_data({batch, hp, wp, 1}, std::move(slices));
  if (cfg.variant != Variant::kMda) return slice_batch;

  const std::int64_t ch = cfg.compression.channels();
  std::vector<T> diffs(static_cast<std::size_t>(batch * hp * wp * ch), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& key = keys[static_cast<std::size_t>(b)];
    DiffStack<T> stack = order_by_l1(
        neighborhood_diffs<T>(data.views[key.subject], key.slice, cfg.compression),
        cfg.compression);
    auto src = stack.diffs.values();
    T* base = diffs.data() + b * hp * wp * ch;
    for (std::int64_t y = 0; y < plan.m; ++y)
      for (std::int64_t x = 0; x < plan.n; ++x)
        for (std::int64_t k = 0; k < ch; ++k)
          base[(y * wp + x) * ch + k] = src[static_cast<std::size_t>((y * plan.n + x) * ch + k)];
  }
  Tensor<T> diff_batch = Tensor<T>::from_data({batch, hp, wp, ch}, std::move(diffs));
  Tensor<T> condensed = compress_stack(diff_batch, model.compression_params());
  return concat<T>({slice_batch, condensed}, 3);
}

// One-hot targets for a batch; padded pixels stay background.
template <typename T>
Tensor<T> build_target_batch(const TrainData& data, std::span<const SampleKey> keys,
                             std::int64_t hp, std::int64_t wp, std::int64_t classes) {
  const auto batch = static_cast<std::int64_t>(keys.size());
  const ViewPlan& plan = data.plan();
  std::vector<T> hot(static_cast<std::size_t>(batch * hp * wp * classes), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& key = keys[static_cast<std::size_t>(b)];
    const Volume& vol = *data.volumes[key.subject];
    std::vector<std::uint8_t> plane = label_slice(vol, plan, key.slice);
    T* base = hot.data() + b * hp * wp * classes;
    for (std::int64_t y = 0; y < hp; ++y)
      for (std::int64_t x = 0; x < wp; ++x) {
        std::uint8_t cls = 0;
        if (y < plan.m && x < plan.n) {
          cls = plane[static_cast<std::size_t>(y * plan.n + x)];
        }
        if (cls >= classes) {
          throw DataError("subject \"" + vol.id + "\": label " + std::to_string(cls) +
                          " >= num_classes " + std::to_string(classes));
        }
        base[(y * wp + x) * classes + cls] = T(1);
      }
  }
  return Tensor<T>::from_data({batch, hp, wp, classes}, std::move(hot));
}

// --- training loop ---

struct EpochStat {
  int epoch = 0;
  double mean_loss = 0.0;
};

struct FitResult {
  std::vector<EpochStat> history;
  int best_epoch = 0;
  double best_loss = 0.0;
};

// Seeded-shuffle epoch loop; Adam on every parameter; tracks the epoch with
// the best mean training soft-Dice (lowest loss) and restores those weights
// before returning.
template <typename T>
FitResult fit(Model<T>& model, const TrainData& data, const TrainConfig& cfg) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  AdamState<T> adam;
  adam.init(model.params());
  for (const auto& [name, tensor] : model.params().items()) tensor.zero_grad();

  FitResult result;
  result.best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<T>> best_values;
  int stale_epochs = 0;

  std::vector<SampleKey> order = data.samples;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng::Stream shuffle(rng::derive_seed(cfg.seed, {rng::fnv1a("shuffle"),
                                                    static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.next_below(i))]);
    }

    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const SampleKey> keys(order.data() + start, end - start);

      ForwardOptions opts;
      opts.train_mode = true;
      opts.dropout_seed = rng::derive_seed(
          cfg.seed, {rng::fnv1a("dropout"), static_cast<std::uint64_t>(epoch),
                     static_cast<std::uint64_t>(batches)});
      Tensor<T> input = build_input_batch(model, data, keys);
      Tensor<T> targets = build_target_batch<T>(data, keys, mc.input_height,
                                                mc.input_width, mc.num_classes);
      Tensor<T> probs = model.forward(input, opts);
      Tensor<T> loss = dice_loss(probs, targets);
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericalError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batches));
      }
      backward(loss);
      adam_step(model.params(), adam, cfg);
      loss_sum += loss_value;
      ++batches;
    }

    EpochStat stat;
    stat.epoch = epoch;
    stat.mean_loss = loss_sum / static_cast<double>(batches);
    result.history.push_back(stat);

    if (stat.mean_loss < result.best_loss) {
      result.best_loss = stat.mean_loss;
      result.best_epoch = epoch;
      best_values.clear();
      for (const auto& [name, tensor] : model.params().items()) {
        best_values.emplace_back(tensor.values().begin(), tensor.values().end());
      }
      stale_epochs = 0;
    } else if (cfg.early_stop_patience > 0 && ++stale_epochs >= cfg.early_stop_patience) {
      break;
    }
  }

  std::size_t slot = 0;
  for (const auto& [name, tensor] : model.params().items()) {
    tensor.mutable_values() = best_values[slot++];
  }
  return result;
}

// --- evaluation ---

// Slice-wise argmax prediction restacked into a label volume. Eval mode, no
// graph recording.
template <typename T>
LabelVolume predict_volume(const Model<T>& model, const Volume& volume,
                           int batch_size = 8) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const VolumeViewF view = make_view(volume, cfg.view);
  const ViewPlan& plan = view.plan;
  if (cfg.input_height < plan.m || cfg.input_width < plan.n) {
    throw DataError("predict: volume view " + std::to_string(plan.m) + "x" +
                    std::to_string(plan.n) + " exceeds the model's bound input " +
                    std::to_string(cfg.input_height) + "x" + std::to_string(cfg.input_width));
  }

  TrainData data;
  data.view = cfg.view;
  data.volumes = {&volume};
  data.views.push_back(view);

  LabelVolume out;
  out.dims = volume.dims;
  out.spacing = volume.spacing;
  out.labels.assign(static_cast<std::size_t>(volume.numel()), 0);

  for (std::int64_t start = 0; start < plan.p; start += batch_size) {
    const std::int64_t end = std::min<std::int64_t>(plan.p, start + batch_size);
    std::vector<SampleKey> keys;
    for (std::int64_t i = start; i < end; ++i) keys.push_back(SampleKey{0, i});
    Tensor<T> input = build_input_batch(model, data, keys);
    Tensor<T> probs = model.forward(input, ForwardOptions{});
    const Shape& ps = probs.shape();
    for (std::int64_t b = 0; b < end - start; ++b) {
      std::vector<std::uint8_t> plane(static_cast<std::size_t>(plan.m * plan.n));
      for (std::int64_t y = 0; y < plan.m; ++y)
        for (std::int64_t x = 0; x < plan.n; ++x) {
          std::int64_t best = 0;
          T best_p = probs.values()[static_cast<std::size_t>(idx4(ps, b, y, x, 0))];
          for (std::int64_t c = 1; c < cfg.num_classes; ++c) {
            const T p = probs.values()[static_cast<std::size_t>(idx4(ps, b, y, x, c))];
            if (p > best_p) {
              best_p = p;
              best = c;
            }
          }
          plane[static_cast<std::size_t>(y * plan.n + x)] = static_cast<std::uint8_t>(best);
        }
      store_label_slice(plan, start + b, plane, volume.dims, out.labels);
    }
  }
  return out;
}

// Per-class Dice between two label grids, classes 1..num_classes-1.
inline std::vector<double> dice_per_class(std::span<const std::uint8_t> pred,
                                          std::span<const std::uint8_t> truth,
                                          std::int64_t num_classes) {
  std::vector<double> out;
  for (std::int64_t c = 1; c < num_classes; ++c) {
    out.push_back(dice_score(pred, truth, static_cast<int>(c)));
  }
  return out;
}

struct EvalResult {
  std::vector<std::vector<double>> per_subject;  // [subject][fg class - 1]
  std::vector<double> class_mean;                // per fg class across subjects
  std::vector<double> class_std;                 // population std
  double mean_foreground = 0.0;
};

// Per-subject 3D Dice on restacked predictions, then mean +/- std per class.
template <typename T>
EvalResult evaluate(const Model<T>& model, const std::vector<const Volume*>& subjects,
                    int batch_size = 8) {
  const std::int64_t classes = model.config().num_classes;
  EvalResult result;
  for (const Volume* vol : subjects) {
    if (!vol->has_labels()) {
      throw DataError("evaluation subject \"" + vol->id + "\" has no labels");
    }
    LabelVolume pred = predict_volume(model, *vol, batch_size);
    result.per_subject.push_back(dice_per_class(pred.labels, vol->labels, classes));
  }
  const std::size_t fg = static_cast<std::size_t>(classes - 1);
  result.class_mean.assign(fg, 0.0);
  result.class_std.assign(fg, 0.0);
  for (const auto& row : result.per_subject) {
    for (std::size_t c = 0; c < fg; ++c) result.class_mean[c] += row[c];
  }
  const double n = static_cast<double>(result.per_subject.size());
  for (std::size_t c = 0; c < fg; ++c) result.class_mean[c] /= n;
  for (const auto& row : result.per_subject) {
    for (std::size_t c = 0; c < fg; ++c) {
      const double d = row[c] - result.class_mean[c];
      result.class_std[c] += d * d;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < fg; ++c) {
    result.class_std[c] = std::sqrt(result.class_std[c] / n);
    total += result.class_mean[c];
  }
  result.mean_foreground = total / static_cast<double>(fg);
  return result;
}

// --- metrics CSV ---
//
// Schema: fold,view,variant,epoch,class,dice_mean,dice_std,loss — one row per
// measurement; loss rows leave the dice columns empty and vice versa.
class MetricsWriter {
 public:
  void add_loss_row(int fold, View view, Variant variant, int epoch, double loss) {
    rows_.push_back(prefix(fold, view, variant, epoch) + ",,,," + fmt(loss));
  }

  void add_dice_row(int fold, View view, Variant variant, int epoch, int cls,
                    double mean, double stdev) {
    rows_.push_back(prefix(fold, view, variant, epoch) + "," + std::to_string(cls) +
                    "," + fmt(mean) + "," + fmt(stdev) + ",");
  }

  std::string to_csv() const {
    std::string out = "fold,view,variant,epoch,class,dice_mean,dice_std,loss\n";
    for (const auto& row : rows_) {
      out += row;
      out += "\n";
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write metrics: " + path.string());
    out << to_csv();
  }

 private:
  static std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }

  static std::string prefix(int fold, View view, Variant variant, int epoch) {
    return std::to_string(fold) + "," + view_name(view) + "," + variant_name(variant) +
           "," + std::to_string(epoch);
  }

  std::vector<std::string> rows_;
};

}  // namespace mda
