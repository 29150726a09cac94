// mdanet: phantom generation, volume import, training, evaluation, inference,
// parameter audit, and gradient checking for the slice-compression attention
// segmentation pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mda/attention.hpp"
#include "mda/compression.hpp"
#include "mda/gradcheck.hpp"
#include "mda/segnet.hpp"
#include "mda/train.hpp"
#include "mda/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mda;

namespace {

// ---------- run configuration ----------

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data_dir;
  std::string out_dir = "run";
  int folds = 5;
  int fold = 0;
  std::uint64_t seed = 0;
  std::string precision = "f32";
};

void merge_model_json(ModelConfig& m, const json& j) {
  if (j.contains("variant")) m.variant = parse_variant(j["variant"].get<std::string>());
  if (j.contains("depth")) m.depth = j["depth"].get<int>();
  if (j.contains("base_channels")) m.base_channels = j["base_channels"].get<std::int64_t>();
  if (j.contains("num_classes")) m.num_classes = j["num_classes"].get<std::int64_t>();
  if (j.contains("dropout_rate")) m.dropout_rate = j["dropout_rate"].get<double>();
  if (j.contains("attention_scale"))
    m.attention_scale = parse_attention_scale(j["attention_scale"].get<std::string>());
  if (j.contains("view")) m.view = parse_view(j["view"].get<std::string>());
  if (j.contains("input_height")) m.input_height = j["input_height"].get<std::int64_t>();
  if (j.contains("input_width")) m.input_width = j["input_width"].get<std::int64_t>();
  if (j.contains("compression")) {
    const json& c = j["compression"];
    if (c.contains("radius")) m.compression.radius = c["radius"].get<int>();
    if (c.contains("boundary"))
      m.compression.boundary = parse_boundary(c["boundary"].get<std::string>());
    if (c.contains("ordering"))
      m.compression.ordering = c["ordering"].get<std::string>() == "ascending"
                                   ? DiffOrdering::kAscending
                                   : DiffOrdering::kDescending;
  }
}

void merge_train_json(TrainConfig& t, const json& j) {
  if (j.contains("lr")) t.lr = j["lr"].get<double>();
  if (j.contains("l2_lambda")) t.l2_lambda = j["l2_lambda"].get<double>();
  if (j.contains("max_epochs")) t.max_epochs = j["max_epochs"].get<int>();
  if (j.contains("batch_size")) t.batch_size = j["batch_size"].get<int>();
  if (j.contains("early_stop_patience"))
    t.early_stop_patience = j["early_stop_patience"].get<int>();
}

RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("config file " + path + ": " + e.what());
  }
  if (j.contains("model")) merge_model_json(cfg.model, j["model"]);
  if (j.contains("train")) merge_train_json(cfg.train, j["train"]);
  if (j.contains("data")) {
    const json& d = j["data"];
    if (d.contains("dir")) cfg.data_dir = d["dir"].get<std::string>();
    if (d.contains("folds")) cfg.folds = d["folds"].get<int>();
  }
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("precision")) cfg.precision = j["precision"].get<std::string>();
  return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["model"] = model_config_to_json(cfg.model);
  j["train"] = {{"lr", cfg.train.lr},
                {"l2_lambda", cfg.train.l2_lambda},
                {"max_epochs", cfg.train.max_epochs},
                {"batch_size", cfg.train.batch_size},
                {"early_stop_patience", cfg.train.early_stop_patience},
                {"seed", cfg.train.seed}};
  j["data"] = {{"dir", cfg.data_dir}, {"folds", cfg.folds}};
  j["fold"] = cfg.fold;
  j["out_dir"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  return j;
}

// ---------- data directory ----------

struct Cohort {
  std::vector<std::string> ids;
  std::vector<Volume> volumes;  // same order as ids

  const Volume& by_id(const std::string& id) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == id) return volumes[i];
    }
    throw DataError("no subject \"" + id + "\" in the data manifest");
  }
};

Cohort load_cohort(const std::string& dir) {
  if (dir.empty()) throw UsageError("no data directory given (--data or config data.dir)");
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open data manifest: " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  Cohort cohort;
  for (const auto& entry : manifest.at("subjects")) {
    const std::string id = entry.at("id").get<std::string>();
    const fs::path header = fs::path(dir) / entry.at("header").get<std::string>();
    Volume v = load_volume(header);
    v.id = id;
    cohort.ids.push_back(id);
    cohort.volumes.push_back(std::move(v));
  }
  if (cohort.ids.empty()) throw DataError("data manifest lists no subjects");
  return cohort;
}

std::int64_t round_up(std::int64_t v, std::int64_t mult) {
  return ((v + mult - 1) / mult) * mult;
}

// Binds unset model input dims to the (padded) view geometry of the cohort.
void bind_input_dims(ModelConfig& model, const Cohort& cohort) {
  const ViewPlan plan = make_view_plan(cohort.volumes.front().dims, model.view);
  for (const Volume& v : cohort.volumes) {
    if (v.dims != cohort.volumes.front().dims) {
      throw DataError("subject \"" + v.id + "\" dims differ from the cohort; " +
                      "mixed-geometry cohorts are not supported");
    }
  }
  if (model.input_height == 0) model.input_height = round_up(plan.m, model.divisor());
  if (model.input_width == 0) model.input_width = round_up(plan.n, model.divisor());
}

// ---------- subcommands ----------

int cmd_make_phantoms(const std::string& out_dir, int subjects,
                      std::vector<std::int64_t> dims, std::uint64_t seed,
                      double noise, double bias) {
  if (dims.size() != 3) throw UsageError("--dims needs exactly 3 extents");
  PhantomConfig cfg;
  cfg.dims = {dims[0], dims[1], dims[2]};
  cfg.noise_sigma = noise;
  cfg.bias_amplitude = bias;
  fs::create_directories(out_dir);
  json manifest;
  manifest["dims"] = dims;
  manifest["seed"] = seed;
  manifest["subjects"] = json::array();
  for (int s = 0; s < subjects; ++s) {
    const std::string id = "s" + std::to_string(s);
    Volume v = synth_phantom(rng::derive_seed(seed, {rng::fnv1a("subject"),
                                                     static_cast<std::uint64_t>(s)}),
                             cfg);
    v.id = id;
    const std::string header = id + ".json";
    save_volume(v, fs::path(out_dir) / header);
    manifest["subjects"].push_back({{"id", id}, {"header", header}});
  }
  std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
  std::cerr << "wrote " << subjects << " phantom subjects to " << out_dir << "\n";
  return 0;
}

int cmd_import(const std::string& image_raw, std::vector<std::int64_t> dims,
               std::vector<double> spacing, const std::string& labels_raw,
               const std::string& out_header) {
  if (dims.size() != 3) throw UsageError("--dims needs exactly 3 extents");
  if (spacing.size() != 3) throw UsageError("--spacing needs exactly 3 values");
  Volume v;
  v.dims = {dims[0], dims[1], dims[2]};
  v.spacing = {spacing[0], spacing[1], spacing[2]};
  const std::int64_t count = v.numel();

  std::ifstream in(image_raw, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open raw image: " + image_raw);
  if (static_cast<std::int64_t>(in.tellg()) != count * 4) {
    throw DataError("raw image " + image_raw + " holds " + std::to_string(in.tellg()) +
                    " bytes; dims require " + std::to_string(count * 4) +
                    " (little-endian f32, d0-major)");
  }
  v.image.resize(static_cast<std::size_t>(count));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.image.data()), count * 4);

  if (!labels_raw.empty()) {
    std::ifstream lin(labels_raw, std::ios::binary | std::ios::ate);
    if (!lin) throw DataError("cannot open raw labels: " + labels_raw);
    if (static_cast<std::int64_t>(lin.tellg()) != count) {
      throw DataError("raw labels " + labels_raw + " holds " + std::to_string(lin.tellg()) +
                      " bytes; dims require " + std::to_string(count) + " (u8, d0-major)");
    }
    v.labels.resize(static_cast<std::size_t>(count));
    lin.seekg(0);
    lin.read(reinterpret_cast<char*>(v.labels.data()), count);
  }
  save_volume(v, out_header);
  std::cerr << "imported " << image_raw << " -> " << out_header << "\n";
  return 0;
}

template <typename T>
int run_train(RunConfig cfg) {
  Cohort cohort = load_cohort(cfg.data_dir);
  bind_input_dims(cfg.model, cohort);
  cfg.model.validate();
  if (cfg.fold < 0 || cfg.fold >= cfg.folds) {
    throw UsageError("--fold must be in [0," + std::to_string(cfg.folds) + ")");
  }
  cfg.train.seed = rng::derive_seed(cfg.seed, {rng::fnv1a("train"),
                                               static_cast<std::uint64_t>(cfg.fold)});

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "config.json", std::ios::trunc);
    out << run_config_to_json(cfg).dump(2) << "\n";
  }

  auto folds = kfold_split(cohort.ids, cfg.folds,
                           rng::derive_seed(cfg.seed, {rng::fnv1a("folds")}));
  const FoldSplit& split = folds[static_cast<std::size_t>(cfg.fold)];
  std::vector<const Volume*> train_set, test_set;
  for (const auto& id : split.train) train_set.push_back(&cohort.by_id(id));
  for (const auto& id : split.test) test_set.push_back(&cohort.by_id(id));
  std::cerr << "fold " << cfg.fold << ": " << train_set.size() << " train / "
            << test_set.size() << " test subjects, variant "
            << variant_name(cfg.model.variant) << ", view " << view_name(cfg.model.view)
            << "\n";

  TrainData data = TrainData::build(train_set, cfg.model.view);
  Model<T> model(cfg.model, rng::derive_seed(cfg.seed, {rng::fnv1a("init"),
                                                        static_cast<std::uint64_t>(cfg.fold)}));
  FitResult result = fit(model, data, cfg.train);

  MetricsWriter metrics;
  for (const EpochStat& stat : result.history) {
    metrics.add_loss_row(cfg.fold, cfg.model.view, cfg.model.variant, stat.epoch,
                         stat.mean_loss);
  }
  EvalResult eval = evaluate(model, test_set, cfg.train.batch_size);
  for (std::size_t c = 0; c < eval.class_mean.size(); ++c) {
    metrics.add_dice_row(cfg.fold, cfg.model.view, cfg.model.variant, result.best_epoch,
                         static_cast<int>(c) + 1, eval.class_mean[c], eval.class_std[c]);
  }
  metrics.save(fs::path(cfg.out_dir) / "metrics.csv");
  save_checkpoint(model, fs::path(cfg.out_dir) / "checkpoint.ckpt");
  std::cerr << "best epoch " << result.best_epoch << " (loss " << result.best_loss
            << "), held-out mean foreground Dice " << eval.mean_foreground << "\n";
  return 0;
}

struct CheckpointHandle {
  std::string dtype;
  std::optional<Model<float>> f32;
  std::optional<Model<double>> f64;

  static CheckpointHandle open(const std::string& path,
                               const std::string& expect_variant) {
    const json manifest = read_checkpoint_manifest(path);
    CheckpointHandle h;
    h.dtype = manifest.at("dtype").get<std::string>();
    const std::string variant = manifest.at("config").at("variant").get<std::string>();
    if (!expect_variant.empty() && expect_variant != variant) {
      throw DataError("checkpoint " + path + " holds variant \"" + variant +
                      "\" (manifest), not the requested \"" + expect_variant + "\"");
    }
    if (h.dtype == "f32") {
      h.f32.emplace(load_checkpoint<float>(path));
    } else {
      h.f64.emplace(load_checkpoint<double>(path));
    }
    return h;
  }

  const ModelConfig& config() const { return f32 ? f32->config() : f64->config(); }

  LabelVolume predict(const Volume& volume, int batch) const {
    return f32 ? predict_volume(*f32, volume, batch)
               : predict_volume(*f64, volume, batch);
  }

  EvalResult evaluate_subjects(const std::vector<const Volume*>& subjects,
                               int batch) const {
    return f32 ? evaluate(*f32, subjects, batch) : evaluate(*f64, subjects, batch);
  }
};

int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& volume_paths,
             const std::string& expect_variant, const std::string& out_csv) {
  CheckpointHandle model = CheckpointHandle::open(checkpoint, expect_variant);
  std::vector<Volume> volumes;
  for (const auto& p : volume_paths) volumes.push_back(load_volume(p));
  std::vector<const Volume*> ptrs;
  for (const Volume& v : volumes) ptrs.push_back(&v);
  EvalResult result = model.evaluate_subjects(ptrs, 8);

  std::cout << "variant " << variant_name(model.config().variant) << ", view "
            << view_name(model.config().view) << ", " << ptrs.size() << " subject(s)\n";
  for (std::size_t c = 0; c < result.class_mean.size(); ++c) {
    std::cout << "class " << c + 1 << " dice " << result.class_mean[c] << " +/- "
              << result.class_std[c] << "\n";
  }
  std::cout << "mean foreground dice " << result.mean_foreground << "\n";

  if (!out_csv.empty()) {
    MetricsWriter metrics;
    for (std::size_t c = 0; c < result.class_mean.size(); ++c) {
      metrics.add_dice_row(0, model.config().view, model.config().variant, 0,
                           static_cast<int>(c) + 1, result.class_mean[c],
                           result.class_std[c]);
    }
    metrics.save(out_csv);
  }
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& volume_path,
              const std::string& out_path) {
  CheckpointHandle model = CheckpointHandle::open(checkpoint, "");
  Volume volume = load_volume(volume_path);
  LabelVolume pred = model.predict(volume, 8);
  save_label_volume(pred, out_path);
  std::cerr << "wrote predicted labels to " << out_path << "\n";
  return 0;
}

int cmd_paramcount(RunConfig cfg, bool all_variants) {
  if (cfg.model.input_height == 0) cfg.model.input_height = 256;
  if (cfg.model.input_width == 0) cfg.model.input_width = 192;

  auto report = [&](Variant v) {
    ModelConfig mc = cfg.model;
    mc.variant = v;
    Model<float> model(mc, 0);
    const ParamCount count = model.param_count();
    std::cout << variant_name(v) << ": total " << count.total << " (backbone "
              << count.backbone << ", attention " << count.attention << ", compression "
              << count.compression << ")\n";
    return count;
  };

  if (!all_variants) {
    report(cfg.model.variant);
    return 0;
  }
  const ParamCount plain = report(Variant::kPlain);
  const ParamCount cscse = report(Variant::kCscse);
  const ParamCount mse = report(Variant::kMse);
  const ParamCount mda = report(Variant::kMda);
  const bool ordered = cscse.total > mse.total && mse.total > plain.total;
  std::cout << "ordering cscse > mse > plain: " << (ordered ? "ok" : "VIOLATED") << "\n";
  const std::int64_t closed_form =
      2 * cfg.model.compression.radius * (cfg.model.input_height + cfg.model.input_width) +
      4 * cfg.model.compression.radius;
  std::cout << "compression closed form 2r(m+n)+4r = " << closed_form
            << (mda.compression == closed_form ? " (matches)" : " (MISMATCH)") << "\n";
  if (!ordered || mda.compression != closed_form) {
    throw NumericalError("parameter-count assertions failed");
  }
  return 0;
}

// Gradient-check batteries shared between `gradcheck block` and the tests.
int cmd_gradcheck(const std::string& scope, std::uint64_t seed, int instances) {
  using D = Tensor<double>;
  int failures = 0;
  auto run = [&](const std::string& name,
                 const std::function<GradCheckReport(std::uint64_t)>& check) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
      GradCheckReport report = check(rng::derive_seed(seed, {rng::fnv1a(name),
                                                             static_cast<std::uint64_t>(i)}));
      worst = std::max(worst, report.max_rel_err);
      if (!report.pass) {
        ++failures;
        std::cout << "FAIL " << name << " instance " << i << ": max rel err "
                  << report.max_rel_err << " at " << report.worst << "\n";
        return;
      }
    }
    std::cout << "ok   " << name << " (" << instances << " instances, max rel err "
              << worst << ")\n";
  };

  if (scope == "block" || scope == "all") {
    run("conv2d", [](std::uint64_t s) {
      D x = D::uniform({1, 5, 4, 2}, -1, 1, s, true);
      D k = D::uniform({3, 3, 2, 3}, -1, 1, s + 1, true);
      D b = D::uniform({3}, -1, 1, s + 2, true);
      return grad_check([&](const std::vector<D>&) {
        return weighted_sum_loss(conv2d(x, k, b), 17);
      }, {x, k, b});
    });
    run("depthwise_axis_conv", [](std::uint64_t s) {
      D x = D::uniform({1, 4, 3, 2}, -1, 1, s, true);
      D fh = D::uniform({4, 2}, -1, 1, s + 1, true);
      D bh = D::uniform({2}, -1, 1, s + 2, true);
      return grad_check([&](const std::vector<D>&) {
        return weighted_sum_loss(depthwise_axis_conv(x, fh, bh, Axis2D::kHeight), 19);
      }, {x, fh, bh});
    });
    run("softmax", [](std::uint64_t s) {
      D x = D::uniform({2, 3, 2, 4}, -3, 3, s, true);
      return grad_check([&](const std::vector<D>&) {
        return weighted_sum_loss(softmax(x, {1, 2}), 23);
      }, {x});
    });
    run("maxpool_upsample", [](std::uint64_t s) {
      D x = D::uniform({1, 4, 4, 2}, -8, 8, s, true);
      return grad_check([&](const std::vector<D>&) {
        return weighted_sum_loss(upsample2(maxpool2(x)), 29);
      }, {x});
    });
    run("mse_block", [](std::uint64_t s) {
      ParamRegistry<double> reg(s);
      auto p = MseBlockParams<double>::create(reg, "b", 3, 4, 2);
      D u = D::uniform({1, 3, 4, 2}, -1, 1, s + 9, true);
      std::vector<D> leaves{u};
      for (const auto& [n, t] : reg.items()) leaves.push_back(t);
      return grad_check([&](const std::vector<D>&) {
        return mean_all(mse_block(u, p));
      }, leaves);
    });
    run("scse_block", [](std::uint64_t s) {
      ParamRegistry<double> reg(s);
      auto p = ScseBlockParams<double>::create(reg, "b", 3);
      D u = D::uniform({1, 2, 4, 3}, -1, 1, s + 9, true);
      std::vector<D> leaves{u};
      for (const auto& [n, t] : reg.items()) leaves.push_back(t);
      return grad_check([&](const std::vector<D>&) {
        return mean_all(scse_block_baseline(u, p));
      }, leaves);
    });
    run("compression", [](std::uint64_t s) {
      ParamRegistry<double> reg(s);
      auto p = CompressionParams<double>::create(reg, "c", 4, 5, 4);
      D stack = D::uniform({1, 4, 5, 4}, -0.5, 0.5, s + 9);
      std::vector<D> leaves;
      for (const auto& [n, t] : reg.items()) leaves.push_back(t);
      return grad_check([&](const std::vector<D>&) {
        return weighted_sum_loss(compress_stack(stack, p), 31);
      }, leaves);
    });
  }
  if (scope == "network" || scope == "all") {
    for (Variant v : {Variant::kPlain, Variant::kCscse, Variant::kMse, Variant::kMda}) {
      run(std::string("network_") + variant_name(v), [v](std::uint64_t s) {
        ModelConfig cfg;
        cfg.variant = v;
        cfg.depth = 2;
        cfg.base_channels = 2;
        cfg.num_classes = 3;
        cfg.dropout_rate = 0.3;
        cfg.input_height = 8;
        cfg.input_width = 8;
        cfg.compression.radius = 2;
        Model<double> model(cfg, s);
        ForwardOptions opts;
        opts.train_mode = true;
        opts.dropout_seed = s + 1;
        D slice = D::uniform({1, 8, 8, 1}, 0, 1, s + 2);
        D diffs = D::uniform({1, 8, 8, 4}, -0.5, 0.5, s + 3);
        std::vector<D> leaves;
        for (const auto& [n, t] : model.params().items()) leaves.push_back(t);
        return grad_check([&, v](const std::vector<D>&) {
          Tensor<double> input = slice;
          if (v == Variant::kMda) {
            input = concat<double>(
                {slice, compress_stack(diffs, model.compression_params())}, 3);
          }
          return weighted_sum_loss(model.forward(input, opts), 37);
        }, leaves);
      });
    }
  }
  if (failures > 0) {
    throw NumericalError(std::to_string(failures) + " gradient check(s) failed");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice-compression attention segmentation pipeline"};
  app.require_subcommand(1);

  // make-phantoms
  auto* mk = app.add_subcommand("make-phantoms", "Generate synthetic labeled volumes");
  std::string mk_out = "phantoms";
  int mk_subjects = 6;
  std::vector<std::int64_t> mk_dims{48, 64, 56};
  std::uint64_t mk_seed = 0;
  double mk_noise = 0.03, mk_bias = 0.05;
  mk->add_option("--out", mk_out, "Output directory");
  mk->add_option("--subjects", mk_subjects, "Number of subjects");
  mk->add_option("--dims", mk_dims, "Volume dims d0,d1,d2")->delimiter(',');
  mk->add_option("--seed", mk_seed, "Master seed");
  mk->add_option("--noise", mk_noise, "Gaussian intensity noise sigma");
  mk->add_option("--bias", mk_bias, "Smooth bias field amplitude");

  // import
  auto* imp = app.add_subcommand("import", "Convert a raw voxel dump to the volume format");
  std::string imp_image, imp_labels, imp_out;
  std::vector<std::int64_t> imp_dims;
  std::vector<double> imp_spacing{1.0, 1.0, 1.0};
  imp->add_option("--image", imp_image, "Raw little-endian f32 voxel file")->required();
  imp->add_option("--dims", imp_dims, "Volume dims d0,d1,d2")->required()->delimiter(',');
  imp->add_option("--spacing", imp_spacing, "Voxel spacing in mm")->delimiter(',');
  imp->add_option("--labels", imp_labels, "Optional raw u8 label file");
  imp->add_option("--out", imp_out, "Output header path (.json)")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train one fold of one variant");
  std::string tr_config, tr_variant, tr_view, tr_data, tr_out, tr_precision;
  int tr_fold = -1, tr_epochs = -1, tr_batch = -1, tr_folds = -1;
  double tr_lr = -1.0;
  std::uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  tr->add_option("--config", tr_config, "JSON run config (flags override)");
  tr->add_option("--variant", tr_variant, "plain|cscse|mse|mda");
  tr->add_option("--view", tr_view, "sagittal|axial|coronal");
  tr->add_option("--data", tr_data, "Data directory with manifest.json");
  tr->add_option("--out", tr_out, "Run directory");
  tr->add_option("--fold", tr_fold, "Fold index to run");
  tr->add_option("--folds", tr_folds, "Number of CV folds");
  tr->add_option("--epochs", tr_epochs, "Max epochs");
  tr->add_option("--batch", tr_batch, "Batch size");
  tr->add_option("--lr", tr_lr, "Learning rate");
  tr->add_option("--precision", tr_precision, "f32|f64");
  tr->add_option("--seed", tr_seed, "Master seed")->each([&](const std::string&) {
    tr_seed_set = true;
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on labeled volumes");
  std::string ev_ckpt, ev_variant, ev_out;
  std::vector<std::string> ev_volumes;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--volume", ev_volumes, "Labeled volume header(s)")->required();
  ev->add_option("--variant", ev_variant, "Expected variant (checked against the manifest)");
  ev->add_option("--out", ev_out, "Optional metrics CSV path");

  // infer
  auto* in = app.add_subcommand("infer", "Predict a label volume");
  std::string in_ckpt, in_volume, in_out;
  in->add_option("--checkpoint", in_ckpt, "Checkpoint file")->required();
  in->add_option("--volume", in_volume, "Input volume header")->required();
  in->add_option("--out", in_out, "Output label volume header (.json)")->required();

  // paramcount
  auto* pc = app.add_subcommand("paramcount", "Print parameter totals and breakdown");
  std::string pc_config, pc_variant;
  bool pc_all = false;
  int pc_depth = -1;
  std::int64_t pc_base = -1, pc_h = -1, pc_w = -1;
  pc->add_option("--config", pc_config, "JSON run config");
  pc->add_option("--variant", pc_variant, "plain|cscse|mse|mda");
  pc->add_flag("--all", pc_all, "Report all four variants and assert the ordering");
  pc->add_option("--depth", pc_depth, "Encoder levels");
  pc->add_option("--base", pc_base, "Base channels");
  pc->add_option("--height", pc_h, "Bound input height");
  pc->add_option("--width", pc_w, "Bound input width");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  std::string gc_scope = "all";
  std::uint64_t gc_seed = 0;
  int gc_instances = 5;
  gc->add_option("--scope", gc_scope, "block|network|all")
      ->check(CLI::IsMember({"block", "network", "all"}));
  gc->add_option("--seed", gc_seed, "Master seed");
  gc->add_option("--instances", gc_instances, "Random instances per check");

  try {
    app.parse(argc, argv);

    if (*mk) {
      return cmd_make_phantoms(mk_out, mk_subjects, mk_dims, mk_seed, mk_noise, mk_bias);
    }
    if (*imp) {
      return cmd_import(imp_image, imp_dims, imp_spacing, imp_labels, imp_out);
    }
    if (*tr) {
      RunConfig cfg = load_run_config(tr_config);
      if (!tr_variant.empty()) cfg.model.variant = parse_variant(tr_variant);
      if (!tr_view.empty()) cfg.model.view = parse_view(tr_view);
      if (!tr_data.empty()) cfg.data_dir = tr_data;
      if (!tr_out.empty()) cfg.out_dir = tr_out;
      if (tr_fold >= 0) cfg.fold = tr_fold;
      if (tr_folds > 0) cfg.folds = tr_folds;
      if (tr_epochs > 0) cfg.train.max_epochs = tr_epochs;
      if (tr_batch > 0) cfg.train.batch_size = tr_batch;
      if (tr_lr > 0) cfg.train.lr = tr_lr;
      if (tr_seed_set) cfg.seed = tr_seed;
      if (!tr_precision.empty()) cfg.precision = tr_precision;
      if (cfg.precision == "f32") return run_train<float>(cfg);
      if (cfg.precision == "f64") return run_train<double>(cfg);
      throw UsageError("precision must be f32 or f64, got \"" + cfg.precision + "\"");
    }
    if (*ev) {
      return cmd_eval(ev_ckpt, ev_volumes, ev_variant, ev_out);
    }
    if (*in) {
      return cmd_infer(in_ckpt, in_volume, in_out);
    }
    if (*pc) {
      RunConfig cfg = load_run_config(pc_config);
      if (!pc_variant.empty()) cfg.model.variant = parse_variant(pc_variant);
      if (pc_depth > 0) cfg.model.depth = pc_depth;
      if (pc_base > 0) cfg.model.base_channels = pc_base;
      if (pc_h > 0) cfg.model.input_height = pc_h;
      if (pc_w > 0) cfg.model.input_width = pc_w;
      return cmd_paramcount(cfg, pc_all);
    }
    if (*gc) {
      return cmd_gradcheck(gc_scope, gc_seed, gc_instances);
    }
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
