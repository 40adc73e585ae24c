#include "clipad/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "clipad/backbone/vit.hpp"
#include "clipad/data/data_io.hpp"
#include "clipad/errors.hpp"
#include "clipad/metrics/metrics.hpp"
#include "clipad/pipeline.hpp"
#include "clipad/prompts/prompt_bank.hpp"
#include "clipad/rvs/rvs.hpp"
#include "clipad/sdp/sdp_plus.hpp"

namespace clipad::cli {

namespace {

namespace fs = std::filesystem;

constexpr const char* kRunConfig = "run_config.toml";

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write '" + path.string() + "'");
  file << text;
  if (!file) throw IoError("cannot write '" + path.string() + "'");
}

void write_run_config(const CLI::App& sub, const fs::path& dir) {
  std::ostringstream text;
  text << "# resolved options of `" << sub.get_name() << "`; rerun with --config " << kRunConfig << "\n";
  text << sub.config_to_str(true, false);
  write_text(dir / kRunConfig, text.str());
}

backbone::TensorContainer pair_container(const rvs::RepresentativePair& pair) {
  backbone::TensorContainer c;
  c.put("t_normal", pair.t_normal);
  c.put("t_abnormal", pair.t_abnormal);
  return c;
}

rvs::RepresentativePair load_pair(const fs::path& path) {
  const auto c = backbone::load_container(path);
  rvs::RepresentativePair pair;
  pair.t_normal = c.f32("t_normal");
  pair.t_abnormal = c.f32("t_abnormal");
  if (pair.t_normal.rank() != 1 || pair.t_normal.shape() != pair.t_abnormal.shape()) {
    throw ShapeMismatchError("pair file '" + path.string() + "' holds vectors of different shapes");
  }
  return pair;
}

std::string provenance_text(const char* name, const rvs::SelectionProvenance& p) {
  std::ostringstream out;
  out << name << ".used = " << p.used << '\n'
      << name << ".discarded = " << p.discarded << '\n'
      << name << ".clusters = " << p.clusters << '\n'
      << name << ".fallback_to_mean = " << (p.fallback_to_mean ? "true" : "false") << '\n';
  return out.str();
}

/// Options shared by detect, evaluate and render.
struct DetectOptions {
  std::string model;
  std::string pair;
  std::string projections;
  bool baseline = false;
  std::vector<std::size_t> stages;
  double temperature = 0.01;
  double ft_temperature = 0.01;
  double smooth = 0.0;
  bool no_scale = false;
  std::size_t jobs = 1;

  void add_to(CLI::App* sub) {
    sub->add_option("--model", model, "Encoder weights container")->required();
    sub->add_option("--pair", pair, "Representative pair container (from `select`)")->required();
    sub->add_option("--projections", projections, "Trained stage projections; enables SDP+");
    sub->add_flag("--baseline", baseline, "Direct similarity of original-path tokens instead of SDP");
    sub->add_option("--stages", stages, "SDP stages to sum (default: all)")->delimiter(',');
    sub->add_option("--temperature", temperature, "Softmax temperature of the class probabilities")->capture_default_str();
    sub->add_option("--ft-temperature", ft_temperature, "Softmax temperature of the mapped map")->capture_default_str();
    sub->add_option("--smooth", smooth, "Gaussian smoothing sigma of pixel maps (0 = off)")->capture_default_str();
    sub->add_flag("--no-vv-scale", no_scale, "Do not scale V.V^T by 1/sqrt(d_head)");
    sub->add_option("--jobs", jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  }

  pipeline::Mode mode() const {
    if (baseline) return pipeline::Mode::Baseline;
    return projections.empty() ? pipeline::Mode::Sdp : pipeline::Mode::SdpPlus;
  }

  pipeline::AnalysisOptions analysis() const {
    pipeline::AnalysisOptions o;
    o.temperature = temperature;
    o.ft_temperature = ft_temperature;
    o.surgery.scale = !no_scale;
    if (!projections.empty()) o.projections = sdp::load_projections(projections);
    return o;
  }
};

struct Loaded {
  backbone::EncoderWeights weights;
  rvs::RepresentativePair pair;
};

Loaded load_model(const DetectOptions& o) {
  Loaded l{backbone::load_weights(o.model), load_pair(o.pair)};
  if (l.pair.t_normal.size() != l.weights.config.embed_dim) {
    throw DimensionError("pair vectors have " + std::to_string(l.pair.t_normal.size()) + " channels, model joint space " +
                         std::to_string(l.weights.config.embed_dim));
  }
  for (std::size_t j : o.stages) {
    if (j >= l.weights.config.stages) throw ValidationError("stage " + std::to_string(j) + " does not exist");
  }
  return l;
}

/// Replaces `--config FILE` after the subcommand with the file's options.
/// Options given explicitly on the command line win over the file.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> result;
  std::vector<std::string> explicit_args;
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      explicit_args.push_back(args[i]);
    }
  }
  if (config.empty() || explicit_args.empty()) return args;
  if (!fs::is_regular_file(config)) throw IoError("cannot open config '" + config + "'");
  auto given = [&](const std::string& name) {
    const std::string flag = "--" + name;
    return std::any_of(explicit_args.begin() + 1, explicit_args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  result.push_back(explicit_args.front());
  for (const auto& item : CLI::ConfigTOML().from_file(config)) {
    if (!item.parents.empty() || given(item.name)) continue;
    for (const auto& value : item.inputs) {
      if (!value.empty()) result.push_back("--" + item.name + "=" + value);
    }
  }
  result.insert(result.end(), explicit_args.begin() + 1, explicit_args.end());
  return result;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Zero-shot anomaly detection with staged dual-path surgery", "clipad"};
  app.require_subcommand(1);
  std::function<void()> action;

  // gen-synth
  struct {
    std::string out;
    std::uint64_t seed = 0;
    std::size_t train = 200, test = 100, size = 240;
    std::string texture = "cells";
    std::vector<std::string> defects{"blob", "scratch", "color_shift"};
    std::size_t min_area = 1000, max_area = 3000;
    int contrast = 60;
    double fraction = 0.5;
  } gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Write a synthetic defect dataset (train and test categories)");
  gen_cmd->set_config("--config");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--train", gen.train, "Images in the training category")->capture_default_str();
  gen_cmd->add_option("--test", gen.test, "Images in the test category")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--texture", gen.texture, "stripes, noise or cells")->capture_default_str();
  gen_cmd->add_option("--defects", gen.defects, "Defect families")->delimiter(',')->capture_default_str();
  gen_cmd->add_option("--min-area", gen.min_area)->capture_default_str();
  gen_cmd->add_option("--max-area", gen.max_area)->capture_default_str();
  gen_cmd->add_option("--contrast", gen.contrast, "Defect colour shift (1..60)")->capture_default_str();
  gen_cmd->add_option("--anomaly-fraction", gen.fraction)->capture_default_str();
  gen_cmd->callback([&] {
    action = [&] {
      data::SyntheticSpec spec;
      spec.seed = gen.seed;
      spec.image_size = gen.size;
      spec.texture = data::parse_texture(gen.texture);
      spec.defects.clear();
      for (const auto& d : gen.defects) spec.defects.push_back(data::parse_defect(d));
      spec.min_area = gen.min_area;
      spec.max_area = gen.max_area;
      spec.contrast = gen.contrast;
      spec.anomaly_fraction = gen.fraction;
      spec.validate();
      const fs::path root(gen.out);
      spec.count = gen.train;
      spec.category = "train";
      const auto train = data::generate_synthetic(spec, root / "train");
      spec.first_index = gen.train;
      spec.count = gen.test;
      spec.category = "test";
      const auto test = data::generate_synthetic(spec, root / "test");
      write_run_config(*gen_cmd, root);
      out << "train: " << train.samples.size() << " images (" << train.abnormal_count() << " abnormal) in "
          << (root / "train").string() << '\n'
          << "test: " << test.samples.size() << " images (" << test.abnormal_count() << " abnormal) in "
          << (root / "test").string() << '\n';
    };
  });

  // init-model
  backbone::ModelConfig model_cfg;
  struct {
    std::string out;
    std::uint64_t seed = 0;
  } init;
  auto* init_cmd = app.add_subcommand("init-model", "Write seeded toy encoder weights");
  init_cmd->set_config("--config");
  init_cmd->add_option("--out", init.out, "Output directory")->required();
  init_cmd->add_option("--seed", init.seed)->capture_default_str();
  init_cmd->add_option("--image-size", model_cfg.image_size)->capture_default_str();
  init_cmd->add_option("--patch-size", model_cfg.patch_size)->capture_default_str();
  init_cmd->add_option("--width", model_cfg.width)->capture_default_str();
  init_cmd->add_option("--heads", model_cfg.heads)->capture_default_str();
  init_cmd->add_option("--layers", model_cfg.layers)->capture_default_str();
  init_cmd->add_option("--stages", model_cfg.stages)->capture_default_str();
  init_cmd->add_option("--layers-per-stage", model_cfg.layers_per_stage)->capture_default_str();
  init_cmd->add_option("--embed-dim", model_cfg.embed_dim)->capture_default_str();
  init_cmd->callback([&] {
    action = [&] {
      model_cfg.validate();
      const fs::path dir(init.out);
      fs::create_directories(dir);
      backbone::save_weights(backbone::init_weights(model_cfg, init.seed), dir / "model.ntc");
      write_run_config(*init_cmd, dir);
      out << "wrote " << (dir / "model.ntc").string() << '\n';
    };
  });

  // embed-prompts
  struct {
    std::string out, object, preset = "industrial", preset_file, table;
    std::size_t dim = 32;
    std::uint64_t seed = 0;
  } embed;
  auto* embed_cmd = app.add_subcommand("embed-prompts", "Compose prompts and embed them");
  embed_cmd->set_config("--config");
  embed_cmd->add_option("--out", embed.out, "Output directory")->required();
  embed_cmd->add_option("--object", embed.object, "Object name substituted for [o]")->required();
  embed_cmd->add_option("--preset", embed.preset, "Built-in prompt preset")->capture_default_str();
  embed_cmd->add_option("--preset-file", embed.preset_file, "Prompt preset file (overrides --preset)");
  embed_cmd->add_option("--table", embed.table, "Imported embedding table; default is the synthetic encoder");
  embed_cmd->add_option("--dim", embed.dim, "Synthetic embedding dimension")->capture_default_str();
  embed_cmd->add_option("--seed", embed.seed, "Synthetic encoder seed")->capture_default_str();
  embed_cmd->callback([&] {
    action = [&] {
      const prompts::PromptTemplateSet set =
          embed.preset_file.empty() ? prompts::builtin_preset(embed.preset) : prompts::load_preset_file(embed.preset_file);
      const prompts::TextEncoder encoder =
          embed.table.empty() ? prompts::TextEncoder(prompts::SyntheticTextEncoder(embed.dim, embed.seed, set.templates))
                              : prompts::TextEncoder(prompts::EmbeddingTable::load(embed.table));
      const auto dist = prompts::sample_distribution(set, embed.object, encoder);
      const auto composed = prompts::compose_prompts(set, embed.object);
      const fs::path dir(embed.out);
      fs::create_directories(dir);
      backbone::save_container(prompts::to_container(dist), dir / "prompts.ntc");
      std::string listing = "[normal]\n";
      for (const auto& p : composed.normal) listing += p + '\n';
      listing += "[abnormal]\n";
      for (const auto& p : composed.abnormal) listing += p + '\n';
      write_text(dir / "prompts.txt", listing);
      write_run_config(*embed_cmd, dir);
      out << "embedded " << composed.normal.size() << " normal and " << composed.abnormal.size() << " abnormal prompts ("
          << (dist.source == prompts::FeatureSource::Imported ? "imported" : "synthetic") << ")\n";
    };
  });

  // select
  rvs::SelectorConfig selector;
  struct {
    std::string out, prompts, method = "dbscan";
  } sel;
  auto* select_cmd = app.add_subcommand("select", "Select the representative normal/abnormal vectors");
  select_cmd->set_config("--config");
  select_cmd->add_option("--prompts", sel.prompts, "Prompt features (from `embed-prompts`)")->required();
  select_cmd->add_option("--out", sel.out, "Output directory")->required();
  select_cmd->add_option("--method", sel.method, "mean, pca, kde, mean_shift or dbscan")->capture_default_str();
  select_cmd->add_option("--kde-bandwidth", selector.kde_bandwidth)->capture_default_str();
  select_cmd->add_option("--mean-shift-bandwidth", selector.mean_shift_bandwidth)->capture_default_str();
  select_cmd->add_option("--dbscan-eps", selector.dbscan_eps)->capture_default_str();
  select_cmd->add_option("--dbscan-min-samples", selector.dbscan_min_samples)->capture_default_str();
  select_cmd->callback([&] {
    action = [&] {
      selector.method = rvs::parse_selector_method(sel.method);
      selector.validate();
      const auto dist = prompts::distribution_from_container(backbone::load_container(sel.prompts));
      const auto pair = rvs::select_pair(dist.normal_features, dist.abnormal_features, selector);
      const fs::path dir(sel.out);
      fs::create_directories(dir);
      backbone::save_container(pair_container(pair), dir / "pair.ntc");
      const std::string prov = "method = " + rvs::to_string(selector.method) + "\n" +
                               provenance_text("normal", pair.normal_provenance) +
                               provenance_text("abnormal", pair.abnormal_provenance);
      write_text(dir / "provenance.txt", prov);
      write_run_config(*select_cmd, dir);
      out << prov;
    };
  });

  // detect / evaluate share their options.
  DetectOptions det;
  std::string det_data, det_out;
  auto* detect_cmd = app.add_subcommand("detect", "Anomaly maps, scores and report for a dataset");
  detect_cmd->set_config("--config");
  det.add_to(detect_cmd);
  detect_cmd->add_option("--data", det_data, "Dataset category root (MVTec-style layout)")->required();
  detect_cmd->add_option("--out", det_out, "Output directory")->required();

  DetectOptions ev;
  std::string ev_data, ev_out;
  auto* eval_cmd = app.add_subcommand("evaluate", "Metrics report for a dataset");
  eval_cmd->set_config("--config");
  ev.add_to(eval_cmd);
  eval_cmd->add_option("--data", ev_data, "Dataset category root (MVTec-style layout)")->required();
  eval_cmd->add_option("--out", ev_out, "Output directory")->required();

  detect_cmd->callback([&] {
    action = [&] {
      const Loaded l = load_model(det);
      const auto index = data::scan_dataset(det_data);
      if (index.samples.empty()) throw ValidationError("dataset '" + det_data + "' has no test images");
      const auto analysis = pipeline::analyze_dataset(index, l.weights, l.pair, det.analysis(), det.jobs);
      const auto detection = pipeline::detect(analysis, det.mode(), det.stages, det.smooth);
      const fs::path dir(det_out);
      std::string scores = "# image\tlabel\ts_abnormal\tscore\n";
      for (std::size_t i = 0; i < index.samples.size(); ++i) {
        const auto& sample = index.samples[i];
        const fs::path rel = fs::path(sample.defect_type) / sample.image.filename();
        data::render_heatmap(detection.pixel_maps[i], data::read_image(sample.image),
                             dir / "heatmaps" / fs::path(rel).replace_extension(".png"));
        scores += rel.string() + '\t' + std::to_string(analysis.labels[i]) + '\t' + fixed6(detection.s_abnormal[i]) +
                  '\t' + fixed6(detection.scores[i]) + '\n';
      }
      write_text(dir / "scores.txt", scores);
      std::string report = "mode = " + pipeline::to_string(det.mode()) + "\n";
      const bool both = index.abnormal_count() > 0 && index.abnormal_count() < index.samples.size();
      report += both ? pipeline::evaluate(analysis, detection).to_text()
                     : "images = " + std::to_string(index.samples.size()) + "\n";
      write_text(dir / "report.txt", report);
      write_run_config(*detect_cmd, dir);
      out << report;
    };
  });

  eval_cmd->callback([&] {
    action = [&] {
      const Loaded l = load_model(ev);
      const auto index = data::scan_dataset(ev_data);
      const auto analysis = pipeline::analyze_dataset(index, l.weights, l.pair, ev.analysis(), ev.jobs);
      const auto detection = pipeline::detect(analysis, ev.mode(), ev.stages, ev.smooth);
      const std::string report = "mode = " + pipeline::to_string(ev.mode()) + "\n" +
                                 pipeline::evaluate(analysis, detection).to_text();
      const fs::path dir(ev_out);
      write_text(dir / "report.txt", report);
      write_run_config(*eval_cmd, dir);
      out << report;
    };
  });

  // train
  sdp::TrainConfig train_cfg;
  struct {
    std::string model, pair, data, out, init, val_data;
    bool select_by_auroc = false;
    std::size_t jobs = 1;
  } tr;
  auto* train_cmd = app.add_subcommand("train", "Fit the per-stage projections (SDP+)");
  train_cmd->set_config("--config");
  train_cmd->add_option("--model", tr.model, "Encoder weights container")->required();
  train_cmd->add_option("--pair", tr.pair, "Representative pair container")->required();
  train_cmd->add_option("--data", tr.data, "Training category root (its test split and masks are used)")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--init", tr.init, "Start from these projections instead of a seeded init");
  train_cmd->add_option("--lr", train_cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--epochs", train_cfg.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", train_cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--seed", train_cfg.seed)->capture_default_str();
  train_cmd->add_option("--ft-temperature", train_cfg.temperature)->capture_default_str();
  train_cmd->add_flag("--select-by-auroc", tr.select_by_auroc,
                      "Keep the epoch with the highest image AUROC on --val-data");
  train_cmd->add_option("--val-data", tr.val_data, "Validation category root for --select-by-auroc");
  train_cmd->add_option("--jobs", tr.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  train_cmd->callback([&] {
    action = [&] {
      if (tr.select_by_auroc && tr.val_data.empty()) throw ValidationError("--select-by-auroc needs --val-data");
      const auto weights = backbone::load_weights(tr.model);
      const auto pair = load_pair(tr.pair);
      const auto index = data::scan_dataset(tr.data);
      const auto samples = pipeline::training_samples(index, weights, tr.jobs);
      sdp::Projections initial =
          tr.init.empty() ? sdp::init_projections(weights.config, train_cfg.seed) : sdp::load_projections(tr.init);
      const auto result = sdp::train(samples, std::move(initial), pair, train_cfg);
      const fs::path dir(tr.out);
      fs::create_directories(dir);
      std::string history = "# epoch\tmean_loss\n";
      for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        history += std::to_string(e + 1) + '\t' + fixed6(result.epoch_loss[e]) + '\n';
      }
      write_text(dir / "loss.txt", history);
      sdp::Projections chosen = result.projections;
      if (tr.select_by_auroc) {
        const auto val = data::scan_dataset(tr.val_data);
        std::string selection = "# epoch\timage_auroc\n";
        double best = -1.0;
        for (std::size_t e = 0; e < result.snapshots.size(); ++e) {
          pipeline::AnalysisOptions o;
          o.projections = result.snapshots[e];
          o.ft_temperature = train_cfg.temperature;
          const auto analysis = pipeline::analyze_dataset(val, weights, pair, o, tr.jobs);
          const auto report = pipeline::evaluate(analysis, pipeline::detect(analysis, pipeline::Mode::SdpPlus));
          const double auroc = report.image ? report.image->auroc : 0.0;
          selection += std::to_string(e + 1) + '\t' + fixed6(auroc) + '\n';
          if (auroc > best) {
            best = auroc;
            chosen = result.snapshots[e];
          }
        }
        write_text(dir / "selection.txt", selection);
      }
      sdp::save_projections(chosen, dir / "projections.ntc");
      write_run_config(*train_cmd, dir);
      out << history;
    };
  });

  // render
  DetectOptions rd;
  std::string rd_image, rd_out;
  double alpha = 0.5;
  auto* render_cmd = app.add_subcommand("render", "Heatmap overlay for a single image");
  render_cmd->set_config("--config");
  rd.add_to(render_cmd);
  render_cmd->add_option("--image", rd_image, "Input image (PNG or PGM/PPM)")->required();
  render_cmd->add_option("--out", rd_out, "Output directory")->required();
  render_cmd->add_option("--alpha", alpha, "Overlay opacity")->capture_default_str();
  render_cmd->callback([&] {
    action = [&] {
      const Loaded l = load_model(rd);
      const Image image = data::read_image(rd_image);
      const auto analysis = pipeline::analyze(image, l.weights, l.pair, rd.analysis());
      numerics::Tensor pixel = sdp::upsample(pipeline::mode_grid(analysis, rd.mode(), rd.stages), image.height, image.width);
      if (rd.smooth > 0.0) pixel = sdp::gaussian_smooth(pixel, rd.smooth);
      const fs::path dir(rd_out);
      const fs::path target = dir / (fs::path(rd_image).stem().string() + "_heatmap.png");
      data::render_heatmap(pixel, image, target, alpha);
      write_run_config(*render_cmd, dir);
      out << "s_abnormal = " << fixed6(analysis.s.abnormal()) << '\n' << "wrote " << target.string() << '\n';
    };
  });

  try {
    const auto expanded = expand_config(args);
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kOk;
    err << app.help();
    return kValidation;
  }

  try {
    if (action) action();
    return kOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace clipad::cli
