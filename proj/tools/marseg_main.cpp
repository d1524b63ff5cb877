// SPDX-License-Identifier: Apache-2.0
//
// marseg command line: dataset generation, training, evaluation, ablation
// and diagnostic renders. Exit codes: 0 success, 1 usage error, 2 data
// error, 3 runtime error.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "marseg/dataset_io.hpp"
#include "marseg/model.hpp"
#include "marseg/render.hpp"
#include "marseg/synth.hpp"
#include "marseg/train_eval.hpp"

namespace {

using nlohmann::json;

int effective_threads() {
  const char* env = std::getenv("MARSEG_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == nullptr || *end != '\0' || v < 1)
    throw marseg::ConfigError(
        std::string("MARSEG_THREADS must be a positive integer, got '") + env +
        "'");
  // all compute paths are sequential; the cap can only lower the count
  return static_cast<int>(std::min(v, 1L));
}

struct BevSize {
  int height = 160;
  int width = 160;
};

BevSize parse_bev_size(const std::string& text) {
  BevSize s;
  char extra = '\0';
  if (std::sscanf(text.c_str(), "%dx%d%c", &s.height, &s.width, &extra) != 2 ||
      s.height < 1 || s.width < 1)
    throw marseg::ConfigError("--bev-size expects HxW, got '" + text + "'");
  return s;
}

void write_run_info(const std::string& out_dir, const json& info) {
  std::filesystem::create_directories(out_dir);
  marseg::bytes::write_file(out_dir + "/run_info.json", info.dump(2) + "\n");
}

uint64_t config_hash(const marseg::mars::MarsConfig& cfg,
                     const marseg::train::TrainConfig& tcfg) {
  const json j = {{"model", cfg},
                  {"epochs", tcfg.epochs},
                  {"lr", tcfg.lr},
                  {"wc", tcfg.wc},
                  {"wm", tcfg.wm},
                  {"seed", tcfg.seed}};
  return marseg::fnv1a64(j.dump());
}

json param_report_json(const marseg::mars::MarsModel::ParamReport& r) {
  return {{"backbone", r.backbone},
          {"cffe", r.cffe},
          {"bev_branch", r.bev_branch},
          {"heads", r.heads},
          {"module_total", r.module_total()},
          {"total", r.total()},
          {"module_fraction", r.module_fraction()}};
}

struct CommonOpts {
  std::string dataset;
  std::string out;
  uint64_t seed = 0;
  int frames = 3;
  std::string bev_size = "160x160";
  double cell = 0.5;
  int epochs = 8;
  double lr = 3e-3;
  double wc = 1.0;
  double wm = 1.0;
  bool no_cffe = false;
  bool no_bev = false;
  bool no_mafl = false;
  std::string checkpoint;
};

marseg::mars::MarsConfig make_config(const CommonOpts& o, int num_classes) {
  marseg::mars::MarsConfig cfg;
  cfg.k = o.frames;
  cfg.num_classes = num_classes;
  const BevSize size = parse_bev_size(o.bev_size);
  cfg.bev_cfg =
      marseg::bev::BevConfig::centered(size.height, size.width, o.cell);
  cfg.use_cffe = !o.no_cffe;
  cfg.use_bev = !o.no_bev;
  cfg.use_mafl = !o.no_mafl && cfg.use_bev;
  cfg.validate();
  return cfg;
}

int run_gen(const CommonOpts& o, int scenes, int points, double extent,
            double noise) {
  marseg::synth::SceneParams params;
  params.extent = extent;
  params.k = o.frames;
  params.points_per_frame = points;
  params.noise_sigma = noise;
  const auto tax = marseg::synth::default_taxonomy();
  marseg::io::write_taxonomy_file(o.out, tax);
  for (int i = 0; i < scenes; ++i) {
    const auto spec =
        marseg::synth::random_scene(params, marseg::mix_seed(o.seed, i));
    const auto seq = marseg::synth::generate_sequence(
        spec, marseg::mix_seed(o.seed, 0x100000u + i));
    marseg::io::write_sequence(seq.frames, seq.poses, tax,
                               o.out + "/seq_" + std::to_string(i));
  }
  const uint64_t dhash = marseg::train::dataset_hash(o.out);
  write_run_info(o.out, {{"command", "gen"},
                         {"seed", o.seed},
                         {"scenes", scenes},
                         {"frames", o.frames},
                         {"points", points},
                         {"extent", extent},
                         {"noise", noise},
                         {"taxonomy_hash", marseg::hash_hex(tax.hash())},
                         {"dataset_hash", marseg::hash_hex(dhash)},
                         {"threads", effective_threads()}});
  std::cout << "generated " << scenes << " sequences at " << o.out
            << " dataset_hash=" << marseg::hash_hex(dhash) << "\n";
  return 0;
}

int run_train(const CommonOpts& o) {
  const auto tax = marseg::io::read_taxonomy_file(o.dataset);
  const auto cfg = make_config(o, tax.size());
  marseg::train::TrainConfig tcfg;
  tcfg.epochs = o.epochs;
  tcfg.lr = o.lr;
  tcfg.seed = o.seed;
  tcfg.wc = o.wc;
  tcfg.wm = o.wm;
  const auto set = marseg::train::load_samples(o.dataset, cfg);
  auto result = marseg::train::train_on(set, cfg, tcfg);
  std::filesystem::create_directories(o.out);
  marseg::mars::save_model(result.model, o.out + "/model.ckpt");
  marseg::bytes::write_file(o.out + "/train_log.csv",
                            marseg::train::format_train_log(result.log));
  const auto report = result.model.param_report();
  write_run_info(
      o.out,
      {{"command", "train"},
       {"seed", o.seed},
       {"config_hash", marseg::hash_hex(config_hash(cfg, tcfg))},
       {"dataset_hash", marseg::hash_hex(set.dataset_hash)},
       {"epochs", o.epochs},
       {"lr", o.lr},
       {"wc", o.wc},
       {"wm", o.wm},
       {"param_report", param_report_json(report)},
       {"threads", effective_threads()}});
  std::cout << "trained " << o.epochs << " epochs on " << set.samples.size()
            << " samples\n"
            << "params: backbone=" << report.backbone
            << " module=" << report.module_total() << " (cffe=" << report.cffe
            << " bev=" << report.bev_branch << " heads=" << report.heads
            << ") fraction=" << report.module_fraction() << "\n";
  if (!result.log.empty())
    std::cout << "final loss " << result.log.back().loss << "\n";
  return 0;
}

int run_eval(const CommonOpts& o) {
  const auto tax = marseg::io::read_taxonomy_file(o.dataset);
  const auto model = marseg::mars::load_model(o.checkpoint, tax);
  const auto set = marseg::train::load_samples(o.dataset, model.config());
  const auto report = marseg::train::evaluate_on(model, set);
  std::filesystem::create_directories(o.out);
  marseg::bytes::write_file(o.out + "/eval_report.csv", report.to_csv());
  write_run_info(
      o.out, {{"command", "eval"},
              {"dataset_hash", marseg::hash_hex(set.dataset_hash)},
              {"checkpoint_hash",
               marseg::hash_hex(marseg::nn::file_hash(o.checkpoint))},
              {"miou", report.miou},
              {"moving_miou", report.moving_miou},
              {"static_miou", report.static_miou},
              {"threads", effective_threads()}});
  std::cout << "miou=" << report.miou << " moving_miou=" << report.moving_miou
            << " static_miou=" << report.static_miou
            << " points=" << report.evaluated_points
            << " moving_violations=" << report.moving_violations << "\n";
  return 0;
}

int run_ablate(const CommonOpts& o, const std::string& eval_dataset,
               int seed_count) {
  if (seed_count < 1) throw marseg::ConfigError("--seeds must be >= 1");
  const auto tax = marseg::io::read_taxonomy_file(o.dataset);
  const auto cfg = make_config(o, tax.size());
  marseg::train::TrainConfig tcfg;
  tcfg.epochs = o.epochs;
  tcfg.lr = o.lr;
  tcfg.seed = o.seed;
  tcfg.wc = o.wc;
  tcfg.wm = o.wm;
  std::vector<uint64_t> seeds;
  for (int i = 0; i < seed_count; ++i) seeds.push_back(o.seed + i);
  const std::string eval_root = eval_dataset.empty() ? o.dataset : eval_dataset;
  const auto result =
      marseg::train::ablation_suite(o.dataset, eval_root, cfg, tcfg, seeds);
  std::filesystem::create_directories(o.out);
  const std::string csv = marseg::train::ablation_csv(result);
  marseg::bytes::write_file(o.out + "/ablation.csv", csv);
  write_run_info(
      o.out, {{"command", "ablate"},
              {"seed", o.seed},
              {"seeds", seeds},
              {"config_hash", marseg::hash_hex(config_hash(cfg, tcfg))},
              {"train_hash", marseg::hash_hex(result.train_hash)},
              {"eval_hash", marseg::hash_hex(result.eval_hash)},
              {"threads", effective_threads()}});
  std::cout << csv;
  return 0;
}

struct LoadedSample {
  marseg::mars::MarsModel model;
  marseg::mars::PreparedSample sample;
};

LoadedSample load_for_render(const CommonOpts& o, const std::string& sequence,
                             int target) {
  const auto tax = marseg::io::read_taxonomy_file(o.dataset);
  auto model = marseg::mars::load_model(o.checkpoint, tax);
  std::string seq = sequence;
  if (seq.empty()) {
    const auto names = marseg::io::list_sequences(o.dataset);
    seq = names.front();
  }
  const int k = model.config().k;
  if (target < 0) target = k - 1;
  auto [clouds, poses] =
      marseg::io::read_sequence(o.dataset + "/" + seq, k, target);
  auto sample = marseg::mars::prepare_sample(clouds, poses, model.config(), tax);
  return {std::move(model), std::move(sample)};
}

int run_render_bev(const CommonOpts& o, const std::string& sequence,
                   int target) {
  auto loaded = load_for_render(o, sequence, target);
  const auto& cfg = loaded.model.config();
  if (cfg.k < 2)
    throw marseg::ConfigError("single-frame samples have no differences");
  if (!cfg.use_bev || !cfg.use_mafl)
    throw marseg::ConfigError(
        "checkpoint was built without the difference stage");
  const auto fwd = loaded.model.forward(loaded.sample);
  const auto d = marseg::render::discrepancy_map(fwd.diff_maps, o.seed);
  marseg::render::write_pgm(o.out, d.image);
  const double span = d.max_value - d.min_value;
  std::string sidecar = "min " + marseg::train::fmt_double(d.min_value) +
                        "\nmax " + marseg::train::fmt_double(d.max_value) +
                        "\nscale " +
                        marseg::train::fmt_double(span > 0 ? 255.0 / span : 0.0) +
                        "\nchannels";
  for (int c : d.channels) sidecar += ' ' + std::to_string(c);
  sidecar += '\n';
  marseg::bytes::write_file(o.out + ".txt", sidecar);
  std::cout << "wrote " << o.out << " (" << d.image.width << "x"
            << d.image.height << ")\n";
  return 0;
}

int run_render_errors(const CommonOpts& o, const std::string& sequence,
                      int target) {
  auto loaded = load_for_render(o, sequence, target);
  const auto fwd = loaded.model.forward(loaded.sample);
  const auto tax = marseg::io::read_taxonomy_file(o.dataset);
  const auto preds =
      marseg::mars::gated_inference(fwd.category_logits, fwd.motion_logits, tax);
  const auto raster = marseg::render::error_raster(
      loaded.sample, preds, loaded.model.config().bev_cfg);
  marseg::render::write_ppm(o.out, raster.image);
  const std::string sidecar =
      "correct_points " + std::to_string(raster.correct_points) +
      "\nwrong_points " + std::to_string(raster.wrong_points) +
      "\nred_pixels " + std::to_string(raster.red_pixels) + "\ngray_pixels " +
      std::to_string(raster.gray_pixels) + "\noff_grid_points " +
      std::to_string(raster.off_grid_points) + "\n";
  marseg::bytes::write_file(o.out + ".txt", sidecar);
  std::cout << "wrote " << o.out << " red_pixels=" << raster.red_pixels
            << " gray_pixels=" << raster.gray_pixels << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"motion-aware multi-scan point cloud segmentation"};
  app.require_subcommand(1);

  CommonOpts o;
  int scenes = 50;
  int points = 150;
  double extent = 10.0;
  double noise = 0.01;
  std::string eval_dataset;
  int seed_count = 3;
  std::string sequence;
  int target = -1;

  auto add_model_flags = [&](CLI::App* cmd) {
    cmd->add_option("--frames", o.frames, "frames per sample (k)")
        ->default_val(3);
    cmd->add_option("--bev-size", o.bev_size, "BEV grid as HxW")
        ->default_val("160x160");
    cmd->add_option("--cell", o.cell, "BEV cell size in meters")
        ->default_val(0.5);
  };
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--epochs", o.epochs, "training epochs")->default_val(8);
    cmd->add_option("--lr", o.lr, "learning rate")->default_val(3e-3);
    cmd->add_option("--wc", o.wc, "category loss weight")->default_val(1.0);
    cmd->add_option("--wm", o.wm, "motion loss weight")->default_val(1.0);
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--out", o.out, "dataset directory")->required();
  gen->add_option("--seed", o.seed, "generator seed")->default_val(0);
  gen->add_option("--frames", o.frames, "frames per sequence (k)")
      ->default_val(3);
  gen->add_option("--scenes", scenes, "number of scenes")->default_val(50);
  gen->add_option("--points", points, "points per frame")->default_val(150);
  gen->add_option("--extent", extent, "scene half-width in meters")
      ->default_val(10.0);
  gen->add_option("--noise", noise, "coordinate noise sigma in meters")
      ->default_val(0.01);

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--dataset", o.dataset, "dataset directory")->required();
  tr->add_option("--out", o.out, "output directory")->required();
  tr->add_option("--seed", o.seed, "training seed")->default_val(0);
  add_model_flags(tr);
  add_train_flags(tr);
  tr->add_flag("--no-cffe", o.no_cffe, "disable temporal embeddings");
  tr->add_flag("--no-bev", o.no_bev, "disable the BEV branch");
  tr->add_flag("--no-mafl", o.no_mafl, "disable BEV differencing");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--dataset", o.dataset, "dataset directory")->required();
  ev->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  ev->add_option("--out", o.out, "output directory")->required();

  auto* ab = app.add_subcommand("ablate", "run the ablation ladder");
  ab->add_option("--dataset", o.dataset, "training dataset")->required();
  ab->add_option("--eval-dataset", eval_dataset,
                 "held-out dataset (defaults to --dataset)");
  ab->add_option("--out", o.out, "output directory")->required();
  ab->add_option("--seed", o.seed, "first seed")->default_val(0);
  ab->add_option("--seeds", seed_count, "number of seeds")->default_val(3);
  add_model_flags(ab);
  add_train_flags(ab);

  auto* rb = app.add_subcommand("render-bev",
                                "render the mean absolute difference map");
  rb->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  rb->add_option("--dataset", o.dataset, "dataset directory")->required();
  rb->add_option("--sequence", sequence, "sequence name, default first");
  rb->add_option("--target", target, "target frame index, default k-1");
  rb->add_option("--seed", o.seed, "channel sampling seed")->default_val(0);
  rb->add_option("--out", o.out, "output .pgm path")->required();

  auto* re = app.add_subcommand("render-errors",
                                "render an evaluation error raster");
  re->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  re->add_option("--dataset", o.dataset, "dataset directory")->required();
  re->add_option("--sequence", sequence, "sequence name, default first");
  re->add_option("--target", target, "target frame index, default k-1");
  re->add_option("--out", o.out, "output .ppm path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    effective_threads();
    if (gen->parsed()) return run_gen(o, scenes, points, extent, noise);
    if (tr->parsed()) return run_train(o);
    if (ev->parsed()) return run_eval(o);
    if (ab->parsed()) return run_ablate(o, eval_dataset, seed_count);
    if (rb->parsed()) return run_render_bev(o, sequence, target);
    if (re->parsed()) return run_render_errors(o, sequence, target);
  } catch (const marseg::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const marseg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const marseg::InvalidLabelError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const marseg::InvalidPoseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 3;
}
