// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "marseg/synth.hpp"
#include "marseg/train_eval.hpp"

using namespace marseg;
using mars::MarsConfig;
using train::TrainConfig;

namespace {

namespace fs = std::filesystem;

MarsConfig micro_config() {
  MarsConfig cfg;
  cfg.k = 2;
  cfg.backbone_hidden = 24;
  cfg.head_hidden = 12;
  cfg.bev_cfg = bev::BevConfig::centered(16, 16, 0.5);
  return cfg;
}

struct TempDataset {
  fs::path path;
  TempDataset(const std::string& name, int scenes, int k, int points,
              uint64_t seed)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    const auto tax = synth::default_taxonomy();
    io::write_taxonomy_file(path.string(), tax);
    synth::SceneParams params;
    params.extent = 3.5;
    params.k = k;
    params.points_per_frame = points;
    params.sensor_step = 0.15;
    for (int s = 0; s < scenes; ++s) {
      const auto spec = synth::random_scene(params, mix_seed(seed, s));
      const auto seq =
          synth::generate_sequence(spec, mix_seed(seed, 1000 + s));
      io::write_sequence(seq.frames, seq.poses, tax,
                         path.string() + "/seq_" + std::to_string(s));
    }
  }
  ~TempDataset() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("combined loss is the weighted sum of both terms") {
  const auto tax = synth::default_taxonomy();
  auto sc = nn::constant({3, 7}, std::vector<double>{
      1, 0, 0, 0, 0, 0, 0,
      0, 0, 0, 2, 0, 0, 0,
      0, 0, 0, 0, 0, 0, 3});
  auto sm = nn::constant({3, 1}, {1.5, -0.5, 4.0});
  // codes: moving car, ground, pole; motion masked to the movable car
  const std::vector<uint16_t> codes = {7, 3, 6};
  const auto parts = train::combined_loss(sc, sm, codes, tax, 2.0, 0.5);

  auto ce_row = [&](const std::vector<double>& row, int label) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double lse = 0;
    for (double v : row) lse += std::exp(v - mx);
    return mx + std::log(lse) - row[label];
  };
  const double ce = (ce_row({1, 0, 0, 0, 0, 0, 0}, 0) +
                     ce_row({0, 0, 0, 2, 0, 0, 0}, 3) +
                     ce_row({0, 0, 0, 0, 0, 0, 3}, 6)) /
                    3.0;
  const double bce = -std::log(1.0 / (1.0 + std::exp(-1.5)));  // one masked row
  CHECK(std::abs(parts.category->value[0] - ce) < 1e-12);
  CHECK(std::abs(parts.motion->value[0] - bce) < 1e-12);
  CHECK(std::abs(parts.total->value[0] - (2.0 * ce + 0.5 * bce)) < 1e-12);
}

TEST_CASE("motion loss sees only movable ground truth") {
  const auto tax = synth::default_taxonomy();
  auto sc = nn::constant({2, 7}, std::vector<double>(14, 0.0));
  auto sm = nn::make_tensor({2, 1}, {3.0, -3.0}, true);
  // all-static ground truth: the motion term must be exactly zero
  const auto parts =
      train::combined_loss(sc, sm, {3, 4}, tax, 1.0, 1.0);
  CHECK(parts.motion->value[0] == 0.0);
  nn::backward(parts.total);
  CHECK(sm->grad.empty());  // no gradient path through the motion head
}

TEST_CASE("dataset hash is stable and sensitive") {
  TempDataset data("marseg_te_hash", 2, 2, 30, 5);
  const uint64_t h1 = train::dataset_hash(data.str());
  const uint64_t h2 = train::dataset_hash(data.str());
  CHECK(h1 == h2);
  // flip one payload byte
  const auto target = data.path / "seq_0" / "frame_0.bin";
  auto buf = bytes::read_file(target.string());
  buf[buf.size() - 1] = static_cast<char>(buf[buf.size() - 1] ^ 0x01);
  bytes::write_file(target.string(), buf);
  CHECK(train::dataset_hash(data.str()) != h1);
}

TEST_CASE("load_samples builds every admissible window") {
  TempDataset data("marseg_te_windows", 2, 4, 30, 6);
  MarsConfig cfg = micro_config();
  cfg.k = 3;
  const auto set = train::load_samples(data.str(), cfg);
  // 4 frames, k=3: targets 2 and 3 in each of the 2 sequences
  CHECK(set.samples.size() == 4);
  for (const auto& s : set.samples) {
    CHECK(s.k == 3);
    CHECK(s.labeled());
    CHECK(s.bev_inputs.size() == 3);
  }
  cfg.k = 5;
  CHECK_THROWS_AS(train::load_samples(data.str(), cfg), DataError);
}

TEST_CASE("training runs deterministically and decreases the loss") {
  TempDataset data("marseg_te_train", 3, 2, 40, 7);
  const MarsConfig cfg = micro_config();
  TrainConfig tcfg;
  tcfg.epochs = 8;
  tcfg.lr = 3e-3;
  tcfg.seed = 1;
  const auto set = train::load_samples(data.str(), cfg);
  auto a = train::train_on(set, cfg, tcfg);
  REQUIRE(a.log.size() == 8);
  CHECK(a.log.front().epoch == 1);
  CHECK(a.log.back().loss < a.log.front().loss);
  for (const auto& e : a.log) {
    CHECK(std::isfinite(e.loss));
    CHECK(std::abs(e.loss - (e.loss_c + e.loss_m)) < 1e-12);  // unit weights
  }

  auto b = train::train_on(set, cfg, tcfg);
  for (size_t i = 0; i < a.model.params().count(); ++i)
    CHECK(a.model.params().vars[i]->value == b.model.params().vars[i]->value);
  CHECK(a.log.back().loss == b.log.back().loss);

  TrainConfig other = tcfg;
  other.seed = 2;
  auto c = train::train_on(set, cfg, other);
  CHECK(c.log.back().loss != a.log.back().loss);
}

TEST_CASE("zero epochs returns the untouched initialization") {
  TempDataset data("marseg_te_zero", 1, 2, 30, 8);
  const MarsConfig cfg = micro_config();
  TrainConfig tcfg;
  tcfg.epochs = 0;
  const auto set = train::load_samples(data.str(), cfg);
  const auto out = train::train_on(set, cfg, tcfg);
  CHECK(out.log.empty());
  const mars::MarsModel fresh(cfg, set.taxonomy, tcfg.seed);
  for (size_t i = 0; i < fresh.params().count(); ++i)
    CHECK(out.model.params().vars[i]->value == fresh.params().vars[i]->value);
}

TEST_CASE("train log format") {
  std::vector<train::EpochStats> log = {{1, 0.5, 0.375, 0.125},
                                        {2, 0.25, 0.1875, 0.0625}};
  const std::string text = train::format_train_log(log);
  CHECK(text == "1,0.5,0.375,0.125\n2,0.25,0.1875,0.0625\n");
}

TEST_CASE("train config validation") {
  TrainConfig tcfg;
  tcfg.epochs = -1;
  CHECK_THROWS_AS(tcfg.validate(), ConfigError);
  tcfg = {};
  tcfg.lr = 0.0;
  CHECK_THROWS_AS(tcfg.validate(), ConfigError);
  tcfg = {};
  tcfg.wm = -0.5;
  CHECK_THROWS_AS(tcfg.validate(), ConfigError);
}

TEST_CASE("code index maps composite codes densely") {
  const auto tax = synth::default_taxonomy();
  train::CodeIndex idx(tax);
  CHECK(idx.size() == 10);
  for (int c = 0; c < 7; ++c) {
    CHECK(idx.of_code(static_cast<uint16_t>(c)) == c);
    CHECK_FALSE(idx.is_moving(c));
  }
  CHECK(idx.of_code(7) == 7);
  CHECK(idx.of_code(8) == 8);
  CHECK(idx.of_code(9) == 9);
  CHECK(idx.is_moving(9));
  CHECK(idx.name(0) == "car");
  CHECK(idx.name(7) == "car(moving)");
  CHECK(idx.name(9) == "cyclist(moving)");
  CHECK_THROWS_AS(idx.of_code(10), InvalidLabelError);  // ground(moving)
  CHECK_THROWS_AS(idx.of_code(14), InvalidLabelError);
}

TEST_CASE("confusion accumulator matches hand-counted IoU") {
  const auto tax = synth::default_taxonomy();
  train::ConfusionAccumulator acc(tax);
  acc.add({0, 0, 7, 3, 3, 6, 9}, {0, 7, 7, 3, 6, 6, 2});
  const auto r = acc.report();
  CHECK(r.evaluated_points == 7);
  CHECK(r.moving_violations == 0);
  CHECK(r.confusion[0][0] == 1);
  CHECK(r.confusion[0][7] == 1);
  CHECK(r.confusion[9][2] == 1);
  // hand counts: code0 1/(2+1-1), code3 1/2, code6 1/2, code7 1/2,
  // codes 2 and 9 present with zero intersection
  CHECK(r.iou[0] == 0.5);
  CHECK(r.iou[3] == 0.5);
  CHECK(r.iou[6] == 0.5);
  CHECK(r.iou[7] == 0.5);
  CHECK(r.iou[2] == 0.0);
  CHECK(r.iou[9] == 0.0);
  CHECK(r.present == std::vector<uint8_t>{1, 0, 1, 1, 0, 0, 1, 1, 0, 1});
  CHECK(std::abs(r.miou - 2.0 / 6.0) < 1e-15);
  CHECK(std::abs(r.moving_miou - 0.25) < 1e-15);
  CHECK(std::abs(r.static_miou - 0.375) < 1e-15);
  CHECK_THROWS_AS(acc.add({0}, {0, 1}), ShapeError);
}

TEST_CASE("perfect prediction gives unit IoU") {
  const auto tax = synth::default_taxonomy();
  train::ConfusionAccumulator acc(tax);
  acc.add({0, 7, 3, 9}, {0, 7, 3, 9});
  const auto r = acc.report();
  CHECK(r.miou == 1.0);
  CHECK(r.moving_miou == 1.0);
  CHECK(r.static_miou == 1.0);
}

TEST_CASE("moving mark on a static class counts as a violation") {
  const auto tax = synth::default_taxonomy();
  train::ConfusionAccumulator acc(tax);
  // code 10 would be ground(moving): invalid, recorded as its static variant
  acc.add({3}, {10});
  const auto r = acc.report();
  CHECK(r.moving_violations == 1);
  CHECK(r.confusion[3][3] == 1);
  CHECK(r.evaluated_points == 1);
}

TEST_CASE("eval report csv carries the summary block") {
  const auto tax = synth::default_taxonomy();
  train::ConfusionAccumulator acc(tax);
  acc.add({0, 3}, {0, 3});
  const std::string csv = acc.report().to_csv();
  CHECK(csv.find("evaluated_points,2") != std::string::npos);
  CHECK(csv.find("miou,1") != std::string::npos);
  CHECK(csv.find("moving_violations,0") != std::string::npos);
  CHECK(csv.find("car(moving)") != std::string::npos);
  CHECK(csv.find("rows = ground truth") != std::string::npos);
}

TEST_CASE("evaluation refuses a mismatched taxonomy") {
  TempDataset data("marseg_te_mismatch", 1, 2, 30, 9);
  const MarsConfig cfg = micro_config();
  const auto set = train::load_samples(data.str(), cfg);
  const auto other =
      core::ClassTaxonomy({{0, "robot", true}, {1, "floor", false}});
  MarsConfig cfg2 = cfg;
  cfg2.num_classes = 2;
  const mars::MarsModel model(cfg2, other, 0);
  CHECK_THROWS_AS(train::evaluate_on(model, set), DataError);
}

TEST_CASE("trained model evaluates cleanly on its training set") {
  TempDataset data("marseg_te_eval", 2, 2, 40, 10);
  const MarsConfig cfg = micro_config();
  TrainConfig tcfg;
  tcfg.epochs = 4;
  const auto set = train::load_samples(data.str(), cfg);
  const auto out = train::train_on(set, cfg, tcfg);
  const auto report = train::evaluate_on(out.model, set);
  CHECK(report.evaluated_points > 0);
  CHECK(report.moving_violations == 0);
  CHECK(report.miou >= 0.0);
  CHECK(report.miou <= 1.0);
}

TEST_CASE("ablation ladder rows are pinned") {
  const auto rows = train::ablation_ladder();
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].name == "baseline");
  CHECK_FALSE(rows[0].use_cffe);
  CHECK_FALSE(rows[0].use_bev);
  CHECK_FALSE(rows[0].use_mafl);
  CHECK(rows[1].name == "+cffe");
  CHECK(rows[1].use_cffe);
  CHECK(rows[2].name == "+bev");
  CHECK(rows[2].use_bev);
  CHECK_FALSE(rows[2].use_mafl);
  CHECK(rows[3].name == "+cffe+bev");
  CHECK(rows[4].name == "full");
  CHECK((rows[4].use_cffe && rows[4].use_bev && rows[4].use_mafl));
}

TEST_CASE("ablation suite runs every row over every seed") {
  TempDataset data("marseg_te_ablate", 2, 2, 30, 11);
  MarsConfig cfg = micro_config();
  TrainConfig tcfg;
  tcfg.epochs = 1;
  const auto result =
      train::ablation_suite(data.str(), data.str(), cfg, tcfg, {0, 1});
  REQUIRE(result.rows.size() == 5);
  for (const auto& row : result.rows) {
    CHECK(row.miou.size() == 2);
    CHECK(row.moving_miou.size() == 2);
    const double mean = (row.miou[0] + row.miou[1]) / 2.0;
    CHECK(std::abs(row.mean_miou - mean) < 1e-15);
  }
  CHECK(result.train_hash == result.eval_hash);
  const std::string csv = train::ablation_csv(result);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line.find("train_hash=") != std::string::npos);
  std::getline(is, line);
  CHECK(line ==
        "config,cffe,bev,mafl,miou_seed0,miou_seed1,mean_miou,"
        "moving_miou_seed0,moving_miou_seed1,mean_moving_miou");
  std::getline(is, line);
  CHECK(line.rfind("baseline,0,0,0,", 0) == 0);
  CHECK_THROWS_AS(train::ablation_suite(data.str(), data.str(), cfg, tcfg, {}),
                  ConfigError);
}
