// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "marseg/core.hpp"
#include "marseg/dataset_io.hpp"
#include "marseg/errors.hpp"
#include "marseg/model.hpp"
#include "marseg/nn.hpp"

namespace marseg::train {

using core::ClassTaxonomy;
using mars::MarsConfig;
using mars::MarsModel;
using mars::PreparedSample;

struct TrainConfig {
  int epochs = 10;
  double lr = 3e-3;
  uint64_t seed = 0;
  double wc = 1.0;  // category loss weight
  double wm = 1.0;  // motion loss weight

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (wc < 0.0 || wm < 0.0) throw ConfigError("loss weights must be >= 0");
  }
};

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ----------------------------------------------------------------- loss

struct LossParts {
  nn::Var total;
  nn::Var category;
  nn::Var motion;
};

// L = wc * CE(category logits, semantic id) + wm * BCE(motion logit, moving
// bit) where the motion term is masked to points whose GT class is movable.
inline LossParts combined_loss(const nn::Var& category_logits,
                               const nn::Var& motion_logits,
                               const std::vector<uint16_t>& gt_codes,
                               const ClassTaxonomy& tax, double wc, double wm) {
  std::vector<int> semantic;
  std::vector<double> moving;
  std::vector<uint8_t> movable;
  semantic.reserve(gt_codes.size());
  moving.reserve(gt_codes.size());
  movable.reserve(gt_codes.size());
  for (uint16_t code : gt_codes) {
    const auto lab = core::decompose_label(code, tax);
    semantic.push_back(lab.semantic_id);
    moving.push_back(lab.moving ? 1.0 : 0.0);
    movable.push_back(tax.movable(lab.semantic_id) ? 1 : 0);
  }
  LossParts out;
  out.category = nn::softmax_cross_entropy(category_logits, semantic);
  out.motion = nn::bce_with_logits(motion_logits, moving, movable);
  out.total = nn::add(nn::scale(out.category, wc), nn::scale(out.motion, wm));
  return out;
}

inline LossParts combined_loss(const nn::Var& category_logits,
                               const nn::Var& motion_logits,
                               const PreparedSample& s, double wc, double wm) {
  if (!s.labeled()) throw DataError("sample has no labels");
  LossParts out;
  out.category = nn::softmax_cross_entropy(category_logits, s.target_semantic);
  out.motion =
      nn::bce_with_logits(motion_logits, s.target_moving, s.target_movable);
  out.total = nn::add(nn::scale(out.category, wc), nn::scale(out.motion, wm));
  return out;
}

// ----------------------------------------------------------------- samples

// All samples of a dataset prepared once; models sharing (k, BEV geometry)
// reuse the set across epochs, seeds and ablation rows.
struct SampleSet {
  std::vector<PreparedSample> samples;
  ClassTaxonomy taxonomy;
  uint64_t dataset_hash = 0;
};

// Hash of every frame, label, pose and taxonomy file in a stable order.
inline uint64_t dataset_hash(const std::string& root) {
  uint64_t h = kFnvOffset;
  const auto chain = [&h](const std::string& text) {
    h = fnv1a64(text.data(), text.size(), h);
  };
  chain(bytes::read_file(root + "/taxonomy.txt"));
  for (const auto& name : io::list_sequences(root)) {
    const std::string seq = root + "/" + name;
    chain(name);
    chain(bytes::read_file(seq + "/poses.txt"));
    const int frames = io::sequence_frame_count(seq);
    for (int i = 0; i < frames; ++i) {
      chain(bytes::read_file(io::frame_bin_path(seq, i)));
      chain(bytes::read_file(io::frame_lbl_path(seq, i)));
    }
  }
  return h;
}

// One sample per admissible window: every target index >= k-1 in every
// sequence, sequences in numeric order.
inline SampleSet load_samples(const std::string& root, const MarsConfig& cfg) {
  io::scan_dataset(root);
  SampleSet set{{}, io::read_taxonomy_file(root), dataset_hash(root)};
  for (const auto& name : io::list_sequences(root)) {
    const std::string seq = root + "/" + name;
    const int frames = io::sequence_frame_count(seq);
    for (int target = cfg.k - 1; target < frames; ++target) {
      auto [clouds, poses] = io::read_sequence(seq, cfg.k, target);
      set.samples.push_back(
          mars::prepare_sample(clouds, poses, cfg, set.taxonomy));
    }
  }
  if (set.samples.empty())
    throw DataError("dataset holds no " + std::to_string(cfg.k) +
                    "-frame windows: " + root);
  return set;
}

// ----------------------------------------------------------------- training

struct EpochStats {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double loss_c = 0.0;
  double loss_m = 0.0;
};

// One comma-separated line per epoch: epoch, L, L_c, L_m.
inline std::string format_train_log(const std::vector<EpochStats>& log) {
  std::string out;
  for (const auto& e : log) {
    out += std::to_string(e.epoch);
    out += ',' + fmt_double(e.loss);
    out += ',' + fmt_double(e.loss_c);
    out += ',' + fmt_double(e.loss_m);
    out += '\n';
  }
  return out;
}

struct TrainOutput {
  MarsModel model;
  std::vector<EpochStats> log;
};

// Deterministic: fixed sample order, seed-derived init, one optimizer step
// per sample.
inline TrainOutput train_on(const SampleSet& set, const MarsConfig& cfg,
                            const TrainConfig& tcfg) {
  tcfg.validate();
  MarsModel model(cfg, set.taxonomy, tcfg.seed);
  nn::AdamConfig acfg;
  acfg.lr = tcfg.lr;
  nn::Adam opt(model.params(), acfg);
  std::vector<EpochStats> log;
  log.reserve(tcfg.epochs);
  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    for (const auto& sample : set.samples) {
      model.params().zero_grads();
      const auto fwd = model.forward(sample);
      const auto loss = combined_loss(fwd.category_logits, fwd.motion_logits,
                                      sample, tcfg.wc, tcfg.wm);
      nn::backward(loss.total);
      opt.step(model.params());
      stats.loss += loss.total->value[0];
      stats.loss_c += loss.category->value[0];
      stats.loss_m += loss.motion->value[0];
    }
    const double inv = 1.0 / static_cast<double>(set.samples.size());
    stats.loss *= inv;
    stats.loss_c *= inv;
    stats.loss_m *= inv;
    log.push_back(stats);
  }
  return {std::move(model), std::move(log)};
}

inline TrainOutput train(const std::string& dataset_root,
                         const MarsConfig& cfg, const TrainConfig& tcfg) {
  return train_on(load_samples(dataset_root, cfg), cfg, tcfg);
}

// ---------------------------------------------------------------- evaluation

// Dense indexing of valid composite codes: 0..C-1 the static variants, then
// the moving variants of movable classes in class-id order.
class CodeIndex {
 public:
  explicit CodeIndex(const ClassTaxonomy& tax) : c_(tax.size()) {
    moving_rank_.assign(c_, -1);
    for (int id = 0; id < c_; ++id) {
      names_.push_back(tax.info(id).name);
      if (tax.movable(id)) {
        moving_rank_[id] = c_ + static_cast<int>(moving_ids_.size());
        moving_ids_.push_back(id);
      }
    }
    for (int id : moving_ids_) names_.push_back(tax.info(id).name + "(moving)");
  }

  int size() const { return c_ + static_cast<int>(moving_ids_.size()); }

  int of_code(uint16_t code) const {
    if (code < c_) return code;
    const int sem = code - c_;
    if (sem < 0 || sem >= c_ || moving_rank_[sem] < 0)
      throw InvalidLabelError("composite code " + std::to_string(code) +
                              " is not valid");
    return moving_rank_[sem];
  }

  bool is_moving(int idx) const { return idx >= c_; }
  const std::string& name(int idx) const { return names_[idx]; }

 private:
  int c_;
  std::vector<int> moving_rank_;
  std::vector<int> moving_ids_;
  std::vector<std::string> names_;
};

struct EvalReport {
  std::vector<std::string> code_names;
  std::vector<std::vector<int64_t>> confusion;  // rows GT, cols prediction
  std::vector<double> iou;         // 0 for absent codes, see present
  std::vector<uint8_t> present;    // code appears in GT or predictions
  std::vector<uint8_t> moving_code;
  double miou = 0.0;
  double moving_miou = 0.0;
  double static_miou = 0.0;
  int64_t evaluated_points = 0;
  int64_t moving_violations = 0;  // moving label on non-movable prediction

  std::string to_csv() const {
    std::string out =
        "# confusion matrix over composite codes, rows = ground truth, "
        "cols = prediction\n";
    out += "code,name";
    for (const auto& n : code_names) out += ',' + n;
    out += '\n';
    for (size_t r = 0; r < confusion.size(); ++r) {
      out += std::to_string(r) + ',' + code_names[r];
      for (int64_t v : confusion[r]) out += ',' + std::to_string(v);
      out += '\n';
    }
    out +=
        "# per-code IoU; codes absent from both ground truth and "
        "predictions are excluded from all means\n";
    out += "code,name,iou,present\n";
    for (size_t i = 0; i < iou.size(); ++i)
      out += std::to_string(i) + ',' + code_names[i] + ',' + fmt_double(iou[i]) +
             ',' + std::to_string(static_cast<int>(present[i])) + '\n';
    out += "# summary\n";
    out += "evaluated_points," + std::to_string(evaluated_points) + '\n';
    out += "miou," + fmt_double(miou) + '\n';
    out += "moving_miou," + fmt_double(moving_miou) + '\n';
    out += "static_miou," + fmt_double(static_miou) + '\n';
    out += "moving_violations," + std::to_string(moving_violations) + '\n';
    return out;
  }
};

class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(const ClassTaxonomy& tax)
      : tax_(tax), index_(tax) {
    confusion_.assign(index_.size(),
                      std::vector<int64_t>(index_.size(), 0));
  }

  void add(const std::vector<uint16_t>& gt,
           const std::vector<uint16_t>& pred) {
    if (gt.size() != pred.size())
      throw ShapeError("ground truth and prediction counts differ");
    for (size_t i = 0; i < gt.size(); ++i) {
      const int pc = pred[i];
      int pred_idx;
      if (pc >= tax_.size() && pc < 2 * tax_.size() &&
          !tax_.movable(pc - tax_.size())) {
        // moving mark on a non-movable class: counted, recorded as static
        ++violations_;
        pred_idx = pc - tax_.size();
      } else {
        pred_idx = index_.of_code(pred[i]);
      }
      confusion_[index_.of_code(gt[i])][pred_idx] += 1;
    }
    points_ += static_cast<int64_t>(gt.size());
  }

  EvalReport report() const {
    const int n = index_.size();
    EvalReport r;
    r.confusion = confusion_;
    r.evaluated_points = points_;
    r.moving_violations = violations_;
    r.iou.assign(n, 0.0);
    r.present.assign(n, 0);
    r.moving_code.assign(n, 0);
    for (int i = 0; i < n; ++i) {
      r.code_names.push_back(index_.name(i));
      r.moving_code[i] = index_.is_moving(i) ? 1 : 0;
    }
    double sum = 0.0, sum_moving = 0.0, sum_static = 0.0;
    int cnt = 0, cnt_moving = 0, cnt_static = 0;
    for (int i = 0; i < n; ++i) {
      int64_t tp = confusion_[i][i], row = 0, col = 0;
      for (int j = 0; j < n; ++j) {
        row += confusion_[i][j];
        col += confusion_[j][i];
      }
      if (row + col == 0) continue;
      r.present[i] = 1;
      const int64_t denom = row + col - tp;  // TP + FP + FN
      r.iou[i] = denom > 0 ? static_cast<double>(tp) / denom : 0.0;
      sum += r.iou[i];
      ++cnt;
      if (r.moving_code[i]) {
        sum_moving += r.iou[i];
        ++cnt_moving;
      } else {
        sum_static += r.iou[i];
        ++cnt_static;
      }
    }
    r.miou = cnt ? sum / cnt : 0.0;
    r.moving_miou = cnt_moving ? sum_moving / cnt_moving : 0.0;
    r.static_miou = cnt_static ? sum_static / cnt_static : 0.0;
    return r;
  }

 private:
  const ClassTaxonomy& tax_;
  CodeIndex index_;
  std::vector<std::vector<int64_t>> confusion_;
  int64_t points_ = 0;
  int64_t violations_ = 0;
};

// Target-frame points only; reference frames contribute features, not labels.
inline EvalReport evaluate_on(const MarsModel& model, const SampleSet& set) {
  if (model.taxonomy_hash() != set.taxonomy.hash())
    throw DataError("taxonomy mismatch between model and dataset");
  ConfusionAccumulator acc(set.taxonomy);
  for (const auto& sample : set.samples) {
    if (!sample.labeled()) throw DataError("evaluation sample has no labels");
    const auto fwd = model.forward(sample);
    acc.add(sample.target_codes,
            mars::gated_inference(fwd.category_logits, fwd.motion_logits,
                                  set.taxonomy));
  }
  return acc.report();
}

inline EvalReport evaluate(const MarsModel& model,
                           const std::string& dataset_root) {
  return evaluate_on(model, load_samples(dataset_root, model.config()));
}

// ----------------------------------------------------------------- ablation

struct AblationRow {
  std::string name;
  bool use_cffe = false;
  bool use_bev = false;
  bool use_mafl = false;
  std::vector<double> miou;         // per seed
  std::vector<double> moving_miou;  // per seed
  double mean_miou = 0.0;
  double mean_moving_miou = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<uint64_t> seeds;
  uint64_t train_hash = 0;
  uint64_t eval_hash = 0;
};

inline std::vector<AblationRow> ablation_ladder() {
  return {{"baseline", false, false, false, {}, {}, 0, 0},
          {"+cffe", true, false, false, {}, {}, 0, 0},
          {"+bev", false, true, false, {}, {}, 0, 0},
          {"+cffe+bev", true, true, false, {}, {}, 0, 0},
          {"full", true, true, true, {}, {}, 0, 0}};
}

// Same data and seeds for every row; sample preparation is shared by
// preparing once with the BEV branch on (rows without it ignore the grids).
inline AblationResult ablation_suite(const std::string& train_root,
                                     const std::string& eval_root,
                                     const MarsConfig& base_cfg,
                                     const TrainConfig& base_tcfg,
                                     const std::vector<uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  MarsConfig prep_cfg = base_cfg;
  prep_cfg.use_bev = true;
  prep_cfg.use_mafl = true;
  prep_cfg.use_cffe = true;
  const SampleSet train_set = load_samples(train_root, prep_cfg);
  const SampleSet eval_set = load_samples(eval_root, prep_cfg);

  AblationResult out;
  out.seeds = seeds;
  out.train_hash = train_set.dataset_hash;
  out.eval_hash = eval_set.dataset_hash;
  out.rows = ablation_ladder();
  for (auto& row : out.rows) {
    MarsConfig cfg = base_cfg;
    cfg.use_cffe = row.use_cffe;
    cfg.use_bev = row.use_bev;
    cfg.use_mafl = row.use_mafl;
    for (uint64_t seed : seeds) {
      TrainConfig tcfg = base_tcfg;
      tcfg.seed = seed;
      const auto trained = train_on(train_set, cfg, tcfg);
      const auto report = evaluate_on(trained.model, eval_set);
      row.miou.push_back(report.miou);
      row.moving_miou.push_back(report.moving_miou);
      row.mean_miou += report.miou;
      row.mean_moving_miou += report.moving_miou;
    }
    row.mean_miou /= static_cast<double>(seeds.size());
    row.mean_moving_miou /= static_cast<double>(seeds.size());
  }
  return out;
}

inline std::string ablation_csv(const AblationResult& r) {
  std::string out = "# train_hash=" + hash_hex(r.train_hash) +
                    " eval_hash=" + hash_hex(r.eval_hash) + "\n";
  out += "config,cffe,bev,mafl";
  for (uint64_t s : r.seeds) out += ",miou_seed" + std::to_string(s);
  out += ",mean_miou";
  for (uint64_t s : r.seeds) out += ",moving_miou_seed" + std::to_string(s);
  out += ",mean_moving_miou\n";
  for (const auto& row : r.rows) {
    out += row.name;
    out += std::string(",") + (row.use_cffe ? "1" : "0") + ',' +
           (row.use_bev ? "1" : "0") + ',' + (row.use_mafl ? "1" : "0");
    for (double v : row.miou) out += ',' + fmt_double(v);
    out += ',' + fmt_double(row.mean_miou);
    for (double v : row.moving_miou) out += ',' + fmt_double(v);
    out += ',' + fmt_double(row.mean_moving_miou);
    out += '\n';
  }
  return out;
}

}  // namespace marseg::train
