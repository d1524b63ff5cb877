// SPDX-License-Identifier: Apache-2.0
//
// The motion-aware segmentation model. A k-frame sample is aligned to its
// last frame, fused into one point set with per-frame provenance, and
// processed as:
//   per-point: descriptor projection (+ learnable per-frame embedding)
//              -> point MLP with one voxel-mean aggregation round -> [N,d_p]
//   per-frame BEV: pillar grid -> shared UNet -> [d_u,H,W] maps; target-minus-
//              reference differences -> multi-kernel conv -> [d_z,H,W]
//   fusion: each point appends its pillar's channel vector; two MLP heads
//              emit category logits and a motion logit for target points.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "marseg/align.hpp"
#include "marseg/bev.hpp"
#include "marseg/bytes.hpp"
#include "marseg/core.hpp"
#include "marseg/errors.hpp"
#include "marseg/hash.hpp"
#include "marseg/nn.hpp"
#include "marseg/rng.hpp"
#include "marseg/tensor.hpp"

namespace marseg::bev {

inline void to_json(nlohmann::json& j, const BevConfig& c) {
  j = {{"height", c.height},
       {"width", c.width},
       {"cell_size", c.cell_size},
       {"origin_x", c.origin_x},
       {"origin_y", c.origin_y}};
}
inline void from_json(const nlohmann::json& j, BevConfig& c) {
  j.at("height").get_to(c.height);
  j.at("width").get_to(c.width);
  j.at("cell_size").get_to(c.cell_size);
  j.at("origin_x").get_to(c.origin_x);
  j.at("origin_y").get_to(c.origin_y);
}

}  // namespace marseg::bev

namespace marseg::mars {

using align::AlignedSequence;
using align::Pose;
using core::ClassTaxonomy;
using core::PointCloud;

inline constexpr int kManifestVersion = 1;

struct MarsConfig {
  int k = 3;
  int num_classes = 7;
  int d_e = 18;   // embedded feature width
  int d_p = 32;   // per-point backbone output width
  int d_u = 16;   // per-frame BEV map width
  int mafl_cout = 8;  // channels per difference-conv branch
  std::vector<int> mafl_kernels = {1, 3, 5};
  int backbone_hidden = 384;
  int head_hidden = 64;
  int unet_c1 = 8;
  int unet_c2 = 16;
  int unet_cb = 32;
  double voxel_size = 0.5;
  double coord_scale = 0.1;      // descriptor coordinate scaling
  double intensity_scale = 0.25;  // BEV intensity-channel scaling
  bev::BevConfig bev_cfg = bev::BevConfig::centered(160, 160, 0.5);
  bool use_cffe = true;
  bool use_bev = true;
  bool use_mafl = true;

  int d_z() const {
    return mafl_cout * static_cast<int>(mafl_kernels.size());
  }
  // channel count appended to every point by the BEV branch; without the
  // difference stage the branch carries only target-frame spatial context
  int motion_width() const {
    if (!use_bev) return 0;
    return use_mafl ? d_z() : d_u;
  }
  int fused_dim() const { return d_p + motion_width(); }

  void validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (d_e < 1 || d_p < 1 || d_u < 1 || mafl_cout < 1 ||
        backbone_hidden < 1 || head_hidden < 1 || unet_c1 < 1 ||
        unet_c2 < 1 || unet_cb < 1)
      throw ConfigError("all widths must be positive");
    if (mafl_kernels.empty()) throw ConfigError("no difference-conv kernels");
    for (int kk : mafl_kernels)
      if (kk < 1 || kk % 2 == 0)
        throw ConfigError("difference-conv kernels must be odd");
    if (use_mafl && !use_bev)
      throw ConfigError("motion differencing requires the BEV branch");
    if (!(voxel_size > 0.0) || !(coord_scale > 0.0) ||
        !(intensity_scale > 0.0))
      throw ConfigError("scales must be positive");
    if (use_bev) {
      bev_cfg.validate();
      if (bev_cfg.height % 4 || bev_cfg.width % 4)
        throw ConfigError("BEV height and width must be divisible by 4");
    }
  }
};

inline void to_json(nlohmann::json& j, const MarsConfig& c) {
  j = {{"k", c.k},
       {"num_classes", c.num_classes},
       {"d_e", c.d_e},
       {"d_p", c.d_p},
       {"d_u", c.d_u},
       {"d_z", c.d_z()},
       {"mafl_cout", c.mafl_cout},
       {"mafl_kernels", c.mafl_kernels},
       {"backbone_hidden", c.backbone_hidden},
       {"head_hidden", c.head_hidden},
       {"unet_c1", c.unet_c1},
       {"unet_c2", c.unet_c2},
       {"unet_cb", c.unet_cb},
       {"voxel_size", c.voxel_size},
       {"coord_scale", c.coord_scale},
       {"intensity_scale", c.intensity_scale},
       {"bev", c.bev_cfg},
       {"use_cffe", c.use_cffe},
       {"use_bev", c.use_bev},
       {"use_mafl", c.use_mafl}};
}
inline void from_json(const nlohmann::json& j, MarsConfig& c) {
  j.at("k").get_to(c.k);
  j.at("num_classes").get_to(c.num_classes);
  j.at("d_e").get_to(c.d_e);
  j.at("d_p").get_to(c.d_p);
  j.at("d_u").get_to(c.d_u);
  j.at("mafl_cout").get_to(c.mafl_cout);
  j.at("mafl_kernels").get_to(c.mafl_kernels);
  j.at("backbone_hidden").get_to(c.backbone_hidden);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("unet_c1").get_to(c.unet_c1);
  j.at("unet_c2").get_to(c.unet_c2);
  j.at("unet_cb").get_to(c.unet_cb);
  j.at("voxel_size").get_to(c.voxel_size);
  j.at("coord_scale").get_to(c.coord_scale);
  j.at("intensity_scale").get_to(c.intensity_scale);
  j.at("bev").get_to(c.bev_cfg);
  j.at("use_cffe").get_to(c.use_cffe);
  j.at("use_bev").get_to(c.use_bev);
  j.at("use_mafl").get_to(c.use_mafl);
}

// Everything about one k-frame sample that does not depend on parameters:
// alignment, descriptor scaling, voxel grouping, pillar grids and pixel
// lookups are computed once and reused across epochs.
struct PreparedSample {
  int k = 0;
  int point_count = 0;               // fused cloud size N
  std::vector<double> descriptors;   // N x 4: scaled x,y,z + intensity
  std::vector<int> frame_ids;        // N
  std::vector<int> voxel_group;      // N, dense ids in first-appearance order
  int voxel_count = 0;
  std::vector<int> pixel;            // N, flattened row*W+col or -1
  std::vector<nn::Var> bev_inputs;   // k tensors [3,H,W]; empty without BEV
  std::vector<int> target_rows;      // fused-cloud rows of target points
  std::vector<double> target_x, target_y;  // aligned target coordinates
  std::vector<uint16_t> target_codes;      // GT composite codes, may be empty
  std::vector<int> target_semantic;
  std::vector<double> target_moving;       // 0/1
  std::vector<uint8_t> target_movable;     // GT class movability

  int target_count() const { return static_cast<int>(target_rows.size()); }
  bool labeled() const { return !target_codes.empty(); }
};

inline PreparedSample prepare_sample(const std::vector<PointCloud>& frames,
                                     const std::vector<Pose>& poses,
                                     const MarsConfig& cfg,
                                     const ClassTaxonomy& tax) {
  cfg.validate();
  if (static_cast<int>(tax.size()) != cfg.num_classes)
    throw ConfigError("taxonomy size does not match configured class count");
  if (static_cast<int>(frames.size()) != cfg.k)
    throw ShapeError("sample has " + std::to_string(frames.size()) +
                     " frames, model expects k = " + std::to_string(cfg.k));
  const AlignedSequence aligned = align::align_sequence(frames, poses);

  PreparedSample s;
  s.k = cfg.k;
  size_t n = 0;
  for (const auto& f : aligned.frames) n += f.size();
  s.point_count = static_cast<int>(n);
  s.descriptors.reserve(n * 4);
  s.frame_ids.reserve(n);
  s.voxel_group.reserve(n);
  s.pixel.reserve(n);

  std::map<std::array<long, 3>, int> voxels;
  int row = 0;
  for (int i = 0; i < cfg.k; ++i) {
    const auto& frame = aligned.frames[i];
    const bool is_target = i == cfg.k - 1;
    for (size_t j = 0; j < frame.size(); ++j, ++row) {
      const auto& p = frame.points[j];
      s.descriptors.push_back(p.x * cfg.coord_scale);
      s.descriptors.push_back(p.y * cfg.coord_scale);
      s.descriptors.push_back(p.z * cfg.coord_scale);
      s.descriptors.push_back(p.intensity);
      s.frame_ids.push_back(i);
      const std::array<long, 3> key = {
          static_cast<long>(std::floor(p.x / cfg.voxel_size)),
          static_cast<long>(std::floor(p.y / cfg.voxel_size)),
          static_cast<long>(std::floor(p.z / cfg.voxel_size))};
      const auto [it, inserted] = voxels.try_emplace(key, s.voxel_count);
      if (inserted) ++s.voxel_count;
      s.voxel_group.push_back(it->second);
      int flat = -1;
      if (cfg.use_bev) {
        if (const auto pix = bev::point_to_pixel(p.x, p.y, cfg.bev_cfg))
          flat = pix->row * cfg.bev_cfg.width + pix->col;
      }
      s.pixel.push_back(flat);
      if (is_target) {
        s.target_rows.push_back(row);
        s.target_x.push_back(p.x);
        s.target_y.push_back(p.y);
      }
    }
  }

  if (cfg.use_bev) {
    const size_t hw =
        static_cast<size_t>(cfg.bev_cfg.height) * cfg.bev_cfg.width;
    for (const auto& frame : aligned.frames) {
      bev::BevGrid grid = bev::pillarize(frame, cfg.bev_cfg);
      std::vector<double> v = std::move(grid.data);
      for (size_t i = 2 * hw; i < 3 * hw; ++i) v[i] *= cfg.intensity_scale;
      s.bev_inputs.push_back(nn::constant(
          {3, cfg.bev_cfg.height, cfg.bev_cfg.width}, std::move(v)));
    }
  }

  const auto& target = aligned.target();
  if (target.labeled()) {
    s.target_codes = target.labels;
    s.target_semantic.reserve(target.size());
    s.target_moving.reserve(target.size());
    s.target_movable.reserve(target.size());
    for (uint16_t code : target.labels) {
      const auto lab = core::decompose_label(code, tax);
      s.target_semantic.push_back(lab.semantic_id);
      s.target_moving.push_back(lab.moving ? 1.0 : 0.0);
      s.target_movable.push_back(tax.movable(lab.semantic_id) ? 1 : 0);
    }
  }
  return s;
}

class MarsModel {
 public:
  MarsModel(const MarsConfig& cfg, const ClassTaxonomy& tax, uint64_t seed)
      : cfg_(cfg), tax_hash_(tax.hash()) {
    cfg_.validate();
    if (static_cast<int>(tax.size()) != cfg_.num_classes)
      throw ConfigError("taxonomy size does not match configured class count");
    Rng rng(mix_seed(seed, 0x6d6f64656cull));
    build_parameters(rng);
  }

  const MarsConfig& config() const { return cfg_; }
  uint64_t taxonomy_hash() const { return tax_hash_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // [N,4] descriptors -> [N,d_e], plus the per-frame embedding when enabled
  nn::Var embed(const PreparedSample& s) const {
    auto x = nn::constant({s.point_count, 4}, s.descriptors);
    auto h = nn::linear(x, fe_w_, fe_b_);
    if (cfg_.use_cffe) h = nn::embedding_add(h, embed_e_, s.frame_ids);
    return h;
  }

  // point MLP, one voxel-mean aggregation round, projection to d_p
  nn::Var backbone(const nn::Var& x, const PreparedSample& s) const {
    auto h1 = nn::tanh(nn::linear(x, bb_w1_, bb_b1_));
    auto h2 = nn::tanh(nn::linear(h1, bb_w2_, bb_b2_));
    auto vox = nn::group_mean_expand(h2, s.voxel_group, s.voxel_count);
    auto cat = nn::concat_cols(h2, vox);
    return nn::tanh(nn::linear(cat, bb_wp_, bb_bp_));
  }

  // shared-weight UNet over one [3,H,W] pillar grid
  nn::Var unet(const nn::Var& in) const {
    auto e1 = nn::tanh(nn::conv2d(in, ue1_w_, ue1_b_));
    auto e2 = nn::tanh(nn::conv2d(nn::max_pool2(e1), ue2_w_, ue2_b_));
    auto bott = nn::tanh(nn::conv2d(nn::max_pool2(e2), ub_w_, ub_b_));
    auto d2 = nn::tanh(nn::conv2d(
        nn::concat_channels({nn::upsample2(bott), e2}), ud2_w_, ud2_b_));
    auto d1 = nn::tanh(nn::conv2d(
        nn::concat_channels({nn::upsample2(d2), e1}), ud1_w_, ud1_b_));
    return nn::conv2d(d1, uo_w_, uo_b_);
  }

  // target-minus-reference differences in frame order, then the branch convs
  // in kernel order. diff_out receives the concatenated difference maps.
  nn::Var mafl(const std::vector<nn::Var>& u_maps, nn::Var* diff_out) const {
    if (static_cast<int>(u_maps.size()) != cfg_.k)
      throw ConfigError("difference stage expects k feature maps");
    if (cfg_.k < 2) throw ConfigError("differencing needs k >= 2");
    std::vector<nn::Var> diffs;
    diffs.reserve(cfg_.k - 1);
    for (int i = 0; i + 1 < cfg_.k; ++i)
      diffs.push_back(nn::sub(u_maps.back(), u_maps[i]));
    auto dcat = nn::concat_channels(diffs);
    if (diff_out) *diff_out = dcat;
    std::vector<nn::Var> branches;
    branches.reserve(fm_w_.size());
    for (size_t b = 0; b < fm_w_.size(); ++b)
      branches.push_back(nn::conv2d(dcat, fm_w_[b], fm_b_[b]));
    return nn::concat_channels(branches);
  }

  // appends each point's pillar channel vector; out-of-extent points get
  // zeros
  nn::Var fuse(const nn::Var& ps, const nn::Var& zm,
               const PreparedSample& s) const {
    return nn::concat_cols(ps, nn::gather_pixels(zm, s.pixel));
  }

  std::pair<nn::Var, nn::Var> predict(const nn::Var& fused) const {
    auto c = nn::linear(nn::tanh(nn::linear(fused, ch1_w_, ch1_b_)), ch2_w_,
                        ch2_b_);
    auto m = nn::linear(nn::tanh(nn::linear(fused, mh1_w_, mh1_b_)), mh2_w_,
                        mh2_b_);
    return {c, m};
  }

  struct Forward {
    nn::Var category_logits;  // [Nt, C]
    nn::Var motion_logits;    // [Nt, 1]
    nn::Var diff_maps;        // [(k-1)*d_u, H, W]; null when unavailable
  };

  Forward forward(const PreparedSample& s) const {
    if (s.k != cfg_.k) throw ShapeError("sample k does not match model k");
    auto ps = backbone(embed(s), s);
    nn::Var fused;
    nn::Var diff;
    if (cfg_.use_bev) {
      if (static_cast<int>(s.bev_inputs.size()) != cfg_.k)
        throw ShapeError("sample lacks pillar grids");
      nn::Var zm;
      if (!cfg_.use_mafl) {
        // spatial context only; no cross-frame comparison without the
        // difference stage
        zm = unet(s.bev_inputs.back());
      } else if (cfg_.k >= 2) {
        std::vector<nn::Var> u;
        u.reserve(cfg_.k);
        for (const auto& grid : s.bev_inputs) u.push_back(unet(grid));
        zm = mafl(u, &diff);
      } else {  // single-scan fallback: motion features degenerate to zeros
        zm = nn::zeros({cfg_.d_z(), cfg_.bev_cfg.height, cfg_.bev_cfg.width});
      }
      fused = fuse(ps, zm, s);
    } else {
      fused = ps;
    }
    auto ft = nn::select_rows(fused, s.target_rows);
    auto [sc, sm] = predict(ft);
    return {sc, sm, diff};
  }

  struct ParamReport {
    size_t backbone = 0;
    size_t cffe = 0;
    size_t bev_branch = 0;
    size_t heads = 0;

    size_t module_total() const { return cffe + bev_branch + heads; }
    size_t total() const { return backbone + module_total(); }
    double module_fraction() const {
      return static_cast<double>(module_total()) / backbone;
    }
  };

  ParamReport param_report() const {
    ParamReport r;
    for (size_t i = 0; i < params_.count(); ++i) {
      const auto& name = params_.names[i];
      const size_t n = params_.vars[i]->numel();
      if (name.rfind("backbone.", 0) == 0)
        r.backbone += n;
      else if (name.rfind("cffe.", 0) == 0)
        r.cffe += n;
      else if (name.rfind("bev.", 0) == 0)
        r.bev_branch += n;
      else
        r.heads += n;
    }
    return r;
  }

 private:
  void build_parameters(Rng& rng) {
    auto lin = [&](const std::string& name, int din, int dout, nn::Var& w,
                   nn::Var& b) {
      w = params_.add(name + ".w", {din, dout},
                      nn::kaiming_uniform(rng, din,
                                          static_cast<size_t>(din) * dout));
      b = params_.add(name + ".b", {dout}, std::vector<double>(dout, 0.0));
    };
    auto conv = [&](const std::string& name, int cin, int cout, int kk,
                    nn::Var& w, nn::Var& b) {
      const size_t n = static_cast<size_t>(cout) * cin * kk * kk;
      w = params_.add(name + ".w", {cout, cin, kk, kk},
                      nn::kaiming_uniform(rng, cin * kk * kk, n));
      b = params_.add(name + ".b", {cout}, std::vector<double>(cout, 0.0));
    };

    lin("cffe.fe", 4, cfg_.d_e, fe_w_, fe_b_);
    if (cfg_.use_cffe)
      embed_e_ = params_.add(
          "cffe.embed", {cfg_.k, cfg_.d_e},
          nn::uniform_init(rng, static_cast<size_t>(cfg_.k) * cfg_.d_e, -0.1,
                           0.1));
    const int h = cfg_.backbone_hidden;
    lin("backbone.l1", cfg_.d_e, h, bb_w1_, bb_b1_);
    lin("backbone.l2", h, h, bb_w2_, bb_b2_);
    lin("backbone.proj", 2 * h, cfg_.d_p, bb_wp_, bb_bp_);
    if (cfg_.use_bev) {
      conv("bev.unet.enc1", 3, cfg_.unet_c1, 3, ue1_w_, ue1_b_);
      conv("bev.unet.enc2", cfg_.unet_c1, cfg_.unet_c2, 3, ue2_w_, ue2_b_);
      conv("bev.unet.bott", cfg_.unet_c2, cfg_.unet_cb, 3, ub_w_, ub_b_);
      conv("bev.unet.dec2", cfg_.unet_cb + cfg_.unet_c2, cfg_.unet_c2, 3,
           ud2_w_, ud2_b_);
      conv("bev.unet.dec1", cfg_.unet_c2 + cfg_.unet_c1, cfg_.unet_c1, 3,
           ud1_w_, ud1_b_);
      conv("bev.unet.out", cfg_.unet_c1, cfg_.d_u, 1, uo_w_, uo_b_);
      if (cfg_.use_mafl && cfg_.k >= 2) {
        fm_w_.resize(cfg_.mafl_kernels.size());
        fm_b_.resize(cfg_.mafl_kernels.size());
        for (size_t b = 0; b < cfg_.mafl_kernels.size(); ++b)
          conv("bev.mafl.k" + std::to_string(cfg_.mafl_kernels[b]),
               (cfg_.k - 1) * cfg_.d_u, cfg_.mafl_cout, cfg_.mafl_kernels[b],
               fm_w_[b], fm_b_[b]);
      }
    }
    const int fd = cfg_.fused_dim();
    lin("head.cat.l1", fd, cfg_.head_hidden, ch1_w_, ch1_b_);
    lin("head.cat.l2", cfg_.head_hidden, cfg_.num_classes, ch2_w_, ch2_b_);
    lin("head.motion.l1", fd, cfg_.head_hidden, mh1_w_, mh1_b_);
    lin("head.motion.l2", cfg_.head_hidden, 1, mh2_w_, mh2_b_);
  }

  MarsConfig cfg_;
  uint64_t tax_hash_;
  nn::ParameterSet params_;
  nn::Var fe_w_, fe_b_, embed_e_;
  nn::Var bb_w1_, bb_b1_, bb_w2_, bb_b2_, bb_wp_, bb_bp_;
  nn::Var ue1_w_, ue1_b_, ue2_w_, ue2_b_, ub_w_, ub_b_;
  nn::Var ud2_w_, ud2_b_, ud1_w_, ud1_b_, uo_w_, uo_b_;
  std::vector<nn::Var> fm_w_, fm_b_;
  nn::Var ch1_w_, ch1_b_, ch2_w_, ch2_b_;
  nn::Var mh1_w_, mh1_b_, mh2_w_, mh2_b_;
};

// Motion is consulted only for movable predicted classes; the logit-zero
// boundary counts as static. Category ties resolve to the lowest class id.
inline std::vector<uint16_t> gated_inference(const nn::Var& category_logits,
                                             const nn::Var& motion_logits,
                                             const ClassTaxonomy& tax) {
  if (category_logits->shape.size() != 2 ||
      category_logits->shape[1] != static_cast<int>(tax.size()))
    throw ShapeError("gated_inference: logits do not match taxonomy");
  const int n = category_logits->shape[0];
  const int c = category_logits->shape[1];
  if (static_cast<int>(motion_logits->numel()) != n)
    throw ShapeError("gated_inference: motion logit count mismatch");
  std::vector<uint16_t> codes(n);
  for (int r = 0; r < n; ++r) {
    const int sem =
        nn::argmax_row(&category_logits->value[static_cast<size_t>(r) * c], c);
    const bool moving = tax.movable(sem) && motion_logits->value[r] > 0.0;
    codes[r] = static_cast<uint16_t>(core::compose_label(sem, moving, tax));
  }
  return codes;
}

// ------------------------------------------------------ checkpoint + manifest

inline std::string manifest_path(const std::string& ckpt_path) {
  return ckpt_path + ".json";
}

inline void save_model(const MarsModel& model, const std::string& ckpt_path) {
  nn::save_checkpoint(ckpt_path, model.params());
  nlohmann::json j;
  j["manifest_version"] = kManifestVersion;
  j["config"] = model.config();
  j["taxonomy_hash"] = hash_hex(model.taxonomy_hash());
  bytes::write_file(manifest_path(ckpt_path), j.dump(2) + "\n");
}

inline MarsModel load_model(const std::string& ckpt_path,
                            const ClassTaxonomy& tax) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes::read_file(manifest_path(ckpt_path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + manifest_path(ckpt_path) + ": " +
                    e.what());
  }
  try {
    if (j.at("manifest_version").get<int>() != kManifestVersion)
      throw DataError("unsupported manifest version in " +
                      manifest_path(ckpt_path));
    const auto stored_hash = j.at("taxonomy_hash").get<std::string>();
    if (stored_hash != hash_hex(tax.hash()))
      throw DataError("taxonomy mismatch: checkpoint built for taxonomy " +
                      stored_hash + ", dataset has " + hash_hex(tax.hash()));
    MarsModel model(j.at("config").get<MarsConfig>(), tax, 0);
    nn::load_checkpoint(ckpt_path, model.params());
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + manifest_path(ckpt_path) + ": " +
                    e.what());
  }
}

}  // namespace marseg::mars
