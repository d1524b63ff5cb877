// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "marseg/core.hpp"
#include "marseg/errors.hpp"

namespace marseg::bev {

using core::PointCloud;

// Bird's-eye-view grid geometry. origin is the world xy of the corner of
// pixel (row 0, col 0); rows bin y, columns bin x, cells are half-open
// [lo, hi) squares of side cell_size.
struct BevConfig {
  int height = 160;
  int width = 160;
  double cell_size = 0.5;
  double origin_x = -40.0;
  double origin_y = -40.0;

  static BevConfig centered(int h, int w, double cell) {
    BevConfig c;
    c.height = h;
    c.width = w;
    c.cell_size = cell;
    c.origin_x = -0.5 * w * cell;
    c.origin_y = -0.5 * h * cell;
    return c;
  }

  void validate() const {
    if (height < 1 || width < 1) throw ConfigError("bev: H, W must be >= 1");
    if (!(cell_size > 0.0)) throw ConfigError("bev: cell_size must be > 0");
  }

  bool operator==(const BevConfig& o) const {
    return height == o.height && width == o.width && cell_size == o.cell_size &&
           origin_x == o.origin_x && origin_y == o.origin_y;
  }
};

struct PixelIndex {
  int row = 0;
  int col = 0;
};

// Half-open binning; a point on the high edge of the extent is out of bounds,
// never wrapped.
inline std::optional<PixelIndex> point_to_pixel(double x, double y,
                                                const BevConfig& cfg) {
  const double fx = std::floor((x - cfg.origin_x) / cfg.cell_size);
  const double fy = std::floor((y - cfg.origin_y) / cfg.cell_size);
  if (fx < 0.0 || fx >= cfg.width || fy < 0.0 || fy >= cfg.height)
    return std::nullopt;
  return PixelIndex{static_cast<int>(fy), static_cast<int>(fx)};
}

// Three-channel pillar grid: mean normalized x offset, mean normalized y
// offset, summed intensity. Stored as channel planes, data[(c*H + r)*W + col].
struct BevGrid {
  std::vector<double> data;
  BevConfig config;
  int frame_index = 0;
  int dropped_points = 0;  // points outside the extent

  double at(int channel, int row, int col) const {
    return data[(static_cast<size_t>(channel) * config.height + row) * config.width + col];
  }
  double& at(int channel, int row, int col) {
    return data[(static_cast<size_t>(channel) * config.height + row) * config.width + col];
  }
};

// Per occupied pillar: channels 0/1 are the means of 2*dx/cell and 2*dy/cell
// where (dx, dy) is each-point offset from the cell center, channel 2 is the
// plain intensity sum. Empty pillars stay exactly (0, 0, 0).
inline BevGrid pillarize(const PointCloud& cloud, const BevConfig& cfg) {
  cfg.validate();
  BevGrid grid;
  grid.config = cfg;
  grid.frame_index = cloud.frame_index;
  const size_t hw = static_cast<size_t>(cfg.height) * cfg.width;
  grid.data.assign(3 * hw, 0.0);
  std::vector<int> counts(hw, 0);

  for (const auto& p : cloud.points) {
    const auto pix = point_to_pixel(p.x, p.y, cfg);
    if (!pix) {
      ++grid.dropped_points;
      continue;
    }
    const size_t cell = static_cast<size_t>(pix->row) * cfg.width + pix->col;
    const double cx = cfg.origin_x + (pix->col + 0.5) * cfg.cell_size;
    const double cy = cfg.origin_y + (pix->row + 0.5) * cfg.cell_size;
    grid.data[cell] += 2.0 * (p.x - cx) / cfg.cell_size;
    grid.data[hw + cell] += 2.0 * (p.y - cy) / cfg.cell_size;
    grid.data[2 * hw + cell] += p.intensity;
    ++counts[cell];
  }
  for (size_t cell = 0; cell < hw; ++cell) {
    if (counts[cell] > 0) {
      grid.data[cell] /= counts[cell];
      grid.data[hw + cell] /= counts[cell];
    }
  }
  return grid;
}

}  // namespace marseg::bev
