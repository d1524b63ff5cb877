// SPDX-License-Identifier: Apache-2.0
//
// Diagnostic rasters. BEV row 0 sits at the low-y edge, so images are
// flipped vertically to put +y at the top of the file.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "marseg/bev.hpp"
#include "marseg/bytes.hpp"
#include "marseg/errors.hpp"
#include "marseg/model.hpp"
#include "marseg/rng.hpp"

namespace marseg::render {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // row major
};

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::array<uint8_t, 3>> pixels;
};

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::string buf = "P5\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  buf.append(reinterpret_cast<const char*>(img.pixels.data()),
             img.pixels.size());
  bytes::write_file(path, buf);
}

inline void write_ppm(const std::string& path, const RgbImage& img) {
  std::string buf = "P6\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  for (const auto& px : img.pixels)
    buf.append(reinterpret_cast<const char*>(px.data()), 3);
  bytes::write_file(path, buf);
}

// Per-pixel mean absolute difference activation over a seeded subset of
// channels, min-max rescaled to [0,255]. Returns the raw map and scale
// bounds through the out parameters.
struct DiscrepancyImage {
  GrayImage image;
  std::vector<int> channels;
  double min_value = 0.0;
  double max_value = 0.0;
};

inline DiscrepancyImage discrepancy_map(const nn::Var& diff_maps,
                                        uint64_t seed, int max_channels = 8) {
  if (!diff_maps || diff_maps->shape.size() != 3)
    throw ConfigError("no difference maps to render");
  const int c = diff_maps->shape[0];
  const int h = diff_maps->shape[1];
  const int w = diff_maps->shape[2];
  const size_t hw = static_cast<size_t>(h) * w;

  std::vector<int> idx(c);
  for (int i = 0; i < c; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, 0xd1ffull));
  const int take = std::min(max_channels, c);
  for (int i = 0; i < take; ++i) {
    const int j = i + rng.uniform_int(0, c - 1 - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  std::sort(idx.begin(), idx.end());

  std::vector<double> mean(hw, 0.0);
  for (int ch : idx) {
    const double* plane = &diff_maps->value[static_cast<size_t>(ch) * hw];
    for (size_t i = 0; i < hw; ++i) mean[i] += std::abs(plane[i]);
  }
  for (auto& v : mean) v /= take;

  DiscrepancyImage out;
  out.channels = idx;
  out.min_value = *std::min_element(mean.begin(), mean.end());
  out.max_value = *std::max_element(mean.begin(), mean.end());
  out.image.height = h;
  out.image.width = w;
  out.image.pixels.assign(hw, 0);
  const double span = out.max_value - out.min_value;
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col) {
      const double v = mean[static_cast<size_t>(r) * w + col];
      const double scaled = span > 0.0 ? (v - out.min_value) / span * 255.0 : 0.0;
      out.image.pixels[static_cast<size_t>(h - 1 - r) * w + col] =
          static_cast<uint8_t>(std::lround(scaled));
    }
  return out;
}

// Top-down error raster over target points: a pixel with any wrongly
// predicted point is red, an occupied all-correct pixel gray, background
// black.
struct ErrorRaster {
  RgbImage image;
  int64_t correct_points = 0;
  int64_t wrong_points = 0;
  int64_t red_pixels = 0;
  int64_t gray_pixels = 0;
  int64_t off_grid_points = 0;
};

inline ErrorRaster error_raster(const mars::PreparedSample& sample,
                                const std::vector<uint16_t>& predictions,
                                const bev::BevConfig& cfg) {
  if (!sample.labeled()) throw DataError("sample has no labels to compare");
  if (predictions.size() != sample.target_codes.size())
    throw ShapeError("prediction count does not match target point count");
  cfg.validate();
  const size_t hw = static_cast<size_t>(cfg.height) * cfg.width;
  std::vector<uint8_t> occupied(hw, 0), wrong(hw, 0);
  ErrorRaster out;
  for (size_t i = 0; i < predictions.size(); ++i) {
    const bool ok = predictions[i] == sample.target_codes[i];
    ok ? ++out.correct_points : ++out.wrong_points;
    const auto pix =
        bev::point_to_pixel(sample.target_x[i], sample.target_y[i], cfg);
    if (!pix) {
      ++out.off_grid_points;
      continue;
    }
    const size_t cell = static_cast<size_t>(pix->row) * cfg.width + pix->col;
    occupied[cell] = 1;
    if (!ok) wrong[cell] = 1;
  }
  out.image.height = cfg.height;
  out.image.width = cfg.width;
  out.image.pixels.assign(hw, {0, 0, 0});
  for (int r = 0; r < cfg.height; ++r)
    for (int col = 0; col < cfg.width; ++col) {
      const size_t cell = static_cast<size_t>(r) * cfg.width + col;
      if (!occupied[cell]) continue;
      auto& px =
          out.image.pixels[static_cast<size_t>(cfg.height - 1 - r) * cfg.width +
                           col];
      if (wrong[cell]) {
        px = {255, 0, 0};
        ++out.red_pixels;
      } else {
        px = {128, 128, 128};
        ++out.gray_pixels;
      }
    }
  return out;
}

}  // namespace marseg::render
