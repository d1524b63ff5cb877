// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "marseg/render.hpp"
#include "marseg/synth.hpp"

using namespace marseg;

namespace {

namespace fs = std::filesystem;

mars::PreparedSample tiny_sample() {
  core::PointCloud f;
  f.points = {{-0.8, -0.8, 0.1, 0.5},   // pixel (0,0) of a 4x4/0.4 grid
              {-0.7, -0.75, 0.2, 0.5},  // same pixel
              {0.5, 0.5, 0.1, 0.5},     // pixel (3,3)
              {9.0, 9.0, 0.0, 0.5}};    // off the grid
  f.labels = {3, 3, 0, 6};
  mars::MarsConfig cfg;
  cfg.k = 1;
  cfg.bev_cfg = bev::BevConfig::centered(4, 4, 0.4);
  const auto tax = synth::default_taxonomy();
  return mars::prepare_sample({f}, {align::Pose::identity()}, cfg, tax);
}

}  // namespace

TEST_CASE("pgm and ppm writers produce valid binary headers") {
  const auto dir = fs::temp_directory_path() / "marseg_render_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  render::GrayImage g;
  g.height = 2;
  g.width = 3;
  g.pixels = {0, 128, 255, 1, 2, 3};
  const std::string pgm = (dir / "a.pgm").string();
  render::write_pgm(pgm, g);
  const auto buf = bytes::read_file(pgm);
  CHECK(buf.substr(0, 9) == "P5\n3 2\n25");
  CHECK(buf.size() == std::string("P5\n3 2\n255\n").size() + 6);
  CHECK(static_cast<uint8_t>(buf[buf.size() - 6]) == 0);
  CHECK(static_cast<uint8_t>(buf[buf.size() - 4]) == 255);

  render::RgbImage c;
  c.height = 1;
  c.width = 2;
  c.pixels = {{{255, 0, 0}}, {{1, 2, 3}}};
  const std::string ppm = (dir / "b.ppm").string();
  render::write_ppm(ppm, c);
  const auto buf2 = bytes::read_file(ppm);
  CHECK(buf2.substr(0, 3) == "P6\n");
  CHECK(buf2.size() == std::string("P6\n2 1\n255\n").size() + 6);
  fs::remove_all(dir);
}

TEST_CASE("discrepancy map scales to the full byte range") {
  // two channels, 2x2: |values| average to a known plane
  auto maps = nn::constant({2, 2, 2}, {1, -1, 0, 2,
                                       3, 1, 0, -2});
  const auto d = render::discrepancy_map(maps, 0, 8);
  CHECK(d.channels == std::vector<int>{0, 1});
  // mean |.| plane: (2, 1, 0, 2); min 0, max 2
  CHECK(d.min_value == 0.0);
  CHECK(d.max_value == 2.0);
  REQUIRE(d.image.pixels.size() == 4);
  // vertical flip: source row 1 = (0, 2) lands on image row 0
  CHECK(d.image.pixels[0] == 0);
  CHECK(d.image.pixels[1] == 255);
  CHECK(d.image.pixels[2] == 255);
  CHECK(d.image.pixels[3] == 128);
}

TEST_CASE("constant maps render to black") {
  auto maps = nn::constant({1, 2, 2}, {3, 3, 3, 3});
  const auto d = render::discrepancy_map(maps, 1);
  CHECK(d.min_value == d.max_value);
  for (auto px : d.image.pixels) CHECK(px == 0);
}

TEST_CASE("channel subset is seeded and sorted") {
  std::vector<double> v(24ull * 4 * 4, 0.5);
  auto maps = nn::constant({24, 4, 4}, v);
  const auto a = render::discrepancy_map(maps, 7, 8);
  const auto b = render::discrepancy_map(maps, 7, 8);
  const auto c = render::discrepancy_map(maps, 8, 8);
  REQUIRE(a.channels.size() == 8);
  CHECK(std::is_sorted(a.channels.begin(), a.channels.end()));
  CHECK(a.channels == b.channels);
  CHECK(a.channels != c.channels);
  for (int ch : a.channels) {
    CHECK(ch >= 0);
    CHECK(ch < 24);
  }
  CHECK_THROWS_AS(render::discrepancy_map(nullptr, 0), ConfigError);
  CHECK_THROWS_AS(render::discrepancy_map(nn::constant({2, 2}, {1, 2, 3, 4}), 0),
                  ConfigError);
}

TEST_CASE("error raster marks wrong pixels red") {
  const auto sample = tiny_sample();
  // first pixel-(0,0) point wrong, its neighbor right; (3,3) right;
  // off-grid point wrong
  const std::vector<uint16_t> pred = {4, 3, 0, 3};
  const auto r =
      render::error_raster(sample, pred, bev::BevConfig::centered(4, 4, 0.4));
  CHECK(r.correct_points == 2);
  CHECK(r.wrong_points == 2);
  CHECK(r.off_grid_points == 1);
  CHECK(r.red_pixels == 1);
  CHECK(r.gray_pixels == 1);
  // grid row 0 renders at image row 3 after the flip
  CHECK(r.image.pixels[3 * 4 + 0] ==
        std::array<uint8_t, 3>{255, 0, 0});
  // grid row 3, col 3 renders at image row 0
  CHECK(r.image.pixels[0 * 4 + 3] ==
        std::array<uint8_t, 3>{128, 128, 128});
  CHECK(r.image.pixels[1 * 4 + 1] == std::array<uint8_t, 3>{0, 0, 0});

  CHECK_THROWS_AS(
      render::error_raster(sample, {0, 0}, bev::BevConfig::centered(4, 4, 0.4)),
      ShapeError);
}

TEST_CASE("error raster needs labels") {
  core::PointCloud f;
  f.points = {{0, 0, 0, 0.5}};
  mars::MarsConfig cfg;
  cfg.k = 1;
  const auto tax = synth::default_taxonomy();
  const auto s =
      mars::prepare_sample({f}, {align::Pose::identity()}, cfg, tax);
  CHECK_THROWS_AS(render::error_raster(s, {0}, cfg.bev_cfg), DataError);
}
