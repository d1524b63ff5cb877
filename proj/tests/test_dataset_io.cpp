// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "marseg/dataset_io.hpp"
#include "marseg/synth.hpp"

using namespace marseg;
using core::PointCloud;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

PointCloud sample_cloud() {
  PointCloud pc;
  pc.points = {{1.25, -2.5, 0.75, 0.5},
               {0.0, 0.0, 0.0, 0.125},
               {-3.5, 4.25, 1.0, 0.875}};
  pc.labels = {0, 7, 3};
  return pc;
}

void clobber_byte(const std::string& path, size_t offset, uint8_t value) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(offset));
  f.put(static_cast<char>(value));
}

}  // namespace

TEST_CASE("frame round-trip is exact for f32 payloads") {
  TempDir dir("marseg_io_frame");
  const auto bin = dir.str() + "/frame_0.bin";
  const auto lbl = dir.str() + "/frame_0.lbl";
  const auto pc = sample_cloud();
  io::write_frame(bin, lbl, pc);
  const auto back = io::read_frame(bin, lbl, 5);
  CHECK(back.frame_index == 5);
  REQUIRE(back.size() == pc.size());
  for (size_t i = 0; i < pc.size(); ++i) {
    // all sample coordinates are exactly representable in f32
    CHECK(back.points[i].x == pc.points[i].x);
    CHECK(back.points[i].y == pc.points[i].y);
    CHECK(back.points[i].z == pc.points[i].z);
    CHECK(back.points[i].intensity == pc.points[i].intensity);
  }
  CHECK(back.labels == pc.labels);
}

TEST_CASE("frame writer rejects unlabeled or empty clouds") {
  TempDir dir("marseg_io_reject");
  PointCloud pc = sample_cloud();
  pc.labels.clear();
  CHECK_THROWS_AS(
      io::write_frame(dir.str() + "/a.bin", dir.str() + "/a.lbl", pc),
      DataError);
  PointCloud empty;
  CHECK_THROWS_AS(
      io::write_frame(dir.str() + "/b.bin", dir.str() + "/b.lbl", empty),
      DataError);
}

TEST_CASE("reader detects any single corrupted byte") {
  TempDir dir("marseg_io_corrupt");
  const auto bin = dir.str() + "/frame_0.bin";
  const auto lbl = dir.str() + "/frame_0.lbl";
  io::write_frame(bin, lbl, sample_cloud());
  const size_t total = fs::file_size(bin);
  int caught = 0;
  for (size_t off = 0; off < total; ++off) {
    const std::string copy = dir.str() + "/c.bin";
    fs::copy_file(bin, copy, fs::copy_options::overwrite_existing);
    auto original = bytes::read_file(copy);
    clobber_byte(copy, off, static_cast<uint8_t>(original[off]) ^ 0x40);
    try {
      (void)io::read_frame(copy, lbl, 0);
    } catch (const DataError&) {
      ++caught;
    }
  }
  CHECK(caught == static_cast<int>(total));
}

TEST_CASE("reader rejects structural damage") {
  TempDir dir("marseg_io_struct");
  const auto bin = dir.str() + "/frame_0.bin";
  const auto lbl = dir.str() + "/frame_0.lbl";
  io::write_frame(bin, lbl, sample_cloud());

  // truncated payload: no longer a whole number of 16-byte records
  {
    auto buf = bytes::read_file(bin);
    buf.resize(buf.size() - 7);
    bytes::write_file(dir.str() + "/cut.bin", buf);
    CHECK_THROWS_AS(io::read_frame(dir.str() + "/cut.bin", lbl, 0), DataError);
  }
  // whole record dropped: count mismatch
  {
    auto buf = bytes::read_file(bin);
    buf.resize(buf.size() - io::kPointRecordBytes);
    bytes::write_file(dir.str() + "/short.bin", buf);
    CHECK_THROWS_AS(io::read_frame(dir.str() + "/short.bin", lbl, 0),
                    DataError);
  }
  // label count mismatch
  {
    auto buf = bytes::read_file(lbl);
    buf.resize(buf.size() - 2);
    bytes::write_file(dir.str() + "/short.lbl", buf);
    CHECK_THROWS_AS(io::read_frame(bin, dir.str() + "/short.lbl", 0),
                    DataError);
  }
  // odd label file size
  {
    auto buf = bytes::read_file(lbl);
    buf.resize(buf.size() - 1);
    bytes::write_file(dir.str() + "/odd.lbl", buf);
    CHECK_THROWS_AS(io::read_frame(bin, dir.str() + "/odd.lbl", 0), DataError);
  }
  // wrong version byte
  {
    const std::string copy = dir.str() + "/ver.bin";
    fs::copy_file(bin, copy);
    clobber_byte(copy, 8, 9);
    CHECK_THROWS_AS(io::read_frame(copy, lbl, 0), DataError);
  }
  // missing file
  CHECK_THROWS_AS(io::read_frame(dir.str() + "/nope.bin", lbl, 0), DataError);
}

TEST_CASE("sequence round-trip and windowing") {
  TempDir dir("marseg_io_seq");
  synth::SceneParams params;
  params.k = 4;
  params.points_per_frame = 60;
  const auto spec = synth::random_scene(params, 3);
  const auto seq = synth::generate_sequence(spec, 3);
  const auto seq_dir = dir.str() + "/seq_0";
  io::write_sequence(seq.frames, seq.poses, seq.taxonomy, seq_dir);

  auto [frames, poses] = io::read_sequence(seq_dir, 3, 3);
  REQUIRE(frames.size() == 3);
  REQUIRE(poses.size() == 3);
  // window [1, 3] with the target last
  CHECK(frames[0].frame_index == 1);
  CHECK(frames[2].frame_index == 3);
  CHECK(frames[2].size() == seq.frames[3].size());
  for (size_t i = 0; i < frames[2].size(); ++i)
    CHECK(frames[2].labels[i] == seq.frames[3].labels[i]);
  CHECK(poses[2].translation == seq.poses[3].translation);

  // window too early
  CHECK_THROWS_AS(io::read_sequence(seq_dir, 3, 1), ConfigError);
  // beyond the end
  CHECK_THROWS_AS(io::read_sequence(seq_dir, 3, 9), DataError);
  CHECK(io::sequence_frame_count(seq_dir) == 4);
}

TEST_CASE("write_sequence validates labels against the taxonomy") {
  TempDir dir("marseg_io_badlbl");
  auto seq = synth::generate_sequence(
      synth::random_scene(synth::SceneParams{}, 1), 1);
  seq.frames[0].labels[0] = 13;  // static class marked moving
  CHECK_THROWS_AS(io::write_sequence(seq.frames, seq.poses, seq.taxonomy,
                                     dir.str() + "/seq_0"),
                  InvalidLabelError);
}

TEST_CASE("taxonomy file round-trip") {
  TempDir dir("marseg_io_tax");
  const auto tax = synth::default_taxonomy();
  io::write_taxonomy_file(dir.str(), tax);
  const auto back = io::read_taxonomy_file(dir.str());
  CHECK(back.hash() == tax.hash());
  CHECK_THROWS_AS(io::read_taxonomy_file(dir.str() + "/missing"), DataError);
}

TEST_CASE("list_sequences sorts numerically") {
  TempDir dir("marseg_io_list");
  for (int id : {10, 2, 1, 30}) {
    fs::create_directories(dir.path / ("seq_" + std::to_string(id)));
  }
  fs::create_directories(dir.path / "not_a_seq");
  const auto names = io::list_sequences(dir.str());
  CHECK(names == std::vector<std::string>{"seq_1", "seq_2", "seq_10",
                                          "seq_30"});
  fs::create_directories(dir.path / "seq_abc");
  CHECK_THROWS_AS(io::list_sequences(dir.str()), DataError);
}

TEST_CASE("scan_dataset validates structure") {
  TempDir dir("marseg_io_scan");
  const auto tax = synth::default_taxonomy();
  io::write_taxonomy_file(dir.str(), tax);
  CHECK_THROWS_AS(io::scan_dataset(dir.str()), DataError);  // no sequences

  synth::SceneParams params;
  params.k = 2;
  params.points_per_frame = 40;
  for (int s = 0; s < 3; ++s) {
    const auto seq = synth::generate_sequence(
        synth::random_scene(params, s), s);
    io::write_sequence(seq.frames, seq.poses, tax,
                       dir.str() + "/seq_" + std::to_string(s));
  }
  const auto m = io::scan_dataset(dir.str());
  CHECK(m.sequence_ids.size() == 3);
  CHECK(m.frame_counts == std::vector<int>{2, 2, 2});
  CHECK(m.taxonomy_hash == tax.hash());

  // a missing label file breaks the scan
  fs::remove(dir.path / "seq_1" / "frame_0.lbl");
  CHECK_THROWS_AS(io::scan_dataset(dir.str()), DataError);
}
