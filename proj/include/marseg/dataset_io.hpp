// SPDX-License-Identifier: Apache-2.0
//
// On-disk dataset layout:
//   <root>/taxonomy.txt
//   <root>/seq_<id>/frame_<i>.bin   points, little-endian f32 x,y,z,intensity
//   <root>/seq_<id>/frame_<i>.lbl   composite codes, little-endian u16
//   <root>/seq_<id>/poses.txt       one 3x4 row-major [R|t] per line
// Each .bin carries an 8-byte magic, a format version byte, the point count
// and a payload checksum, so any single corrupted byte fails validation.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "marseg/align.hpp"
#include "marseg/bytes.hpp"
#include "marseg/core.hpp"
#include "marseg/errors.hpp"
#include "marseg/hash.hpp"

namespace marseg::io {

using align::Pose;
using align::read_poses;
using align::write_poses;
using core::ClassTaxonomy;
using core::PointCloud;

inline constexpr char kFrameMagic[8] = {'M', 'S', 'E', 'G', 'B', 'I', 'N', '\0'};
inline constexpr uint8_t kFormatVersion = 1;
inline constexpr size_t kFrameHeaderBytes = 8 + 1 + 4 + 8;
inline constexpr size_t kPointRecordBytes = 4 * sizeof(float);

struct SequenceManifest {
  std::vector<std::string> sequence_ids;
  std::vector<int> frame_counts;
  uint64_t taxonomy_hash = 0;
  int format_version = kFormatVersion;
};

inline void write_frame(const std::string& bin_path,
                        const std::string& lbl_path, const PointCloud& cloud) {
  cloud.validate();
  if (!cloud.labeled() || cloud.size() == 0)
    throw DataError("frame must be non-empty and labeled: " + bin_path);
  std::vector<float> payload;
  payload.reserve(cloud.size() * 4);
  for (const auto& p : cloud.points) {
    payload.push_back(static_cast<float>(p.x));
    payload.push_back(static_cast<float>(p.y));
    payload.push_back(static_cast<float>(p.z));
    payload.push_back(static_cast<float>(p.intensity));
  }
  std::string buf;
  buf.append(kFrameMagic, sizeof(kFrameMagic));
  bytes::append_raw(buf, kFormatVersion);
  bytes::append_raw(buf, static_cast<uint32_t>(cloud.size()));
  bytes::append_raw(
      buf, fnv1a64(payload.data(), payload.size() * sizeof(float)));
  buf.append(reinterpret_cast<const char*>(payload.data()),
             payload.size() * sizeof(float));
  bytes::write_file(bin_path, buf);

  std::string lbl;
  for (uint16_t code : cloud.labels) bytes::append_raw(lbl, code);
  bytes::write_file(lbl_path, lbl);
}

inline PointCloud read_frame(const std::string& bin_path,
                             const std::string& lbl_path, int frame_index) {
  const std::string buf = bytes::read_file(bin_path);
  if (buf.size() < kFrameHeaderBytes)
    throw DataError("truncated header: " + bin_path);
  if (std::memcmp(buf.data(), kFrameMagic, sizeof(kFrameMagic)) != 0)
    throw DataError("bad magic: " + bin_path);
  size_t off = sizeof(kFrameMagic);
  const auto version = bytes::read_raw<uint8_t>(buf, off);
  if (version != kFormatVersion)
    throw DataError("unsupported format version " + std::to_string(version) +
                    ": " + bin_path);
  const auto count = bytes::read_raw<uint32_t>(buf, off);
  const auto stored = bytes::read_raw<uint64_t>(buf, off);
  const size_t payload = buf.size() - kFrameHeaderBytes;
  if (payload % kPointRecordBytes != 0)
    throw DataError("payload is not a whole number of point records: " +
                    bin_path);
  if (payload / kPointRecordBytes != count)
    throw DataError("point count mismatch: " + bin_path);
  if (stored != fnv1a64(buf.data() + off, payload))
    throw DataError("payload checksum mismatch: " + bin_path);

  const std::string lbl = bytes::read_file(lbl_path);
  if (lbl.size() % sizeof(uint16_t) != 0)
    throw DataError("label file is not a whole number of records: " + lbl_path);
  if (lbl.size() / sizeof(uint16_t) != count)
    throw DataError("label count does not match point count: " + lbl_path);

  PointCloud cloud;
  cloud.frame_index = frame_index;
  cloud.points.resize(count);
  cloud.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    float xyzb[4];
    std::memcpy(xyzb, buf.data() + off + i * kPointRecordBytes,
                kPointRecordBytes);
    cloud.points[i] = {xyzb[0], xyzb[1], xyzb[2], xyzb[3]};
    std::memcpy(&cloud.labels[i], lbl.data() + i * sizeof(uint16_t),
                sizeof(uint16_t));
  }
  cloud.validate();
  return cloud;
}

inline std::string frame_bin_path(const std::string& seq_dir, int i) {
  return seq_dir + "/frame_" + std::to_string(i) + ".bin";
}
inline std::string frame_lbl_path(const std::string& seq_dir, int i) {
  return seq_dir + "/frame_" + std::to_string(i) + ".lbl";
}

inline SequenceManifest write_sequence(const std::vector<PointCloud>& frames,
                                       const std::vector<Pose>& poses,
                                       const ClassTaxonomy& tax,
                                       const std::string& seq_dir) {
  if (frames.empty()) throw DataError("sequence has no frames");
  if (frames.size() != poses.size())
    throw ShapeError("frame and pose counts differ");
  for (const auto& f : frames)
    for (uint16_t code : f.labels) decompose_label(code, tax);
  std::filesystem::create_directories(seq_dir);
  for (size_t i = 0; i < frames.size(); ++i)
    write_frame(frame_bin_path(seq_dir, static_cast<int>(i)),
                frame_lbl_path(seq_dir, static_cast<int>(i)), frames[i]);
  write_poses(seq_dir + "/poses.txt", poses);
  SequenceManifest m;
  m.sequence_ids = {std::filesystem::path(seq_dir).filename().string()};
  m.frame_counts = {static_cast<int>(frames.size())};
  m.taxonomy_hash = tax.hash();
  return m;
}

// k consecutive frames ending at target_index, target last.
inline std::pair<std::vector<PointCloud>, std::vector<Pose>> read_sequence(
    const std::string& seq_dir, int k, int target_index) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (target_index < k - 1)
    throw ConfigError("target index " + std::to_string(target_index) +
                      " leaves no room for " + std::to_string(k) + " frames");
  const auto all_poses = read_poses(seq_dir + "/poses.txt");
  if (target_index >= static_cast<int>(all_poses.size()))
    throw DataError("target index beyond pose count in " + seq_dir);
  std::vector<PointCloud> frames;
  std::vector<Pose> poses;
  frames.reserve(k);
  poses.reserve(k);
  for (int i = target_index - k + 1; i <= target_index; ++i) {
    frames.push_back(
        read_frame(frame_bin_path(seq_dir, i), frame_lbl_path(seq_dir, i), i));
    poses.push_back(all_poses[i]);
  }
  return {std::move(frames), std::move(poses)};
}

inline void write_taxonomy_file(const std::string& root,
                                const ClassTaxonomy& tax) {
  std::filesystem::create_directories(root);
  bytes::write_file(root + "/taxonomy.txt", tax.to_text());
}

inline ClassTaxonomy read_taxonomy_file(const std::string& root) {
  return ClassTaxonomy::from_text(
      bytes::read_file(root + "/taxonomy.txt"));
}

inline int sequence_frame_count(const std::string& seq_dir) {
  int n = 0;
  while (std::filesystem::exists(frame_bin_path(seq_dir, n))) ++n;
  return n;
}

// Sequence directory names sorted by numeric id.
inline std::vector<std::string> list_sequences(const std::string& root) {
  std::vector<std::pair<long, std::string>> found;
  if (!std::filesystem::is_directory(root))
    throw DataError("dataset root is not a directory: " + root);
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("seq_", 0) != 0) continue;
    try {
      found.emplace_back(std::stol(name.substr(4)), name);
    } catch (const std::exception&) {
      throw DataError("malformed sequence directory name: " + name);
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<std::string> names;
  names.reserve(found.size());
  for (auto& [id, name] : found) names.push_back(std::move(name));
  return names;
}

inline SequenceManifest scan_dataset(const std::string& root) {
  SequenceManifest m;
  m.taxonomy_hash = read_taxonomy_file(root).hash();
  for (const auto& name : list_sequences(root)) {
    const std::string seq_dir = root + "/" + name;
    const int frames = sequence_frame_count(seq_dir);
    if (frames == 0) throw DataError("sequence has no frames: " + seq_dir);
    for (int i = 0; i < frames; ++i)
      if (!std::filesystem::exists(frame_lbl_path(seq_dir, i)))
        throw DataError("missing label file for frame " + std::to_string(i) +
                        " in " + seq_dir);
    if (static_cast<int>(read_poses(seq_dir + "/poses.txt").size()) != frames)
      throw DataError("pose count does not match frame count in " + seq_dir);
    m.sequence_ids.push_back(name);
    m.frame_counts.push_back(frames);
  }
  if (m.sequence_ids.empty())
    throw DataError("dataset has no sequences: " + root);
  return m;
}

}  // namespace marseg::io
