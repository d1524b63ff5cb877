// marseg - motion-aware multi-scan LiDAR semantic segmentation, desk scale
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "marseg/errors.hpp"
#include "marseg/hash.hpp"

namespace marseg::core {

struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;  // reflectance in [0, 1]

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z) &&
           std::isfinite(intensity);
  }
};

// Semantic class plus a binary moving/static state. Stored on disk and in
// confusion matrices as a single integer code (see compose_label).
struct CompositeLabel {
  int semantic_id = 0;
  bool moving = false;

  bool operator==(const CompositeLabel&) const = default;
};

struct ClassInfo {
  int id = 0;
  std::string name;
  bool movable = false;
};

// Dense class table with movability flags. Movability gates which classes may
// carry a moving label at all.
class ClassTaxonomy {
 public:
  explicit ClassTaxonomy(std::vector<ClassInfo> classes)
      : classes_(std::move(classes)) {
    if (classes_.empty()) throw ConfigError("taxonomy: no classes");
    int movable = 0;
    for (size_t i = 0; i < classes_.size(); ++i) {
      if (classes_[i].id != static_cast<int>(i))
        throw ConfigError("taxonomy: class ids must be dense 0..C-1");
      if (classes_[i].movable) ++movable;
    }
    if (movable == 0) throw ConfigError("taxonomy: needs a movable class");
    if (movable == static_cast<int>(classes_.size()))
      throw ConfigError("taxonomy: needs a non-movable class");
  }

  int size() const { return static_cast<int>(classes_.size()); }

  int movable_count() const {
    int n = 0;
    for (const auto& c : classes_)
      if (c.movable) ++n;
    return n;
  }

  // One code per static class, two per movable class.
  int num_codes() const { return size() + movable_count(); }

  bool movable(int class_id) const { return info(class_id).movable; }

  const ClassInfo& info(int class_id) const {
    if (class_id < 0 || class_id >= size())
      throw InvalidLabelError("class id " + std::to_string(class_id) +
                              " outside taxonomy of size " +
                              std::to_string(size()));
    return classes_[class_id];
  }

  // One class per line: "<id> <name> <movable 0|1>".
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& c : classes_)
      os << c.id << ' ' << c.name << ' ' << (c.movable ? 1 : 0) << '\n';
    return os.str();
  }

  static ClassTaxonomy from_text(const std::string& text) {
    std::vector<ClassInfo> classes;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      ClassInfo c;
      int movable_flag = -1;
      if (!(ls >> c.id >> c.name >> movable_flag) ||
          (movable_flag != 0 && movable_flag != 1))
        throw DataError("taxonomy: bad line '" + line + "'");
      c.movable = movable_flag == 1;
      classes.push_back(std::move(c));
    }
    try {
      return ClassTaxonomy(std::move(classes));
    } catch (const ConfigError& e) {
      throw DataError(std::string("taxonomy: ") + e.what());
    }
  }

  uint64_t hash() const { return fnv1a64(to_text()); }

 private:
  std::vector<ClassInfo> classes_;
};

// Code layout: static variant = semantic_id, moving variant = semantic_id + C.
// Keeps codes dense in [0, 2C) for confusion-matrix indexing.
inline int compose_label(int semantic_id, bool moving,
                         const ClassTaxonomy& tax) {
  const ClassInfo& info = tax.info(semantic_id);
  if (moving && !info.movable)
    throw InvalidLabelError("class '" + info.name +
                            "' is not movable, cannot carry a moving label");
  return semantic_id + (moving ? tax.size() : 0);
}

inline CompositeLabel decompose_label(int code, const ClassTaxonomy& tax) {
  const int c = tax.size();
  if (code < 0 || code >= 2 * c)
    throw InvalidLabelError("label code " + std::to_string(code) +
                            " outside [0, " + std::to_string(2 * c) + ")");
  CompositeLabel out;
  out.moving = code >= c;
  out.semantic_id = out.moving ? code - c : code;
  if (out.moving && !tax.movable(out.semantic_id))
    throw InvalidLabelError("label code " + std::to_string(code) +
                            " marks non-movable class '" +
                            tax.info(out.semantic_id).name + "' as moving");
  return out;
}

// One LiDAR frame. labels, when present, are composite codes parallel to
// points.
struct PointCloud {
  std::vector<Point> points;
  std::vector<uint16_t> labels;  // empty when unlabeled
  int frame_index = 0;

  size_t size() const { return points.size(); }
  bool labeled() const { return !labels.empty(); }

  void validate() const {
    if (labeled() && labels.size() != points.size())
      throw DataError("point cloud: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(points.size()) +
                      " points");
    for (const auto& p : points)
      if (!p.finite()) throw DataError("point cloud: non-finite point");
  }
};

}  // namespace marseg::core
