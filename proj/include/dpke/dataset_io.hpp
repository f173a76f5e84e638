#pragma once

// JSON-lines dataset files and JSON split files.
//
//   {"id": "...", "points": [[x,y,z], ...], "boxes": [{"cls": c, "c": [x,y,z], "s": [sx,sy,sz]}]}
//
// Reals are written with 17 significant digits so a write/read cycle is exact.

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/synthdata.hpp"

namespace dpke {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : std::runtime_error(where + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace detail {

inline void write_vec3(std::ostream& os, const Point3& p) {
  os << '[' << format_real(p.x()) << ',' << format_real(p.y()) << ',' << format_real(p.z()) << ']';
}

inline void write_json_string(std::ostream& os, const std::string& s) {
  os << nlohmann::json(s).dump();
}

inline Point3 read_vec3(const nlohmann::json& j, const char* field) {
  if (!j.is_array() || j.size() != 3)
    throw std::runtime_error(std::string("field '") + field + "' must be a 3-element array");
  Point3 p;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number())
      throw std::runtime_error(std::string("field '") + field + "' holds a non-number");
    p[a] = j[a].get<double>();
  }
  return p;
}

}  // namespace detail

/// One JSON object per line. `extra_class` adds a top-level "cls" field (used
/// when exporting proposal-bank instances).
inline void write_scene_line(std::ostream& os, const Scene& scene, int extra_class = -1) {
  os << "{\"id\":";
  detail::write_json_string(os, scene.id);
  if (extra_class >= 0) os << ",\"cls\":" << extra_class;
  os << ",\"points\":[";
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    if (i) os << ',';
    detail::write_vec3(os, scene.points[i]);
  }
  os << "],\"boxes\":[";
  for (std::size_t i = 0; i < scene.annotations.size(); ++i) {
    if (i) os << ',';
    const auto& a = scene.annotations[i];
    os << "{\"cls\":" << a.class_id << ",\"c\":";
    detail::write_vec3(os, a.box.center);
    os << ",\"s\":";
    detail::write_vec3(os, a.box.size);
    os << '}';
  }
  os << "]}\n";
}

inline Scene parse_scene_line(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  if (!j.is_object()) throw std::runtime_error("record is not a JSON object");
  Scene scene;
  if (!j.contains("id") || !j["id"].is_string()) throw std::runtime_error("missing string 'id'");
  scene.id = j["id"].get<std::string>();
  if (!j.contains("points") || !j["points"].is_array())
    throw std::runtime_error("missing array 'points'");
  scene.points.reserve(j["points"].size());
  for (const auto& p : j["points"]) scene.points.push_back(detail::read_vec3(p, "points"));
  if (j.contains("boxes")) {
    if (!j["boxes"].is_array()) throw std::runtime_error("'boxes' must be an array");
    for (const auto& b : j["boxes"]) {
      if (!b.is_object() || !b.contains("cls") || !b["cls"].is_number_integer())
        throw std::runtime_error("box without integer 'cls'");
      Annotation a;
      a.class_id = b["cls"].get<int>();
      a.box.center = detail::read_vec3(b.at("c"), "c");
      a.box.size = detail::read_vec3(b.at("s"), "s");
      if (!a.box.valid()) throw std::runtime_error("box with non-positive size");
      scene.annotations.push_back(a);
    }
  }
  return scene;
}

inline void write_dataset(std::ostream& os, const std::vector<Scene>& scenes) {
  for (const auto& s : scenes) write_scene_line(os, s);
}

inline void write_dataset(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(os, scenes);
  if (!os) throw std::runtime_error("write failed: " + path);
}

/// Reads every record; a malformed or truncated record raises ParseError with
/// its 1-based line number.
inline std::vector<Scene> read_dataset(std::istream& is, const std::string& where = "<stream>") {
  std::vector<Scene> scenes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      scenes.push_back(parse_scene_line(line));
    } catch (const std::exception& e) {
      throw ParseError(where, line_no, e.what());
    }
  }
  return scenes;
}

inline std::vector<Scene> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path);
  return read_dataset(is, path);
}

inline void write_split(std::ostream& os, const DatasetSplit& split) {
  os << "{\"ratio\":" << format_real(split.ratio) << ",\"labeled\":[";
  for (std::size_t i = 0; i < split.labeled_ids.size(); ++i) {
    if (i) os << ',';
    detail::write_json_string(os, split.labeled_ids[i]);
  }
  os << "],\"unlabeled\":[";
  for (std::size_t i = 0; i < split.unlabeled_ids.size(); ++i) {
    if (i) os << ',';
    detail::write_json_string(os, split.unlabeled_ids[i]);
  }
  os << "]}\n";
}

inline void write_split(const std::string& path, const DatasetSplit& split) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_split(os, split);
}

inline DatasetSplit read_split(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open split " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  DatasetSplit split;
  try {
    const auto j = nlohmann::json::parse(ss.str());
    split.ratio = j.at("ratio").get<double>();
    split.labeled_ids = j.at("labeled").get<std::vector<std::string>>();
    split.unlabeled_ids = j.at("unlabeled").get<std::vector<std::string>>();
  } catch (const std::exception& e) {
    throw ParseError(path, 1, e.what());
  }
  return split;
}

}  // namespace dpke
