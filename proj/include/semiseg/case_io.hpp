#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "semiseg/volumes.hpp"

namespace semiseg {

static_assert(std::endian::native == std::endian::little, "raw case format is little-endian");

/// Raised for missing or malformed case files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

// On-disk layout for a case with stem S:
//   S.raw / S.json              float32 intensities + sidecar
//   S_label.raw / S_label.json  uint8 class indices + sidecar (labeled cases only)
// Sidecar: {"shape":[d,h,w], "spacing":[sz,sy,sx], "origin":[...], "dtype":"float32"|"uint8", ...}

namespace detail {

inline fs::path stem_of(const fs::path& path) {
  fs::path p = path;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  return p;
}

template <class T>
void write_raw(const fs::path& file, std::span<const T> values) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw DataError("cannot write " + file.string());
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (!os) throw DataError("write failed for " + file.string());
}

template <class T>
AlignedVector<T> read_raw(const fs::path& file, std::size_t count) {
  std::ifstream is(file, std::ios::binary | std::ios::ate);
  if (!is) throw DataError("missing file " + file.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != count * sizeof(T)) {
    throw DataError(file.string() + ": expected " + std::to_string(count * sizeof(T)) + " bytes, found " +
                    std::to_string(bytes));
  }
  is.seekg(0);
  AlignedVector<T> values(count);
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  return values;
}

inline nlohmann::json read_json(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("missing file " + file.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& file, const nlohmann::json& j) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write " + file.string());
  os << j.dump(2) << "\n";
}

inline Extent3 read_shape(const nlohmann::json& j, const fs::path& file) {
  if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 3)
    throw DataError(file.string() + ": sidecar needs a 3-element \"shape\"");
  Extent3 e{j["shape"][0].get<int>(), j["shape"][1].get<int>(), j["shape"][2].get<int>()};
  if (e.d < 1 || e.h < 1 || e.w < 1) throw DataError(file.string() + ": shape extents must be >= 1");
  return e;
}

inline Vec3 read_vec3(const nlohmann::json& j, const char* key, Vec3 fallback) {
  if (!j.contains(key)) return fallback;
  return {j[key][0].get<double>(), j[key][1].get<double>(), j[key][2].get<double>()};
}

}  // namespace detail

inline fs::path label_stem(const fs::path& stem) { return stem.parent_path() / (stem.filename().string() + "_label"); }

/// Writes `c` under `dir` using its id as the stem. Returns the stem path.
inline fs::path save_case(const fs::path& dir, const Case& c) {
  c.validate();
  fs::create_directories(dir);
  const fs::path stem = dir / c.id;
  const Extent3 e = c.volume.extent();
  nlohmann::json meta = {{"id", c.id},
                         {"shape", {e.d, e.h, e.w}},
                         {"spacing", c.volume.spacing},
                         {"origin", c.volume.origin},
                         {"dtype", "float32"}};
  detail::write_raw<float>(fs::path(stem.string() + ".raw"), c.volume.data.values());
  detail::write_json(fs::path(stem.string() + ".json"), meta);
  if (c.label) {
    nlohmann::json lmeta = meta;
    lmeta["dtype"] = "uint8";
    lmeta["num_classes"] = c.label->num_classes;
    const fs::path ls = label_stem(stem);
    detail::write_raw<std::uint8_t>(fs::path(ls.string() + ".raw"), c.label->data.values());
    detail::write_json(fs::path(ls.string() + ".json"), lmeta);
  }
  return stem;
}

/// Writes a label grid alone (e.g. a prediction) with the given spacing.
inline fs::path save_label(const fs::path& dir, const std::string& id, const SegLabel& label, const Vec3& spacing) {
  label.validate();
  fs::create_directories(dir);
  const fs::path stem = dir / id;
  const Extent3 e = label.extent();
  nlohmann::json meta = {{"id", id},
                         {"shape", {e.d, e.h, e.w}},
                         {"spacing", spacing},
                         {"dtype", "uint8"},
                         {"num_classes", label.num_classes}};
  detail::write_raw<std::uint8_t>(fs::path(stem.string() + ".raw"), label.data.values());
  detail::write_json(fs::path(stem.string() + ".json"), meta);
  return stem;
}

inline SegLabel load_label_file(const fs::path& path, Vec3* spacing_out = nullptr) {
  const fs::path stem = detail::stem_of(path);
  const fs::path json_file(stem.string() + ".json");
  const nlohmann::json meta = detail::read_json(json_file);
  const Extent3 e = detail::read_shape(meta, json_file);
  if (meta.value("dtype", std::string("uint8")) != "uint8") throw DataError(json_file.string() + ": label dtype must be uint8");
  const int classes = meta.value("num_classes", 0);
  if (classes < 2) throw DataError(json_file.string() + ": label sidecar needs num_classes >= 2");
  auto values = detail::read_raw<std::uint8_t>(fs::path(stem.string() + ".raw"), e.voxels());
  if (spacing_out) *spacing_out = detail::read_vec3(meta, "spacing", {1.0, 1.0, 1.0});
  try {
    return SegLabel(Tensor<std::uint8_t>(1, e, std::move(values)), classes);
  } catch (const std::invalid_argument& ex) {
    throw DataError(stem.string() + ": " + ex.what());
  }
}

/// Loads a case from `path` (stem, .raw or .json). A sibling S_label file, when present, makes it labeled.
inline Case load_case(const fs::path& path) {
  const fs::path stem = detail::stem_of(path);
  const fs::path json_file(stem.string() + ".json");
  const nlohmann::json meta = detail::read_json(json_file);
  const Extent3 e = detail::read_shape(meta, json_file);
  if (meta.value("dtype", std::string("float32")) != "float32")
    throw DataError(json_file.string() + ": volume dtype must be float32");
  const Vec3 spacing = detail::read_vec3(meta, "spacing", {1.0, 1.0, 1.0});
  for (double s : spacing)
    if (!(s > 0.0)) throw DataError(json_file.string() + ": spacing must be positive");
  auto values = detail::read_raw<float>(fs::path(stem.string() + ".raw"), e.voxels());

  Case c;
  c.id = meta.value("id", stem.filename().string());
  try {
    c.volume = Volume(Tensor<float>(1, e, std::move(values)), spacing, detail::read_vec3(meta, "origin", {0, 0, 0}));
  } catch (const std::invalid_argument& ex) {
    throw DataError(stem.string() + ": " + ex.what());
  }
  const fs::path ls = label_stem(stem);
  if (fs::exists(fs::path(ls.string() + ".json"))) {
    c.label = load_label_file(ls);
    if (c.label->extent() != e) {
      throw DataError("case '" + c.id + "': label shape " + c.label->extent().str() + " does not match volume shape " +
                      e.str());
    }
  }
  return c;
}

/// Every case stem in `dir` (volume sidecars, excluding *_label), sorted by name.
inline std::vector<fs::path> list_cases(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path p = entry.path();
    if (p.extension() != ".json") continue;
    const std::string name = p.stem().string();
    if (name.size() >= 6 && name.ends_with("_label")) continue;
    if (!fs::exists(fs::path(p).replace_extension(".raw"))) continue;
    stems.push_back(fs::path(p).replace_extension());
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

}  // namespace semiseg
