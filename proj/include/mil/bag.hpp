#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mil/error.hpp"
#include "mil/types.hpp"

namespace mil {

/// One bag: N instance feature vectors of width H plus identity metadata.
/// Features are 32-bit floats, matching the on-disk format.
struct FeatureBag {
  std::string bag_id;
  std::string patient_id;
  int label = 0;
  MatXf features;  // N x H, row per instance

  Eigen::Index instance_count() const { return features.rows(); }
  Eigen::Index feature_width() const { return features.cols(); }
};

struct ManifestEntry {
  std::string bag_id;
  std::string patient_id;
  int label = 0;
  std::string path;  // relative to the manifest file
};

struct DatasetManifest {
  int class_count = 0;
  int feature_width = 0;
  std::vector<ManifestEntry> entries;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<FeatureBag> bags;  // aligned with manifest.entries
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                                 static_cast<unsigned char>((v >> 16) & 0xff),
                                 static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

inline float read_f32(std::istream& is) {
  const std::uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kBagFormatVersion = 1;

/// Writes the bag feature matrix: "MILB", version u32, N u32, H u32, then
/// N*H little-endian f32 in row-major order. Identity metadata lives in the
/// manifest, not in the file.
inline void save_bag(const FeatureBag& bag, const std::filesystem::path& path) {
  if (bag.features.rows() < 1 || bag.features.cols() < 1)
    throw ValidationError("save_bag: bag must have N >= 1 and H >= 1");
  if (!bag.features.allFinite()) throw ValidationError("save_bag: non-finite feature values in '" + bag.bag_id + "'");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_bag: cannot open '" + path.string() + "' for writing");
  os.write("MILB", 4);
  detail::write_u32(os, kBagFormatVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(bag.features.rows()));
  detail::write_u32(os, static_cast<std::uint32_t>(bag.features.cols()));
  for (Eigen::Index r = 0; r < bag.features.rows(); ++r)
    for (Eigen::Index c = 0; c < bag.features.cols(); ++c) detail::write_f32(os, bag.features(r, c));
  if (!os) throw IoError("save_bag: write failed for '" + path.string() + "'");
}

/// Reads a bag file. bag_id defaults to the file stem; patient_id/label are
/// filled by the manifest-aware overload.
inline FeatureBag load_bag(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_bag: cannot open '" + path.string() + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MILB", 4) != 0)
    throw IoError("load_bag: bad magic bytes in '" + path.string() + "'");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kBagFormatVersion)
    throw IoError("load_bag: unsupported format version " + std::to_string(version));
  const std::uint32_t n = detail::read_u32(is);
  const std::uint32_t h = detail::read_u32(is);
  if (!is || n < 1 || h < 1) throw IoError("load_bag: invalid header in '" + path.string() + "'");
  FeatureBag bag;
  bag.bag_id = path.stem().string();
  bag.features.resize(n, h);
  for (std::uint32_t r = 0; r < n; ++r)
    for (std::uint32_t c = 0; c < h; ++c) bag.features(r, c) = detail::read_f32(is);
  if (!is)
    throw IoError("load_bag: truncated payload in '" + path.string() + "' (declared " + std::to_string(n) + "x" +
                  std::to_string(h) + ")");
  if (!bag.features.allFinite()) throw ValidationError("load_bag: non-finite feature values in '" + path.string() + "'");
  return bag;
}

inline FeatureBag load_bag(const std::filesystem::path& path, const ManifestEntry& entry) {
  FeatureBag bag = load_bag(path);
  bag.bag_id = entry.bag_id;
  bag.patient_id = entry.patient_id;
  bag.label = entry.label;
  return bag;
}

inline void validate_manifest(const DatasetManifest& m) {
  if (m.class_count < 2) throw ValidationError("manifest: class_count must be >= 2");
  if (m.feature_width < 1) throw ValidationError("manifest: feature_width must be >= 1");
  std::unordered_set<std::string> ids;
  for (const auto& e : m.entries) {
    if (!ids.insert(e.bag_id).second) throw ValidationError("manifest: duplicate bag_id '" + e.bag_id + "'");
    if (e.label < 0 || e.label >= m.class_count)
      throw ValidationError("manifest: label " + std::to_string(e.label) + " out of range for '" + e.bag_id + "'");
  }
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["class_count"] = m.class_count;
  j["feature_width"] = m.feature_width;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries)
    j["entries"].push_back({{"bag_id", e.bag_id}, {"patient_id", e.patient_id}, {"label", e.label}, {"path", e.path}});
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.class_count = j.at("class_count").get<int>();
  m.feature_width = j.at("feature_width").get<int>();
  for (const auto& je : j.at("entries")) {
    m.entries.push_back({je.at("bag_id").get<std::string>(), je.at("patient_id").get<std::string>(),
                         je.at("label").get<int>(), je.at("path").get<std::string>()});
  }
  validate_manifest(m);
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  validate_manifest(m);
  std::ofstream os(path);
  if (!os) throw IoError("save_manifest: cannot open '" + path.string() + "'");
  os << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_manifest: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_manifest: parse failure in '" + path.string() + "': " + e.what());
  }
  return manifest_from_json(j);
}

/// Loads the manifest and every referenced bag, checking declared H.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  ds.bags.reserve(ds.manifest.entries.size());
  for (const auto& e : ds.manifest.entries) {
    FeatureBag bag = load_bag(base / e.path, e);
    if (bag.feature_width() != ds.manifest.feature_width)
      throw ValidationError("load_dataset: bag '" + e.bag_id + "' has width " + std::to_string(bag.feature_width()) +
                            ", manifest declares " + std::to_string(ds.manifest.feature_width));
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

}  // namespace mil
