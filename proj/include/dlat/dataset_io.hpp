#pragma once

// Landmark CSV files (81 rows of "x,y") and dataset manifests.
//
// A dataset directory contains a `manifest.csv` whose header names the
// columns; recognized columns are `id`, `image`, `landmarks`, `group`,
// `gender`, and `subject`.  `image` and `landmarks` are paths relative to
// the manifest's directory; `group` uses the bound syntax ("0-2").

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/image_io.hpp"

namespace dlat {

inline void write_landmarks_csv(const std::string& path, const LandmarkSet& l) {
  l.check();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open landmark file for writing: " + path);
  out.precision(17);
  for (int i = 0; i < kLandmarkCount; ++i)
    out << l.points.mat(kLandmarkCount, 2)(i, 0) << ","
        << l.points.mat(kLandmarkCount, 2)(i, 1) << "\n";
  if (!out) throw IoError("failed writing landmark file: " + path);
}

inline LandmarkSet read_landmarks_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open landmark file: " + path);
  LandmarkSet l{Tensor({kLandmarkCount, 2}), std::nullopt};
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    if (row >= kLandmarkCount)
      throw IoError("landmark file has more than 81 rows: " + path);
    std::istringstream ss(line);
    std::string xs, ys;
    if (!std::getline(ss, xs, ',') || !std::getline(ss, ys, ','))
      throw IoError("landmark file row " + std::to_string(row + 1) +
                    " is not \"x,y\": " + path);
    try {
      l.points.mat(kLandmarkCount, 2)(row, 0) = std::stod(xs);
      l.points.mat(kLandmarkCount, 2)(row, 1) = std::stod(ys);
    } catch (const std::exception&) {
      throw IoError("landmark file row " + std::to_string(row + 1) +
                    " has a non-numeric cell: " + path);
    }
    ++row;
  }
  if (row != kLandmarkCount)
    throw IoError("landmark file has " + std::to_string(row) +
                  " rows, expected 81: " + path);
  return l;
}

// One manifest row; paths are already resolved against the manifest dir.
struct DatasetItem {
  std::string id;
  std::string image_path;      // empty when the manifest has no image column
  std::string landmarks_path;  // empty when absent
  std::optional<AgeGroup> group;
  std::optional<Gender> gender;
  std::string subject;  // empty when absent
};

inline std::vector<DatasetItem> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  std::string line;
  if (!std::getline(in, line)) throw IoError("manifest is empty: " + path);
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::istringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      cells.push_back(cell);
    }
    return cells;
  };
  const std::vector<std::string> header = split(line);
  auto col = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int c_id = col("id"), c_img = col("image"), c_lmk = col("landmarks");
  const int c_grp = col("group"), c_gen = col("gender"), c_sub = col("subject");
  if (c_id < 0) throw IoError("manifest missing required column \"id\": " + path);

  std::vector<DatasetItem> items;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split(line);
    auto cell = [&](int c) -> std::string {
      return (c >= 0 && c < static_cast<int>(cells.size())) ? cells[static_cast<size_t>(c)]
                                                            : std::string();
    };
    DatasetItem it;
    it.id = cell(c_id);
    if (it.id.empty())
      throw IoError("manifest row " + std::to_string(row) + " has an empty id: " + path);
    if (!cell(c_img).empty()) it.image_path = (dir / cell(c_img)).string();
    if (!cell(c_lmk).empty()) it.landmarks_path = (dir / cell(c_lmk)).string();
    if (!cell(c_grp).empty()) it.group = group_from_bounds(cell(c_grp));
    if (!cell(c_gen).empty()) it.gender = gender_from_string(cell(c_gen));
    it.subject = cell(c_sub);
    items.push_back(std::move(it));
  }
  if (items.empty()) throw IoError("manifest has no data rows: " + path);
  return items;
}

// Loads the images of a manifest-described dataset, filtered by gender when
// one is requested.  Every loaded image carries its group label.
inline std::vector<FaceImage> load_image_dataset(const std::string& dir,
                                                 std::optional<Gender> gender) {
  const auto items = read_manifest((std::filesystem::path(dir) / "manifest.csv").string());
  std::vector<FaceImage> images;
  for (const auto& it : items) {
    if (gender && it.gender && *it.gender != *gender) continue;
    if (it.image_path.empty()) continue;  // landmark-only row
    FaceImage img = read_png(it.image_path);
    img.group = it.group;
    img.gender = it.gender;
    img.check();
    images.push_back(std::move(img));
  }
  if (images.empty()) throw IoError("dataset has no images after filtering: " + dir);
  return images;
}

// Loads landmark sets the same way (used by fit-pca and train --net lmk).
// `dir` may hold either a manifest.csv or bare landmark CSVs; with a
// manifest, gender filtering applies and groups are attached.
inline std::vector<LandmarkSet> load_landmark_dataset(const std::string& dir,
                                                      std::optional<Gender> gender) {
  namespace fs = std::filesystem;
  const fs::path manifest = fs::path(dir) / "manifest.csv";
  std::vector<LandmarkSet> sets;
  if (fs::exists(manifest)) {
    for (const auto& it : read_manifest(manifest.string())) {
      if (gender && it.gender && *it.gender != *gender) continue;
      if (it.landmarks_path.empty()) continue;  // image-only row
      LandmarkSet l = read_landmarks_csv(it.landmarks_path);
      l.group = it.group;
      sets.push_back(std::move(l));
    }
  } else {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".csv") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) sets.push_back(read_landmarks_csv(f));
  }
  if (sets.empty()) throw IoError("no landmark files found in: " + dir);
  return sets;
}

}  // namespace dlat
