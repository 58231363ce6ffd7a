// Generates the bundled toy dataset under a target directory.
//
//   make_fixtures OUTDIR
//
// Deterministic: 40 manifest rows (groups cycling 0-2 / 3-6 / 7-9, all
// gender f), the first 24 with 64x64 PNG images paired into 12 subjects,
// all 40 with 81-point landmark CSVs.  The landmark surplus exists so the
// set clears the >= 33-sample minimum for fitting the 32-component PCA.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "dlat/dataset_io.hpp"
#include "dlat/oracles.hpp"

using namespace dlat;

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: make_fixtures OUTDIR\n");
    return 2;
  }
  namespace fs = std::filesystem;
  const fs::path out(argv[1]);
  fs::create_directories(out / "images");
  fs::create_directories(out / "landmarks");

  constexpr int kSide = 64;
  constexpr int kItems = 40;
  constexpr int kWithImages = 24;
  Rng rng(20260826ull);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.2);

  std::ofstream manifest(out / "manifest.csv");
  manifest << "id,image,landmarks,group,gender,subject\n";

  const LandmarkSet tmpl = landmark_template(kSide);
  for (int i = 0; i < kItems; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "f%03d", i);
    const AgeGroup group = trainable_groups()[static_cast<size_t>(i % 3)];

    std::string image_cell;
    if (i < kWithImages) {
      FaceImage img{Tensor({3, kSide, kSide}), group, Gender::female};
      for (int c = 0; c < 3; ++c) {
        const double fx = 1.0 + 3.0 * unit(rng), fy = 1.0 + 3.0 * unit(rng);
        const double phase = 6.28318530717958647 * unit(rng);
        for (int y = 0; y < kSide; ++y)
          for (int x = 0; x < kSide; ++x)
            img.pixels[(c * kSide + y) * kSide + x] =
                0.8 * std::sin(6.28318530717958647 * (fx * x + fy * y) / kSide + phase);
      }
      image_cell = "images/" + std::string(id) + ".png";
      write_png((out / image_cell).string(), img);
    }

    LandmarkSet l{tmpl.points, group};
    for (int64_t j = 0; j < l.points.numel(); ++j) {
      double v = l.points[j] + jitter(rng) + 0.5 * group.index;
      l.points[j] = std::min(std::max(v, 1.0), kSide - 1.0);
    }
    const std::string lmk_cell = "landmarks/" + std::string(id) + ".csv";
    write_landmarks_csv((out / lmk_cell).string(), l);

    char subject[16];
    std::snprintf(subject, sizeof subject, "s%02d", i / 2);
    manifest << id << "," << image_cell << "," << lmk_cell << ","
             << group.bounds_str() << ",f"
             << "," << (i < kWithImages ? subject : "") << "\n";
  }
  return 0;
}
