#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dlat/dataset_io.hpp"
#include "dlat/datamodel.hpp"

using namespace dlat;
namespace fs = std::filesystem;

namespace {
std::string data_dir() {
  const char* d = std::getenv("DLAT_DATA_DIR");
  REQUIRE(d != nullptr);
  return d;
}
fs::path tmp_dir() {
  fs::path p = fs::temp_directory_path() / "dlat_test_datamodel";
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("age taxonomy: ten ordered non-overlapping groups covering 0 to 70+") {
  REQUIRE(AgeGroup::kCount == 10);
  const char* bounds[] = {"0-2",   "3-6",   "7-9",   "10-14", "15-19",
                          "20-29", "30-39", "40-49", "50-69", "70+"};
  int prev_upper = -1;
  for (int i = 0; i < 10; ++i) {
    AgeGroup g{i};
    CHECK(g.bounds_str() == bounds[i]);
    CHECK(g.lower() == prev_upper + 1);
    prev_upper = g.upper();
  }
  CHECK(AgeGroup{0}.lower() == 0);
  CHECK(AgeGroup{9}.bounds_str() == "70+");
}

TEST_CASE("group_of maps ages to the paper's letters") {
  CHECK(group_of(1).label() == 'A');
  CHECK(group_of(35).label() == 'G');
  CHECK(group_of(70).label() == 'J');
  CHECK(group_of(120).label() == 'J');
}

TEST_CASE("trainable groups are the six of Fig. 1") {
  const auto& tg = trainable_groups();
  REQUIRE(tg.size() == 6);
  const char* bounds[] = {"0-2", "3-6", "7-9", "15-19", "30-39", "50-69"};
  for (size_t i = 0; i < 6; ++i) CHECK(tg[i].bounds_str() == bounds[i]);
}

TEST_CASE("noise sampling is deterministic and standard normal") {
  Rng a(42), b(42);
  Tensor n1 = sample_noise(a), n2 = sample_noise(b);
  REQUIRE(n1.numel() == kNoiseDim);
  for (int64_t i = 0; i < n1.numel(); ++i) CHECK(n1[i] == n2[i]);

  Rng r(7);
  const int64_t n = 100000;
  std::vector<double> mean(static_cast<size_t>(kNoiseDim), 0.0);
  std::vector<double> var(static_cast<size_t>(kNoiseDim), 0.0);
  for (int64_t s = 0; s < n; ++s) {
    Tensor z = sample_noise(r);
    for (int64_t i = 0; i < kNoiseDim; ++i) {
      mean[static_cast<size_t>(i)] += z[i];
      var[static_cast<size_t>(i)] += z[i] * z[i];
    }
  }
  for (int64_t i = 0; i < kNoiseDim; ++i) {
    const double m = mean[static_cast<size_t>(i)] / static_cast<double>(n);
    const double v = var[static_cast<size_t>(i)] / static_cast<double>(n) - m * m;
    CHECK(std::abs(m) < 0.02);
    CHECK(std::abs(v - 1.0) < 0.05);
  }
}

TEST_CASE("default hyper-parameters round-trip through config serialization") {
  HyperParams hp;
  Config c = Config::from_hyper_params(hp);
  std::ostringstream os;
  c.save(os);
  std::istringstream is(os.str());
  HyperParams back = Config::parse(is).hyper_params();
  for (int i = 0; i < 13; ++i)
    CHECK(back.lambda[static_cast<size_t>(i)] == hp.lambda[static_cast<size_t>(i)]);
  CHECK(back.lr == hp.lr);
  CHECK(back.decay_epochs == hp.decay_epochs);
  CHECK(back.decay_factor == hp.decay_factor);
  CHECK(back.epochs == hp.epochs);
  CHECK(back.batch == hp.batch);
}

TEST_CASE("lr schedule decays by 0.1 at epochs 50 and 100") {
  HyperParams hp;
  CHECK(hp.lr_at_epoch(0) == Catch::Approx(0.001));
  CHECK(hp.lr_at_epoch(51) == Catch::Approx(0.0001));
  CHECK(hp.lr_at_epoch(101) == Catch::Approx(0.00001));
}

TEST_CASE("bundled similarity table validates and spot-matches the source") {
  SimilarityTable t = SimilarityTable::load_csv(data_dir() + "/similarity_table.csv");
  t.validate(true);
  CHECK(t.at(AgeGroup{0}, AgeGroup{1}) == Catch::Approx(80.24).margin(1e-12));
  CHECK(t.at(AgeGroup{8}, AgeGroup{9}) == Catch::Approx(84.17).margin(1e-12));
  CHECK(t.at(AgeGroup{0}, AgeGroup{2}) == Catch::Approx(71.55).margin(1e-12));
}

TEST_CASE("similarity table rejects asymmetry and broken monotonicity") {
  SimilarityTable t = SimilarityTable::load_csv(data_dir() + "/similarity_table.csv");
  SimilarityTable bad = t;
  bad.values[0 * 10 + 5] += 0.5;
  CHECK_THROWS_AS(bad.validate(true), DomainError);
  SimilarityTable hump = t;
  hump.values[0 * 10 + 9] = hump.values[0 * 10 + 8] + 1.0;
  hump.values[9 * 10 + 0] = hump.values[0 * 10 + 9];
  CHECK_THROWS_AS(hump.validate(true), DomainError);
  hump.validate(false);  // symmetry still fine
}

TEST_CASE("similarity table CSV round-trips including NA cells") {
  SimilarityTable t;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) t.set(AgeGroup{i}, AgeGroup{j}, i == j ? 100.0 : 50.0);
  t.set_invalid(AgeGroup{3}, AgeGroup{7});
  const std::string path = (tmp_dir() / "table.csv").string();
  t.save_csv(path);
  SimilarityTable back = SimilarityTable::load_csv(path);
  CHECK_FALSE(back.is_valid(AgeGroup{3}, AgeGroup{7}));
  CHECK(back.is_valid(AgeGroup{7}, AgeGroup{3}));
  CHECK(back.at(AgeGroup{2}, AgeGroup{4}) == Catch::Approx(50.0));
}

TEST_CASE("landmark CSV round-trips at full precision within 2 decimals") {
  Rng r(3);
  LandmarkSet l{random_normal({kLandmarkCount, 2}, r), std::nullopt};
  const std::string path = (tmp_dir() / "lmk.csv").string();
  write_landmarks_csv(path, l);
  LandmarkSet back = read_landmarks_csv(path);
  for (int64_t i = 0; i < l.points.numel(); ++i)
    CHECK(back.points[i] == Catch::Approx(l.points[i]).margin(1e-15));
  std::ofstream bad(tmp_dir() / "bad.csv");
  bad << "1,2\n3,4\n";
  bad.close();
  CHECK_THROWS_AS(read_landmarks_csv((tmp_dir() / "bad.csv").string()), IoError);
}

TEST_CASE("manifest parsing resolves paths and optional columns") {
  fs::path dir = tmp_dir() / "ds";
  fs::create_directories(dir);
  std::ofstream m(dir / "manifest.csv");
  m << "id,image,landmarks,group,gender,subject\n";
  m << "a,img/a.png,lmk/a.csv,0-2,f,s0\n";
  m << "b,,lmk/b.csv,70+,f,\n";
  m.close();
  auto items = read_manifest((dir / "manifest.csv").string());
  REQUIRE(items.size() == 2);
  CHECK(items[0].image_path == (dir / "img/a.png").string());
  CHECK(items[0].group->bounds_str() == "0-2");
  CHECK(items[0].subject == "s0");
  CHECK(items[1].image_path.empty());
  CHECK(items[1].group->bounds_str() == "70+");
}

TEST_CASE("face image and landmark contracts") {
  FaceImage img{Tensor({3, 64, 64}), std::nullopt, std::nullopt};
  img.check();
  FaceImage bad{Tensor({3, 48, 48}), std::nullopt, std::nullopt};
  CHECK_THROWS_AS(bad.check(), DomainError);
  LandmarkSet l{Tensor({kLandmarkCount, 2}), std::nullopt};
  l.check();
  CHECK(l.flat().numel() == kLandmarkVecDim);
  CHECK(LandmarkSet::from_flat(l.flat()).points.shape == l.points.shape);
}
