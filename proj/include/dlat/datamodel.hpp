#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dlat/tensor.hpp"

namespace dlat {

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Ill-conditioned or non-finite numeric situations (degenerate geometry,
// NaN/Inf aborts during training).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Inputs inside the domain but too degenerate to evaluate (e.g. zero-norm
// deviation vectors); callers may skip the affected term and report it.
struct DegenerateInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Age group taxonomy: ten ordered lifecycle bins A..J.

struct AgeGroup {
  int index = 0;  // 0..9
  char label() const { return static_cast<char>('A' + index); }
  int lower() const { return kBounds[index][0]; }
  // Upper bound in years; the last bin is open-ended (returns a large cap).
  int upper() const { return kBounds[index][1]; }
  std::string bounds_str() const {
    if (index == 9) return "70+";
    return std::to_string(lower()) + "-" + std::to_string(upper());
  }
  bool operator==(const AgeGroup&) const = default;

  static constexpr int kCount = 10;
  static constexpr std::array<std::array<int, 2>, 10> kBounds = {{{0, 2},
                                                                  {3, 6},
                                                                  {7, 9},
                                                                  {10, 14},
                                                                  {15, 19},
                                                                  {20, 29},
                                                                  {30, 39},
                                                                  {40, 49},
                                                                  {50, 69},
                                                                  {70, 120}}};
};

inline AgeGroup group_of(int age) {
  if (age < 0 || age > 120) throw DomainError("age out of range [0,120]: " + std::to_string(age));
  for (int i = 0; i < AgeGroup::kCount; ++i)
    if (age >= AgeGroup::kBounds[i][0] && age <= AgeGroup::kBounds[i][1]) return AgeGroup{i};
  throw DomainError("unreachable: age groups cover [0,120]");
}

inline std::optional<AgeGroup> group_from_label(char c) {
  if (c < 'A' || c > 'J') return std::nullopt;
  return AgeGroup{c - 'A'};
}

// Parses the bound syntax used on the command line and in manifests: "0-2",
// "50-69", "70+".
inline AgeGroup group_from_bounds(const std::string& s) {
  for (int i = 0; i < AgeGroup::kCount; ++i)
    if (AgeGroup{i}.bounds_str() == s) return AgeGroup{i};
  throw DomainError("unknown age group '" + s + "' (expected e.g. 0-2, 30-39, 70+)");
}

// The six bins with enough training data: 0-2, 3-6, 7-9, 15-19, 30-39, 50-69.
inline const std::vector<AgeGroup>& trainable_groups() {
  static const std::vector<AgeGroup> g = {AgeGroup{0}, AgeGroup{1}, AgeGroup{2},
                                          AgeGroup{4}, AgeGroup{6}, AgeGroup{8}};
  return g;
}

enum class Gender { male, female };

inline Gender gender_from_string(const std::string& s) {
  if (s == "m" || s == "male") return Gender::male;
  if (s == "f" || s == "female") return Gender::female;
  throw DomainError("unknown gender '" + s + "' (expected m or f)");
}

// ---------------------------------------------------------------------------
// Noise and latent codes

inline constexpr int kNoiseDim = 16;
inline constexpr int kImageCodeDim = 256;
inline constexpr int kLandmarkCodeDim = 64;
inline constexpr int kLandmarkCount = 81;
inline constexpr int kLandmarkVecDim = 2 * kLandmarkCount;
inline constexpr int kPcaDim = 32;

enum class Modality { image, landmark };

inline int code_dim(Modality m) { return m == Modality::image ? kImageCodeDim : kLandmarkCodeDim; }

// Standard-normal noise, length 16, deterministic given the rng state.
inline Tensor sample_noise(Rng& rng) { return random_normal({kNoiseDim}, rng); }

struct AgeLatentCode {
  Tensor values;
  Modality modality = Modality::image;
  AgeGroup group;

  void check() const {
    if (values.numel() != code_dim(modality))
      throw DomainError("age latent code has length " + std::to_string(values.numel()) +
                        ", expected " + std::to_string(code_dim(modality)));
  }
};

// ---------------------------------------------------------------------------
// Images and landmarks

struct FaceImage {
  Tensor pixels;  // [3, H, W], values in [-1, 1]
  std::optional<AgeGroup> group;
  std::optional<Gender> gender;

  int side() const { return static_cast<int>(pixels.dim(1)); }
  void check() const {
    if (pixels.rank() != 3 || pixels.dim(0) != 3 || pixels.dim(1) != pixels.dim(2))
      throw DomainError("face image must be [3,H,W] with H == W, got " + pixels.shape_str());
    const int s = side();
    if (s < 32 || (s & (s - 1)) != 0)
      throw DomainError("image side must be a power of two >= 32, got " + std::to_string(s));
  }
};

struct LandmarkSet {
  Tensor points;  // [81, 2] pixel coordinates
  std::optional<AgeGroup> group;

  void check() const {
    if (points.rank() != 2 || points.dim(0) != kLandmarkCount || points.dim(1) != 2)
      throw DomainError("landmark set must be [81,2], got " + points.shape_str());
  }
  Tensor flat() const { return Tensor({kLandmarkVecDim}, points.data); }
  static LandmarkSet from_flat(const Tensor& v) {
    if (v.numel() != kLandmarkVecDim) throw DomainError("landmark vector must have length 162");
    return LandmarkSet{Tensor({kLandmarkCount, 2}, v.data), std::nullopt};
  }
};

// ---------------------------------------------------------------------------
// Hyper-parameters

struct HyperParams {
  std::array<double, 13> lambda = {1, 0.6, 10, 10, 1, 1, 0.2, 35, 2, 50, 10, 1, 10};
  double lr = 0.001;
  std::array<int, 2> decay_epochs = {50, 100};
  double decay_factor = 0.1;
  int epochs = 300;
  int batch = 2;

  double lr_at_epoch(int epoch) const {
    double v = lr;
    if (epoch >= decay_epochs[0]) v *= decay_factor;
    if (epoch >= decay_epochs[1]) v *= decay_factor;
    return v;
  }
};

// ---------------------------------------------------------------------------
// Flat key-value config files: "key = value", '#' comments.

struct Config {
  std::map<std::string, std::string> kv;

  static Config parse(std::istream& in) {
    Config c;
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (!key.empty()) c.kv[key] = value;
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    return parse(in);
  }

  bool has(const std::string& k) const { return kv.count(k) > 0; }
  std::string str(const std::string& k, const std::string& dflt = "") const {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : it->second;
  }
  double num(const std::string& k, double dflt) const {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : std::stod(it->second);
  }
  int integer(const std::string& k, int dflt) const {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : std::stoi(it->second);
  }

  HyperParams hyper_params() const {
    HyperParams hp;
    for (int i = 0; i < 13; ++i)
      hp.lambda[static_cast<size_t>(i)] =
          num("lambda" + std::to_string(i + 1), hp.lambda[static_cast<size_t>(i)]);
    hp.lr = num("lr", hp.lr);
    hp.decay_epochs[0] = integer("decay_epoch1", hp.decay_epochs[0]);
    hp.decay_epochs[1] = integer("decay_epoch2", hp.decay_epochs[1]);
    hp.decay_factor = num("decay_factor", hp.decay_factor);
    hp.epochs = integer("epochs", hp.epochs);
    hp.batch = integer("batch", hp.batch);
    return hp;
  }

  static Config from_hyper_params(const HyperParams& hp) {
    Config c;
    auto put = [&](const std::string& k, double v) {
      std::ostringstream os;
      os << std::setprecision(17) << v;
      c.kv[k] = os.str();
    };
    for (int i = 0; i < 13; ++i) put("lambda" + std::to_string(i + 1), hp.lambda[static_cast<size_t>(i)]);
    put("lr", hp.lr);
    c.kv["decay_epoch1"] = std::to_string(hp.decay_epochs[0]);
    c.kv["decay_epoch2"] = std::to_string(hp.decay_epochs[1]);
    put("decay_factor", hp.decay_factor);
    c.kv["epochs"] = std::to_string(hp.epochs);
    c.kv["batch"] = std::to_string(hp.batch);
    return c;
  }

  void save(std::ostream& out) const {
    for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
  }
};

// ---------------------------------------------------------------------------
// Similarity table: 10x10 symmetric percent matrix, diagonal 100.

struct SimilarityTable {
  Tensor values{std::vector<int64_t>{10, 10}};  // percent
  // Cells with no supporting real pairs. Marked by build_similarity_table.
  std::array<std::array<bool, 10>, 10> valid{};

  SimilarityTable() {
    for (auto& row : valid) row.fill(true);
  }

  double at(AgeGroup a, AgeGroup b) const { return values[a.index * 10 + b.index]; }
  bool is_valid(AgeGroup a, AgeGroup b) const {
    return valid[static_cast<size_t>(a.index)][static_cast<size_t>(b.index)];
  }
  void set(AgeGroup a, AgeGroup b, double v) {
    values[a.index * 10 + b.index] = v;
    valid[static_cast<size_t>(a.index)][static_cast<size_t>(b.index)] = true;
  }
  void set_invalid(AgeGroup a, AgeGroup b) {
    values[a.index * 10 + b.index] = 0.0;
    valid[static_cast<size_t>(a.index)][static_cast<size_t>(b.index)] = false;
  }

  void validate(bool require_monotone = true) const {
    for (int i = 0; i < 10; ++i) {
      if (std::abs(values[i * 10 + i] - 100.0) > 1e-9)
        throw DomainError("similarity table diagonal must be exactly 100");
      for (int j = 0; j < 10; ++j) {
        const double v = values[i * 10 + j];
        if (!(v >= 0.0 && v <= 100.0)) throw DomainError("similarity table entry outside [0,100]");
        if (std::abs(v - values[j * 10 + i]) > 1e-9)
          throw DomainError("similarity table must be symmetric");
      }
      if (require_monotone) {
        // Moving away from the diagonal in either direction must not increase.
        for (int j = i + 2; j < 10; ++j)
          if (values[i * 10 + j] > values[i * 10 + j - 1] + 1e-9)
            throw DomainError("similarity table row " + std::string(1, 'A' + i) +
                              " is not monotonically decaying to the right");
        for (int j = i - 2; j >= 0; --j)
          if (values[i * 10 + j] > values[i * 10 + j + 1] + 1e-9)
            throw DomainError("similarity table row " + std::string(1, 'A' + i) +
                              " is not monotonically decaying to the left");
      }
    }
  }

  static SimilarityTable load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open similarity table: " + path);
    SimilarityTable t;
    std::string line;
    if (!std::getline(in, line)) throw IoError("similarity table is empty: " + path);
    for (int i = 0; i < 10; ++i) {
      if (!std::getline(in, line)) throw IoError("similarity table has fewer than 10 data rows");
      std::stringstream ss(line);
      std::string cell;
      if (!std::getline(ss, cell, ',')) throw IoError("similarity table row missing label");
      for (int j = 0; j < 10; ++j) {
        if (!std::getline(ss, cell, ',')) throw IoError("similarity table row has too few cells");
        if (cell == "NA" || cell.empty()) {
          t.valid[static_cast<size_t>(i)][static_cast<size_t>(j)] = false;
          t.values[i * 10 + j] = 0.0;
        } else {
          t.values[i * 10 + j] = std::stod(cell);
        }
      }
    }
    return t;
  }

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write similarity table: " + path);
    out << "group";
    for (int j = 0; j < 10; ++j) out << "," << static_cast<char>('A' + j);
    out << "\n";
    out << std::fixed << std::setprecision(2);
    for (int i = 0; i < 10; ++i) {
      out << static_cast<char>('A' + i);
      for (int j = 0; j < 10; ++j) {
        out << ",";
        if (valid[static_cast<size_t>(i)][static_cast<size_t>(j)])
          out << values[i * 10 + j];
        else
          out << "NA";
      }
      out << "\n";
    }
  }
};

}  // namespace dlat
