#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/oracles.hpp"

// Evaluation suite: IDAG, similarity-table construction, age MAE and
// pairwise perceptual diversity.

namespace dlat {

struct EvalRecord {
  std::string source_id;
  AgeGroup source_group;
  AgeGroup target_group;
  double predicted_similarity = 0.0;  // percent, 0..100
  double table_mean = 0.0;            // percent, from the similarity table

  void check() const {
    if (predicted_similarity < 0.0 || predicted_similarity > 100.0)
      throw DomainError("predicted similarity out of [0,100] for " + source_id);
  }
};

// Identity Deviation under Age Gaps: mean |s_hat - s_bar| in percentage
// points over N sources x M target groups (equivalently the fractional
// mean gap scaled by 100%).
inline double idag(const std::vector<EvalRecord>& records, int n_sources, int m_targets) {
  if (m_targets < 1 || m_targets > 10) throw DomainError("idag: M must be in [1,10]");
  if (static_cast<int64_t>(records.size()) !=
      static_cast<int64_t>(n_sources) * static_cast<int64_t>(m_targets))
    throw DomainError("idag: expected " + std::to_string(n_sources * m_targets) +
                      " records, got " + std::to_string(records.size()));
  double acc = 0.0;
  for (const auto& r : records) {
    r.check();
    acc += std::abs(r.predicted_similarity - r.table_mean);
  }
  return acc / static_cast<double>(records.size());
}

// Fills table means from the similarity table; records that hit invalid
// (empty) cells are excluded and reported as warnings.
struct RecordBuild {
  std::vector<EvalRecord> records;
  std::vector<std::string> warnings;
};

inline RecordBuild attach_table_means(std::vector<EvalRecord> records,
                                      const SimilarityTable& table) {
  RecordBuild out;
  for (auto& r : records) {
    if (!table.is_valid(r.source_group, r.target_group)) {
      out.warnings.push_back("record " + r.source_id + ": similarity cell (" +
                             r.source_group.bounds_str() + ", " + r.target_group.bounds_str() +
                             ") is empty; excluded from IDAG");
      continue;
    }
    r.table_mean = table.at(r.source_group, r.target_group);
    out.records.push_back(std::move(r));
  }
  return out;
}

// Mean distance from each predicted age to its target group's interval
// (zero inside; the 70+ bin is open above).
inline double age_mae(const std::vector<double>& predicted_ages,
                      const std::vector<AgeGroup>& target_groups) {
  if (predicted_ages.size() != target_groups.size())
    throw DomainError("age_mae: length mismatch");
  if (predicted_ages.empty()) throw DomainError("age_mae: empty input");
  double acc = 0.0;
  for (size_t i = 0; i < predicted_ages.size(); ++i) {
    const double a = predicted_ages[i];
    const double lo = target_groups[i].lower();
    const double hi = target_groups[i].index == 9 ? std::numeric_limits<double>::infinity()
                                                  : target_groups[i].upper();
    if (a < lo)
      acc += lo - a;
    else if (a > hi)
      acc += a - hi;
  }
  return acc / static_cast<double>(predicted_ages.size());
}

using PerceptualDistance = std::function<double(const FaceImage&, const FaceImage&)>;

// Mean perceptual distance over all unordered image pairs.
inline double pairwise_diversity(const std::vector<FaceImage>& images,
                                 const PerceptualDistance& dist) {
  if (images.size() < 2) throw DomainError("pairwise_diversity needs at least 2 images");
  double acc = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < images.size(); ++i)
    for (size_t j = i + 1; j < images.size(); ++j) {
      acc += dist(images[i], images[j]);
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

// Mean absolute pixel difference: the offline stand-in for LPIPS.
inline double mean_pixel_distance(const FaceImage& a, const FaceImage& b) {
  check_same_shape(a.pixels, b.pixels, "mean_pixel_distance");
  return (a.pixels.vec() - b.pixels.vec()).cwiseAbs().mean();
}

// ---------------------------------------------------------------------------
// Similarity-table construction from same-subject image pairs.

struct SubjectFaces {
  std::string subject;
  std::vector<FaceImage> faces;  // each must carry an age-group label
};

using FaceVerifier = std::function<double(const FaceImage&, const FaceImage&)>;

inline SimilarityTable build_similarity_table(const std::vector<SubjectFaces>& subjects,
                                              const FaceVerifier& verifier) {
  if (subjects.empty()) throw DomainError("build_similarity_table: empty dataset");
  double sums[10][10] = {};
  int64_t counts[10][10] = {};
  for (const auto& s : subjects) {
    if (s.faces.size() < 2)
      throw DomainError("subject " + s.subject + " has fewer than 2 images");
    for (size_t i = 0; i < s.faces.size(); ++i) {
      if (!s.faces[i].group)
        throw DomainError("subject " + s.subject + " has an unlabeled image");
      for (size_t j = i + 1; j < s.faces.size(); ++j) {
        double sim = 0.0;
        try {
          sim = verifier(s.faces[i], s.faces[j]);
        } catch (const std::exception& e) {
          // Nested so callers can still recover the original failure class.
          std::throw_with_nested(IoError("verifier failed on subject " + s.subject + " pair (" +
                                         std::to_string(i) + "," + std::to_string(j) +
                                         "): " + e.what()));
        }
        const int a = s.faces[i].group->index, b = s.faces[j].group->index;
        // An unordered pair contributes to both orientations, which
        // symmetrizes the table by construction (equivalent to averaging
        // the two oriented cells).
        sums[a][b] += sim;
        counts[a][b] += 1;
        if (a != b) {
          sums[b][a] += sim;
          counts[b][a] += 1;
        }
      }
    }
  }
  SimilarityTable t;
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b) {
      if (a == b) {
        t.set(AgeGroup{a}, AgeGroup{b}, 100.0);
      } else if (counts[a][b] > 0) {
        t.set(AgeGroup{a}, AgeGroup{b}, sums[a][b] / static_cast<double>(counts[a][b]));
      } else {
        t.set_invalid(AgeGroup{a}, AgeGroup{b});
      }
    }
  return t;
}

// Per-source-group breakdown used in the idag JSON report.
inline std::map<std::string, double> idag_by_source_group(const std::vector<EvalRecord>& records) {
  std::map<std::string, double> sums;
  std::map<std::string, int64_t> counts;
  for (const auto& r : records) {
    const std::string key = r.source_group.bounds_str();
    sums[key] += std::abs(r.predicted_similarity - r.table_mean);
    counts[key] += 1;
  }
  std::map<std::string, double> out;
  for (const auto& [k, v] : sums) out[k] = v / static_cast<double>(counts[k]);
  return out;
}

}  // namespace dlat
