#pragma once

#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/nn.hpp"

namespace dlat {

// Diverse age mapper M: one noise vector in, K age latent codes out (one per
// trainable group). Shared ReLU trunk, then K unshared heads.
//
// image modality:    6 shared 512-wide layers; head = 512 ReLU + linear 256
// landmark modality: 4 shared 512-wide layers; head = 3x 512 ReLU + linear 64
class DiverseAgeMapper {
 public:
  DiverseAgeMapper(Modality modality, int k, Rng& rng) : modality_(modality), k_(k) {
    const int shared_depth = modality == Modality::image ? 6 : 4;
    const int head_hidden = modality == Modality::image ? 1 : 3;
    const int out = code_dim(modality);
    int64_t in = kNoiseDim;
    for (int i = 0; i < shared_depth; ++i) {
      shared_.emplace_back(params_, "shared" + std::to_string(i), in, 512, rng);
      in = 512;
    }
    branches_.resize(static_cast<size_t>(k));
    for (int b = 0; b < k; ++b) {
      auto& head = branches_[static_cast<size_t>(b)];
      for (int i = 0; i < head_hidden; ++i)
        head.emplace_back(params_, "branch" + std::to_string(b) + ".h" + std::to_string(i), 512,
                          512, rng);
      head.emplace_back(params_, "branch" + std::to_string(b) + ".out", 512, out, rng);
    }
  }

  // n: [N, 16] -> K code batches, each [N, code_dim]; entry i belongs to
  // trainable group i.
  std::vector<nn::Value> forward(const nn::Value& n) const {
    if (n.shape().size() != 2 || n.shape()[1] != kNoiseDim)
      throw DomainError("mapper input must be [N,16], got noise of length " +
                        std::to_string(n.shape().back()));
    nn::Value h = n;
    for (const auto& l : shared_) h = ad::relu(l.forward(h));
    std::vector<nn::Value> codes;
    codes.reserve(branches_.size());
    for (const auto& head : branches_) {
      nn::Value b = h;
      for (size_t i = 0; i + 1 < head.size(); ++i) b = ad::relu(head[i].forward(b));
      codes.push_back(head.back().forward(b));
    }
    return codes;
  }

  // Tensor convenience: single noise vector -> K tagged codes.
  std::vector<AgeLatentCode> map_noise(const Tensor& noise) const {
    if (noise.numel() != kNoiseDim) throw DomainError("noise must have length 16");
    auto codes = forward(ad::constant(Tensor({1, kNoiseDim}, noise.data)));
    std::vector<AgeLatentCode> out;
    for (size_t i = 0; i < codes.size(); ++i)
      out.push_back(AgeLatentCode{Tensor({code_dim(modality_)}, codes[i].val().data), modality_,
                                  trainable_groups()[i]});
    return out;
  }

  Modality modality() const { return modality_; }
  int k() const { return k_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  Modality modality_;
  int k_;
  nn::ParamStore params_;
  std::vector<nn::Linear> shared_;
  std::vector<std::vector<nn::Linear>> branches_;
};

}  // namespace dlat
