#pragma once

// Sparse autoencoder: z = act(xᵀW_enc + b_enc), x̂ = zᵀW_dec + b_dec, with a
// ReLU or per-feature-threshold JumpReLU activation. Weights are loaded or
// planted, never trained here.

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "crl/numkit.hpp"

namespace crl {

enum class SaeActivation : std::uint8_t { kRelu = 0, kJumpRelu = 1 };

struct SaeParams {
  Matrix w_enc;  // d×d_dict
  Vec b_enc;     // d_dict
  Matrix w_dec;  // d_dict×d
  Vec b_dec;     // d
  SaeActivation activation = SaeActivation::kJumpRelu;
  Vec threshold;  // d_dict; all zero for ReLU

  std::size_t d() const { return w_enc.rows(); }
  std::size_t d_dict() const { return w_enc.cols(); }

  bool operator==(const SaeParams&) const = default;
};

// Zero-initialised SAE of the given shape.
SaeParams make_sae(std::size_t d, std::size_t d_dict, SaeActivation activation);
void validate(const SaeParams& sae);

struct FeatureActivations {
  Vec z;
  int step = 0;
  int layer = 0;
};

FeatureActivations encode(const SaeParams& sae, std::span<const double> x, int step = 0,
                          int layer = 0);
Vec decode(const SaeParams& sae, std::span<const double> z);

struct SaeLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  double sparsity = 0.0;  // λ·‖z‖₁
};

SaeLoss sae_loss(const SaeParams& sae, std::span<const double> x, double lambda);

void save_sae(const SaeParams& sae, const std::string& path);
SaeParams load_sae(const std::string& path);

// "index<TAB>text" per line; blank lines and '#' comments are skipped.
std::map<int, std::string> load_feature_labels(const std::string& path);

}  // namespace crl
