#pragma once

// Residual steering x̃ = x + c·a·W_dec, Adaptive Feature Masking and the
// steering-coefficient calibration.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crl/numkit.hpp"
#include "crl/sae.hpp"
#include "crl/toylm.hpp"

namespace crl {

// Selected feature indices; a binary vector over the dictionary in disguise.
struct ActionVector {
  std::vector<int> features;

  static ActionVector single(int feature) { return ActionVector{{feature}}; }
  bool empty() const { return features.empty(); }
};

Vec apply_steering(std::span<const double> x, const ActionVector& action, double c,
                   const SaeParams& sae);

// In-place form used inside generation hooks. Same arithmetic as apply_steering.
void apply_steering_inplace(std::span<double> x, const ActionVector& action, double c,
                            const SaeParams& sae);

class FeatureMask {
 public:
  FeatureMask() = default;
  FeatureMask(FeatureBits bits, int sample_id);

  const FeatureBits& bits() const { return bits_; }
  int sample_id() const { return sample_id_; }
  int step() const { return step_; }
  std::size_t popcount() const { return bits_.count(); }
  bool contains(std::size_t feature) const { return feature < bits_.size() && bits_.test(feature); }

  // Same bits, re-owned by another sample with the step counter reset.
  FeatureMask for_sample(int sample_id) const;

  static FeatureMask full(std::size_t d_dict, int sample_id = -1);

 private:
  friend FeatureMask afm_update(const FeatureMask&, const FeatureActivations&, int);
  FeatureBits bits_;
  int sample_id_ = -1;
  int step_ = 0;
};

struct AfmInit {
  FeatureMask mask;
  bool clamped = false;  // requested seed-set size exceeded the dictionary
};

// Seeds the mask with the `seed_size` features most frequently active (z > 0)
// over the hook-layer residuals of the calibration traces; ties by lowest index.
AfmInit afm_init(const std::vector<GenerationTrace>& calibration, const SaeParams& sae,
                 int seed_size, int layer);

// Frequency counts used by afm_init, exposed for reports.
std::vector<long> activation_frequency(const std::vector<GenerationTrace>& traces,
                                       const SaeParams& sae, int layer);

// mask ∨ [z > 0]. Throws kMaskOwnership if `sample_id` does not own the mask.
FeatureMask afm_update(const FeatureMask& mask, const FeatureActivations& z, int sample_id);

enum class CalibrationMode { kActivation, kDecoderNorm };

const char* calibration_mode_name(CalibrationMode mode);
CalibrationMode parse_calibration_mode(const std::string& text);

// Picks the feature used to measure the coefficient at a calibration step.
using CalibrationSelector =
    std::function<int(std::span<const double> x, const FeatureActivations& z)>;

// argmax of the natural activations, lowest index on ties.
int most_active_feature(const FeatureActivations& z, const FeatureMask* mask = nullptr);

struct Calibration {
  double coefficient = 0.0;
  CalibrationMode mode = CalibrationMode::kActivation;
  long steps = 0;
};

// activation mode: mean of z_{j*}; decoder-norm mode: mean ‖row_{j*}(W_dec)‖.
// Averaged over every step of the supplied correctly answered traces.
Calibration calibrate_coefficient(const std::vector<GenerationTrace>& correct_traces,
                                  const CalibrationSelector& selector, const SaeParams& sae,
                                  CalibrationMode mode, int layer);

struct SteeringConfig {
  std::vector<int> layers{2};
  bool calibrated = true;
  double coefficient = 0.0;  // used when !calibrated
  CalibrationMode calibration_mode = CalibrationMode::kActivation;
  int recalibrate_every = 0;  // 0: calibrate once from the heuristic selector
  int k = 1;
  bool afm = true;
  int afm_seed_size = 16;
  bool steer_prompt = false;

  bool operator==(const SteeringConfig&) const = default;
};

}  // namespace crl
