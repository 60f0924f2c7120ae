#include "crl/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace crl {

namespace {

void check_action(const ActionVector& action, const SaeParams& sae) {
  for (int j : action.features) {
    if (j < 0 || static_cast<std::size_t>(j) >= sae.d_dict()) {
      fail(ErrorKind::kActionRange, "feature " + std::to_string(j) + " outside dictionary of " +
                                        std::to_string(sae.d_dict()));
    }
  }
}

const LayerRecord* find_layer(const StepRecord& step, int layer) {
  for (const auto& lr : step.layers) {
    if (lr.layer == layer) return &lr;
  }
  return nullptr;
}

}  // namespace

void apply_steering_inplace(std::span<double> x, const ActionVector& action, double c,
                            const SaeParams& sae) {
  require(x.size() == sae.d(), ErrorKind::kShape, "apply_steering: residual/SAE dim mismatch");
  require(std::isfinite(c), ErrorKind::kInvalidArgument, "steering coefficient must be finite");
  check_action(action, sae);
  // c = 0 and the empty action are exact no-ops (no signed-zero rewrites).
  if (c == 0.0 || action.empty()) return;
  for (int j : action.features) axpy(c, sae.w_dec.row(j), x);
}

Vec apply_steering(std::span<const double> x, const ActionVector& action, double c,
                   const SaeParams& sae) {
  Vec out(x.begin(), x.end());
  apply_steering_inplace(out, action, c, sae);
  return out;
}

// ---------------------------------------------------------------------------

FeatureMask::FeatureMask(FeatureBits bits, int sample_id)
    : bits_(std::move(bits)), sample_id_(sample_id) {
  require(bits_.any(), ErrorKind::kInvalidMask, "feature mask must have at least one bit set");
}

FeatureMask FeatureMask::for_sample(int sample_id) const {
  FeatureMask m = *this;
  m.sample_id_ = sample_id;
  m.step_ = 0;
  return m;
}

FeatureMask FeatureMask::full(std::size_t d_dict, int sample_id) {
  FeatureBits bits(d_dict);
  bits.set();
  return FeatureMask(std::move(bits), sample_id);
}

std::vector<long> activation_frequency(const std::vector<GenerationTrace>& traces,
                                       const SaeParams& sae, int layer) {
  std::vector<long> counts(sae.d_dict(), 0);
  for (const auto& trace : traces) {
    for (const auto& step : trace.steps) {
      const LayerRecord* lr = find_layer(step, layer);
      if (lr == nullptr) continue;
      const auto fa = encode(sae, lr->pre);
      for (std::size_t i = 0; i < fa.z.size(); ++i) {
        if (fa.z[i] > 0.0) ++counts[i];
      }
    }
  }
  return counts;
}

AfmInit afm_init(const std::vector<GenerationTrace>& calibration, const SaeParams& sae,
                 int seed_size, int layer) {
  require(!calibration.empty(), ErrorKind::kInvalidArgument, "afm_init needs calibration traces");
  require(seed_size >= 1, ErrorKind::kInvalidArgument, "AFM seed-set size must be >= 1");
  AfmInit out;
  std::size_t m = static_cast<std::size_t>(seed_size);
  if (m > sae.d_dict()) {
    m = sae.d_dict();
    out.clamped = true;
  }
  const auto counts = activation_frequency(calibration, sae, layer);
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  FeatureBits bits(sae.d_dict());
  for (std::size_t i = 0; i < m; ++i) bits.set(order[i]);
  out.mask = FeatureMask(std::move(bits), -1);
  return out;
}

FeatureMask afm_update(const FeatureMask& mask, const FeatureActivations& z, int sample_id) {
  if (sample_id != mask.sample_id()) {
    fail(ErrorKind::kMaskOwnership, "mask owned by sample " + std::to_string(mask.sample_id()) +
                                        " updated from sample " + std::to_string(sample_id));
  }
  require(z.z.size() == mask.bits().size(), ErrorKind::kShape, "afm_update: dim mismatch");
  FeatureMask next = mask;
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (z.z[i] > 0.0) next.bits_.set(i);
  }
  next.step_ = mask.step_ + 1;
  return next;
}

// ---------------------------------------------------------------------------

const char* calibration_mode_name(CalibrationMode mode) {
  return mode == CalibrationMode::kActivation ? "activation" : "decoder-norm";
}

CalibrationMode parse_calibration_mode(const std::string& text) {
  if (text == "activation") return CalibrationMode::kActivation;
  if (text == "decoder-norm") return CalibrationMode::kDecoderNorm;
  fail(ErrorKind::kConfig, "unknown calibration mode '" + text + "'");
}

int most_active_feature(const FeatureActivations& z, const FeatureMask* mask) {
  int best = -1;
  for (std::size_t i = 0; i < z.z.size(); ++i) {
    if (mask != nullptr && !mask->contains(i)) continue;
    if (best < 0 || z.z[i] > z.z[best]) best = static_cast<int>(i);
  }
  require(best >= 0, ErrorKind::kInvalidMask, "most-active selection over an empty mask");
  return best;
}

Calibration calibrate_coefficient(const std::vector<GenerationTrace>& correct_traces,
                                  const CalibrationSelector& selector, const SaeParams& sae,
                                  CalibrationMode mode, int layer) {
  Calibration cal;
  cal.mode = mode;
  double sum = 0.0;
  for (const auto& trace : correct_traces) {
    for (const auto& step : trace.steps) {
      const LayerRecord* lr = find_layer(step, layer);
      if (lr == nullptr) continue;
      const auto fa = encode(sae, lr->pre, step.step, layer);
      const int j = selector(lr->pre, fa);
      require(j >= 0 && static_cast<std::size_t>(j) < sae.d_dict(), ErrorKind::kActionRange,
              "calibration selector returned an out-of-range feature");
      sum += mode == CalibrationMode::kActivation ? fa.z[j] : norm2(sae.w_dec.row(j));
      ++cal.steps;
    }
  }
  if (cal.steps == 0) {
    fail(ErrorKind::kCalibrationUnavailable,
         "no correctly answered traces to calibrate the steering coefficient from; "
         "supply a fixed coefficient");
  }
  cal.coefficient = sum / static_cast<double>(cal.steps);
  return cal;
}

}  // namespace crl
