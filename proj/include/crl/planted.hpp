#pragma once

// Synthetic steering tasks with known answers. Each prompt ends in a key token
// whose class decides the correct answer token; the frozen model prefers a
// distractor unless steered. A few SAE features per answer have decoder rows
// aligned with that answer's unembedding, so amplifying one of them at the
// calibrated coefficient flips the greedy answer. The construction is checked
// by exhaustive enumeration and retried with a fresh derived seed on failure.
//
// Context kinds:
//   easy     key also carries the answer direction; baseline already correct
//   blocked  key saturates the distractor direction; no single feature helps
//   regular  baseline wrong, flippable by the class's answer features

#include <cstdint>
#include <map>
#include <vector>

#include "crl/sae.hpp"
#include "crl/steering.hpp"
#include "crl/task.hpp"

namespace crl {

struct PlantedTaskSpec {
  int vocab = 64;
  int d = 32;
  int layers = 2;
  int mlp_hidden = 64;
  int d_dict = 128;
  int n_answers = 2;
  int n_distractors = 4;
  int keys_per_class = 6;
  int prompt_len = 6;
  int horizon = 1;
  int n_train = 64;
  int n_eval = 64;
  double easy_fraction = 0.1;
  double blocked_fraction = 0.06;
  int features_per_answer = 4;
  int common_features = 4;
  int hook_layer = 2;
  double steer_strength = 4.0;  // calibrated c relative to the mean residual norm
  SaeActivation activation = SaeActivation::kJumpRelu;
  std::uint64_t seed = 42;
  int max_retries = 8;
  double min_coverage = 0.8;

  bool operator==(const PlantedTaskSpec&) const = default;
};

void validate(const PlantedTaskSpec& spec);

struct PlantedTask {
  Task task;
  std::map<int, double> coefficient;   // calibrated c per layer
  double train_coverage = 0.0;         // fraction of contexts with a flipping feature
  double eval_coverage = 0.0;
  double train_baseline_accuracy = 0.0;
  double eval_baseline_accuracy = 0.0;
  int attempts = 0;
  std::vector<int> answer_features;    // all features planted for some answer
};

// Throws kTask with the best achieved coverage if every attempt fails.
PlantedTask make_planted_task(const PlantedTaskSpec& spec);

// Coefficient from the most-active heuristic over the correctly answered
// baseline traces of `data`.
Calibration calibrate_from_baseline(const Task& task, const Dataset& data, int layer,
                                    CalibrationMode mode = CalibrationMode::kActivation);

// Fraction of examples with a nonempty brute-force flipping set.
double flip_coverage(const Task& task, const Dataset& data, int layer, double c);
double baseline_accuracy(const Task& task, const Dataset& data);

}  // namespace crl
