#pragma once

// Greedy evaluation of trained agents and of the heuristic baselines, plus the
// layer × coefficient sweep. Every path produces the same EvalReport schema.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crl/diagnostics.hpp"
#include "crl/episode.hpp"
#include "crl/ppo.hpp"

namespace crl {

struct SampleResult {
  int sample = 0;
  int answer = 0;
  int baseline_token = 0;
  int steered_token = 0;
  bool baseline_correct = false;
  bool steered_correct = false;
  OutcomeCategory category = OutcomeCategory::kUnchangedIncorrect;
};

struct EvalReport {
  std::string label;
  std::size_t samples = 0;
  double accuracy = 0.0;
  double baseline_accuracy = 0.0;
  double mean_reward = 0.0;
  InvalidCount invalid;
  InvalidCount baseline_invalid;
  double diversity = 0.0;  // 0 when nothing was steered
  std::map<int, double> coefficient;
  std::vector<SampleResult> results;
  std::vector<InterventionRecord> interventions;
  std::vector<Episode> episodes;
  std::vector<std::vector<double>> values;  // critic values per sample; empty without agents
};

// Runs `chooser` on the first `max_samples` examples and pairs every sample
// with its unsteered run. With `agents`, per-step critic values are read from
// the group holding the deepest steered layer.
EvalReport evaluate(const Task& task, const Dataset& data, const SteeringPlan& plan,
                    const Chooser& chooser, std::mt19937_64& rng, int max_samples,
                    const std::vector<AgentParams>* agents = nullptr,
                    const std::string& label = "crl");

// Greedy policy evaluation.
EvalReport evaluate_agents(const Task& task, const Dataset& data, const SteeringPlan& plan,
                           const std::vector<AgentParams>& agents, int max_samples);

enum class BaselineKind { kNone, kRandom, kMostActive, kConstrained };

const char* baseline_kind_name(BaselineKind kind);
BaselineKind parse_baseline_kind(const std::string& text);

// none: unsteered. random: uniform over the current mask (AFM per
// steering.afm). most-active: argmax natural activation. constrained:
// unsteered with argmax restricted to the answer set.
EvalReport run_baseline(BaselineKind kind, const Task& task, const Dataset& data,
                        const SteeringConfig& steering, int max_samples, std::uint64_t seed);

struct SweepCell {
  int layer = 0;
  double coefficient = 0.0;
  std::optional<double> accuracy;
  std::optional<double> diversity;
  std::string error;  // nonempty when the cell failed
};

// One short training run (fixed coefficient) and greedy eval per grid cell,
// layer-major. Cell failures are recorded and the sweep continues.
std::vector<SweepCell> sweep(const Task& task, const std::vector<int>& layers,
                             const std::vector<double>& coefficients,
                             const SteeringConfig& steering, AgentMode mode,
                             const PpoConfig& per_cell);

}  // namespace crl
