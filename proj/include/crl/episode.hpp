#pragma once

// One steered generation over a task example. At every generated token and
// steered layer the residual is encoded with that layer's SAE and a chooser
// picks a feature from the current AFM mask. The mask then grows from the
// natural (pre-steering) activations.

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crl/agent.hpp"
#include "crl/steering.hpp"
#include "crl/task.hpp"

namespace crl {

enum class AgentMode { kCrlToken, kCrlLayer };

const char* agent_mode_name(AgentMode mode);
AgentMode parse_agent_mode(const std::string& text);

struct SteeringPlan {
  AgentMode mode = AgentMode::kCrlToken;
  std::vector<int> layers{2};          // ascending
  std::map<int, double> coefficient;   // per steered layer
  std::map<int, FeatureMask> afm_seed; // per steered layer; empty map disables AFM
  int k = 1;
  bool steer_prompt = false;
  std::vector<int> allowed_tokens;     // constrained decoding when nonempty

  // Layer groups that share one agent: one group per layer for CRL-Token, a
  // single group spanning all layers for CRL-Layer.
  std::vector<std::vector<int>> groups() const;
  int group_of(int layer) const;
  bool afm_enabled() const { return !afm_seed.empty(); }
};

struct ChoiceContext {
  int step = 0;
  int layer = 0;
  int group = 0;
  std::span<const double> state;
  const FeatureActivations* z = nullptr;
  const FeatureMask* mask = nullptr;
  std::mt19937_64* rng = nullptr;
};

struct Choice {
  ActionVector action;  // empty: leave the residual alone
  double log_prob = 0.0;
};

using Chooser = std::function<Choice(const ChoiceContext&)>;

Chooser policy_chooser(const std::vector<AgentParams>& agents, SelectionMode mode, int k = 1);
Chooser random_chooser();
Chooser most_active_chooser();
Chooser fixed_chooser(int feature);
Chooser no_steering_chooser();

struct LayerDecision {
  int layer = 0;
  int feature = -1;
  double activation = 0.0;  // natural activation of the chosen feature
  double log_prob = 0.0;
  Vec state;                // pre-steering residual
  FeatureBits mask;         // mask the choice was made under
};

struct StepDecision {
  int step = 0;
  std::vector<LayerDecision> layers;
  int token = 0;
};

struct Episode {
  int sample_id = 0;
  GenerationTrace trace;
  std::vector<StepDecision> decisions;
  double reward = 0.0;
};

Episode run_episode(const Task& task, const Example& example, const SteeringPlan& plan,
                    const Chooser& chooser, std::mt19937_64& rng);

// Unsteered generation that still records the hook-layer residuals.
GenerationTrace baseline_trace(const Task& task, const Example& example,
                               const std::vector<int>& layers,
                               const std::vector<int>& allowed_tokens = {});

// Value of the group's agent at every step, read from its deepest layer.
std::vector<double> episode_values(const Episode& episode, const SteeringPlan& plan,
                                   const std::vector<AgentParams>& agents, int group = 0);

}  // namespace crl
