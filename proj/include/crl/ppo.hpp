#pragma once

// Clipped-surrogate PPO over SAE feature choices with advantage A = r − V_old.
// Policy and critic losses come with analytic gradients.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "crl/agent.hpp"
#include "crl/episode.hpp"
#include "crl/task.hpp"

namespace crl {

struct PpoConfig {
  double clip_epsilon = 0.2;
  double policy_lr = 3e-4;
  double critic_lr = 3e-4;
  int epochs = 4;
  int batch_size = 8;
  int max_steps = 500;
  int eval_interval = 100;
  int eval_samples = 500;   // capped at the eval split size
  int min_samples = 4000;   // training data is cycled to at least this many samples
  int hidden = 0;           // agent hidden width; 0 means the residual width d
  bool standardize_advantage = false;
  double entropy_coef = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const PpoConfig&) const = default;
};

void validate(const PpoConfig& config);

// One agent decision: a generated step at one layer group. For CRL-Layer the
// group spans every steered layer and the log-probabilities add up.
struct Transition {
  int sample = 0;
  int step = 0;
  int group = 0;
  std::vector<Vec> states;          // one residual per layer of the group
  std::vector<int> actions;
  std::vector<FeatureBits> masks;
  double old_log_prob = 0.0;        // joint over the group, frozen at rollout
  Vec critic_state;                 // residual of the deepest layer in the group
  double old_value = 0.0;
  double reward = 0.0;              // terminal reward of the sample
  double advantage = 0.0;
};

struct RolloutBatch {
  std::vector<Episode> episodes;
  std::vector<std::vector<Transition>> by_group;
  double mean_reward = 0.0;
};

// Sampled-mode rollout over `examples`. Old log-probs and values are recorded
// with the agents as they are now.
RolloutBatch rollout(const Task& task, const std::vector<Example>& examples,
                     const SteeringPlan& plan, const std::vector<AgentParams>& agents,
                     std::mt19937_64& rng);

// Fills Transition::advantage with r − V_old, optionally standardized over the batch.
void compute_advantage(std::vector<Transition>& batch, bool standardize = false);

struct SurrogateTerms {
  double loss = 0.0;               // −mean(min(unclipped, clipped))
  std::vector<double> ratio;
  std::vector<double> unclipped;   // ρ·A
  std::vector<double> clipped;     // clip(ρ, 1−ε, 1+ε)·A
};

SurrogateTerms ppo_policy_loss(std::span<const double> new_log_probs,
                               std::span<const double> old_log_probs,
                               std::span<const double> advantages, double epsilon);

// Policy loss of the agent on a batch, optionally minus an entropy bonus. When
// `grad` is given it receives dLoss/dθ for the policy network (same layout).
double policy_batch_loss(const AgentParams& agent, const std::vector<Transition>& batch,
                         double epsilon, double entropy_coef = 0.0, MlpParams* grad = nullptr);

// mean (V(x) − r)² with optional gradient for the critic network.
double critic_batch_loss(const AgentParams& agent, const std::vector<Transition>& batch,
                         MlpParams* grad = nullptr);

struct MetricsRow {
  int step = 0;
  double mean_reward = 0.0;
  double policy_loss = 0.0;
  double critic_loss = 0.0;
  std::optional<double> eval_accuracy;
  std::optional<double> feature_diversity;
};

// Per-layer coefficients (fixed or calibrated from correctly answered baseline
// train traces with the most-active selector) and AFM seed masks.
SteeringPlan make_plan(const Task& task, const SteeringConfig& steering, AgentMode mode);

struct TrainResult {
  SteeringPlan plan;
  std::vector<AgentParams> agents;       // after the last step
  std::vector<AgentParams> best_agents;  // highest eval accuracy, earliest on ties
  int best_step = 0;
  double best_eval_accuracy = 0.0;
  double final_eval_accuracy = 0.0;
  std::vector<MetricsRow> metrics;
};

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_step;
  std::function<void(int step, const std::vector<AgentParams>&)> on_checkpoint;
};

// Runs `config.max_steps` PPO steps. Throws kDivergence when a loss or update
// turns non-finite, with the offending batch summarized in the message.
TrainResult train(const Task& task, const SteeringConfig& steering, AgentMode mode,
                  const PpoConfig& config, const TrainHooks& hooks = {});

// Greedy accuracy of the agents on the first `max_samples` examples.
double greedy_accuracy(const Task& task, const Dataset& data, const SteeringPlan& plan,
                       const std::vector<AgentParams>& agents, int max_samples,
                       double* diversity = nullptr);

}  // namespace crl
