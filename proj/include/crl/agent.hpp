#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crl/numkit.hpp"
#include "crl/steering.hpp"

namespace crl {

// Policy MLP maps a residual (d) to dictionary logits (d_dict); the critic MLP
// maps the same residual to a scalar value. Both use tanh hidden layers.
struct AgentParams {
  MlpParams policy;
  MlpParams critic;
  bool shared_across_layers = false;

  std::size_t d() const { return policy.in_dim(); }
  std::size_t d_dict() const { return policy.out_dim(); }

  bool operator==(const AgentParams&) const = default;
};

AgentParams agent_init(std::size_t d, std::size_t d_dict, std::size_t hidden,
                       std::mt19937_64& rng, bool shared_across_layers = false);

Vec policy_logits(const AgentParams& agent, std::span<const double> x);
double critic_value(const AgentParams& agent, std::span<const double> x);

enum class SelectionMode { kSampled, kGreedy };

struct ActionSample {
  int feature = -1;
  double log_prob = 0.0;
  SelectionMode mode = SelectionMode::kGreedy;
  ActionVector action;
};

// log p_j under the masked softmax, computed in log-sum-exp form.
double masked_log_prob(std::span<const double> logits, const FeatureBits& mask, int feature);

// Greedy: top-k of the masked logits (lowest index on ties). Sampled: one draw
// from the masked softmax (k must be 1). The log-probability always comes from
// the masked distribution; for k > 1 it is the sum over the chosen features.
ActionSample select_action(std::span<const double> logits, const FeatureMask& mask,
                           SelectionMode mode, std::mt19937_64& rng, int k = 1);

// CRL-Layer joint policy: Σ_ℓ log π(a_ℓ | x_ℓ) with one shared network. Masks
// may be empty, meaning the full dictionary.
double crl_layer_logprob(const AgentParams& agent, const std::vector<Vec>& states,
                         const std::vector<int>& actions,
                         const std::vector<FeatureMask>& masks = {});

// Checkpoint: "CRLA", version, run-config hash, agent count, then per agent
// the policy tensors followed by the critic tensors.
void save_agents(const std::vector<AgentParams>& agents, std::uint64_t config_hash,
                 const std::string& path);
std::vector<AgentParams> load_agents(const std::string& path,
                                     std::uint64_t* config_hash = nullptr);

}  // namespace crl
