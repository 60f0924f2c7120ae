#pragma once

// Seeded generators for property-style tests.

#include <random>
#include <vector>

#include "crl/numkit.hpp"
#include "crl/sae.hpp"

namespace crl::testing {

inline Vec random_vec(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Vec v(n);
  for (double& e : v) e = dist(rng);
  return v;
}

inline MlpParams random_mlp(std::mt19937_64& rng, std::size_t in, std::size_t hidden,
                            std::size_t out, double scale = 0.5) {
  MlpParams p(in, hidden, out);
  std::normal_distribution<double> dist(0.0, scale);
  for (double& e : p.flat()) e = dist(rng);
  return p;
}

// Nonempty random mask; each bit set with probability `density`.
inline FeatureBits random_mask(std::mt19937_64& rng, std::size_t n, double density = 0.5) {
  std::bernoulli_distribution coin(density);
  FeatureBits bits(n);
  for (std::size_t i = 0; i < n; ++i) bits[i] = coin(rng);
  if (bits.none()) bits.set(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  return bits;
}

inline int random_set_bit(std::mt19937_64& rng, const FeatureBits& bits) {
  std::uniform_int_distribution<std::size_t> pick(0, bits.count() - 1);
  auto k = pick(rng);
  auto i = bits.find_first();
  while (k-- > 0) i = bits.find_next(i);
  return static_cast<int>(i);
}

inline SaeParams random_sae(std::mt19937_64& rng, std::size_t d, std::size_t d_dict,
                            SaeActivation act = SaeActivation::kRelu) {
  SaeParams sae = make_sae(d, d_dict, act);
  std::normal_distribution<double> dist(0.0, 0.5);
  for (double& e : sae.w_enc.data()) e = dist(rng);
  for (double& e : sae.w_dec.data()) e = dist(rng);
  for (double& e : sae.b_enc) e = dist(rng);
  for (double& e : sae.b_dec) e = dist(rng);
  if (act == SaeActivation::kJumpRelu) {
    std::uniform_real_distribution<double> th(0.0, 0.5);
    for (double& e : sae.threshold) e = th(rng);
  }
  return sae;
}

}  // namespace crl::testing

#include <filesystem>
#include <string>

namespace crl::testing {

// Fresh empty directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("crl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace crl::testing

#include "crl/agent.hpp"
#include "crl/ppo.hpp"

namespace crl::testing {

// A transition over `layers` residuals with random masks and actions. The old
// log-prob is the agent's current one plus a small offset so ratios land both
// inside and outside the clip range.
inline Transition random_transition(std::mt19937_64& rng, const AgentParams& agent,
                                    std::size_t layers) {
  Transition tr;
  double lp = 0.0;
  for (std::size_t l = 0; l < layers; ++l) {
    tr.states.push_back(random_vec(rng, agent.d()));
    tr.masks.push_back(random_mask(rng, agent.d_dict(), 0.6));
    tr.actions.push_back(random_set_bit(rng, tr.masks.back()));
    lp += masked_log_prob(policy_logits(agent, tr.states.back()), tr.masks.back(), tr.actions.back());
  }
  tr.old_log_prob = lp + std::uniform_real_distribution<double>(-0.4, 0.4)(rng);
  tr.critic_state = tr.states.back();
  tr.reward = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
  tr.old_value = std::uniform_real_distribution<double>(-0.5, 1.5)(rng);
  tr.advantage = tr.reward - tr.old_value;
  return tr;
}

inline std::vector<Transition> random_batch(std::mt19937_64& rng, const AgentParams& agent,
                                            std::size_t n, std::size_t layers) {
  std::vector<Transition> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_transition(rng, agent, layers));
  return out;
}

}  // namespace crl::testing
