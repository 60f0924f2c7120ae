#pragma once

// A steering task bundles a frozen model with one SAE per layer. Each
// train/eval prompt carries its correct answer token for the exact-match reward.

#include <string>
#include <vector>

#include "crl/sae.hpp"
#include "crl/toylm.hpp"

namespace crl {

struct Example {
  int id = 0;
  std::vector<int> prompt;
  int answer = 0;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

// r = 1 iff the final generated token equals the answer.
struct RewardSpec {
  std::vector<int> answer_set;

  double reward(const GenerationTrace& trace, const Example& ex) const {
    return trace.final_token() == ex.answer ? 1.0 : 0.0;
  }
  bool is_valid(int token) const;
};

struct Task {
  ToyLmParams lm;
  std::vector<SaeParams> saes;  // saes[ℓ-1] reads the layer-ℓ residual
  Dataset train;
  Dataset eval;
  RewardSpec reward;
  int horizon = 1;

  const SaeParams& sae_for(int layer) const;
};

void validate(const Task& task);

// Line-delimited records: {"id":..,"prompt":[..],"answer":..}
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

// Directory layout: model.crlm, sae_l<ℓ>.crls, train.jsonl, eval.jsonl, task.json
void save_task(const Task& task, const std::string& dir);
Task load_task(const std::string& dir);

}  // namespace crl
