#pragma once

// A small frozen decoder-only transformer (pre-RMSNorm, single-head causal
// attention, ReLU MLP) with read/write hooks on the post-block residual of
// every layer. Decoding is greedy; ties go to the lowest token id.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crl/numkit.hpp"

namespace crl {

struct BlockParams {
  Matrix wq, wk, wv, wo;  // d×d
  Matrix w_in;            // d×mlp_hidden
  Vec b_in;
  Matrix w_out;  // mlp_hidden×d
  Vec b_out;

  bool operator==(const BlockParams&) const = default;
};

struct ToyLmParams {
  int vocab = 64;
  int d = 32;
  int layers = 2;
  int mlp_hidden = 64;
  int max_positions = 64;
  Matrix embed;    // vocab×d
  Matrix pos;      // max_positions×d
  std::vector<BlockParams> blocks;
  Matrix unembed;  // d×vocab

  bool operator==(const ToyLmParams&) const = default;
};

struct ToyLmDims {
  int vocab = 64;
  int d = 32;
  int layers = 2;
  int mlp_hidden = 64;
  int max_positions = 64;
};

// Gaussian weights scaled by 1/sqrt(fan_in) times `scale`.
ToyLmParams random_toy_lm(const ToyLmDims& dims, std::mt19937_64& rng, double scale = 1.0);
void validate(const ToyLmParams& lm);

void save_toy_lm(const ToyLmParams& lm, const std::string& path);
ToyLmParams load_toy_lm(const std::string& path);

// Called with the 1-based layer index and the post-block residual, which the
// hook may rewrite in place.
using LayerHook = std::function<void(int layer, std::span<double> residual)>;

// Incremental decoder with a per-layer key/value cache. Copying a state forks
// the generation, which the brute-force oracle uses to share prompt prefixes.
class DecoderState {
 public:
  explicit DecoderState(const ToyLmParams& lm);

  // Runs the token at the next position and returns its next-token logits.
  Vec feed(int token, const LayerHook& hook = {});
  int position() const { return position_; }

 private:
  const ToyLmParams* lm_;
  int position_ = 0;
  std::vector<std::vector<Vec>> keys_;
  std::vector<std::vector<Vec>> values_;
};

struct HookContext {
  int step = 0;  // 1-based generation step; 0 for earlier prompt positions
  int position = 0;
  int layer = 0;
};

// Residual transform applied at a hook point. May return the feature index it
// applied, which is recorded in the trace.
using Intervention =
    std::function<std::optional<int>(const HookContext&, std::span<double> residual)>;

struct GenerateOptions {
  std::vector<int> hook_layers{2};
  int max_tokens = 1;
  bool steer_prompt = false;
  std::vector<int> allowed_tokens;  // empty: unconstrained argmax
};

struct LayerRecord {
  int layer = 0;
  Vec pre;
  Vec post;
  std::optional<int> action;
};

struct StepRecord {
  int step = 0;
  int position = 0;
  std::vector<LayerRecord> layers;
  Vec logits;
  int token = 0;
};

struct GenerationTrace {
  std::vector<int> prompt;
  std::vector<StepRecord> steps;
  std::vector<int> emitted;

  int final_token() const { return emitted.empty() ? -1 : emitted.back(); }
};

// Step t reads the hook-layer residual at the position whose logits produce
// generated token t (for t=1 that is the last prompt token).
GenerationTrace generate(const ToyLmParams& lm, std::span<const int> prompt,
                         const GenerateOptions& options, const Intervention& intervene = {});

// Greedy pick, lowest id on ties; restricted to `allowed` when non-empty.
int greedy_token(std::span<const double> logits, std::span<const int> allowed = {});

// Post-block residual of every layer at every prompt position.
std::vector<std::vector<Vec>> prompt_residuals(const ToyLmParams& lm,
                                               std::span<const int> prompt);

// Mean ℓ2 norm of the post-block residual per layer, averaged over the prompt
// positions of each sample and then over samples.
Vec residual_norm_profile(const ToyLmParams& lm, const std::vector<std::vector<int>>& prompts);

}  // namespace crl
