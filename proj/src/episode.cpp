#include "crl/episode.hpp"

#include <algorithm>
#include <cmath>

namespace crl {

const char* agent_mode_name(AgentMode mode) {
  return mode == AgentMode::kCrlToken ? "crl-token" : "crl-layer";
}

AgentMode parse_agent_mode(const std::string& text) {
  if (text == "crl-token") return AgentMode::kCrlToken;
  if (text == "crl-layer") return AgentMode::kCrlLayer;
  fail(ErrorKind::kConfig, "unknown mode '" + text + "' (expected crl-token or crl-layer)");
}

std::vector<std::vector<int>> SteeringPlan::groups() const {
  if (mode == AgentMode::kCrlLayer) return {layers};
  std::vector<std::vector<int>> out;
  for (int l : layers) out.push_back({l});
  return out;
}

int SteeringPlan::group_of(int layer) const {
  if (mode == AgentMode::kCrlLayer) return 0;
  const auto it = std::find(layers.begin(), layers.end(), layer);
  require(it != layers.end(), ErrorKind::kInvalidArgument,
          "layer " + std::to_string(layer) + " is not steered");
  return static_cast<int>(it - layers.begin());
}

// ---------------------------------------------------------------------------

Chooser policy_chooser(const std::vector<AgentParams>& agents, SelectionMode mode, int k) {
  return [&agents, mode, k](const ChoiceContext& ctx) {
    require(static_cast<std::size_t>(ctx.group) < agents.size(), ErrorKind::kInvalidArgument,
            "no agent for layer group " + std::to_string(ctx.group));
    const Vec logits = policy_logits(agents[ctx.group], ctx.state);
    ActionSample s = select_action(logits, *ctx.mask, mode, *ctx.rng, k);
    return Choice{std::move(s.action), s.log_prob};
  };
}

Chooser random_chooser() {
  return [](const ChoiceContext& ctx) {
    const FeatureBits& bits = ctx.mask->bits();
    const auto n = bits.count();
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    auto pick = dist(*ctx.rng);
    auto i = bits.find_first();
    while (pick-- > 0) i = bits.find_next(i);
    return Choice{ActionVector::single(static_cast<int>(i)), -std::log(static_cast<double>(n))};
  };
}

Chooser most_active_chooser() {
  return [](const ChoiceContext& ctx) {
    return Choice{ActionVector::single(most_active_feature(*ctx.z, ctx.mask)), 0.0};
  };
}

Chooser fixed_chooser(int feature) {
  return [feature](const ChoiceContext&) { return Choice{ActionVector::single(feature), 0.0}; };
}

Chooser no_steering_chooser() {
  return [](const ChoiceContext&) { return Choice{}; };
}

// ---------------------------------------------------------------------------

Episode run_episode(const Task& task, const Example& example, const SteeringPlan& plan,
                    const Chooser& chooser, std::mt19937_64& rng) {
  Episode ep;
  ep.sample_id = example.id;

  std::map<int, FeatureMask> masks;
  for (int layer : plan.layers) {
    const SaeParams& sae = task.sae_for(layer);
    if (plan.afm_enabled()) {
      const auto it = plan.afm_seed.find(layer);
      require(it != plan.afm_seed.end(), ErrorKind::kInvalidArgument,
              "AFM enabled without a seed mask for layer " + std::to_string(layer));
      masks[layer] = it->second.for_sample(example.id);
    } else {
      masks[layer] = FeatureMask::full(sae.d_dict(), example.id);
    }
  }

  GenerateOptions opts;
  opts.hook_layers = plan.layers;
  opts.max_tokens = task.horizon;
  opts.steer_prompt = plan.steer_prompt;
  opts.allowed_tokens = plan.allowed_tokens;

  auto intervene = [&](const HookContext& hc, std::span<double> x) -> std::optional<int> {
    const SaeParams& sae = task.sae_for(hc.layer);
    const auto coeff_it = plan.coefficient.find(hc.layer);
    const double c = coeff_it == plan.coefficient.end() ? 0.0 : coeff_it->second;
    const FeatureActivations z = encode(sae, x, hc.step, hc.layer);
    FeatureMask& mask = masks.at(hc.layer);

    ChoiceContext ctx;
    ctx.step = hc.step;
    ctx.layer = hc.layer;
    ctx.group = plan.group_of(hc.layer);
    ctx.state = x;
    ctx.z = &z;
    ctx.mask = &mask;
    ctx.rng = &rng;
    Choice choice = chooser(ctx);

    if (hc.step == 0) {
      apply_steering_inplace(x, choice.action, c, sae);
      return std::nullopt;
    }

    if (ep.decisions.empty() || ep.decisions.back().step != hc.step) {
      ep.decisions.push_back(StepDecision{hc.step, {}, 0});
    }
    LayerDecision ld;
    ld.layer = hc.layer;
    ld.state.assign(x.begin(), x.end());
    ld.mask = mask.bits();
    ld.log_prob = choice.log_prob;
    if (!choice.action.empty()) {
      ld.feature = choice.action.features.front();
      ld.activation = z.z.at(static_cast<std::size_t>(ld.feature));
    }
    ep.decisions.back().layers.push_back(std::move(ld));

    apply_steering_inplace(x, choice.action, c, sae);
    if (plan.afm_enabled()) mask = afm_update(mask, z, example.id);
    if (choice.action.empty()) return std::nullopt;
    return choice.action.features.front();
  };

  ep.trace = generate(task.lm, example.prompt, opts, intervene);
  for (std::size_t t = 0; t < ep.decisions.size(); ++t) ep.decisions[t].token = ep.trace.emitted[t];
  ep.reward = task.reward.reward(ep.trace, example);
  return ep;
}

GenerationTrace baseline_trace(const Task& task, const Example& example,
                               const std::vector<int>& layers,
                               const std::vector<int>& allowed_tokens) {
  GenerateOptions opts;
  opts.hook_layers = layers;
  opts.max_tokens = task.horizon;
  opts.allowed_tokens = allowed_tokens;
  return generate(task.lm, example.prompt, opts);
}

std::vector<double> episode_values(const Episode& episode, const SteeringPlan& plan,
                                   const std::vector<AgentParams>& agents, int group) {
  const auto groups = plan.groups();
  require(group >= 0 && static_cast<std::size_t>(group) < groups.size() &&
              static_cast<std::size_t>(group) < agents.size(),
          ErrorKind::kInvalidArgument, "no agent for value group");
  const int deepest = groups[group].back();
  std::vector<double> values;
  for (const auto& step : episode.decisions) {
    for (const auto& ld : step.layers) {
      if (ld.layer == deepest) values.push_back(critic_value(agents[group], ld.state));
    }
  }
  return values;
}

}  // namespace crl
