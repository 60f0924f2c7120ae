#include "crl/evaluate.hpp"

#include <algorithm>

#include "crl/rng.hpp"

namespace crl {

EvalReport evaluate(const Task& task, const Dataset& data, const SteeringPlan& plan,
                    const Chooser& chooser, std::mt19937_64& rng, int max_samples,
                    const std::vector<AgentParams>* agents, const std::string& label) {
  const std::size_t n = std::min(data.size(), static_cast<std::size_t>(std::max(max_samples, 0)));
  require(n > 0, ErrorKind::kInvalidArgument, "evaluation over zero samples");

  EvalReport rep;
  rep.label = label;
  rep.samples = n;
  rep.coefficient = plan.coefficient;
  const int value_group = plan.layers.empty() ? 0 : plan.group_of(plan.layers.back());

  std::vector<int> steered_out;
  std::vector<int> baseline_out;
  std::vector<SampleOutcome> base_outcomes;
  std::vector<SampleOutcome> steered_outcomes;
  std::map<int, long> counts;
  double reward_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Example& ex = data[i];
    const GenerationTrace base = baseline_trace(task, ex, {});
    Episode ep = run_episode(task, ex, plan, chooser, rng);

    SampleResult r;
    r.sample = ex.id;
    r.answer = ex.answer;
    r.baseline_token = base.final_token();
    r.steered_token = ep.trace.final_token();
    r.baseline_correct = task.reward.reward(base, ex) > 0.0;
    r.steered_correct = ep.reward > 0.0;
    r.category = categorize(r.baseline_correct, r.steered_correct);
    rep.results.push_back(r);
    reward_sum += ep.reward;
    steered_out.push_back(r.steered_token);
    baseline_out.push_back(r.baseline_token);
    base_outcomes.push_back({ex.id, r.baseline_correct});
    steered_outcomes.push_back({ex.id, r.steered_correct});

    for (const auto& step : ep.decisions) {
      for (const auto& ld : step.layers) {
        if (ld.feature < 0) continue;
        InterventionRecord rec;
        rec.sample = ex.id;
        rec.step = step.step;
        rec.layer = ld.layer;
        rec.feature = ld.feature;
        rec.activation = ld.activation;
        const auto c = plan.coefficient.find(ld.layer);
        rec.coefficient = c == plan.coefficient.end() ? 0.0 : c->second;
        rec.token = step.token;
        const auto t = static_cast<std::size_t>(step.step - 1);
        if (t < base.emitted.size()) rec.baseline_token = base.emitted[t];
        rep.interventions.push_back(rec);
        ++counts[ld.feature];
      }
    }
    if (agents != nullptr) rep.values.push_back(episode_values(ep, plan, *agents, value_group));
    rep.episodes.push_back(std::move(ep));
  }
  categorize_outcomes(base_outcomes, steered_outcomes);

  long correct = 0;
  long base_correct = 0;
  for (const auto& r : rep.results) {
    correct += r.steered_correct ? 1 : 0;
    base_correct += r.baseline_correct ? 1 : 0;
  }
  const auto nn = static_cast<double>(n);
  rep.accuracy = static_cast<double>(correct) / nn;
  rep.baseline_accuracy = static_cast<double>(base_correct) / nn;
  rep.mean_reward = reward_sum / nn;
  rep.invalid = count_invalid_outputs(steered_out, task.reward.answer_set);
  rep.baseline_invalid = count_invalid_outputs(baseline_out, task.reward.answer_set);
  std::vector<long> c;
  for (const auto& [f, k] : counts) c.push_back(k);
  rep.diversity = entropy_from_counts(c);
  return rep;
}

EvalReport evaluate_agents(const Task& task, const Dataset& data, const SteeringPlan& plan,
                           const std::vector<AgentParams>& agents, int max_samples) {
  std::mt19937_64 unused(0);
  return evaluate(task, data, plan, policy_chooser(agents, SelectionMode::kGreedy, plan.k), unused,
                  max_samples, &agents, "crl");
}

const char* baseline_kind_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kNone: return "none";
    case BaselineKind::kRandom: return "random";
    case BaselineKind::kMostActive: return "most-active";
    case BaselineKind::kConstrained: return "constrained";
  }
  return "unknown";
}

BaselineKind parse_baseline_kind(const std::string& text) {
  for (auto k : {BaselineKind::kNone, BaselineKind::kRandom, BaselineKind::kMostActive,
                 BaselineKind::kConstrained}) {
    if (text == baseline_kind_name(k)) return k;
  }
  fail(ErrorKind::kConfig,
       "unknown baseline '" + text + "' (expected none, random, most-active or constrained)");
}

EvalReport run_baseline(BaselineKind kind, const Task& task, const Dataset& data,
                        const SteeringConfig& steering, int max_samples, std::uint64_t seed) {
  auto rng = substream(seed, "baseline-random");
  if (kind == BaselineKind::kNone || kind == BaselineKind::kConstrained) {
    SteeringPlan plan;
    plan.layers = {};
    if (kind == BaselineKind::kConstrained) {
      require(!task.reward.answer_set.empty(), ErrorKind::kConfig,
              "constrained decoding needs a valid answer set");
      plan.allowed_tokens = task.reward.answer_set;
    }
    return evaluate(task, data, plan, no_steering_chooser(), rng, max_samples, nullptr,
                    baseline_kind_name(kind));
  }
  const SteeringPlan plan = make_plan(task, steering, AgentMode::kCrlToken);
  const Chooser chooser =
      kind == BaselineKind::kRandom ? random_chooser() : most_active_chooser();
  return evaluate(task, data, plan, chooser, rng, max_samples, nullptr, baseline_kind_name(kind));
}

std::vector<SweepCell> sweep(const Task& task, const std::vector<int>& layers,
                             const std::vector<double>& coefficients,
                             const SteeringConfig& steering, AgentMode mode,
                             const PpoConfig& per_cell) {
  require(!layers.empty() && !coefficients.empty(), ErrorKind::kConfig, "empty sweep grid");
  std::vector<SweepCell> cells;
  std::uint64_t index = 0;
  for (int layer : layers) {
    for (double c : coefficients) {
      SweepCell cell;
      cell.layer = layer;
      cell.coefficient = c;
      SteeringConfig cfg = steering;
      cfg.layers = {layer};
      cfg.calibrated = false;
      cfg.coefficient = c;
      cfg.recalibrate_every = 0;
      PpoConfig pc = per_cell;
      pc.seed = derive_seed(per_cell.seed, "sweep", index++);
      try {
        const TrainResult tr = train(task, cfg, mode, pc);
        const EvalReport rep =
            evaluate_agents(task, task.eval, tr.plan, tr.agents, per_cell.eval_samples);
        cell.accuracy = rep.accuracy;
        cell.diversity = rep.diversity;
      } catch (const Error& e) {
        cell.error = std::string(error_kind_name(e.kind())) + ": " + e.what();
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

}  // namespace crl
