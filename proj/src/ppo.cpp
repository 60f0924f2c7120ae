#include "crl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "crl/diagnostics.hpp"
#include "crl/rng.hpp"

namespace crl {

void validate(const PpoConfig& c) {
  std::ostringstream err;
  if (!(c.clip_epsilon > 0.0 && c.clip_epsilon < 1.0)) err << "clip epsilon must be in (0,1); ";
  if (!(c.policy_lr > 0.0) || !(c.critic_lr > 0.0)) err << "learning rates must be > 0; ";
  if (c.epochs < 1) err << "epochs must be >= 1; ";
  if (c.batch_size < 1) err << "batch size must be >= 1; ";
  if (c.max_steps < 0) err << "max steps must be >= 0; ";
  if (c.eval_interval < 1) err << "eval interval must be >= 1; ";
  if (c.eval_samples < 1) err << "eval samples must be >= 1; ";
  if (c.min_samples < 0) err << "min samples must be >= 0; ";
  if (c.hidden < 0) err << "hidden width must be >= 0; ";
  if (c.entropy_coef < 0.0) err << "entropy coefficient must be >= 0; ";
  const std::string msg = err.str();
  if (!msg.empty()) fail(ErrorKind::kConfig, "invalid PPO config: " + msg);
}

// ---------------------------------------------------------------------------

RolloutBatch rollout(const Task& task, const std::vector<Example>& examples,
                     const SteeringPlan& plan, const std::vector<AgentParams>& agents,
                     std::mt19937_64& rng) {
  const auto groups = plan.groups();
  require(agents.size() == groups.size(), ErrorKind::kInvalidArgument,
          "rollout needs one agent per layer group");
  const Chooser chooser = policy_chooser(agents, SelectionMode::kSampled, plan.k);

  RolloutBatch batch;
  batch.by_group.resize(groups.size());
  double reward_sum = 0.0;
  for (const auto& ex : examples) {
    Episode ep;
    try {
      ep = run_episode(task, ex, plan, chooser, rng);
    } catch (const Error& e) {
      fail(e.kind(), "sample " + std::to_string(ex.id) + ": " + e.what());
    }
    reward_sum += ep.reward;
    for (const auto& step : ep.decisions) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        Transition tr;
        tr.sample = ep.sample_id;
        tr.step = step.step;
        tr.group = static_cast<int>(g);
        tr.reward = ep.reward;
        for (const auto& ld : step.layers) {
          if (std::find(groups[g].begin(), groups[g].end(), ld.layer) == groups[g].end()) continue;
          tr.states.push_back(ld.state);
          tr.actions.push_back(ld.feature);
          tr.masks.push_back(ld.mask);
          tr.old_log_prob += ld.log_prob;
          if (ld.layer == groups[g].back()) tr.critic_state = ld.state;
        }
        if (tr.states.empty()) continue;
        tr.old_value = critic_value(agents[g], tr.critic_state);
        batch.by_group[g].push_back(std::move(tr));
      }
    }
    batch.episodes.push_back(std::move(ep));
  }
  if (!examples.empty()) batch.mean_reward = reward_sum / static_cast<double>(examples.size());
  return batch;
}

void compute_advantage(std::vector<Transition>& batch, bool standardize) {
  for (auto& tr : batch) tr.advantage = tr.reward - tr.old_value;
  if (!standardize || batch.size() < 2) return;
  double mean = 0.0;
  for (const auto& tr : batch) mean += tr.advantage;
  mean /= static_cast<double>(batch.size());
  double var = 0.0;
  for (const auto& tr : batch) var += (tr.advantage - mean) * (tr.advantage - mean);
  var /= static_cast<double>(batch.size());
  const double sd = std::sqrt(var) + 1e-8;
  for (auto& tr : batch) tr.advantage = (tr.advantage - mean) / sd;
}

SurrogateTerms ppo_policy_loss(std::span<const double> new_log_probs,
                               std::span<const double> old_log_probs,
                               std::span<const double> advantages, double epsilon) {
  require(new_log_probs.size() == old_log_probs.size() &&
              new_log_probs.size() == advantages.size(),
          ErrorKind::kShape, "policy loss inputs are not aligned");
  require(!new_log_probs.empty(), ErrorKind::kInvalidArgument, "policy loss over an empty batch");
  SurrogateTerms out;
  double total = 0.0;
  for (std::size_t i = 0; i < new_log_probs.size(); ++i) {
    const double rho = std::exp(new_log_probs[i] - old_log_probs[i]);
    if (!std::isfinite(rho)) {
      fail(ErrorKind::kDivergence, "policy ratio diverged at batch entry " + std::to_string(i));
    }
    const double a = advantages[i];
    const double unclipped = rho * a;
    const double clipped = std::clamp(rho, 1.0 - epsilon, 1.0 + epsilon) * a;
    out.ratio.push_back(rho);
    out.unclipped.push_back(unclipped);
    out.clipped.push_back(clipped);
    total += std::min(unclipped, clipped);
  }
  out.loss = -total / static_cast<double>(new_log_probs.size());
  return out;
}

// ---------------------------------------------------------------------------

double policy_batch_loss(const AgentParams& agent, const std::vector<Transition>& batch,
                         double epsilon, double entropy_coef, MlpParams* grad) {
  require(!batch.empty(), ErrorKind::kInvalidArgument, "policy loss over an empty batch");
  struct LayerEval {
    MlpCache cache;
    Vec probs;
    double entropy = 0.0;
  };
  std::vector<std::vector<LayerEval>> evals(batch.size());
  std::vector<double> new_lp(batch.size(), 0.0);
  std::vector<double> old_lp(batch.size());
  std::vector<double> adv(batch.size());
  double entropy_sum = 0.0;

  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Transition& tr = batch[n];
    require(tr.states.size() == tr.actions.size() && tr.states.size() == tr.masks.size(),
            ErrorKind::kShape, "transition has misaligned states, actions and masks");
    old_lp[n] = tr.old_log_prob;
    adv[n] = tr.advantage;
    for (std::size_t l = 0; l < tr.states.size(); ++l) {
      MlpOutput fw = mlp_forward(agent.policy, tr.states[l]);
      LayerEval ev;
      ev.probs = softmax_masked(fw.output, tr.masks[l]);
      new_lp[n] += masked_log_prob(fw.output, tr.masks[l], tr.actions[l]);
      for (auto i = tr.masks[l].find_first(); i != FeatureBits::npos;
           i = tr.masks[l].find_next(i)) {
        if (ev.probs[i] > 0.0) ev.entropy -= ev.probs[i] * std::log(ev.probs[i]);
      }
      entropy_sum += ev.entropy;
      ev.cache = std::move(fw.cache);
      evals[n].push_back(std::move(ev));
    }
  }

  const SurrogateTerms terms = ppo_policy_loss(new_lp, old_lp, adv, epsilon);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double loss = terms.loss - entropy_coef * entropy_sum * inv_n;
  if (grad == nullptr) return loss;

  require(grad->same_shape(agent.policy), ErrorKind::kShape, "policy gradient buffer shape");
  std::fill(grad->flat().begin(), grad->flat().end(), 0.0);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Transition& tr = batch[n];
    // The unclipped branch carries the gradient whenever it attains the min.
    const bool active = terms.unclipped[n] <= terms.clipped[n];
    const double d_logp = active ? -adv[n] * terms.ratio[n] * inv_n : 0.0;
    for (std::size_t l = 0; l < tr.states.size(); ++l) {
      const LayerEval& ev = evals[n][l];
      Vec g(ev.probs.size(), 0.0);
      for (auto i = tr.masks[l].find_first(); i != FeatureBits::npos;
           i = tr.masks[l].find_next(i)) {
        const double onehot = static_cast<int>(i) == tr.actions[l] ? 1.0 : 0.0;
        g[i] = d_logp * (onehot - ev.probs[i]);
        if (entropy_coef != 0.0 && ev.probs[i] > 0.0) {
          const double d_entropy = -ev.probs[i] * (std::log(ev.probs[i]) + ev.entropy);
          g[i] -= entropy_coef * inv_n * d_entropy;
        }
      }
      mlp_backward_accumulate(agent.policy, ev.cache, g, *grad);
    }
  }
  return loss;
}

double critic_batch_loss(const AgentParams& agent, const std::vector<Transition>& batch,
                         MlpParams* grad) {
  require(!batch.empty(), ErrorKind::kInvalidArgument, "critic loss over an empty batch");
  if (grad != nullptr) {
    require(grad->same_shape(agent.critic), ErrorKind::kShape, "critic gradient buffer shape");
    std::fill(grad->flat().begin(), grad->flat().end(), 0.0);
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& tr : batch) {
    MlpOutput fw = mlp_forward(agent.critic, tr.critic_state);
    const double err = fw.output[0] - tr.reward;
    loss += err * err * inv_n;
    if (grad != nullptr) {
      const double g = 2.0 * err * inv_n;
      mlp_backward_accumulate(agent.critic, fw.cache, std::span<const double>(&g, 1), *grad);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------

namespace {

void check_layers(const Task& task, const std::vector<int>& layers) {
  require(!layers.empty(), ErrorKind::kConfig, "no steered layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require(layers[i] >= 1 && layers[i] <= task.lm.layers, ErrorKind::kConfig,
            "steered layer " + std::to_string(layers[i]) + " outside 1.." +
                std::to_string(task.lm.layers));
    require(i == 0 || layers[i] > layers[i - 1], ErrorKind::kConfig,
            "steered layers must be strictly ascending");
  }
}

std::vector<GenerationTrace> correct_baseline_traces(const Task& task, const Dataset& data,
                                                     const std::vector<int>& layers) {
  std::vector<GenerationTrace> out;
  for (const auto& ex : data) {
    auto trace = baseline_trace(task, ex, layers);
    if (task.reward.reward(trace, ex) > 0.0) out.push_back(std::move(trace));
  }
  return out;
}

void recalibrate(const Task& task, const SteeringConfig& steering,
                 const std::vector<GenerationTrace>& correct, SteeringPlan& plan,
                 const std::vector<AgentParams>& agents) {
  for (int layer : plan.layers) {
    const AgentParams& agent = agents[plan.group_of(layer)];
    const auto selector = [&agent](std::span<const double> x, const FeatureActivations&) {
      return static_cast<int>(argmax(policy_logits(agent, x)));
    };
    plan.coefficient[layer] = calibrate_coefficient(correct, selector, task.sae_for(layer),
                                                    steering.calibration_mode, layer)
                                  .coefficient;
  }
}

std::string batch_dump(const std::vector<Transition>& batch) {
  std::ostringstream os;
  for (const auto& tr : batch) {
    os << "\n  sample " << tr.sample << " step " << tr.step << " group " << tr.group
       << " old_log_prob " << tr.old_log_prob << " old_value " << tr.old_value << " reward "
       << tr.reward << " actions";
    for (int a : tr.actions) os << ' ' << a;
  }
  return os.str();
}

}  // namespace

SteeringPlan make_plan(const Task& task, const SteeringConfig& steering, AgentMode mode) {
  check_layers(task, steering.layers);
  require(steering.k >= 1, ErrorKind::kConfig, "k must be >= 1");
  SteeringPlan plan;
  plan.mode = mode;
  plan.layers = steering.layers;
  plan.k = steering.k;
  plan.steer_prompt = steering.steer_prompt;

  const bool need_traces = steering.calibrated || steering.afm;
  std::vector<GenerationTrace> traces;
  if (need_traces) {
    for (const auto& ex : task.train) traces.push_back(baseline_trace(task, ex, steering.layers));
  }
  std::vector<GenerationTrace> correct;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (task.reward.reward(traces[i], task.train[i]) > 0.0) correct.push_back(traces[i]);
  }

  for (int layer : steering.layers) {
    const SaeParams& sae = task.sae_for(layer);
    if (steering.calibrated) {
      plan.coefficient[layer] =
          calibrate_coefficient(
              correct,
              [](std::span<const double>, const FeatureActivations& z) {
                return most_active_feature(z);
              },
              sae, steering.calibration_mode, layer)
              .coefficient;
    } else {
      plan.coefficient[layer] = steering.coefficient;
    }
    if (steering.afm) {
      require(!traces.empty(), ErrorKind::kTask, "AFM seeding needs training examples");
      plan.afm_seed[layer] = afm_init(traces, sae, steering.afm_seed_size, layer).mask;
    }
  }
  return plan;
}

double greedy_accuracy(const Task& task, const Dataset& data, const SteeringPlan& plan,
                       const std::vector<AgentParams>& agents, int max_samples,
                       double* diversity) {
  const std::size_t n = std::min(data.size(), static_cast<std::size_t>(std::max(max_samples, 0)));
  if (n == 0) return 0.0;
  const Chooser chooser = policy_chooser(agents, SelectionMode::kGreedy, plan.k);
  std::mt19937_64 unused(0);
  double hits = 0.0;
  std::map<int, long> counts;
  for (std::size_t i = 0; i < n; ++i) {
    const Episode ep = run_episode(task, data[i], plan, chooser, unused);
    hits += ep.reward;
    for (const auto& step : ep.decisions) {
      for (const auto& ld : step.layers) {
        if (ld.feature >= 0) ++counts[ld.feature];
      }
    }
  }
  if (diversity != nullptr) {
    std::vector<long> c;
    for (const auto& [f, k] : counts) c.push_back(k);
    *diversity = entropy_from_counts(c);
  }
  return hits / static_cast<double>(n);
}

TrainResult train(const Task& task, const SteeringConfig& steering, AgentMode mode,
                  const PpoConfig& config, const TrainHooks& hooks) {
  validate(config);
  require(steering.k == 1, ErrorKind::kConfig, "training supports k = 1 only");
  require(!task.train.empty(), ErrorKind::kTask, "empty training split");

  TrainResult result;
  result.plan = make_plan(task, steering, mode);
  SteeringPlan& plan = result.plan;
  const auto groups = plan.groups();

  const std::size_t d = static_cast<std::size_t>(task.lm.d);
  const std::size_t hidden = config.hidden > 0 ? static_cast<std::size_t>(config.hidden) : d;
  std::vector<AgentParams> agents;
  std::vector<AdamState> policy_opt;
  std::vector<AdamState> critic_opt;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto init_rng = substream(config.seed, "init", g);
    agents.push_back(agent_init(d, task.sae_for(groups[g].front()).d_dict(), hidden, init_rng,
                                mode == AgentMode::kCrlLayer));
    policy_opt.push_back(AdamState::for_params(agents.back().policy, config.policy_lr));
    critic_opt.push_back(AdamState::for_params(agents.back().critic, config.critic_lr));
  }

  // Training stream: reshuffled passes over the train split, cycled to length.
  const std::size_t needed = std::max<std::size_t>(
      static_cast<std::size_t>(config.min_samples),
      static_cast<std::size_t>(config.max_steps) * static_cast<std::size_t>(config.batch_size));
  std::vector<Example> stream;
  auto data_rng = substream(config.seed, "data");
  while (stream.size() < needed) {
    std::vector<Example> pass = task.train;
    std::shuffle(pass.begin(), pass.end(), data_rng);
    stream.insert(stream.end(), pass.begin(), pass.end());
  }

  std::vector<GenerationTrace> correct;
  if (steering.calibrated && steering.recalibrate_every > 0) {
    correct = correct_baseline_traces(task, task.train, plan.layers);
  }

  auto rollout_rng = substream(config.seed, "rollout");
  auto evaluate_now = [&](MetricsRow* row) {
    double div = 0.0;
    const double acc = greedy_accuracy(task, task.eval, plan, agents, config.eval_samples, &div);
    if (row != nullptr) {
      row->eval_accuracy = acc;
      row->feature_diversity = div;
    }
    return acc;
  };

  result.best_agents = agents;
  result.best_eval_accuracy = evaluate_now(nullptr);
  result.final_eval_accuracy = result.best_eval_accuracy;

  for (int step = 1; step <= config.max_steps; ++step) {
    const auto first = stream.begin() + static_cast<std::ptrdiff_t>((step - 1) * config.batch_size);
    const std::vector<Example> examples(first, first + config.batch_size);
    RolloutBatch batch = rollout(task, examples, plan, agents, rollout_rng);

    MetricsRow row;
    row.step = step;
    row.mean_reward = batch.mean_reward;
    int groups_used = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      auto& trs = batch.by_group[g];
      if (trs.empty()) continue;
      ++groups_used;
      compute_advantage(trs, config.standardize_advantage);
      MlpParams pgrad(agents[g].policy.in_dim(), agents[g].policy.hidden_dim(),
                      agents[g].policy.out_dim());
      MlpParams cgrad(agents[g].critic.in_dim(), agents[g].critic.hidden_dim(), 1);
      for (int epoch = 0; epoch < config.epochs; ++epoch) {
        double pl = 0.0;
        double cl = 0.0;
        try {
          pl = policy_batch_loss(agents[g], trs, config.clip_epsilon, config.entropy_coef, &pgrad);
          cl = critic_batch_loss(agents[g], trs, &cgrad);
          if (!std::isfinite(pl) || !std::isfinite(cl)) {
            fail(ErrorKind::kDivergence, "non-finite loss");
          }
          adam_step(agents[g].policy, pgrad, policy_opt[g]);
          adam_step(agents[g].critic, cgrad, critic_opt[g]);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::kDivergence) throw;
          fail(ErrorKind::kDivergence, "training diverged at step " + std::to_string(step) +
                                           " group " + std::to_string(g) + ": " + e.what() +
                                           "; batch:" + batch_dump(trs));
        }
        if (epoch == 0) {
          row.policy_loss += pl;
          row.critic_loss += cl;
        }
      }
    }
    if (groups_used > 0) {
      row.policy_loss /= groups_used;
      row.critic_loss /= groups_used;
    }

    if (steering.calibrated && steering.recalibrate_every > 0 &&
        step % steering.recalibrate_every == 0) {
      recalibrate(task, steering, correct, plan, agents);
    }

    if (step % config.eval_interval == 0 || step == config.max_steps) {
      const double acc = evaluate_now(&row);
      result.final_eval_accuracy = acc;
      if (acc > result.best_eval_accuracy) {
        result.best_eval_accuracy = acc;
        result.best_step = step;
        result.best_agents = agents;
      }
      if (hooks.on_checkpoint) hooks.on_checkpoint(step, agents);
    }
    result.metrics.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
  }
  result.agents = std::move(agents);
  return result;
}

}  // namespace crl
