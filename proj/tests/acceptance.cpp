// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crl/commands.hpp"
#include "crl/config.hpp"
#include "crl/diagnostics.hpp"
#include "crl/evaluate.hpp"
#include "crl/planted.hpp"
#include "crl/ppo.hpp"
#include "crl/report.hpp"
#include "generators.hpp"

using namespace crl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

PpoConfig default_ppo(std::uint64_t seed) {
  PpoConfig c;
  c.seed = seed;
  return c;
}

PlantedTaskSpec planted_spec(std::uint64_t seed) {
  PlantedTaskSpec s;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  std::mt19937_64 rng(20240601);
  double worst_policy = 0.0;
  double worst_critic = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 3 + rng() % 6;
    const std::size_t d_dict = 4 + rng() % 13;
    const std::size_t hidden = 2 + rng() % 7;
    const std::size_t layers = 1 + rng() % 3;
    AgentParams agent = agent_init(d, d_dict, hidden, rng, layers > 1);
    const auto batch = testing::random_batch(rng, agent, 1 + rng() % 8, layers);
    const double entropy = trial % 4 == 3 ? 0.01 : 0.0;

    MlpParams pg(d, hidden, d_dict);
    policy_batch_loss(agent, batch, 0.2, entropy, &pg);
    worst_policy = std::max(worst_policy, check_gradient(agent.policy.flat(), pg.flat(), [&] {
                                            return policy_batch_loss(agent, batch, 0.2, entropy);
                                          }).max_rel_error);
    MlpParams cg(d, hidden, 1);
    critic_batch_loss(agent, batch, &cg);
    worst_critic = std::max(worst_critic, check_gradient(agent.critic.flat(), cg.flat(), [&] {
                                            return critic_batch_loss(agent, batch);
                                          }).max_rel_error);
  }
  return {worst_policy <= 1e-4 && worst_critic <= 1e-4,
          "max rel error policy " + fmt("%.3g", worst_policy) + ", critic " + fmt("%.3g", worst_critic)};
}

bool same_trace(const GenerationTrace& a, const GenerationTrace& b) {
  if (a.emitted != b.emitted || a.steps.size() != b.steps.size()) return false;
  for (std::size_t t = 0; t < a.steps.size(); ++t) {
    if (a.steps[t].logits != b.steps[t].logits) return false;
    for (std::size_t l = 0; l < a.steps[t].layers.size(); ++l) {
      if (a.steps[t].layers[l].post != b.steps[t].layers[l].post) return false;
    }
  }
  return true;
}

Outcome steering_identity() {
  PlantedTaskSpec spec = planted_spec(42);
  spec.n_train = 500;
  spec.n_eval = 500;
  const PlantedTask p = make_planted_task(spec);
  const Task& task = p.task;
  SteeringConfig steering;
  steering.calibrated = false;
  steering.coefficient = 0.0;
  const SteeringPlan plan = make_plan(task, steering, AgentMode::kCrlToken);
  std::mt19937_64 init(7);
  const std::vector<AgentParams> agents{agent_init(32, 128, 32, init)};

  long mismatched_traces = 0;
  long steered_steps = 0;
  std::mt19937_64 rng(11);
  const RolloutBatch batch = rollout(task, task.eval, plan, agents, rng);
  long mismatched_rewards = 0;
  for (std::size_t i = 0; i < task.eval.size(); ++i) {
    const Example& ex = task.eval[i];
    const GenerationTrace base = baseline_trace(task, ex, plan.layers);
    if (!same_trace(batch.episodes[i].trace, base)) ++mismatched_traces;
    if (batch.episodes[i].reward != task.reward.reward(base, ex)) ++mismatched_rewards;
    steered_steps += static_cast<long>(batch.episodes[i].decisions.size());
  }
  const EvalReport rep = evaluate_agents(task, task.eval, plan, agents, 500);
  long changed = 0;
  for (const auto& r : rep.results) changed += r.steered_token != r.baseline_token;
  const bool pass = task.eval.size() == 500 && rep.samples == 500 && steered_steps >= 500 &&
                    mismatched_traces == 0 && mismatched_rewards == 0 && changed == 0 &&
                    rep.accuracy == rep.baseline_accuracy;
  return {pass, std::to_string(rep.samples) + " samples, " + std::to_string(mismatched_traces) +
                    " trace and " + std::to_string(mismatched_rewards) +
                    " reward mismatches, accuracy " + fmt("%.4f", rep.accuracy) + " vs baseline " +
                    fmt("%.4f", rep.baseline_accuracy)};
}

struct TrainedRun {
  PlantedTask planted;
  TrainResult result;
  EvalReport report;
};

TrainedRun train_planted(const PlantedTaskSpec& spec, const PpoConfig& ppo) {
  TrainedRun run{make_planted_task(spec), {}, {}};
  run.result = train(run.planted.task, SteeringConfig{}, AgentMode::kCrlToken, ppo);
  run.report = evaluate_agents(run.planted.task, run.planted.task.eval, run.result.plan,
                               run.result.agents, ppo.eval_samples);
  return run;
}

Outcome oracle_convergence(const TrainedRun& run) {
  const Task& task = run.planted.task;
  const int layer = run.result.plan.layers.front();
  const double c = run.result.plan.coefficient.at(layer);
  long covered = 0;
  long agree = 0;
  for (std::size_t i = 0; i < run.report.episodes.size(); ++i) {
    const Example& ex = task.eval[i];
    const auto flips = brute_force_flipping_features(task.lm, task.sae_for(layer), ex, layer, c);
    if (flips.empty()) continue;
    ++covered;
    const int chosen = run.report.episodes[i].decisions.front().layers.front().feature;
    agree += std::find(flips.begin(), flips.end(), chosen) != flips.end();
  }
  const double agreement = covered == 0 ? 0.0 : static_cast<double>(agree) / static_cast<double>(covered);
  const bool pass = covered > 0 && agreement >= 0.9 && run.report.accuracy >= 0.85 &&
                    run.report.baseline_accuracy < 0.5 && run.planted.eval_coverage >= 0.8;
  return {pass, "oracle agreement " + std::to_string(agree) + "/" + std::to_string(covered) + " = " +
                    fmt("%.3f", agreement) + ", eval accuracy " + fmt("%.4f", run.report.accuracy) +
                    " vs baseline " + fmt("%.4f", run.report.baseline_accuracy) + ", coverage " +
                    fmt("%.3f", run.planted.eval_coverage) + ", " +
                    std::to_string(run.result.metrics.size()) + " steps"};
}

bool popcount_nondecreasing(const Episode& ep) {
  std::map<int, std::size_t> last;
  for (const auto& step : ep.decisions) {
    for (const auto& ld : step.layers) {
      const std::size_t pc = ld.mask.count();
      auto it = last.find(ld.layer);
      if (it != last.end() && pc < it->second) return false;
      last[ld.layer] = pc;
    }
  }
  return true;
}

Outcome multi_token() {
  PlantedTaskSpec spec = planted_spec(42);
  spec.horizon = 8;
  const TrainedRun run = train_planted(spec, default_ppo(42));
  const Task& task = run.planted.task;

  long trajectories = 0;
  long violations = 0;
  for (const auto& ep : run.report.episodes) {
    ++trajectories;
    violations += !popcount_nondecreasing(ep);
  }
  std::mt19937_64 rng(5);
  const RolloutBatch batch = rollout(task, task.train, run.result.plan, run.result.agents, rng);
  for (const auto& ep : batch.episodes) {
    ++trajectories;
    violations += !popcount_nondecreasing(ep);
  }
  const bool pass = run.report.baseline_accuracy <= 0.2 && run.report.mean_reward >= 0.8 &&
                    violations == 0 && run.result.plan.afm_enabled();
  return {pass, "mean terminal reward " + fmt("%.4f", run.report.baseline_accuracy) + " -> " +
                    fmt("%.4f", run.report.mean_reward) + ", popcount violations " +
                    std::to_string(violations) + "/" + std::to_string(trajectories)};
}

Outcome baseline_ordering() {
  double crl = 0.0, most_active = 0.0, random_afm = 0.0, random_plain = 0.0;
  std::ostringstream per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const TrainedRun run = train_planted(planted_spec(seed), default_ppo(seed));
    const Task& task = run.planted.task;
    SteeringConfig with_afm;
    SteeringConfig without_afm;
    without_afm.afm = false;
    const int n = default_ppo(seed).eval_samples;
    const double ma = run_baseline(BaselineKind::kMostActive, task, task.eval, with_afm, n, seed).accuracy;
    const double ra = run_baseline(BaselineKind::kRandom, task, task.eval, with_afm, n, seed).accuracy;
    const double rp = run_baseline(BaselineKind::kRandom, task, task.eval, without_afm, n, seed).accuracy;
    crl += run.report.accuracy / 3.0;
    most_active += ma / 3.0;
    random_afm += ra / 3.0;
    random_plain += rp / 3.0;
    per_seed << " [seed " << seed << ": " << fmt("%.3f", run.report.accuracy) << "/" << fmt("%.3f", ma)
             << "/" << fmt("%.3f", ra) << "/" << fmt("%.3f", rp) << "]";
  }
  const bool pass = crl >= most_active && most_active >= random_plain && random_afm >= random_plain;
  return {pass, "means crl " + fmt("%.4f", crl) + ", most-active " + fmt("%.4f", most_active) +
                    ", random+afm " + fmt("%.4f", random_afm) + ", random " + fmt("%.4f", random_plain) +
                    ";" + per_seed.str()};
}

Outcome critic_discrimination(const TrainedRun& run) {
  std::vector<CriticTrajectory> trajectories;
  for (std::size_t i = 0; i < run.report.results.size(); ++i) {
    trajectories.push_back(
        {run.report.results[i].sample, run.report.results[i].category, run.report.values[i], {}});
  }
  const CriticReport rep = critic_trajectory_stats(trajectories);
  std::optional<double> correct, incorrect;
  long n_correct = 0, n_incorrect = 0;
  for (const auto& s : rep.summaries) {
    if (s.category == OutcomeCategory::kUnchangedCorrect) {
      correct = s.mean_value;
      n_correct = s.count;
    }
    if (s.category == OutcomeCategory::kUnchangedIncorrect) {
      incorrect = s.mean_value;
      n_incorrect = s.count;
    }
  }
  if (!correct || !incorrect) {
    return {false, "missing a category: unchanged-correct " + std::to_string(n_correct) +
                       ", unchanged-incorrect " + std::to_string(n_incorrect)};
  }
  const double gap = *correct - *incorrect;
  return {gap >= 0.1, "mean value unchanged-correct " + fmt("%.4f", *correct) + " (n=" +
                          std::to_string(n_correct) + ") vs unchanged-incorrect " +
                          fmt("%.4f", *incorrect) + " (n=" + std::to_string(n_incorrect) +
                          "), gap " + fmt("%.4f", gap)};
}

Outcome metric_exactness() {
  std::vector<InterventionRecord> records;
  std::map<int, OutcomeCategory> cats;
  for (int i = 0; i < 491; ++i) {
    InterventionRecord r;
    r.sample = i;
    r.step = 1;
    r.layer = 2;
    r.feature = 4504;
    records.push_back(r);
    cats[i] = i < 15   ? OutcomeCategory::kCorrected
              : i < 19 ? OutcomeCategory::kMisguided
                       : (i % 2 ? OutcomeCategory::kUnchangedCorrect : OutcomeCategory::kUnchangedIncorrect);
  }
  const auto stats = impact_scores(records, cats);
  const double impact = stats.size() == 1 ? stats[0].impact : -1.0;
  const bool impact_ok = std::abs(impact - 0.038696537678207736) <= 1e-15 &&
                         std::abs(impact - 0.0387) < 5e-5;

  const double e0 = entropy_from_counts({491});
  const double e128 = entropy_from_counts(std::vector<long>(128, 3));
  const double e31 = entropy_from_counts({3, 1});
  const bool entropy_ok = std::abs(e0) <= 1e-9 && std::abs(e128 - 4.852030263919617) <= 1e-9 &&
                          std::abs(e31 - 0.5623351446188083) <= 1e-9;

  struct SlopeFixture {
    std::vector<double> values;
    double slope;
  };
  const std::vector<SlopeFixture> fixtures{
      {{1.0, 2.0, 3.0}, 1.0},
      {{0.9, 0.5, 0.1}, -0.4},
      {{2.0, 1.75, 1.5, 1.25, 1.0, 0.75, 0.5, 0.25}, -0.25},
      {{0.5, 0.5, 0.5, 0.5}, 0.0},
      {{0.0, 1.0, 0.0, 1.0}, 0.2},
  };
  double worst_slope = 0.0;
  for (const auto& f : fixtures) {
    const auto fit = least_squares_fit(f.values);
    worst_slope = std::max(worst_slope, fit ? std::abs(fit->slope - f.slope) : 1.0);
  }
  const bool slope_ok = worst_slope <= 1e-12 && !least_squares_fit({0.3}).has_value();
  return {impact_ok && entropy_ok && slope_ok,
          "impact " + fmt("%.17g", impact) + ", entropy " + fmt("%.3g", e0) + " / " +
              fmt("%.12f", e128) + " / " + fmt("%.12f", e31) + ", worst slope error " +
              fmt("%.3g", worst_slope)};
}

Outcome branch_tracker() {
  std::mt19937_64 rng(77);
  long exact = 0;
  long symmetric = 0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t len = 1 + rng() % 12;
    const std::size_t k = rng() % len;
    BranchArm a;
    a.sample = i;
    a.prompt = {static_cast<int>(rng() % 64), static_cast<int>(rng() % 64)};
    for (std::size_t t = 0; t < len; ++t) {
      a.features.push_back(static_cast<int>(rng() % 128));
      a.tokens.push_back(static_cast<int>(rng() % 64));
    }
    a.correct = rng() % 2;
    BranchArm b = a;
    b.correct = !a.correct;
    // Diverge at k through the feature and/or the token, then scramble the tail.
    const int how = static_cast<int>(rng() % 3);
    if (how != 1) b.features[k] = (a.features[k] + 1 + static_cast<int>(rng() % 127)) % 128;
    if (how != 0) b.tokens[k] = (a.tokens[k] + 1 + static_cast<int>(rng() % 63)) % 64;
    for (std::size_t t = k + 1; t < len; ++t) {
      b.features[t] = static_cast<int>(rng() % 128);
      b.tokens[t] = static_cast<int>(rng() % 64);
    }
    const auto ab = find_branch_point(a, b);
    const auto ba = find_branch_point(b, a);
    if (ab && ab->divergence_step == k && ab->feature_a == a.features[k] &&
        ab->feature_b == b.features[k]) {
      ++exact;
    }
    if (ab && ba && ba->divergence_step == ab->divergence_step && ba->feature_a == ab->feature_b &&
        ba->feature_b == ab->feature_a && ba->token_a == ab->token_b && ba->token_b == ab->token_a &&
        ba->correct_a == ab->correct_b) {
      ++symmetric;
    }
  }
  return {exact == 50 && symmetric == 50,
          std::to_string(exact) + "/50 exact divergence steps, " + std::to_string(symmetric) +
              "/50 symmetric"};
}

Outcome layer_factorization() {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  long degenerate_ok = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 3 + rng() % 6;
    const std::size_t d_dict = 4 + rng() % 20;
    const AgentParams agent = agent_init(d, d_dict, 2 + rng() % 8, rng, true);
    const std::size_t layers = 2 + rng() % 3;
    std::vector<Vec> states;
    std::vector<int> actions;
    std::vector<FeatureMask> masks;
    double sum = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
      states.push_back(testing::random_vec(rng, d));
      masks.emplace_back(testing::random_mask(rng, d_dict, 0.5), 0);
      actions.push_back(testing::random_set_bit(rng, masks.back().bits()));
      sum += masked_log_prob(policy_logits(agent, states.back()), masks.back().bits(), actions.back());
    }
    worst = std::max(worst, std::abs(crl_layer_logprob(agent, states, actions, masks) - sum));

    // One layer: the joint policy is the per-token policy.
    const Vec logits = policy_logits(agent, states[0]);
    std::mt19937_64 unused(0);
    const ActionSample token = select_action(logits, masks[0], SelectionMode::kGreedy, unused);
    degenerate_ok += crl_layer_logprob(agent, {states[0]}, {token.feature}, {masks[0]}) == token.log_prob;
  }
  return {worst <= 1e-12 && degenerate_ok == 100,
          "max |joint - sum| " + fmt("%.3g", worst) + ", L=1 exact on " +
              std::to_string(degenerate_ok) + "/100"};
}

int cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  return run_command(args, out, err);
}

// Every file except the manifest, which records wall-clock timestamps.
std::map<std::string, std::string> run_files(const std::string& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name != "manifest.json") files[name] = read_text_file(e.path().string());
  }
  return files;
}

Outcome determinism() {
  const auto root = testing::scratch_dir("acceptance_determinism");
  std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"plant", {"plant"}},
      {"calibrate", {"calibrate"}},
      {"train", {"--steps", "60", "train"}},
      {"oracle", {"oracle"}},
      {"norms", {"norms"}},
      {"baseline-random", {"baseline", "random"}},
      {"baseline-most-active", {"baseline", "most-active"}},
      {"sweep", {"--set", "sweep.max_steps=10", "sweep"}},
  };
  long compared = 0;
  std::vector<std::string> differing;
  auto check_pair = [&](const std::string& name, const std::vector<std::string>& args_a,
                        const std::vector<std::string>& args_b, const std::string& a,
                        const std::string& b) {
    if (cli(args_a) != 0 || cli(args_b) != 0) {
      differing.push_back(name + " (failed)");
      return;
    }
    const auto fa = run_files(a);
    const auto fb = run_files(b);
    if (fa != fb) differing.push_back(name);
    compared += static_cast<long>(fa.size());
  };
  for (const auto& [name, args] : commands) {
    std::vector<std::string> a{"--seed", "42", "-o", root + "/" + name + "_a"};
    std::vector<std::string> b{"--seed", "42", "-o", root + "/" + name + "_b"};
    a.insert(a.end(), args.begin(), args.end());
    b.insert(b.end(), args.begin(), args.end());
    check_pair(name, a, b, a[3], b[3]);
  }
  const std::string ckpt = root + "/train_a/final.crla";
  check_pair("eval", {"--seed", "42", "-o", root + "/eval_a", "eval", "--checkpoint", ckpt},
             {"--seed", "42", "-o", root + "/eval_b", "eval", "--checkpoint", ckpt}, root + "/eval_a",
             root + "/eval_b");
  for (const std::string kind : {"features", "critic", "invalid"}) {
    check_pair("analyze-" + kind,
               {"-o", root + "/an_" + kind + "_a", "analyze", kind, "--run", root + "/train_a"},
               {"-o", root + "/an_" + kind + "_b", "analyze", kind, "--run", root + "/train_a"},
               root + "/an_" + kind + "_a", root + "/an_" + kind + "_b");
  }
  check_pair("analyze-branches",
             {"-o", root + "/br_a", "analyze", "branches", "--run", root + "/train_a", "--run",
              root + "/baseline-random_a"},
             {"-o", root + "/br_b", "analyze", "branches", "--run", root + "/train_a", "--run",
              root + "/baseline-random_a"},
             root + "/br_a", root + "/br_b");
  std::string detail = std::to_string(compared) + " files compared across 13 commands";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {differing.empty() && compared > 0, detail};
}

Outcome sweep_sanity() {
  const auto root = testing::scratch_dir("acceptance_sweep");
  if (cli({"--seed", "42", "-o", root + "/sweep", "sweep"}) != 0 ||
      cli({"--seed", "42", "-o", root + "/none", "baseline", "none"}) != 0) {
    return {false, "sweep or baseline command failed"};
  }
  const RunConfig cfg = default_config();
  std::istringstream is(read_text_file(root + "/sweep/sweep.csv"));
  std::string line;
  std::getline(is, line);
  long rows = 0;
  long zero_cells = 0;
  long zero_match = 0;
  const std::string none_json = read_text_file(root + "/none/eval.json");
  const auto key = none_json.find("\"accuracy\":");
  const double baseline = std::stod(none_json.substr(key + 11));
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++rows;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() >= 3 && std::stod(cells[1]) == 0.0) {
      ++zero_cells;
      zero_match += !cells[2].empty() && std::stod(cells[2]) == std::stod(format_number(baseline));
    }
  }
  const long expected = static_cast<long>(cfg.sweep_layers.size() * cfg.sweep_coefficients.size());
  const long expected_zero = static_cast<long>(cfg.sweep_layers.size());
  return {rows == expected && zero_cells == expected_zero && zero_match == zero_cells,
          std::to_string(rows) + " rows (expected " + std::to_string(expected) + "), c=0 cells matching baseline " +
              fmt("%.4f", baseline) + ": " + std::to_string(zero_match) + "/" + std::to_string(zero_cells)};
}

}  // namespace

int main() {
  int failures = 0;
  auto run = [&](int id, const char* name, double limit_seconds, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > limit_seconds) {
      o.pass = false;
      o.detail += "; exceeded " + fmt("%.0f", limit_seconds) + " s";
    }
    failures += !o.pass;
    std::printf("criterion %2d %-26s %s  (%s; %.1f s)\n", id, name, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  std::optional<TrainedRun> single;
  auto single_token = [&]() -> const TrainedRun& {
    if (!single) single = train_planted(planted_spec(42), default_ppo(42));
    return *single;
  };

  run(1, "gradient fidelity", 60, gradient_fidelity);
  run(2, "steering identity", 60, steering_identity);
  run(3, "oracle convergence", 300, [&] { return oracle_convergence(single_token()); });
  run(4, "multi-token task", 600, multi_token);
  run(5, "baseline ordering", 900, baseline_ordering);
  run(6, "critic discrimination", 300, [&] { return critic_discrimination(single_token()); });
  run(7, "metric exactness", 60, metric_exactness);
  run(8, "branch tracker", 60, branch_tracker);
  run(9, "crl-layer factorization", 60, layer_factorization);
  run(10, "determinism", 600, determinism);
  run(11, "sweep sanity", 600, sweep_sanity);

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
