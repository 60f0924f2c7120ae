#include "crl/commands.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "crl/config.hpp"
#include "crl/diagnostics.hpp"
#include "crl/evaluate.hpp"
#include "crl/planted.hpp"
#include "crl/ppo.hpp"
#include "crl/report.hpp"
#include "crl/rng.hpp"

namespace crl {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string task;
  std::string mode;
  std::string layers;
  std::optional<double> coefficient;
  std::optional<int> steps;
  std::string calibration_mode;
  std::string split = "eval";
  std::string checkpoint;
  std::string baseline_kind;
  std::vector<std::string> runs;
  int repeat = 3;
};

class RunDir {
 public:
  RunDir(std::string command, RunConfig cfg, const std::string& out_opt)
      : command_(std::move(command)), cfg_(std::move(cfg)) {
    if (!out_opt.empty()) {
      dir_ = out_opt;
    } else if (!cfg_.output_dir.empty()) {
      dir_ = cfg_.output_dir;
    } else if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
      dir_ = (fs::path(root) / command_).string();
    } else {
      dir_ = (fs::path("runs") / command_).string();
    }
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) fail(ErrorKind::kIo, "cannot create output directory " + dir_ + ": " + ec.message());
    manifest_.command = command_;
    manifest_.config_hash = config_hash(cfg_);
    manifest_.started_at = utc_timestamp();
    manifest_.calibration_mode = calibration_mode_name(cfg_.steering.calibration_mode);
    write_manifest(dir_, manifest_);
    emit("config.ini", serialize_config(cfg_));
  }

  const std::string& dir() const { return dir_; }
  const RunConfig& cfg() const { return cfg_; }
  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

  void emit(const std::string& name, const std::string& content) {
    const fs::path p = fs::path(dir_) / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text_file(p.string(), content);
    track(name);
  }

  void track(const std::string& name) {
    if (std::find(manifest_.files.begin(), manifest_.files.end(), name) == manifest_.files.end()) {
      manifest_.files.push_back(name);
    }
  }

  void set_coefficients(const std::map<int, double>& c) { manifest_.coefficient = c; }

  void seal() {
    manifest_.finished_at = utc_timestamp();
    manifest_.sealed = true;
    write_manifest(dir_, manifest_);
  }

 private:
  std::string command_;
  RunConfig cfg_;
  std::string dir_;
  RunManifest manifest_;
};

Task resolve_task(const RunConfig& cfg) {
  if (!cfg.task_dir.empty()) return load_task(cfg.task_dir);
  return make_planted_task(cfg.planted).task;
}

const Dataset& split_of(const Task& task, const std::string& split) {
  if (split == "eval") return task.eval;
  if (split == "train") return task.train;
  fail(ErrorKind::kConfig, "unknown split '" + split + "' (expected train or eval)");
}

std::map<int, std::string> labels_of(const RunConfig& cfg) {
  if (cfg.feature_labels.empty()) return {};
  return load_feature_labels(cfg.feature_labels);
}

void emit_eval(RunDir& run, const EvalReport& rep, const Task& task, const Dataset& data,
               const std::string& prefix = "") {
  run.emit(prefix + "eval.json", eval_json(rep, task.reward.answer_set));
  run.emit(prefix + "samples.csv", samples_csv(rep));
  run.emit(prefix + "interventions.jsonl", interventions_jsonl(rep, labels_of(run.cfg())));
  run.emit(prefix + "traces.jsonl", traces_jsonl(rep, data));
  run.set_coefficients(rep.coefficient);
}

std::string plan_json(const SteeringPlan& plan) {
  json j;
  j["mode"] = agent_mode_name(plan.mode);
  j["layers"] = plan.layers;
  json coeff = json::object();
  for (const auto& [l, c] : plan.coefficient) coeff[std::to_string(l)] = c;
  j["coefficient"] = coeff;
  json afm = json::object();
  for (const auto& [l, m] : plan.afm_seed) {
    std::vector<int> bits;
    for (auto i = m.bits().find_first(); i != FeatureBits::npos; i = m.bits().find_next(i)) {
      bits.push_back(static_cast<int>(i));
    }
    afm[std::to_string(l)] = bits;
  }
  j["afm_seed"] = afm;
  j["critic_state"] = "deepest steered layer of each agent's group";
  return j.dump(2) + "\n";
}

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------

void cmd_plant(RunDir& run, std::ostream& out) {
  const PlantedTask p = make_planted_task(run.cfg().planted);
  save_task(p.task, run.path("task"));
  for (const auto& entry : fs::directory_iterator(run.path("task"))) {
    run.track("task/" + entry.path().filename().string());
  }
  json j;
  j["attempts"] = p.attempts;
  j["train_coverage"] = p.train_coverage;
  j["eval_coverage"] = p.eval_coverage;
  j["train_baseline_accuracy"] = p.train_baseline_accuracy;
  j["eval_baseline_accuracy"] = p.eval_baseline_accuracy;
  json coeff = json::object();
  for (const auto& [l, c] : p.coefficient) coeff[std::to_string(l)] = c;
  j["coefficient"] = coeff;
  j["answer_features"] = p.answer_features;
  run.emit("plant.json", j.dump(2) + "\n");
  run.set_coefficients(p.coefficient);
  out << "planted task written to " << run.path("task") << " (coverage " << p.train_coverage
      << "/" << p.eval_coverage << ", baseline accuracy " << p.eval_baseline_accuracy << ")\n";
}

void cmd_calibrate(RunDir& run, std::ostream& out) {
  const Task task = resolve_task(run.cfg());
  std::ostringstream csv;
  csv << "layer,mode,coefficient,steps\n";
  std::map<int, double> chosen;
  std::vector<GenerationTrace> correct;
  std::vector<GenerationTrace> all;
  for (const auto& ex : task.train) {
    auto trace = baseline_trace(task, ex, run.cfg().steering.layers);
    if (task.reward.reward(trace, ex) > 0.0) correct.push_back(trace);
    all.push_back(std::move(trace));
  }
  const auto selector = [](std::span<const double>, const FeatureActivations& z) {
    return most_active_feature(z);
  };
  std::ostringstream afm;
  afm << "layer,features\n";
  for (int layer : run.cfg().steering.layers) {
    for (auto mode : {CalibrationMode::kActivation, CalibrationMode::kDecoderNorm}) {
      const Calibration cal =
          calibrate_coefficient(correct, selector, task.sae_for(layer), mode, layer);
      csv << layer << ',' << calibration_mode_name(mode) << ',' << format_number(cal.coefficient)
          << ',' << cal.steps << '\n';
      if (mode == run.cfg().steering.calibration_mode) chosen[layer] = cal.coefficient;
    }
    const AfmInit init = afm_init(all, task.sae_for(layer), run.cfg().steering.afm_seed_size, layer);
    std::vector<int> bits;
    for (auto i = init.mask.bits().find_first(); i != FeatureBits::npos;
         i = init.mask.bits().find_next(i)) {
      bits.push_back(static_cast<int>(i));
    }
    afm << layer << ',' << join_ints(bits, ' ') << '\n';
  }
  run.emit("calibration.csv", csv.str());
  run.emit("afm_seed.csv", afm.str());
  run.set_coefficients(chosen);
  for (const auto& [l, c] : chosen) out << "layer " << l << ": c = " << format_number(c) << "\n";
}

void cmd_train(RunDir& run, std::ostream& out) {
  const RunConfig& cfg = run.cfg();
  const Task task = resolve_task(cfg);
  const std::uint64_t hash = config_hash(cfg);
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int step, const std::vector<AgentParams>& agents) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_step%06d.crla", step);
    save_agents(agents, hash, run.path(name));
    run.track(name);
  };
  const TrainResult res = train(task, cfg.steering, cfg.mode, cfg.ppo, hooks);
  run.emit("metrics.csv", metrics_csv(res.metrics));
  run.emit("plan.json", plan_json(res.plan));
  save_agents(res.agents, hash, run.path("final.crla"));
  run.track("final.crla");
  save_agents(res.best_agents, hash, run.path("best.crla"));
  run.track("best.crla");

  const EvalReport final_rep =
      evaluate_agents(task, task.eval, res.plan, res.agents, cfg.ppo.eval_samples);
  const EvalReport best_rep =
      evaluate_agents(task, task.eval, res.plan, res.best_agents, cfg.ppo.eval_samples);
  emit_eval(run, best_rep, task, task.eval, "best_");
  emit_eval(run, final_rep, task, task.eval);
  json summary;
  summary["final_eval_accuracy"] = final_rep.accuracy;
  summary["best_eval_accuracy"] = best_rep.accuracy;
  summary["best_step"] = res.best_step;
  summary["baseline_accuracy"] = final_rep.baseline_accuracy;
  summary["steps"] = cfg.ppo.max_steps;
  run.emit("train.json", summary.dump(2) + "\n");
  out << "trained " << cfg.ppo.max_steps << " steps: final accuracy "
      << format_number(final_rep.accuracy) << ", best " << format_number(best_rep.accuracy)
      << " at step " << res.best_step << ", baseline " << format_number(final_rep.baseline_accuracy)
      << "\n";
}

std::vector<AgentParams> load_checkpoint(const std::string& path, const SteeringPlan& plan) {
  require(!path.empty(), ErrorKind::kConfig, "--checkpoint is required");
  auto agents = load_agents(path);
  require(agents.size() == plan.groups().size(), ErrorKind::kConfig,
          "checkpoint holds " + std::to_string(agents.size()) + " agents but the steering plan needs " +
              std::to_string(plan.groups().size()));
  return agents;
}

void cmd_eval(RunDir& run, const Options& opt, std::ostream& out) {
  const RunConfig& cfg = run.cfg();
  const Task task = resolve_task(cfg);
  const SteeringPlan plan = make_plan(task, cfg.steering, cfg.mode);
  const auto agents = load_checkpoint(opt.checkpoint, plan);
  const Dataset& data = split_of(task, opt.split);
  const EvalReport rep = evaluate_agents(task, data, plan, agents, cfg.ppo.eval_samples);
  emit_eval(run, rep, task, data);
  out << "accuracy " << format_number(rep.accuracy) << " (baseline "
      << format_number(rep.baseline_accuracy) << ") over " << rep.samples << " samples\n";
}

void cmd_baseline(RunDir& run, const Options& opt, std::ostream& out) {
  const RunConfig& cfg = run.cfg();
  const Task task = resolve_task(cfg);
  const Dataset& data = split_of(task, opt.split);
  const EvalReport rep = run_baseline(parse_baseline_kind(opt.baseline_kind), task, data,
                                      cfg.steering, cfg.ppo.eval_samples, cfg.seed);
  emit_eval(run, rep, task, data);
  out << opt.baseline_kind << " accuracy " << format_number(rep.accuracy) << " over "
      << rep.samples << " samples\n";
}

void cmd_oracle(RunDir& run, const Options& opt, std::ostream& out) {
  const RunConfig& cfg = run.cfg();
  const Task task = resolve_task(cfg);
  const SteeringPlan plan = make_plan(task, cfg.steering, cfg.mode);
  const Dataset& data = split_of(task, opt.split);
  std::ostringstream csv;
  csv << "sample,layer,coefficient,flipping_count,features\n";
  json summary = json::object();
  for (int layer : plan.layers) {
    const double c = plan.coefficient.at(layer);
    long covered = 0;
    for (const auto& ex : data) {
      const auto flips =
          brute_force_flipping_features(task.lm, task.sae_for(layer), ex, layer, c, task.horizon);
      covered += flips.empty() ? 0 : 1;
      csv << ex.id << ',' << layer << ',' << format_number(c) << ',' << flips.size() << ','
          << join_ints(flips, ' ') << '\n';
    }
    const double coverage =
        data.empty() ? 0.0 : static_cast<double>(covered) / static_cast<double>(data.size());
    summary[std::to_string(layer)] = {{"coefficient", c}, {"coverage", coverage}};
    out << "layer " << layer << ": flip coverage " << format_number(coverage) << "\n";
  }
  run.emit("oracle.csv", csv.str());
  run.emit("oracle.json", summary.dump(2) + "\n");
  run.set_coefficients(plan.coefficient);
}

void cmd_sweep(RunDir& run, std::ostream& out) {
  const RunConfig& cfg = run.cfg();
  const Task task = resolve_task(cfg);
  PpoConfig per_cell = cfg.ppo;
  per_cell.max_steps = cfg.sweep_steps;
  const auto cells =
      sweep(task, cfg.sweep_layers, cfg.sweep_coefficients, cfg.steering, cfg.mode, per_cell);
  run.emit("sweep.csv", sweep_csv(cells));
  long failed = 0;
  for (const auto& c : cells) failed += c.error.empty() ? 0 : 1;
  out << "sweep: " << cells.size() << " cells, " << failed << " failed\n";
}

void cmd_norms(RunDir& run, const Options& opt, std::ostream& out) {
  const Task task = resolve_task(run.cfg());
  std::vector<std::vector<int>> prompts;
  for (const auto& ex : split_of(task, opt.split)) prompts.push_back(ex.prompt);
  const Vec norms = residual_norm_profile(task.lm, prompts);
  std::ostringstream csv;
  csv << "layer,mean_norm\n";
  for (std::size_t l = 0; l < norms.size(); ++l) {
    csv << l + 1 << ',' << format_number(norms[l]) << '\n';
  }
  run.emit("norms.csv", csv.str());
  out << "residual norms for " << norms.size() << " layers written\n";
}

void cmd_overhead(RunDir& run, const Options& opt, std::ostream& out) {
  const RunConfig& cfg = run.cfg();
  const Task task = resolve_task(cfg);
  const SteeringPlan plan = make_plan(task, cfg.steering, cfg.mode);
  const Dataset& data = split_of(task, opt.split);
  std::vector<AgentParams> agents;
  Chooser steered = most_active_chooser();
  std::string steered_name = "most-active";
  if (!opt.checkpoint.empty()) {
    agents = load_checkpoint(opt.checkpoint, plan);
    steered = policy_chooser(agents, SelectionMode::kGreedy, plan.k);
    steered_name = "policy";
  }
  require(opt.repeat >= 1, ErrorKind::kConfig, "--repeat must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  auto time_it = [&](const std::function<void(const Example&)>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < opt.repeat; ++r) {
      for (const auto& ex : data) fn(ex);
    }
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  const double base = time_it([&](const Example& ex) { baseline_trace(task, ex, {}); });
  const double steer = time_it([&](const Example& ex) { run_episode(task, ex, plan, steered, rng); });
  const double n = static_cast<double>(data.size() * static_cast<std::size_t>(opt.repeat));
  std::ostringstream csv;
  csv << "mode,seconds,per_sample_ms\n";
  csv << "unsteered," << format_number(base) << ',' << format_number(1e3 * base / n) << '\n';
  csv << steered_name << ',' << format_number(steer) << ',' << format_number(1e3 * steer / n)
      << '\n';
  run.emit("overhead.csv", csv.str());
  out << "unsteered " << format_number(1e3 * base / n) << " ms/sample, " << steered_name << " "
      << format_number(1e3 * steer / n) << " ms/sample\n";
}

// ---------------------------------------------------------------------------

std::string run_file(const std::string& run_dir, const std::string& name) {
  return read_text_file((fs::path(run_dir) / name).string());
}

void cmd_analyze_features(RunDir& run, const Options& opt, std::ostream& out) {
  require(opt.runs.size() == 1, ErrorKind::kConfig, "analyze features takes one --run");
  const auto records = parse_interventions_jsonl(run_file(opt.runs[0], "interventions.jsonl"));
  const auto samples = parse_samples_csv(run_file(opt.runs[0], "samples.csv"));
  std::map<int, OutcomeCategory> cats;
  for (const auto& s : samples) cats[s.sample] = s.category;
  const auto stats = impact_scores(records, cats);
  run.emit("features.csv", features_csv(stats, labels_of(run.cfg())));
  json j;
  j["records"] = records.size();
  j["distinct_features"] = stats.size();
  j["feature_diversity"] = records.empty() ? 0.0 : feature_diversity(records);
  j["count_unit"] = "steered steps";
  run.emit("features.json", j.dump(2) + "\n");
  out << stats.size() << " features over " << records.size() << " interventions\n";
}

void cmd_analyze_critic(RunDir& run, const Options& opt, std::ostream& out) {
  require(opt.runs.size() == 1, ErrorKind::kConfig, "analyze critic takes one --run");
  const auto traces = parse_traces_jsonl(run_file(opt.runs[0], "traces.jsonl"));
  std::vector<CriticTrajectory> trajectories;
  for (const auto& t : traces) {
    if (t.values.empty()) continue;
    trajectories.push_back({t.sample, t.category, t.values, std::nullopt});
  }
  require(!trajectories.empty(), ErrorKind::kInvalidArgument,
          "run has no critic values; analyze critic needs a trained-policy eval run");
  const CriticReport rep = critic_trajectory_stats(trajectories);
  std::ostringstream per;
  per << "sample,category,steps,slope,intercept,final_value\n";
  for (const auto& t : rep.trajectories) {
    per << t.sample << ',' << outcome_name(t.category) << ',' << t.values.size() << ','
        << (t.fit ? format_number(t.fit->slope) : "") << ','
        << (t.fit ? format_number(t.fit->intercept) : "") << ',' << format_number(t.values.back())
        << '\n';
  }
  std::ostringstream sum;
  sum << "category,count,mean_value,mean_final_value,mean_slope\n";
  for (const auto& s : rep.summaries) {
    sum << outcome_name(s.category) << ',' << s.count << ',' << format_number(s.mean_value) << ','
        << format_number(s.mean_final_value) << ','
        << (s.mean_slope ? format_number(*s.mean_slope) : "") << '\n';
  }
  std::ostringstream gaps;
  gaps << "category_a,category_b,final_value_gap,slope_gap\n";
  for (const auto& g : rep.gaps) {
    gaps << outcome_name(g.a) << ',' << outcome_name(g.b) << ',' << format_number(g.final_value_gap)
         << ',' << (g.slope_gap ? format_number(*g.slope_gap) : "") << '\n';
  }
  run.emit("critic_trajectories.csv", per.str());
  run.emit("critic_summary.csv", sum.str());
  run.emit("critic_gaps.csv", gaps.str());
  out << rep.trajectories.size() << " critic trajectories in " << rep.summaries.size()
      << " categories\n";
}

void cmd_analyze_branches(RunDir& run, const Options& opt, std::ostream& out) {
  require(opt.runs.size() == 2, ErrorKind::kConfig, "analyze branches takes two --run directories");
  const auto a = parse_traces_jsonl(run_file(opt.runs[0], "traces.jsonl"));
  const auto b = parse_traces_jsonl(run_file(opt.runs[1], "traces.jsonl"));
  std::map<int, const TraceRecord*> by_sample;
  for (const auto& t : b) by_sample[t.sample] = &t;
  std::vector<std::pair<BranchArm, BranchArm>> pairs;
  for (const auto& ta : a) {
    const auto it = by_sample.find(ta.sample);
    if (it == by_sample.end()) continue;
    const TraceRecord& tb = *it->second;
    pairs.push_back({BranchArm{ta.sample, ta.prompt, ta.features, ta.tokens, ta.reward > 0.0},
                     BranchArm{tb.sample, tb.prompt, tb.features, tb.tokens, tb.reward > 0.0}});
  }
  const auto reports = find_branch_points(pairs);
  std::string lines;
  for (const auto& r : reports) {
    json j{{"sample", r.sample},
           {"common_prefix", r.common_prefix},
           {"divergence_step", r.divergence_step},
           {"arm_a", {{"feature", r.feature_a}, {"token", r.token_a}, {"correct", r.correct_a}}},
           {"arm_b", {{"feature", r.feature_b}, {"token", r.token_b}, {"correct", r.correct_b}}}};
    lines += j.dump() + "\n";
  }
  run.emit("branches.jsonl", lines);
  json s{{"pairs", pairs.size()}, {"divergent", reports.size()}};
  run.emit("branches.json", s.dump(2) + "\n");
  out << reports.size() << " of " << pairs.size() << " paired trajectories diverge\n";
}

void cmd_analyze_invalid(RunDir& run, const Options& opt, std::ostream& out) {
  require(opt.runs.size() == 1, ErrorKind::kConfig, "analyze invalid takes one --run");
  const auto samples = parse_samples_csv(run_file(opt.runs[0], "samples.csv"));
  const auto answers = answer_set_from_eval_json(run_file(opt.runs[0], "eval.json"));
  std::vector<int> base;
  std::vector<int> steered;
  for (const auto& s : samples) {
    base.push_back(s.baseline_token);
    steered.push_back(s.steered_token);
  }
  const InvalidCount b = count_invalid_outputs(base, answers);
  const InvalidCount s = count_invalid_outputs(steered, answers);
  std::ostringstream csv;
  csv << "run,invalid,total,rate\n";
  csv << "baseline," << b.invalid << ',' << b.total << ',' << format_number(b.rate) << '\n';
  csv << "steered," << s.invalid << ',' << s.total << ',' << format_number(s.rate) << '\n';
  run.emit("invalid.csv", csv.str());
  out << "invalid outputs: baseline " << b.invalid << "/" << b.total << ", steered " << s.invalid
      << "/" << s.total << "\n";
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message,
                  int code, const std::string& dir) {
  const json j{{"error", kind}, {"message", message}, {"exit_code", code}};
  err << j.dump() << "\n";
  if (!dir.empty()) {
    try {
      write_text_file((fs::path(dir) / "error.json").string(), j.dump(2) + "\n");
    } catch (const Error&) {
      // The stderr record above is the primary channel.
    }
  }
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options opt;
  CLI::App app{"Feature-level steering of a toy transformer with a PPO actor-critic", "crl"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("-c,--config", opt.config_path, "INI run configuration");
  app.add_option("--set", opt.sets, "Override a config key: section.key=value (repeatable)");
  app.add_option("-o,--out", opt.out, "Output directory");
  app.add_option("--seed", opt.seed, "Root seed (run.seed)");
  app.add_option("--task", opt.task, "Task directory written by `plant` (task.dir)");
  app.add_option("--mode", opt.mode, "crl-token or crl-layer (agent.mode)");
  app.add_option("--layers", opt.layers, "Comma-separated steered layers (steering.layers)");
  app.add_option("--coefficient", opt.coefficient,
                 "Fixed steering coefficient; disables calibration");
  app.add_option("--steps", opt.steps, "PPO training steps (ppo.max_steps)");
  app.add_option("--calibration-mode", opt.calibration_mode, "activation or decoder-norm");

  auto* plant = app.add_subcommand("plant", "Build a planted task with its model and SAEs");
  auto* calibrate = app.add_subcommand("calibrate", "Report steering coefficients and AFM seeds");
  auto* train_cmd = app.add_subcommand("train", "Train the steering agents with PPO");
  auto* eval = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  eval->add_option("--checkpoint", opt.checkpoint, "Agent checkpoint (.crla)")->required();
  auto* oracle = app.add_subcommand("oracle", "Brute-force flipping sets per sample");
  auto* baseline = app.add_subcommand("baseline", "Heuristic baseline evaluation");
  baseline->add_option("kind", opt.baseline_kind, "none, random, most-active or constrained")
      ->required();
  auto* sweep_cmd = app.add_subcommand("sweep", "Layer x coefficient grid of short runs");
  auto* norms = app.add_subcommand("norms", "Residual norm per layer");
  auto* overhead = app.add_subcommand("overhead", "Wall-clock cost of steered generation");
  overhead->add_option("--checkpoint", opt.checkpoint, "Time this policy instead of most-active");
  overhead->add_option("--repeat", opt.repeat, "Passes over the split");
  for (auto* sub : {eval, oracle, baseline, norms, overhead}) {
    sub->add_option("--split", opt.split, "train or eval")->capture_default_str();
  }

  auto* analyze = app.add_subcommand("analyze", "Read-only analyses of earlier run directories");
  analyze->require_subcommand(1);
  analyze->fallthrough();
  auto* a_branches = analyze->add_subcommand("branches", "Divergence points between two runs");
  auto* a_critic = analyze->add_subcommand("critic", "Critic value trajectories per category");
  auto* a_features = analyze->add_subcommand("features", "Impact and diversity per feature");
  auto* a_invalid = analyze->add_subcommand("invalid", "Out-of-answer-set outputs");
  for (auto* sub : {a_branches, a_critic, a_features, a_invalid}) {
    sub->add_option("--run", opt.runs, "Run directory to read")->required();
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    report_error(err, "usage", e.what(), 2, "");
    return 2;
  }

  std::string dir;
  try {
    std::vector<ConfigOverride> overrides;
    for (const auto& s : opt.sets) overrides.push_back(parse_override(s));
    if (opt.seed) overrides.push_back({"run.seed", std::to_string(*opt.seed)});
    if (!opt.task.empty()) overrides.push_back({"task.dir", opt.task});
    if (!opt.mode.empty()) overrides.push_back({"agent.mode", opt.mode});
    if (!opt.layers.empty()) overrides.push_back({"steering.layers", opt.layers});
    if (opt.coefficient) {
      overrides.push_back({"steering.calibrated", "false"});
      std::ostringstream c;
      c << std::setprecision(17) << *opt.coefficient;
      overrides.push_back({"steering.coefficient", c.str()});
    }
    if (opt.steps) overrides.push_back({"ppo.max_steps", std::to_string(*opt.steps)});
    if (!opt.calibration_mode.empty()) {
      overrides.push_back({"steering.calibration_mode", opt.calibration_mode});
    }
    const RunConfig cfg =
        opt.config_path.empty() ? default_config(overrides) : load_config(opt.config_path, overrides);

    CLI::App* sub = app.get_subcommands().front();
    std::string name = sub->get_name();
    if (sub == analyze) name = "analyze-" + analyze->get_subcommands().front()->get_name();
    if (sub == baseline) name = "baseline-" + opt.baseline_kind;
    RunDir run(name, cfg, opt.out);
    dir = run.dir();

    if (sub == plant) cmd_plant(run, out);
    else if (sub == calibrate) cmd_calibrate(run, out);
    else if (sub == train_cmd) cmd_train(run, out);
    else if (sub == eval) cmd_eval(run, opt, out);
    else if (sub == oracle) cmd_oracle(run, opt, out);
    else if (sub == baseline) cmd_baseline(run, opt, out);
    else if (sub == sweep_cmd) cmd_sweep(run, out);
    else if (sub == norms) cmd_norms(run, opt, out);
    else if (sub == overhead) cmd_overhead(run, opt, out);
    else if (a_branches->parsed()) cmd_analyze_branches(run, opt, out);
    else if (a_critic->parsed()) cmd_analyze_critic(run, opt, out);
    else if (a_features->parsed()) cmd_analyze_features(run, opt, out);
    else if (a_invalid->parsed()) cmd_analyze_invalid(run, opt, out);
    run.seal();
    return 0;
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    report_error(err, error_kind_name(e.kind()), e.what(), code, dir);
    return code;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what(), 1, dir);
    return 1;
  }
}

}  // namespace crl
