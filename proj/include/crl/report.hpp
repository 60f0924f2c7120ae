#pragma once

// On-disk run artifacts: CSV and line-delimited JSON writers and readers, and
// the run manifest. Numbers are printed with a fixed format so reruns with the
// same seed produce byte-identical files.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crl/diagnostics.hpp"
#include "crl/evaluate.hpp"
#include "crl/ppo.hpp"

namespace crl {

inline constexpr const char* kToolVersion = "0.1.0";

std::string format_number(double v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// sample,answer,baseline_token,steered_token,baseline_correct,steered_correct,category
std::string samples_csv(const EvalReport& report);
std::vector<SampleResult> parse_samples_csv(const std::string& text);

std::string interventions_jsonl(const EvalReport& report,
                                const std::map<int, std::string>& labels = {});
std::vector<InterventionRecord> parse_interventions_jsonl(const std::string& text);

// One record per sample with its per-step features and emitted tokens. Critic
// values are included when the report has them.
std::string traces_jsonl(const EvalReport& report, const Dataset& data);

struct TraceRecord {
  int sample = 0;
  std::vector<int> prompt;
  int answer = 0;
  double reward = 0.0;
  OutcomeCategory category = OutcomeCategory::kUnchangedIncorrect;
  std::vector<int> features;  // deepest steered layer per step; -1 when none
  std::vector<int> tokens;
  std::vector<double> values;
};
std::vector<TraceRecord> parse_traces_jsonl(const std::string& text);

std::string eval_json(const EvalReport& report, const std::vector<int>& answer_set);
std::vector<int> answer_set_from_eval_json(const std::string& text);

// step,mean_reward,policy_loss,critic_loss,eval_accuracy,feature_diversity
std::string metrics_csv(const std::vector<MetricsRow>& rows);

// layer,coefficient,accuracy,diversity,error
std::string sweep_csv(const std::vector<SweepCell>& cells);

// feature,selections,share,corrected,misguided,impact,label
std::string features_csv(const std::vector<FeatureStat>& stats,
                         const std::map<int, std::string>& labels = {});

struct RunManifest {
  std::string command;
  std::uint64_t config_hash = 0;
  std::string tool_version = kToolVersion;
  std::string started_at;
  std::string finished_at;
  bool sealed = false;
  std::string calibration_mode;
  std::map<int, double> coefficient;
  std::vector<std::string> files;  // relative to the run directory
};

std::string utc_timestamp();

// Writes manifest.json into `dir`, listing each file with its size and FNV-1a hash.
void write_manifest(const std::string& dir, const RunManifest& manifest);

}  // namespace crl
