#pragma once

// Interpretability outputs derived from steered runs. The brute-force
// steering oracle lives here too.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crl/sae.hpp"
#include "crl/task.hpp"
#include "crl/toylm.hpp"

namespace crl {

struct InterventionRecord {
  int sample = 0;
  int step = 0;
  int layer = 0;
  int feature = 0;
  double activation = 0.0;
  double coefficient = 0.0;
  int token = 0;
  std::optional<int> baseline_token;
  std::optional<std::string> label;

  bool operator==(const InterventionRecord&) const = default;
};

std::string to_jsonl(const InterventionRecord& rec);
InterventionRecord intervention_from_jsonl(const std::string& line);

enum class OutcomeCategory { kUnchangedCorrect, kUnchangedIncorrect, kCorrected, kMisguided };

const char* outcome_name(OutcomeCategory c);
OutcomeCategory parse_outcome(const std::string& text);
OutcomeCategory categorize(bool baseline_correct, bool steered_correct);

struct SampleOutcome {
  int sample = 0;
  bool correct = false;
};

// Pairs baseline and steered results by sample id. Throws if the two runs
// cover different samples.
std::map<int, OutcomeCategory> categorize_outcomes(const std::vector<SampleOutcome>& baseline,
                                                   const std::vector<SampleOutcome>& steered);

struct FeatureStat {
  int feature = 0;
  long selections = 0;   // n_i
  double share = 0.0;    // n_i / N
  long corrected = 0;    // c_i
  long misguided = 0;    // m_i
  double impact = 0.0;   // (c_i + m_i) / n_i
};

// Counts are per steered step: a record whose sample was corrected adds one to
// c_i of its feature. Sorted by impact, then by selection count (both desc),
// then by feature index.
std::vector<FeatureStat> impact_scores(const std::vector<InterventionRecord>& records,
                                       const std::map<int, OutcomeCategory>& categories);

// Natural-log entropy of a selection count table.
double entropy_from_counts(const std::vector<long>& counts);
double feature_diversity(const std::vector<InterventionRecord>& records);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

// Ordinary least squares of values against t = 0, 1, 2, ...; nullopt for fewer
// than two points.
std::optional<LineFit> least_squares_fit(const std::vector<double>& values);

struct CriticTrajectory {
  int sample = 0;
  OutcomeCategory category = OutcomeCategory::kUnchangedIncorrect;
  std::vector<double> values;
  std::optional<LineFit> fit;
};

struct CategoryCriticSummary {
  OutcomeCategory category = OutcomeCategory::kUnchangedIncorrect;
  long count = 0;
  double mean_final_value = 0.0;
  double mean_value = 0.0;
  std::optional<double> mean_slope;  // over trajectories with a defined slope
};

struct CriticReport {
  std::vector<CriticTrajectory> trajectories;
  std::vector<CategoryCriticSummary> summaries;  // only categories present
  // Pairwise differences a − b of the category summaries.
  struct Gap {
    OutcomeCategory a, b;
    double final_value_gap = 0.0;
    std::optional<double> slope_gap;
  };
  std::vector<Gap> gaps;
};

CriticReport critic_trajectory_stats(const std::vector<CriticTrajectory>& trajectories);

struct BranchArm {
  int sample = 0;
  std::vector<int> prompt;
  std::vector<int> features;  // per step; -1 when nothing was selected
  std::vector<int> tokens;
  bool correct = false;

  bool operator==(const BranchArm&) const = default;
};

struct BranchReport {
  int sample = 0;
  std::size_t common_prefix = 0;
  std::size_t divergence_step = 0;  // 0-based index of the first differing step
  int feature_a = -1;
  int feature_b = -1;
  int token_a = -1;
  int token_b = -1;
  bool correct_a = false;
  bool correct_b = false;
};

// nullopt when the arms never diverge. Throws on a prompt mismatch.
std::optional<BranchReport> find_branch_point(const BranchArm& a, const BranchArm& b);
std::vector<BranchReport> find_branch_points(
    const std::vector<std::pair<BranchArm, BranchArm>>& pairs);

struct InvalidCount {
  long invalid = 0;
  long total = 0;
  double rate = 0.0;
};

InvalidCount count_invalid_outputs(const std::vector<int>& outputs,
                                   const std::vector<int>& valid_answers);

// Features whose one-hot amplification at coefficient c (applied at `layer` on
// every generated step) turns an incorrect greedy answer into the correct one.
// Empty when the unsteered answer is already correct.
std::vector<int> brute_force_flipping_features(const ToyLmParams& lm, const SaeParams& sae,
                                               const Example& example, int layer, double c,
                                               int horizon = 1);

}  // namespace crl
