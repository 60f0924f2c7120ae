#include "crl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "crl/steering.hpp"

namespace crl {

using nlohmann::json;

std::string to_jsonl(const InterventionRecord& rec) {
  json j{{"sample", rec.sample},     {"step", rec.step},   {"layer", rec.layer},
         {"feature", rec.feature},   {"activation", rec.activation},
         {"coefficient", rec.coefficient}, {"token", rec.token}};
  if (rec.baseline_token) j["baseline_token"] = *rec.baseline_token;
  if (rec.label) j["label"] = *rec.label;
  return j.dump();
}

InterventionRecord intervention_from_jsonl(const std::string& line) {
  try {
    const json j = json::parse(line);
    InterventionRecord rec;
    rec.sample = j.at("sample").get<int>();
    rec.step = j.at("step").get<int>();
    rec.layer = j.at("layer").get<int>();
    rec.feature = j.at("feature").get<int>();
    rec.activation = j.at("activation").get<double>();
    rec.coefficient = j.at("coefficient").get<double>();
    rec.token = j.at("token").get<int>();
    if (j.contains("baseline_token")) rec.baseline_token = j["baseline_token"].get<int>();
    if (j.contains("label")) rec.label = j["label"].get<std::string>();
    return rec;
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, std::string("bad intervention record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

const char* outcome_name(OutcomeCategory c) {
  switch (c) {
    case OutcomeCategory::kUnchangedCorrect: return "unchanged-correct";
    case OutcomeCategory::kUnchangedIncorrect: return "unchanged-incorrect";
    case OutcomeCategory::kCorrected: return "corrected";
    case OutcomeCategory::kMisguided: return "misguided";
  }
  return "unknown";
}

OutcomeCategory parse_outcome(const std::string& text) {
  for (auto c : {OutcomeCategory::kUnchangedCorrect, OutcomeCategory::kUnchangedIncorrect,
                 OutcomeCategory::kCorrected, OutcomeCategory::kMisguided}) {
    if (text == outcome_name(c)) return c;
  }
  fail(ErrorKind::kIo, "unknown outcome category '" + text + "'");
}

OutcomeCategory categorize(bool baseline_correct, bool steered_correct) {
  if (baseline_correct) {
    return steered_correct ? OutcomeCategory::kUnchangedCorrect : OutcomeCategory::kMisguided;
  }
  return steered_correct ? OutcomeCategory::kCorrected : OutcomeCategory::kUnchangedIncorrect;
}

std::map<int, OutcomeCategory> categorize_outcomes(const std::vector<SampleOutcome>& baseline,
                                                   const std::vector<SampleOutcome>& steered) {
  std::map<int, bool> base;
  for (const auto& s : baseline) {
    require(base.emplace(s.sample, s.correct).second, ErrorKind::kInvalidArgument,
            "duplicate sample " + std::to_string(s.sample) + " in baseline results");
  }
  require(baseline.size() == steered.size(), ErrorKind::kInvalidArgument,
          "baseline and steered runs cover different sample sets");
  std::map<int, OutcomeCategory> out;
  for (const auto& s : steered) {
    const auto it = base.find(s.sample);
    require(it != base.end(), ErrorKind::kInvalidArgument,
            "sample " + std::to_string(s.sample) + " missing from baseline results");
    require(out.emplace(s.sample, categorize(it->second, s.correct)).second,
            ErrorKind::kInvalidArgument,
            "duplicate sample " + std::to_string(s.sample) + " in steered results");
  }
  return out;
}

std::vector<FeatureStat> impact_scores(const std::vector<InterventionRecord>& records,
                                       const std::map<int, OutcomeCategory>& categories) {
  std::map<int, FeatureStat> by_feature;
  for (const auto& rec : records) {
    const auto it = categories.find(rec.sample);
    require(it != categories.end(), ErrorKind::kInvalidArgument,
            "intervention record for sample " + std::to_string(rec.sample) +
                " has no outcome category");
    FeatureStat& st = by_feature[rec.feature];
    st.feature = rec.feature;
    ++st.selections;
    if (it->second == OutcomeCategory::kCorrected) ++st.corrected;
    if (it->second == OutcomeCategory::kMisguided) ++st.misguided;
  }
  const auto total = static_cast<double>(records.size());
  std::vector<FeatureStat> out;
  for (auto& [f, st] : by_feature) {
    st.share = static_cast<double>(st.selections) / total;
    st.impact = static_cast<double>(st.corrected + st.misguided) / static_cast<double>(st.selections);
    out.push_back(st);
  }
  std::stable_sort(out.begin(), out.end(), [](const FeatureStat& a, const FeatureStat& b) {
    if (a.impact != b.impact) return a.impact > b.impact;
    return a.selections > b.selections;
  });
  return out;
}

double entropy_from_counts(const std::vector<long>& counts) {
  long total = 0;
  for (long c : counts) total += c;
  if (total == 0) return 0.0;
  double h = 0.0;
  for (long c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

double feature_diversity(const std::vector<InterventionRecord>& records) {
  require(!records.empty(), ErrorKind::kInvalidArgument, "feature diversity needs records");
  std::map<int, long> counts;
  for (const auto& r : records) ++counts[r.feature];
  std::vector<long> c;
  for (const auto& [f, n] : counts) c.push_back(n);
  return entropy_from_counts(c);
}

// ---------------------------------------------------------------------------

std::optional<LineFit> least_squares_fit(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return std::nullopt;
  const double nn = static_cast<double>(n);
  const double t_mean = (nn - 1.0) / 2.0;
  double v_mean = 0.0;
  for (double v : values) v_mean += v;
  v_mean /= nn;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double dt = static_cast<double>(t) - t_mean;
    sxy += dt * (values[t] - v_mean);
    sxx += dt * dt;
  }
  LineFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = v_mean - fit.slope * t_mean;
  return fit;
}

CriticReport critic_trajectory_stats(const std::vector<CriticTrajectory>& trajectories) {
  CriticReport rep;
  struct Acc {
    long count = 0;
    double final_sum = 0.0;
    double value_sum = 0.0;
    long slope_count = 0;
    double slope_sum = 0.0;
  };
  std::map<OutcomeCategory, Acc> acc;
  for (const auto& tr : trajectories) {
    require(!tr.values.empty(), ErrorKind::kInvalidArgument,
            "critic trajectory for sample " + std::to_string(tr.sample) + " is empty");
    CriticTrajectory out = tr;
    out.fit = least_squares_fit(tr.values);
    Acc& a = acc[tr.category];
    ++a.count;
    a.final_sum += tr.values.back();
    double s = 0.0;
    for (double v : tr.values) s += v;
    a.value_sum += s / static_cast<double>(tr.values.size());
    if (out.fit) {
      ++a.slope_count;
      a.slope_sum += out.fit->slope;
    }
    rep.trajectories.push_back(std::move(out));
  }
  for (const auto& [cat, a] : acc) {
    CategoryCriticSummary s;
    s.category = cat;
    s.count = a.count;
    s.mean_final_value = a.final_sum / static_cast<double>(a.count);
    s.mean_value = a.value_sum / static_cast<double>(a.count);
    if (a.slope_count > 0) s.mean_slope = a.slope_sum / static_cast<double>(a.slope_count);
    rep.summaries.push_back(s);
  }
  for (std::size_t i = 0; i < rep.summaries.size(); ++i) {
    for (std::size_t j = i + 1; j < rep.summaries.size(); ++j) {
      const auto& a = rep.summaries[i];
      const auto& b = rep.summaries[j];
      CriticReport::Gap g{a.category, b.category, a.mean_final_value - b.mean_final_value, {}};
      if (a.mean_slope && b.mean_slope) g.slope_gap = *a.mean_slope - *b.mean_slope;
      rep.gaps.push_back(g);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------

std::optional<BranchReport> find_branch_point(const BranchArm& a, const BranchArm& b) {
  require(a.prompt == b.prompt, ErrorKind::kInvalidArgument,
          "branch arms for samples " + std::to_string(a.sample) + "/" + std::to_string(b.sample) +
              " do not share a prompt");
  const std::size_t steps = std::min(a.tokens.size(), b.tokens.size());
  auto at = [](const std::vector<int>& v, std::size_t i) { return i < v.size() ? v[i] : -1; };
  for (std::size_t t = 0; t < std::max(a.tokens.size(), b.tokens.size()); ++t) {
    const bool same = t < steps && at(a.features, t) == at(b.features, t) &&
                      a.tokens[t] == b.tokens[t];
    if (same) continue;
    BranchReport rep;
    rep.sample = a.sample;
    rep.common_prefix = t;
    rep.divergence_step = t;
    rep.feature_a = at(a.features, t);
    rep.feature_b = at(b.features, t);
    rep.token_a = at(a.tokens, t);
    rep.token_b = at(b.tokens, t);
    rep.correct_a = a.correct;
    rep.correct_b = b.correct;
    return rep;
  }
  return std::nullopt;
}

std::vector<BranchReport> find_branch_points(
    const std::vector<std::pair<BranchArm, BranchArm>>& pairs) {
  std::vector<BranchReport> out;
  for (const auto& [a, b] : pairs) {
    if (auto rep = find_branch_point(a, b)) out.push_back(*rep);
  }
  return out;
}

InvalidCount count_invalid_outputs(const std::vector<int>& outputs,
                                   const std::vector<int>& valid_answers) {
  const std::set<int> valid(valid_answers.begin(), valid_answers.end());
  InvalidCount c;
  c.total = static_cast<long>(outputs.size());
  for (int t : outputs) {
    if (!valid.count(t)) ++c.invalid;
  }
  c.rate = c.total == 0 ? 0.0 : static_cast<double>(c.invalid) / static_cast<double>(c.total);
  return c;
}

// ---------------------------------------------------------------------------

std::vector<int> brute_force_flipping_features(const ToyLmParams& lm, const SaeParams& sae,
                                               const Example& example, int layer, double c,
                                               int horizon) {
  require(!example.prompt.empty(), ErrorKind::kInvalidArgument, "empty prompt");
  require(horizon >= 1, ErrorKind::kInvalidArgument, "horizon must be >= 1");
  require(layer >= 1 && layer <= lm.layers, ErrorKind::kInvalidArgument, "oracle layer out of range");

  // The unsteered prefix is shared by every candidate.
  DecoderState prefix(lm);
  for (std::size_t p = 0; p + 1 < example.prompt.size(); ++p) prefix.feed(example.prompt[p]);

  auto final_answer = [&](const LayerHook& hook) {
    DecoderState state = prefix;
    int token = example.prompt.back();
    for (int t = 0; t < horizon; ++t) token = greedy_token(state.feed(token, hook));
    return token;
  };

  if (final_answer({}) == example.answer) return {};
  std::vector<int> out;
  if (c == 0.0) return out;
  for (std::size_t i = 0; i < sae.d_dict(); ++i) {
    const ActionVector action = ActionVector::single(static_cast<int>(i));
    const int token = final_answer([&](int l, std::span<double> x) {
      if (l == layer) apply_steering_inplace(x, action, c, sae);
    });
    if (token == example.answer) out.push_back(static_cast<int>(i));
  }
  return out;
}

}  // namespace crl
