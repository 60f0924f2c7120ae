#include "crl/planted.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "crl/diagnostics.hpp"
#include "crl/rng.hpp"

namespace crl {

namespace {

// Construction constants. Magnitudes are relative to unit-norm directions.
constexpr double kTokenNoise = 0.5;
constexpr double kBias = 1.0;
constexpr double kKeyClass = 1.5;
constexpr double kKeyMarker = 1.0;
constexpr double kEasyAnswer = 2.5;
constexpr double kBlockedBias = 60.0;
constexpr double kAnswerSelf = 0.8;
constexpr double kAnswerUnembed = 2.0;
constexpr double kDistractorUnembed = 1.5;
constexpr double kRetrieval = 2.0;
constexpr double kValuePath = 0.3;
constexpr double kBlockScale = 0.5;
constexpr double kDecoderNoise = 0.3;
constexpr double kEncoderNoise = 0.3;

Vec random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(d);
  for (double& e : v) e = n(rng);
  const double s = norm2(v);
  for (double& e : v) e /= s;
  return v;
}

std::vector<Vec> orthonormal_directions(std::size_t count, std::size_t d, std::mt19937_64& rng) {
  std::vector<Vec> out;
  while (out.size() < count) {
    Vec v = random_unit(d, rng);
    for (const Vec& u : out) axpy(-dot(v, u), u, v);
    const double s = norm2(v);
    if (s < 1e-6) continue;
    for (double& e : v) e /= s;
    out.push_back(std::move(v));
  }
  return out;
}

Vec blend(std::initializer_list<std::pair<double, const Vec*>> parts, std::size_t d) {
  Vec v(d, 0.0);
  for (const auto& [w, p] : parts) axpy(w, *p, v);
  return v;
}

Vec normalized(Vec v) {
  const double s = norm2(v);
  for (double& e : v) e /= s;
  return v;
}

void add_outer(Matrix& m, double scale, const Vec& row_dir, const Vec& col_dir) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += scale * row_dir[i] * col_dir[j];
  }
}

enum class ContextKind { kRegular, kEasy, kBlocked };

struct TokenLayout {
  std::vector<int> answers;
  std::vector<int> distractors;
  std::vector<std::vector<int>> keys;  // per class: [easy, blocked, regular...]
  std::vector<int> fillers;
};

TokenLayout make_layout(const PlantedTaskSpec& spec) {
  TokenLayout t;
  int next = 0;
  for (int a = 0; a < spec.n_answers; ++a) t.answers.push_back(next++);
  for (int i = 0; i < spec.n_distractors; ++i) t.distractors.push_back(next++);
  t.keys.resize(spec.n_answers);
  for (int c = 0; c < spec.n_answers; ++c) {
    for (int k = 0; k < spec.keys_per_class; ++k) t.keys[c].push_back(next++);
  }
  for (; next < spec.vocab; ++next) t.fillers.push_back(next);
  return t;
}

Dataset make_split(const PlantedTaskSpec& spec, const TokenLayout& layout, int n, int first_id,
                   std::mt19937_64& rng) {
  const int n_easy = static_cast<int>(std::lround(spec.easy_fraction * n));
  const int n_blocked = static_cast<int>(std::lround(spec.blocked_fraction * n));
  std::vector<ContextKind> kinds(n, ContextKind::kRegular);
  std::fill_n(kinds.begin(), n_easy, ContextKind::kEasy);
  std::fill_n(kinds.begin() + n_easy, n_blocked, ContextKind::kBlocked);
  std::shuffle(kinds.begin(), kinds.end(), rng);

  std::uniform_int_distribution<int> cls(0, spec.n_answers - 1);
  std::uniform_int_distribution<std::size_t> filler(0, layout.fillers.size() - 1);
  std::uniform_int_distribution<int> regular(2, spec.keys_per_class - 1);
  Dataset out;
  for (int i = 0; i < n; ++i) {
    Example ex;
    ex.id = first_id + i;
    const int c = cls(rng);
    for (int p = 0; p + 1 < spec.prompt_len; ++p) ex.prompt.push_back(layout.fillers[filler(rng)]);
    int key = 0;
    switch (kinds[i]) {
      case ContextKind::kEasy: key = layout.keys[c][0]; break;
      case ContextKind::kBlocked: key = layout.keys[c][1]; break;
      case ContextKind::kRegular: key = layout.keys[c][regular(rng)]; break;
    }
    ex.prompt.push_back(key);
    ex.answer = layout.answers[c];
    out.push_back(std::move(ex));
  }
  return out;
}

struct FeatureRoles {
  std::vector<std::vector<int>> answer;  // per class
  std::vector<int> common;
};

FeatureRoles assign_roles(const PlantedTaskSpec& spec, std::mt19937_64& rng) {
  std::vector<int> perm(spec.d_dict);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  FeatureRoles roles;
  std::size_t next = 0;
  roles.answer.resize(spec.n_answers);
  for (int c = 0; c < spec.n_answers; ++c) {
    for (int f = 0; f < spec.features_per_answer; ++f) roles.answer[c].push_back(perm[next++]);
  }
  for (int f = 0; f < spec.common_features; ++f) roles.common.push_back(perm[next++]);
  return roles;
}

struct Directions {
  Vec bias;
  Vec marker;
  std::vector<Vec> key_class;
  std::vector<Vec> answer;
};

ToyLmParams build_model(const PlantedTaskSpec& spec, const TokenLayout& layout,
                        const Directions& dir, std::mt19937_64& rng) {
  ToyLmDims dims;
  dims.vocab = spec.vocab;
  dims.d = spec.d;
  dims.layers = spec.layers;
  dims.mlp_hidden = spec.mlp_hidden;
  dims.max_positions = std::max(64, spec.prompt_len + spec.horizon);
  ToyLmParams lm = random_toy_lm(dims, rng, kBlockScale);
  const auto d = static_cast<std::size_t>(spec.d);

  for (int t = 0; t < spec.vocab; ++t) {
    Vec e = random_unit(d, rng);
    for (double& v : e) v *= kTokenNoise;
    axpy(kBias, dir.bias, e);
    for (std::size_t i = 0; i < d; ++i) lm.embed(t, i) = e[i];
  }
  for (int c = 0; c < spec.n_answers; ++c) {
    for (std::size_t k = 0; k < layout.keys[c].size(); ++k) {
      const int tok = layout.keys[c][k];
      auto row = lm.embed.row(tok);
      axpy(kKeyClass, dir.key_class[c], row);
      axpy(kKeyMarker, dir.marker, row);
      if (k == 0) axpy(kEasyAnswer, dir.answer[c], row);
      if (k == 1) axpy(kBlockedBias, dir.bias, row);
    }
    axpy(kAnswerSelf, dir.answer[c], lm.embed.row(layout.answers[c]));
  }

  // Unembedding: answers read their own direction, distractors the shared bias.
  for (int c = 0; c < spec.n_answers; ++c) {
    for (std::size_t i = 0; i < d; ++i) {
      lm.unembed(i, layout.answers[c]) = kAnswerUnembed * dir.answer[c][i];
    }
  }
  for (int t : layout.distractors) {
    const Vec r = random_unit(d, rng);
    for (std::size_t i = 0; i < d; ++i) {
      lm.unembed(i, t) = kDistractorUnembed * dir.bias[i] + 0.3 * r[i];
    }
  }

  // A retrieval path in every block: queries built from the shared bias attend
  // to the key marker, and values carry the key's class direction forward.
  for (auto& block : lm.blocks) {
    const Vec q0 = random_unit(d, rng);
    add_outer(block.wq, kRetrieval, dir.bias, q0);
    add_outer(block.wk, kRetrieval, dir.marker, q0);
    for (const Vec& k : dir.key_class) {
      add_outer(block.wv, kValuePath, k, k);
      add_outer(block.wo, 1.0, k, k);
    }
  }
  validate(lm);
  return lm;
}

GenerationTrace baseline_trace_for(const Task& task, const Example& ex, int layer) {
  GenerateOptions opts;
  opts.hook_layers = {layer};
  opts.max_tokens = task.horizon;
  return generate(task.lm, ex.prompt, opts);
}

// Residual states the SAE of `layer` is fitted on, with the class of their context.
struct StateSet {
  std::vector<Vec> states;
  std::vector<int> cls;
};

StateSet collect_states(const Task& task, const Dataset& data, const TokenLayout& layout,
                        int layer) {
  StateSet s;
  for (const auto& ex : data) {
    const auto trace = baseline_trace_for(task, ex, layer);
    const int c = static_cast<int>(std::find(layout.answers.begin(), layout.answers.end(), ex.answer) -
                                   layout.answers.begin());
    for (const auto& step : trace.steps) {
      s.states.push_back(step.layers.front().pre);
      s.cls.push_back(c);
    }
  }
  return s;
}

SaeParams build_sae(const PlantedTaskSpec& spec, const Directions& dir, const FeatureRoles& roles,
                    const StateSet& states, std::mt19937_64& rng) {
  const auto d = static_cast<std::size_t>(spec.d);
  SaeParams sae = make_sae(d, spec.d_dict, spec.activation);
  std::vector<int> role(spec.d_dict, -1);  // -1 random, -2 common, c answer class
  for (int c = 0; c < spec.n_answers; ++c) {
    for (int f : roles.answer[c]) role[f] = c;
  }
  for (int f : roles.common) role[f] = -2;

  for (int f = 0; f < spec.d_dict; ++f) {
    Vec enc;
    Vec dec;
    const Vec noise_e = random_unit(d, rng);
    const Vec noise_d = random_unit(d, rng);
    if (role[f] >= 0) {
      enc = normalized(blend({{1.0, &dir.key_class[role[f]]}, {kEncoderNoise, &noise_e}}, d));
      dec = normalized(blend({{1.0, &dir.answer[role[f]]}, {kDecoderNoise, &noise_d}}, d));
    } else if (role[f] == -2) {
      enc = normalized(blend({{1.0, &dir.bias}, {0.5, &noise_e}}, d));
      dec = noise_d;
    } else {
      enc = noise_e;
      dec = noise_d;
    }
    for (std::size_t i = 0; i < d; ++i) {
      sae.w_enc(i, f) = enc[i];
      sae.w_dec(f, i) = dec[i];
    }

    std::vector<double> pre;
    std::vector<double> pre_class;
    for (std::size_t s = 0; s < states.states.size(); ++s) {
      const double v = dot(states.states[s], enc);
      pre.push_back(v);
      if (role[f] >= 0 && states.cls[s] == role[f]) pre_class.push_back(v);
    }
    double theta = 0.0;
    if (role[f] >= 0 && !pre_class.empty()) {
      theta = 0.5 * std::accumulate(pre_class.begin(), pre_class.end(), 0.0) /
              static_cast<double>(pre_class.size());
    } else if (role[f] == -2 && !pre.empty()) {
      theta = 0.25 * std::accumulate(pre.begin(), pre.end(), 0.0) / static_cast<double>(pre.size());
    } else if (!pre.empty()) {
      std::sort(pre.begin(), pre.end());
      theta = pre[static_cast<std::size_t>(0.9 * static_cast<double>(pre.size() - 1))];
    }
    theta = std::max(theta, 0.0);
    if (spec.activation == SaeActivation::kJumpRelu) {
      sae.threshold[f] = theta;
    } else {
      sae.b_enc[f] = -theta;
    }
  }
  return sae;
}

void scale_encoder(SaeParams& sae, double g) {
  for (double& e : sae.w_enc.data()) e *= g;
  for (double& e : sae.b_enc) e *= g;
  for (double& e : sae.threshold) e *= g;
}

}  // namespace

void validate(const PlantedTaskSpec& spec) {
  std::ostringstream err;
  if (spec.n_answers < 2) err << "planted task needs at least 2 answer tokens; ";
  if (spec.keys_per_class < 3) err << "keys_per_class must be >= 3; ";
  if (spec.layers < 2) err << "layers must be >= 2; ";
  if (spec.d_dict <= spec.d) err << "d_dict must exceed d; ";
  if (spec.hook_layer < 1 || spec.hook_layer > spec.layers) err << "hook_layer out of range; ";
  if (spec.prompt_len < 2) err << "prompt_len must be >= 2; ";
  if (spec.horizon < 1) err << "horizon must be >= 1; ";
  if (spec.n_train < 1 || spec.n_eval < 1) err << "splits must be nonempty; ";
  if (spec.n_answers * spec.features_per_answer + spec.common_features > spec.d_dict) {
    err << "planted features exceed the dictionary; ";
  }
  if (2 + 2 * spec.n_answers > spec.d) err << "hidden dim too small for the planted directions; ";
  if (spec.n_answers + spec.n_distractors + spec.n_answers * spec.keys_per_class + 1 > spec.vocab) {
    err << "vocabulary too small for answers, distractors, keys and fillers; ";
  }
  if (spec.easy_fraction < 0 || spec.blocked_fraction < 0 ||
      spec.easy_fraction + spec.blocked_fraction > 1.0) {
    err << "context fractions must be nonnegative and sum to <= 1; ";
  }
  if (spec.n_distractors < 1) err << "need at least one distractor token; ";
  if (spec.steer_strength <= 0) err << "steer_strength must be > 0; ";
  if (spec.max_retries < 1) err << "max_retries must be >= 1; ";
  const std::string msg = err.str();
  if (!msg.empty()) fail(ErrorKind::kTask, "invalid planted task spec: " + msg);
}

double baseline_accuracy(const Task& task, const Dataset& data) {
  if (data.empty()) return 0.0;
  double hits = 0.0;
  GenerateOptions opts;
  opts.hook_layers = {};
  opts.max_tokens = task.horizon;
  for (const auto& ex : data) {
    hits += task.reward.reward(generate(task.lm, ex.prompt, opts), ex);
  }
  return hits / static_cast<double>(data.size());
}

Calibration calibrate_from_baseline(const Task& task, const Dataset& data, int layer,
                                    CalibrationMode mode) {
  std::vector<GenerationTrace> correct;
  for (const auto& ex : data) {
    auto trace = baseline_trace_for(task, ex, layer);
    if (task.reward.reward(trace, ex) > 0.0) correct.push_back(std::move(trace));
  }
  return calibrate_coefficient(
      correct, [](std::span<const double>, const FeatureActivations& z) { return most_active_feature(z); },
      task.sae_for(layer), mode, layer);
}

double flip_coverage(const Task& task, const Dataset& data, int layer, double c) {
  if (data.empty()) return 0.0;
  long covered = 0;
  for (const auto& ex : data) {
    if (!brute_force_flipping_features(task.lm, task.sae_for(layer), ex, layer, c, task.horizon)
             .empty()) {
      ++covered;
    }
  }
  return static_cast<double>(covered) / static_cast<double>(data.size());
}

PlantedTask make_planted_task(const PlantedTaskSpec& spec) {
  validate(spec);
  const TokenLayout layout = make_layout(spec);
  double best_coverage = 0.0;
  std::string last_reason;

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    std::mt19937_64 rng(derive_seed(spec.seed, "planting", static_cast<std::uint64_t>(attempt)));
    const auto basis = orthonormal_directions(2 + 2 * spec.n_answers, spec.d, rng);
    Directions dir;
    dir.bias = basis[0];
    dir.marker = basis[1];
    for (int c = 0; c < spec.n_answers; ++c) {
      dir.key_class.push_back(basis[2 + c]);
      dir.answer.push_back(basis[2 + spec.n_answers + c]);
    }

    PlantedTask out;
    out.attempts = attempt + 1;
    Task& task = out.task;
    task.lm = build_model(spec, layout, dir, rng);
    task.horizon = spec.horizon;
    task.reward.answer_set = layout.answers;
    task.train = make_split(spec, layout, spec.n_train, 0, rng);
    task.eval = make_split(spec, layout, spec.n_eval, spec.n_train, rng);

    const FeatureRoles roles = assign_roles(spec, rng);
    for (int c = 0; c < spec.n_answers; ++c) {
      out.answer_features.insert(out.answer_features.end(), roles.answer[c].begin(),
                                 roles.answer[c].end());
    }
    std::sort(out.answer_features.begin(), out.answer_features.end());

    // Placeholder SAEs so baseline traces can be collected per layer.
    task.saes.assign(spec.layers, make_sae(spec.d, spec.d_dict, spec.activation));
    bool ok = true;
    for (int layer = 1; layer <= spec.layers && ok; ++layer) {
      const StateSet states = collect_states(task, task.train, layout, layer);
      SaeParams sae = build_sae(spec, dir, roles, states, rng);
      task.saes[layer - 1] = sae;
      double mean_norm = 0.0;
      for (const Vec& x : states.states) mean_norm += norm2(x);
      mean_norm /= static_cast<double>(states.states.size());
      Calibration cal;
      try {
        cal = calibrate_from_baseline(task, task.train, layer);
      } catch (const Error& e) {
        last_reason = e.what();
        ok = false;
        break;
      }
      if (cal.coefficient <= 0.0) {
        last_reason = "calibration produced a non-positive coefficient";
        ok = false;
        break;
      }
      scale_encoder(sae, spec.steer_strength * mean_norm / cal.coefficient);
      task.saes[layer - 1] = sae;
      out.coefficient[layer] = calibrate_from_baseline(task, task.train, layer).coefficient;
    }
    if (!ok) continue;

    const double c = out.coefficient.at(spec.hook_layer);
    out.train_baseline_accuracy = baseline_accuracy(task, task.train);
    out.eval_baseline_accuracy = baseline_accuracy(task, task.eval);
    out.train_coverage = flip_coverage(task, task.train, spec.hook_layer, c);
    out.eval_coverage = flip_coverage(task, task.eval, spec.hook_layer, c);
    best_coverage = std::max(best_coverage, std::min(out.train_coverage, out.eval_coverage));
    if (out.train_coverage >= spec.min_coverage && out.eval_coverage >= spec.min_coverage &&
        out.train_baseline_accuracy < 0.5 && out.eval_baseline_accuracy < 0.5) {
      validate(task);
      return out;
    }
    std::ostringstream why;
    why << "coverage train/eval " << out.train_coverage << "/" << out.eval_coverage
        << ", baseline accuracy " << out.train_baseline_accuracy << "/"
        << out.eval_baseline_accuracy;
    last_reason = why.str();
  }
  std::ostringstream msg;
  msg << "planted task construction failed after " << spec.max_retries
      << " attempts; best flip coverage " << best_coverage << " (last: " << last_reason << ")";
  fail(ErrorKind::kTask, msg.str());
}

}  // namespace crl
