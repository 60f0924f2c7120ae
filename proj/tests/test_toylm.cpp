#include <doctest.h>

#include <cmath>

#include "crl/diagnostics.hpp"
#include "crl/planted.hpp"
#include "crl/steering.hpp"
#include "crl/toylm.hpp"
#include "fixtures.hpp"
#include "generators.hpp"

using namespace crl;
using crl::testing::default_planted;
using crl::testing::scratch_dir;

namespace {

ToyLmParams small_lm(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ToyLmDims dims;
  dims.vocab = 16;
  dims.d = 8;
  dims.mlp_hidden = 12;
  dims.max_positions = 16;
  return random_toy_lm(dims, rng);
}

bool same_trace(const GenerationTrace& a, const GenerationTrace& b) {
  if (a.emitted != b.emitted || a.steps.size() != b.steps.size()) return false;
  for (std::size_t t = 0; t < a.steps.size(); ++t) {
    if (a.steps[t].logits != b.steps[t].logits) return false;
    if (a.steps[t].layers.size() != b.steps[t].layers.size()) return false;
    for (std::size_t l = 0; l < a.steps[t].layers.size(); ++l) {
      if (a.steps[t].layers[l].pre != b.steps[t].layers[l].pre) return false;
      if (a.steps[t].layers[l].post != b.steps[t].layers[l].post) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("identity intervention reproduces unhooked generation bit-exactly") {
  const ToyLmParams lm = small_lm(42);
  GenerateOptions opts;
  opts.hook_layers = {1, 2};
  opts.max_tokens = 5;
  const std::vector<int> prompt{3, 1, 4, 1, 5};
  const auto plain = generate(lm, prompt, opts);
  const auto hooked = generate(lm, prompt, opts, [](const HookContext&, std::span<double>) {
    return std::optional<int>{};
  });
  CHECK(same_trace(plain, hooked));
  CHECK(same_trace(plain, generate(lm, prompt, opts)));
}

TEST_CASE("emitted tokens are the greedy argmax of the step logits") {
  const ToyLmParams lm = small_lm(9);
  GenerateOptions opts;
  opts.max_tokens = 6;
  const auto trace = generate(lm, std::vector<int>{2, 7}, opts);
  REQUIRE(trace.steps.size() == 6);
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    CHECK(trace.steps[t].step == static_cast<int>(t) + 1);
    CHECK(trace.emitted[t] == static_cast<int>(argmax(trace.steps[t].logits)));
  }
}

TEST_CASE("greedy_token ties and allowed sets") {
  CHECK(greedy_token(Vec{1.0, 5.0, 5.0}) == 1);
  const std::vector<int> allowed{0, 2};
  CHECK(greedy_token(Vec{1.0, 5.0, 4.0}, allowed) == 2);
}

TEST_CASE("an intervention at step t leaves earlier steps untouched") {
  const ToyLmParams lm = small_lm(4);
  GenerateOptions opts;
  opts.max_tokens = 5;
  const std::vector<int> prompt{1, 2, 3};
  const auto base = generate(lm, prompt, opts);
  for (int t = 1; t <= 5; ++t) {
    const auto poked = generate(lm, prompt, opts, [t](const HookContext& hc, std::span<double> x) {
      if (hc.step == t) x[0] += 10.0;
      return std::optional<int>{};
    });
    for (int s = 1; s < t; ++s) {
      CHECK(poked.steps[s - 1].layers[0].pre == base.steps[s - 1].layers[0].pre);
      CHECK(poked.steps[s - 1].logits == base.steps[s - 1].logits);
    }
    CHECK(poked.steps[t - 1].layers[0].pre == base.steps[t - 1].layers[0].pre);
    CHECK(poked.steps[t - 1].layers[0].post != base.steps[t - 1].layers[0].post);
  }
}

TEST_CASE("generation rejects bad inputs") {
  const ToyLmParams lm = small_lm(1);
  GenerateOptions opts;
  CHECK_THROWS_AS(generate(lm, std::vector<int>{}, opts), Error);
  CHECK_THROWS_AS(generate(lm, std::vector<int>{16}, opts), Error);
  opts.max_tokens = 0;
  CHECK_THROWS_AS(generate(lm, std::vector<int>{1}, opts), Error);
  opts.max_tokens = 1;
  opts.hook_layers = {3};
  CHECK_THROWS_AS(generate(lm, std::vector<int>{1}, opts), Error);
}

TEST_CASE("toy model validation and persistence") {
  ToyLmParams lm = small_lm(2);
  const auto dir = scratch_dir("toylm");
  save_toy_lm(lm, dir + "/m.crlm");
  CHECK(load_toy_lm(dir + "/m.crlm") == lm);

  ToyLmParams one_layer = lm;
  one_layer.layers = 1;
  one_layer.blocks.resize(1);
  CHECK_THROWS_AS(validate(one_layer), Error);
  lm.unembed(0, 0) = std::nan("");
  CHECK_THROWS_AS(validate(lm), Error);
}

TEST_CASE("residual_norm_profile") {
  SUBCASE("an all-zero model has a zero profile") {
    ToyLmParams lm = small_lm(3);
    for (double& e : lm.embed.data()) e = 0.0;
    for (double& e : lm.pos.data()) e = 0.0;
    for (auto& b : lm.blocks) {
      for (double& e : b.b_in) e = 0.0;
      for (double& e : b.b_out) e = 0.0;
    }
    const Vec prof = residual_norm_profile(lm, {{1, 2, 3}, {4}});
    CHECK(prof == Vec{0.0, 0.0});
  }
  SUBCASE("matches an independent per-sample average") {
    const ToyLmParams lm = small_lm(42);
    const std::vector<std::vector<int>> prompts{{1, 2, 3}, {4, 5}, {6, 7, 8, 9}};
    const Vec prof = residual_norm_profile(lm, prompts);
    REQUIRE(prof.size() == 2);
    for (int l = 0; l < 2; ++l) {
      double total = 0.0;
      for (const auto& p : prompts) {
        // Re-run the prompt through a hook that records layer l+1.
        double s = 0.0;
        DecoderState st(lm);
        for (int tok : p) {
          st.feed(tok, [&](int layer, std::span<double> x) {
            if (layer == l + 1) s += norm2(x);
          });
        }
        total += s / static_cast<double>(p.size());
      }
      CHECK(prof[l] >= 0.0);
      CHECK(prof[l] == doctest::Approx(total / 3.0).epsilon(1e-13));
    }
  }
}

TEST_CASE("planted task construction") {
  const PlantedTask& p = default_planted();
  CHECK(p.train_baseline_accuracy < 0.5);
  CHECK(p.eval_baseline_accuracy < 0.5);
  CHECK(p.train_coverage >= 0.8);
  CHECK(p.eval_coverage >= 0.8);
  CHECK(p.task.train.size() == 64);
  CHECK(p.task.eval.size() == 64);
  CHECK(p.task.sae_for(2).d_dict() == 128);

  SUBCASE("same spec twice gives the same task") {
    const PlantedTask again = make_planted_task(PlantedTaskSpec{});
    CHECK(again.task.lm == p.task.lm);
    CHECK(again.task.train == p.task.train);
    CHECK(again.task.eval == p.task.eval);
    CHECK(again.coefficient == p.coefficient);
  }
  SUBCASE("a single answer token is rejected") {
    PlantedTaskSpec spec;
    spec.n_answers = 1;
    CHECK_THROWS_AS(make_planted_task(spec), Error);
  }
  SUBCASE("applying an oracle feature flips the emitted answer") {
    const int layer = 2;
    const double c = p.coefficient.at(layer);
    int checked = 0;
    for (const auto& ex : p.task.eval) {
      const auto flips =
          brute_force_flipping_features(p.task.lm, p.task.sae_for(layer), ex, layer, c);
      if (flips.empty()) continue;
      GenerateOptions opts;
      opts.hook_layers = {layer};
      const auto base = generate(p.task.lm, ex.prompt, opts);
      const SaeParams& sae = p.task.sae_for(layer);
      const auto steered =
          generate(p.task.lm, ex.prompt, opts, [&](const HookContext&, std::span<double> x) {
            apply_steering_inplace(x, ActionVector::single(flips.front()), c, sae);
            return std::optional<int>(flips.front());
          });
      CHECK(base.final_token() != ex.answer);
      CHECK(steered.final_token() == ex.answer);
      ++checked;
    }
    CHECK(checked > 0);
  }
  SUBCASE("an exhausted retry budget reports the achieved coverage") {
    PlantedTaskSpec spec;
    spec.min_coverage = 1.0;
    spec.max_retries = 1;
    try {
      make_planted_task(spec);
      FAIL("expected construction failure");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kTask);
      CHECK(std::string(e.what()).find("coverage") != std::string::npos);
    }
  }
}
