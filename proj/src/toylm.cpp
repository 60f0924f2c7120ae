#include "crl/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "crl/binio.hpp"

namespace crl {

namespace {

constexpr char kModelMagic[5] = "CRLM";
constexpr std::uint32_t kModelVersion = 1;
constexpr double kNormEps = 1e-6;

Vec rms_norm(std::span<const double> x) {
  double ss = 0.0;
  for (double e : x) ss += e * e;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kNormEps);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv;
  return y;
}

void fill_gaussian(Matrix& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& e : m.data()) e = dist(rng);
}

void check_token(const ToyLmParams& lm, int token) {
  if (token < 0 || token >= lm.vocab) {
    fail(ErrorKind::kVocabulary,
         "token id " + std::to_string(token) + " outside vocabulary of " + std::to_string(lm.vocab));
  }
}

void check_shape(const Matrix& m, int rows, int cols, const char* what) {
  if (m.rows() != static_cast<std::size_t>(rows) || m.cols() != static_cast<std::size_t>(cols)) {
    fail(ErrorKind::kShape, std::string("toy LM tensor ") + what + " has wrong shape");
  }
}

}  // namespace

ToyLmParams random_toy_lm(const ToyLmDims& dims, std::mt19937_64& rng, double scale) {
  ToyLmParams lm;
  lm.vocab = dims.vocab;
  lm.d = dims.d;
  lm.layers = dims.layers;
  lm.mlp_hidden = dims.mlp_hidden;
  lm.max_positions = dims.max_positions;
  const double sd = scale / std::sqrt(static_cast<double>(dims.d));
  const double sh = scale / std::sqrt(static_cast<double>(dims.mlp_hidden));
  lm.embed = Matrix(dims.vocab, dims.d);
  fill_gaussian(lm.embed, rng, sd);
  lm.pos = Matrix(dims.max_positions, dims.d);
  fill_gaussian(lm.pos, rng, 0.1 * sd);
  for (int l = 0; l < dims.layers; ++l) {
    BlockParams b;
    for (Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo}) {
      *m = Matrix(dims.d, dims.d);
      fill_gaussian(*m, rng, sd);
    }
    b.w_in = Matrix(dims.d, dims.mlp_hidden);
    fill_gaussian(b.w_in, rng, sd);
    b.b_in.assign(dims.mlp_hidden, 0.0);
    b.w_out = Matrix(dims.mlp_hidden, dims.d);
    fill_gaussian(b.w_out, rng, sh);
    b.b_out.assign(dims.d, 0.0);
    lm.blocks.push_back(std::move(b));
  }
  lm.unembed = Matrix(dims.d, dims.vocab);
  fill_gaussian(lm.unembed, rng, sd);
  return lm;
}

void validate(const ToyLmParams& lm) {
  require(lm.layers >= 2, ErrorKind::kShape, "toy LM needs at least 2 layers");
  require(lm.vocab > 0 && lm.d > 0 && lm.mlp_hidden > 0 && lm.max_positions > 0,
          ErrorKind::kShape, "toy LM dims must be positive");
  require(lm.blocks.size() == static_cast<std::size_t>(lm.layers), ErrorKind::kShape,
          "toy LM block count does not match layer count");
  check_shape(lm.embed, lm.vocab, lm.d, "embed");
  check_shape(lm.pos, lm.max_positions, lm.d, "pos");
  check_shape(lm.unembed, lm.d, lm.vocab, "unembed");
  bool finite = all_finite(lm.embed.data()) && all_finite(lm.pos.data()) &&
                all_finite(lm.unembed.data());
  for (const auto& b : lm.blocks) {
    for (const Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo}) check_shape(*m, lm.d, lm.d, "attention");
    check_shape(b.w_in, lm.d, lm.mlp_hidden, "w_in");
    check_shape(b.w_out, lm.mlp_hidden, lm.d, "w_out");
    require(b.b_in.size() == static_cast<std::size_t>(lm.mlp_hidden) &&
                b.b_out.size() == static_cast<std::size_t>(lm.d),
            ErrorKind::kShape, "toy LM bias has wrong length");
    for (const Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out}) {
      finite = finite && all_finite(m->data());
    }
    finite = finite && all_finite(b.b_in) && all_finite(b.b_out);
  }
  require(finite, ErrorKind::kShape, "toy LM parameters must be finite");
}

// ---------------------------------------------------------------------------

void save_toy_lm(const ToyLmParams& lm, const std::string& path) {
  validate(lm);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  binio::write_magic(os, kModelMagic);
  binio::write_pod<std::uint32_t>(os, kModelVersion);
  for (int v : {lm.vocab, lm.d, lm.layers, lm.mlp_hidden, lm.max_positions}) {
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  binio::write_f64s(os, lm.embed.data());
  binio::write_f64s(os, lm.pos.data());
  for (const auto& b : lm.blocks) {
    for (const Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in}) binio::write_f64s(os, m->data());
    binio::write_f64s(os, b.b_in);
    binio::write_f64s(os, b.w_out.data());
    binio::write_f64s(os, b.b_out);
  }
  binio::write_f64s(os, lm.unembed.data());
  if (!os) fail(ErrorKind::kIo, "failed writing " + path);
}

ToyLmParams load_toy_lm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot open model file " + path);
  binio::expect_magic(is, kModelMagic, path);
  const auto version = binio::read_pod<std::uint32_t>(is, path);
  if (version != kModelVersion) {
    fail(ErrorKind::kIo, path + ": unsupported model version " + std::to_string(version));
  }
  ToyLmParams lm;
  lm.vocab = static_cast<int>(binio::read_pod<std::uint32_t>(is, path));
  lm.d = static_cast<int>(binio::read_pod<std::uint32_t>(is, path));
  lm.layers = static_cast<int>(binio::read_pod<std::uint32_t>(is, path));
  lm.mlp_hidden = static_cast<int>(binio::read_pod<std::uint32_t>(is, path));
  lm.max_positions = static_cast<int>(binio::read_pod<std::uint32_t>(is, path));
  require(lm.vocab > 0 && lm.d > 0 && lm.layers > 0 && lm.layers < 1024 && lm.mlp_hidden > 0 &&
              lm.max_positions > 0,
          ErrorKind::kIo, path + ": corrupt dims");
  auto read_mat = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    binio::read_f64s(is, m.data(), path);
    return m;
  };
  auto read_vec = [&](std::size_t n) {
    Vec v(n);
    binio::read_f64s(is, v, path);
    return v;
  };
  lm.embed = read_mat(lm.vocab, lm.d);
  lm.pos = read_mat(lm.max_positions, lm.d);
  for (int l = 0; l < lm.layers; ++l) {
    BlockParams b;
    b.wq = read_mat(lm.d, lm.d);
    b.wk = read_mat(lm.d, lm.d);
    b.wv = read_mat(lm.d, lm.d);
    b.wo = read_mat(lm.d, lm.d);
    b.w_in = read_mat(lm.d, lm.mlp_hidden);
    b.b_in = read_vec(lm.mlp_hidden);
    b.w_out = read_mat(lm.mlp_hidden, lm.d);
    b.b_out = read_vec(lm.d);
    lm.blocks.push_back(std::move(b));
  }
  lm.unembed = read_mat(lm.d, lm.vocab);
  validate(lm);
  return lm;
}

// ---------------------------------------------------------------------------

DecoderState::DecoderState(const ToyLmParams& lm)
    : lm_(&lm), keys_(lm.layers), values_(lm.layers) {}

Vec DecoderState::feed(int token, const LayerHook& hook) {
  const ToyLmParams& lm = *lm_;
  check_token(lm, token);
  require(position_ < lm.max_positions, ErrorKind::kShape, "sequence exceeds max positions");
  const auto d = static_cast<std::size_t>(lm.d);

  Vec x(d);
  for (std::size_t i = 0; i < d; ++i) x[i] = lm.embed(token, i) + lm.pos(position_, i);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < lm.layers; ++l) {
    const BlockParams& b = lm.blocks[l];
    const Vec h = rms_norm(x);
    const Vec q = vec_mat(h, b.wq);
    keys_[l].push_back(vec_mat(h, b.wk));
    values_[l].push_back(vec_mat(h, b.wv));

    const auto& ks = keys_[l];
    Vec scores(ks.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      scores[j] = dot(q, ks[j]) * inv_sqrt_d;
      mx = std::max(mx, scores[j]);
    }
    double total = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      total += s;
    }
    Vec mixed(d, 0.0);
    for (std::size_t j = 0; j < ks.size(); ++j) axpy(scores[j] / total, values_[l][j], mixed);
    axpy(1.0, vec_mat(mixed, b.wo), x);

    const Vec h2 = rms_norm(x);
    Vec act = vec_mat(h2, b.w_in);
    for (std::size_t k = 0; k < act.size(); ++k) act[k] = std::max(0.0, act[k] + b.b_in[k]);
    const Vec out = vec_mat(act, b.w_out);
    for (std::size_t i = 0; i < d; ++i) x[i] += out[i] + b.b_out[i];

    if (hook) hook(l + 1, x);
  }
  ++position_;
  return vec_mat(rms_norm(x), lm.unembed);
}

int greedy_token(std::span<const double> logits, std::span<const int> allowed) {
  if (allowed.empty()) return static_cast<int>(argmax(logits));
  int best = -1;
  for (int t : allowed) {
    require(t >= 0 && static_cast<std::size_t>(t) < logits.size(), ErrorKind::kVocabulary,
            "allowed token outside vocabulary");
    if (best < 0 || logits[t] > logits[best] || (logits[t] == logits[best] && t < best)) best = t;
  }
  return best;
}

GenerationTrace generate(const ToyLmParams& lm, std::span<const int> prompt,
                         const GenerateOptions& options, const Intervention& intervene) {
  require(!prompt.empty(), ErrorKind::kInvalidArgument, "prompt must be nonempty");
  require(options.max_tokens >= 1, ErrorKind::kInvalidArgument, "max_tokens must be >= 1");
  for (int layer : options.hook_layers) {
    require(layer >= 1 && layer <= lm.layers, ErrorKind::kInvalidArgument,
            "hook layer " + std::to_string(layer) + " outside [1, " + std::to_string(lm.layers) + "]");
  }
  for (int t : prompt) check_token(lm, t);

  GenerationTrace trace;
  trace.prompt.assign(prompt.begin(), prompt.end());
  DecoderState state(lm);

  auto is_hooked = [&](int layer) {
    return std::find(options.hook_layers.begin(), options.hook_layers.end(), layer) !=
           options.hook_layers.end();
  };

  for (std::size_t p = 0; p + 1 < prompt.size(); ++p) {
    if (options.steer_prompt && intervene) {
      const int position = state.position();
      state.feed(prompt[p], [&](int layer, std::span<double> x) {
        if (is_hooked(layer)) intervene(HookContext{0, position, layer}, x);
      });
    } else {
      state.feed(prompt[p]);
    }
  }

  int current = prompt.back();
  for (int t = 1; t <= options.max_tokens; ++t) {
    StepRecord rec;
    rec.step = t;
    rec.position = state.position();
    rec.logits = state.feed(current, [&](int layer, std::span<double> x) {
      if (!is_hooked(layer)) return;
      LayerRecord lr;
      lr.layer = layer;
      lr.pre.assign(x.begin(), x.end());
      if (intervene) lr.action = intervene(HookContext{t, rec.position, layer}, x);
      lr.post.assign(x.begin(), x.end());
      rec.layers.push_back(std::move(lr));
    });
    rec.token = greedy_token(rec.logits, options.allowed_tokens);
    trace.emitted.push_back(rec.token);
    current = rec.token;
    trace.steps.push_back(std::move(rec));
  }
  return trace;
}

std::vector<std::vector<Vec>> prompt_residuals(const ToyLmParams& lm,
                                               std::span<const int> prompt) {
  std::vector<std::vector<Vec>> out(lm.layers);
  DecoderState state(lm);
  for (int t : prompt) {
    state.feed(t, [&](int layer, std::span<double> x) {
      out[layer - 1].emplace_back(x.begin(), x.end());
    });
  }
  return out;
}

Vec residual_norm_profile(const ToyLmParams& lm, const std::vector<std::vector<int>>& prompts) {
  require(!prompts.empty(), ErrorKind::kInvalidArgument, "residual_norm_profile needs samples");
  Vec profile(lm.layers, 0.0);
  for (const auto& prompt : prompts) {
    require(!prompt.empty(), ErrorKind::kInvalidArgument, "empty prompt in dataset");
    const auto res = prompt_residuals(lm, prompt);
    for (int l = 0; l < lm.layers; ++l) {
      double s = 0.0;
      for (const Vec& x : res[l]) s += norm2(x);
      profile[l] += s / static_cast<double>(res[l].size());
    }
  }
  for (double& v : profile) v /= static_cast<double>(prompts.size());
  return profile;
}

}  // namespace crl
