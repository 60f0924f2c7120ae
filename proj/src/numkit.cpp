#include "crl/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace crl {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kInvalidMask: return "invalid-mask";
    case ErrorKind::kVocabulary: return "vocabulary";
    case ErrorKind::kActionRange: return "action-range";
    case ErrorKind::kMaskOwnership: return "mask-ownership";
    case ErrorKind::kCalibrationUnavailable: return "calibration-unavailable";
    case ErrorKind::kDivergence: return "training-divergence";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kTask: return "task";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kInvalidArgument: return "invalid-argument";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kTask:
    case ErrorKind::kCalibrationUnavailable: return 3;
    case ErrorKind::kDivergence: return 4;
    default: return 1;
  }
}

namespace {

void check_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    fail(ErrorKind::kShape, std::string(what) + ": expected " + std::to_string(want) +
                                " entries, got " + std::to_string(got));
  }
}

}  // namespace

Vec vec_mat(std::span<const double> x, const Matrix& m) {
  check_dim(x.size(), m.rows(), "vec_mat");
  Vec y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) y[c] += xr * row[c];
  }
  return y;
}

Vec mat_vec(const Matrix& m, std::span<const double> x) {
  check_dim(x.size(), m.cols(), "mat_vec");
  Vec y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_dim(b.size(), a.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check_dim(y.size(), x.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double e) { return std::isfinite(e); });
}

std::size_t argmax(std::span<const double> v) {
  require(!v.empty(), ErrorKind::kShape, "argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Vec softmax_masked(std::span<const double> logits, const FeatureBits& mask) {
  check_dim(mask.size(), logits.size(), "softmax_masked mask");
  require(mask.any(), ErrorKind::kInvalidMask, "softmax over an empty mask");
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i = mask.find_first(); i != FeatureBits::npos; i = mask.find_next(i)) {
    mx = std::max(mx, logits[i]);
  }
  Vec p(logits.size(), 0.0);
  double total = 0.0;
  for (auto i = mask.find_first(); i != FeatureBits::npos; i = mask.find_next(i)) {
    p[i] = std::exp(logits[i] - mx);
    total += p[i];
  }
  for (auto i = mask.find_first(); i != FeatureBits::npos; i = mask.find_next(i)) {
    p[i] /= total;
  }
  return p;
}

// ---------------------------------------------------------------------------

MlpParams::MlpParams(std::size_t in, std::size_t hidden, std::size_t out)
    : in_(in), hidden_(hidden), out_(out) {
  require(in > 0 && hidden > 0 && out > 0, ErrorKind::kShape, "MLP dims must be > 0");
  flat_.assign(in * hidden + hidden + hidden * out + out, 0.0);
}

MlpParams mlp_init(std::size_t in, std::size_t hidden, std::size_t out,
                   std::mt19937_64& rng) {
  MlpParams p(in, hidden, out);
  auto fill = [&rng](std::span<double> s, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& e : s) e = dist(rng);
  };
  fill(p.w1(), in);
  fill(p.b1(), in);
  fill(p.w2(), hidden);
  fill(p.b2(), hidden);
  return p;
}

MlpOutput mlp_forward(const MlpParams& params, std::span<const double> x) {
  check_dim(x.size(), params.in_dim(), "mlp_forward input");
  const std::size_t in = params.in_dim();
  const std::size_t hid = params.hidden_dim();
  const std::size_t out = params.out_dim();
  MlpOutput res;
  res.cache.input.assign(x.begin(), x.end());
  res.cache.hidden_pre.assign(params.b1().begin(), params.b1().end());
  auto w1 = params.w1();
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    for (std::size_t j = 0; j < hid; ++j) res.cache.hidden_pre[j] += xi * w1[i * hid + j];
  }
  res.cache.hidden_post.resize(hid);
  for (std::size_t j = 0; j < hid; ++j) res.cache.hidden_post[j] = std::tanh(res.cache.hidden_pre[j]);
  res.output.assign(params.b2().begin(), params.b2().end());
  auto w2 = params.w2();
  for (std::size_t j = 0; j < hid; ++j) {
    const double hj = res.cache.hidden_post[j];
    for (std::size_t k = 0; k < out; ++k) res.output[k] += hj * w2[j * out + k];
  }
  return res;
}

void mlp_backward_accumulate(const MlpParams& params, const MlpCache& cache,
                             std::span<const double> grad_output, MlpParams& into) {
  check_dim(grad_output.size(), params.out_dim(), "mlp_backward grad_output");
  check_dim(cache.input.size(), params.in_dim(), "mlp_backward cache");
  require(into.same_shape(params), ErrorKind::kShape, "gradient buffer shape mismatch");
  const std::size_t in = params.in_dim();
  const std::size_t hid = params.hidden_dim();
  const std::size_t out = params.out_dim();

  auto gw2 = into.w2();
  auto gb2 = into.b2();
  auto w2 = params.w2();
  Vec grad_pre(hid, 0.0);
  for (std::size_t j = 0; j < hid; ++j) {
    const double hj = cache.hidden_post[j];
    double acc = 0.0;
    for (std::size_t k = 0; k < out; ++k) {
      gw2[j * out + k] += hj * grad_output[k];
      acc += w2[j * out + k] * grad_output[k];
    }
    grad_pre[j] = acc * (1.0 - hj * hj);
  }
  for (std::size_t k = 0; k < out; ++k) gb2[k] += grad_output[k];

  auto gw1 = into.w1();
  auto gb1 = into.b1();
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = cache.input[i];
    for (std::size_t j = 0; j < hid; ++j) gw1[i * hid + j] += xi * grad_pre[j];
  }
  for (std::size_t j = 0; j < hid; ++j) gb1[j] += grad_pre[j];
}

MlpGrads mlp_backward(const MlpParams& params, const MlpCache& cache,
                      std::span<const double> grad_output) {
  MlpGrads g{MlpParams(params.in_dim(), params.hidden_dim(), params.out_dim()),
             Vec(params.in_dim(), 0.0)};
  mlp_backward_accumulate(params, cache, grad_output, g.params);

  // Input gradient: W1·(grad at hidden pre-activation).
  const std::size_t hid = params.hidden_dim();
  const std::size_t out = params.out_dim();
  auto w1 = params.w1();
  auto w2 = params.w2();
  Vec grad_pre(hid, 0.0);
  for (std::size_t j = 0; j < hid; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < out; ++k) acc += w2[j * out + k] * grad_output[k];
    const double hj = cache.hidden_post[j];
    grad_pre[j] = acc * (1.0 - hj * hj);
  }
  for (std::size_t i = 0; i < params.in_dim(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hid; ++j) acc += w1[i * hid + j] * grad_pre[j];
    g.input[i] = acc;
  }
  return g;
}

// ---------------------------------------------------------------------------

AdamState AdamState::for_params(const MlpParams& params, double lr) {
  AdamState s;
  s.m.assign(params.flat().size(), 0.0);
  s.v.assign(params.flat().size(), 0.0);
  s.lr = lr;
  return s;
}

void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state) {
  require(params.same_shape(grads), ErrorKind::kShape, "adam_step: gradient shape mismatch");
  auto& p = params.flat();
  const auto& g = grads.flat();
  require(state.m.size() == p.size() && state.v.size() == p.size(), ErrorKind::kShape,
          "adam_step: optimizer state shape mismatch");
  if (!all_finite(g)) fail(ErrorKind::kDivergence, "non-finite gradient in adam_step");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// ---------------------------------------------------------------------------

namespace {

// Cube root of the double epsilon balances truncation against round-off for
// central differences.
const double kAutoStep = std::cbrt(std::numeric_limits<double>::epsilon());

}  // namespace

GradCheckResult check_gradient(std::vector<double>& params,
                               std::span<const double> analytic,
                               const std::function<double()>& loss, double h,
                               double floor) {
  check_dim(analytic.size(), params.size(), "check_gradient");
  GradCheckResult res;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    const double step = h > 0.0 ? h : kAutoStep * std::max(1.0, std::abs(saved));
    // Divide by the spacing actually representable around `saved`.
    const double plus = saved + step;
    const double minus = saved - step;
    params[i] = plus;
    const double up = loss();
    params[i] = minus;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (plus - minus);
    const double a = analytic[i];
    ++res.checked;
    if (std::abs(a) < floor && std::abs(numeric) < floor) continue;
    const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric));
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace crl
