#pragma once

// Dense linear algebra and a two-layer tanh MLP with hand-derived backprop.
// Adam and a central-difference gradient checker operate on its flat
// parameter buffer. Everything is 64-bit and single-threaded so results are
// reproducible bit-for-bit.

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <boost/dynamic_bitset.hpp>

#include "crl/errors.hpp"

namespace crl {

using Vec = std::vector<double>;
using FeatureBits = boost::dynamic_bitset<>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// y = xᵀ·M  (x has M.rows() entries, y has M.cols()).
Vec vec_mat(std::span<const double> x, const Matrix& m);
// y = M·x  (x has M.cols() entries).
Vec mat_vec(const Matrix& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

bool all_finite(std::span<const double> v);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);

// Numerically stabilised softmax over the entries whose mask bit is set.
// Masked-out entries are excluded before exponentiation and come back as 0.
Vec softmax_masked(std::span<const double> logits, const FeatureBits& mask);

// ---------------------------------------------------------------------------
// Two-layer MLP: out = W2ᵀ·tanh(W1ᵀx + b1) + b2. All parameters live in one
// flat buffer so optimizers and gradient checks can treat them uniformly.

class MlpParams {
 public:
  MlpParams() = default;
  MlpParams(std::size_t in, std::size_t hidden, std::size_t out);

  std::size_t in_dim() const { return in_; }
  std::size_t hidden_dim() const { return hidden_; }
  std::size_t out_dim() const { return out_; }

  // W1 is in×hidden, W2 is hidden×out, both row-major.
  std::span<double> w1() { return {flat_.data(), in_ * hidden_}; }
  std::span<double> b1() { return {flat_.data() + in_ * hidden_, hidden_}; }
  std::span<double> w2() { return {flat_.data() + off_w2(), hidden_ * out_}; }
  std::span<double> b2() { return {flat_.data() + off_w2() + hidden_ * out_, out_}; }
  std::span<const double> w1() const { return {flat_.data(), in_ * hidden_}; }
  std::span<const double> b1() const { return {flat_.data() + in_ * hidden_, hidden_}; }
  std::span<const double> w2() const { return {flat_.data() + off_w2(), hidden_ * out_}; }
  std::span<const double> b2() const {
    return {flat_.data() + off_w2() + hidden_ * out_, out_};
  }

  std::vector<double>& flat() { return flat_; }
  const std::vector<double>& flat() const { return flat_; }

  bool same_shape(const MlpParams& other) const {
    return in_ == other.in_ && hidden_ == other.hidden_ && out_ == other.out_;
  }

  bool operator==(const MlpParams&) const = default;

 private:
  std::size_t off_w2() const { return in_ * hidden_ + hidden_; }

  std::size_t in_ = 0;
  std::size_t hidden_ = 0;
  std::size_t out_ = 0;
  std::vector<double> flat_;
};

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases.
MlpParams mlp_init(std::size_t in, std::size_t hidden, std::size_t out,
                   std::mt19937_64& rng);

struct MlpCache {
  Vec input;
  Vec hidden_pre;
  Vec hidden_post;
};

struct MlpOutput {
  Vec output;
  MlpCache cache;
};

MlpOutput mlp_forward(const MlpParams& params, std::span<const double> x);

struct MlpGrads {
  MlpParams params;  // gradient w.r.t. every parameter, same layout
  Vec input;
};

MlpGrads mlp_backward(const MlpParams& params, const MlpCache& cache,
                      std::span<const double> grad_output);

// Accumulates the parameter gradient of output·grad_output into `into`.
void mlp_backward_accumulate(const MlpParams& params, const MlpCache& cache,
                             std::span<const double> grad_output, MlpParams& into);

// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const MlpParams& params, double lr);
};

// Standard bias-corrected Adam. Throws kDivergence on a non-finite gradient,
// leaving params and state untouched.
void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state);

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Compares `analytic` to central differences of `loss` over `params`. Entries
// where both magnitudes are below `floor` count as agreeing. A step h <= 0
// picks cbrt(eps)·max(1, |θ_i|) per parameter.
GradCheckResult check_gradient(std::vector<double>& params,
                               std::span<const double> analytic,
                               const std::function<double()>& loss, double h = 0.0,
                               double floor = 1e-9);

}  // namespace crl
