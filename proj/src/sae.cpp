#include "crl/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "crl/binio.hpp"

namespace crl {

namespace {
constexpr char kSaeMagic[5] = "CRLS";
constexpr std::uint32_t kSaeVersion = 1;
}  // namespace

SaeParams make_sae(std::size_t d, std::size_t d_dict, SaeActivation activation) {
  SaeParams sae;
  sae.w_enc = Matrix(d, d_dict);
  sae.b_enc.assign(d_dict, 0.0);
  sae.w_dec = Matrix(d_dict, d);
  sae.b_dec.assign(d, 0.0);
  sae.activation = activation;
  sae.threshold.assign(d_dict, 0.0);
  return sae;
}

void validate(const SaeParams& sae) {
  const std::size_t d = sae.d();
  const std::size_t n = sae.d_dict();
  require(d > 0, ErrorKind::kShape, "SAE input dim must be positive");
  require(n > d, ErrorKind::kShape, "SAE dictionary must be larger than its input dim");
  require(sae.b_enc.size() == n && sae.threshold.size() == n, ErrorKind::kShape,
          "SAE encoder bias/threshold length mismatch");
  require(sae.w_dec.rows() == n && sae.w_dec.cols() == d && sae.b_dec.size() == d,
          ErrorKind::kShape, "SAE decoder shape mismatch");
  require(std::all_of(sae.threshold.begin(), sae.threshold.end(), [](double t) { return t >= 0.0; }),
          ErrorKind::kShape, "SAE thresholds must be nonnegative");
  require(all_finite(sae.w_enc.data()) && all_finite(sae.b_enc) && all_finite(sae.w_dec.data()) &&
              all_finite(sae.b_dec) && all_finite(sae.threshold),
          ErrorKind::kShape, "SAE parameters must be finite");
}

FeatureActivations encode(const SaeParams& sae, std::span<const double> x, int step, int layer) {
  require(x.size() == sae.d(), ErrorKind::kShape,
          "encode: residual has " + std::to_string(x.size()) + " entries, SAE expects " +
              std::to_string(sae.d()));
  FeatureActivations fa;
  fa.step = step;
  fa.layer = layer;
  fa.z = vec_mat(x, sae.w_enc);
  for (std::size_t i = 0; i < fa.z.size(); ++i) {
    const double v = fa.z[i] + sae.b_enc[i];
    if (sae.activation == SaeActivation::kRelu) {
      fa.z[i] = v > 0.0 ? v : 0.0;
    } else {
      // JumpReLU: v·[v > θ]; with θ ≥ 0 this is also nonnegative.
      fa.z[i] = (v > sae.threshold[i] && v > 0.0) ? v : 0.0;
    }
  }
  return fa;
}

Vec decode(const SaeParams& sae, std::span<const double> z) {
  require(z.size() == sae.d_dict(), ErrorKind::kShape,
          "decode: activation vector has " + std::to_string(z.size()) + " entries, SAE expects " +
              std::to_string(sae.d_dict()));
  Vec x = vec_mat(z, sae.w_dec);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += sae.b_dec[i];
  return x;
}

SaeLoss sae_loss(const SaeParams& sae, std::span<const double> x, double lambda) {
  require(lambda >= 0.0, ErrorKind::kInvalidArgument, "sparsity weight must be >= 0");
  const auto fa = encode(sae, x);
  const Vec xhat = decode(sae, fa.z);
  SaeLoss loss;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = x[i] - xhat[i];
    loss.reconstruction += r * r;
  }
  double l1 = 0.0;
  for (double z : fa.z) l1 += std::abs(z);
  loss.sparsity = lambda * l1;
  loss.total = loss.reconstruction + loss.sparsity;
  return loss;
}

void save_sae(const SaeParams& sae, const std::string& path) {
  validate(sae);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  binio::write_magic(os, kSaeMagic);
  binio::write_pod<std::uint32_t>(os, kSaeVersion);
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sae.d()));
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sae.d_dict()));
  binio::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(sae.activation));
  binio::write_f64s(os, sae.w_enc.data());
  binio::write_f64s(os, sae.b_enc);
  binio::write_f64s(os, sae.w_dec.data());
  binio::write_f64s(os, sae.b_dec);
  binio::write_f64s(os, sae.threshold);
  if (!os) fail(ErrorKind::kIo, "failed writing " + path);
}

SaeParams load_sae(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot open SAE file " + path);
  binio::expect_magic(is, kSaeMagic, path);
  const auto version = binio::read_pod<std::uint32_t>(is, path);
  if (version != kSaeVersion) {
    fail(ErrorKind::kIo, path + ": unsupported SAE version " + std::to_string(version));
  }
  const auto d = binio::read_pod<std::uint32_t>(is, path);
  const auto n = binio::read_pod<std::uint32_t>(is, path);
  const auto kind = binio::read_pod<std::uint8_t>(is, path);
  require(kind <= 1, ErrorKind::kIo, path + ": unknown activation kind");
  require(d > 0 && n > 0 && d < (1u << 20) && n < (1u << 24), ErrorKind::kIo,
          path + ": corrupt dims");
  SaeParams sae = make_sae(d, n, static_cast<SaeActivation>(kind));
  binio::read_f64s(is, sae.w_enc.data(), path);
  binio::read_f64s(is, sae.b_enc, path);
  binio::read_f64s(is, sae.w_dec.data(), path);
  binio::read_f64s(is, sae.b_dec, path);
  binio::read_f64s(is, sae.threshold, path);
  validate(sae);
  return sae;
}

std::map<int, std::string> load_feature_labels(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::kIo, "cannot open feature label file " + path);
  std::map<int, std::string> labels;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      fail(ErrorKind::kIo, path + ":" + std::to_string(lineno) + ": expected index<TAB>text");
    }
    try {
      labels[std::stoi(line.substr(0, tab))] = line.substr(tab + 1);
    } catch (const std::exception&) {
      fail(ErrorKind::kIo, path + ":" + std::to_string(lineno) + ": bad feature index");
    }
  }
  return labels;
}

}  // namespace crl
