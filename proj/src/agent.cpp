#include "crl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "crl/binio.hpp"

namespace crl {

namespace {
constexpr char kAgentMagic[5] = "CRLA";
constexpr std::uint32_t kAgentVersion = 1;

void check_state(const AgentParams& agent, std::span<const double> x) {
  require(x.size() == agent.d(), ErrorKind::kShape,
          "agent input has " + std::to_string(x.size()) + " entries, expected " +
              std::to_string(agent.d()));
}
}  // namespace

AgentParams agent_init(std::size_t d, std::size_t d_dict, std::size_t hidden,
                       std::mt19937_64& rng, bool shared_across_layers) {
  AgentParams a;
  a.policy = mlp_init(d, hidden, d_dict, rng);
  a.critic = mlp_init(d, hidden, 1, rng);
  a.shared_across_layers = shared_across_layers;
  return a;
}

Vec policy_logits(const AgentParams& agent, std::span<const double> x) {
  check_state(agent, x);
  return mlp_forward(agent.policy, x).output;
}

double critic_value(const AgentParams& agent, std::span<const double> x) {
  check_state(agent, x);
  return mlp_forward(agent.critic, x).output[0];
}

double masked_log_prob(std::span<const double> logits, const FeatureBits& mask, int feature) {
  require(mask.size() == logits.size(), ErrorKind::kShape, "mask/logit size mismatch");
  require(mask.any(), ErrorKind::kInvalidMask, "log-prob over an empty mask");
  require(feature >= 0 && static_cast<std::size_t>(feature) < logits.size() && mask.test(feature),
          ErrorKind::kActionRange, "feature " + std::to_string(feature) + " not selectable");
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i = mask.find_first(); i != FeatureBits::npos; i = mask.find_next(i)) {
    mx = std::max(mx, logits[i]);
  }
  double total = 0.0;
  for (auto i = mask.find_first(); i != FeatureBits::npos; i = mask.find_next(i)) {
    total += std::exp(logits[i] - mx);
  }
  return (logits[feature] - mx) - std::log(total);
}

ActionSample select_action(std::span<const double> logits, const FeatureMask& mask,
                           SelectionMode mode, std::mt19937_64& rng, int k) {
  const FeatureBits& bits = mask.bits();
  require(bits.size() == logits.size(), ErrorKind::kShape, "mask/logit size mismatch");
  require(bits.any(), ErrorKind::kInvalidMask, "action selection over an empty mask");
  require(k >= 1, ErrorKind::kInvalidArgument, "k must be >= 1");

  ActionSample s;
  s.mode = mode;
  if (mode == SelectionMode::kGreedy) {
    std::vector<int> candidates;
    for (auto i = bits.find_first(); i != FeatureBits::npos; i = bits.find_next(i)) {
      candidates.push_back(static_cast<int>(i));
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                      candidates.end(), [&](int a, int b) {
                        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                      });
    candidates.resize(take);
    s.action.features = candidates;
  } else {
    require(k == 1, ErrorKind::kInvalidArgument, "sampled selection supports k = 1 only");
    const Vec p = softmax_masked(logits, bits);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double cum = 0.0;
    int chosen = -1;
    for (auto i = bits.find_first(); i != FeatureBits::npos; i = bits.find_next(i)) {
      chosen = static_cast<int>(i);
      cum += p[i];
      if (u < cum) break;
    }
    s.action.features = {chosen};
  }
  s.feature = s.action.features.front();
  for (int j : s.action.features) s.log_prob += masked_log_prob(logits, bits, j);
  return s;
}

double crl_layer_logprob(const AgentParams& agent, const std::vector<Vec>& states,
                         const std::vector<int>& actions, const std::vector<FeatureMask>& masks) {
  require(!states.empty() && states.size() == actions.size(), ErrorKind::kShape,
          "CRL-Layer needs one action per steered layer");
  require(masks.empty() || masks.size() == states.size(), ErrorKind::kShape,
          "CRL-Layer mask count does not match layer count");
  double total = 0.0;
  for (std::size_t l = 0; l < states.size(); ++l) {
    const Vec logits = policy_logits(agent, states[l]);
    if (masks.empty()) {
      FeatureBits full(logits.size());
      full.set();
      total += masked_log_prob(logits, full, actions[l]);
    } else {
      total += masked_log_prob(logits, masks[l].bits(), actions[l]);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------

namespace {

void write_mlp(std::ostream& os, const MlpParams& p) {
  for (std::size_t v : {p.in_dim(), p.hidden_dim(), p.out_dim()}) {
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  binio::write_f64s(os, p.flat());
}

MlpParams read_mlp(std::istream& is, const std::string& path) {
  const auto in = binio::read_pod<std::uint32_t>(is, path);
  const auto hid = binio::read_pod<std::uint32_t>(is, path);
  const auto out = binio::read_pod<std::uint32_t>(is, path);
  require(in > 0 && hid > 0 && out > 0 && in < (1u << 20) && hid < (1u << 20) && out < (1u << 24),
          ErrorKind::kIo, path + ": corrupt network dims");
  MlpParams p(in, hid, out);
  binio::read_f64s(is, p.flat(), path);
  return p;
}

}  // namespace

void save_agents(const std::vector<AgentParams>& agents, std::uint64_t config_hash,
                 const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  binio::write_magic(os, kAgentMagic);
  binio::write_pod<std::uint32_t>(os, kAgentVersion);
  binio::write_pod<std::uint64_t>(os, config_hash);
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(agents.size()));
  for (const auto& a : agents) {
    binio::write_pod<std::uint8_t>(os, a.shared_across_layers ? 1 : 0);
    write_mlp(os, a.policy);
    write_mlp(os, a.critic);
  }
  if (!os) fail(ErrorKind::kIo, "failed writing " + path);
}

std::vector<AgentParams> load_agents(const std::string& path, std::uint64_t* config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot open checkpoint " + path);
  binio::expect_magic(is, kAgentMagic, path);
  const auto version = binio::read_pod<std::uint32_t>(is, path);
  if (version != kAgentVersion) {
    fail(ErrorKind::kIo, path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto hash = binio::read_pod<std::uint64_t>(is, path);
  if (config_hash != nullptr) *config_hash = hash;
  const auto count = binio::read_pod<std::uint32_t>(is, path);
  require(count > 0 && count < 1024, ErrorKind::kIo, path + ": corrupt agent count");
  std::vector<AgentParams> agents(count);
  for (auto& a : agents) {
    a.shared_across_layers = binio::read_pod<std::uint8_t>(is, path) != 0;
    a.policy = read_mlp(is, path);
    a.critic = read_mlp(is, path);
    require(a.critic.out_dim() == 1 && a.critic.in_dim() == a.policy.in_dim(), ErrorKind::kIo,
            path + ": critic shape does not match policy");
  }
  return agents;
}

}  // namespace crl
