#include "crl/report.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "crl/rng.hpp"

namespace crl {

using nlohmann::json;

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  os << content;
  if (!os) fail(ErrorKind::kIo, "failed writing " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> nonempty_lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::string opt_number(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

}  // namespace

std::string samples_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "sample,answer,baseline_token,steered_token,baseline_correct,steered_correct,category\n";
  for (const auto& r : report.results) {
    os << r.sample << ',' << r.answer << ',' << r.baseline_token << ',' << r.steered_token << ','
       << (r.baseline_correct ? 1 : 0) << ',' << (r.steered_correct ? 1 : 0) << ','
       << outcome_name(r.category) << '\n';
  }
  return os.str();
}

std::vector<SampleResult> parse_samples_csv(const std::string& text) {
  const auto lines = nonempty_lines(text);
  require(!lines.empty() && lines[0].rfind("sample,", 0) == 0, ErrorKind::kIo,
          "samples CSV lacks its header");
  std::vector<SampleResult> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    require(cells.size() == 7, ErrorKind::kIo,
            "samples CSV line " + std::to_string(i + 1) + " has " + std::to_string(cells.size()) +
                " cells, expected 7");
    try {
      SampleResult r;
      r.sample = std::stoi(cells[0]);
      r.answer = std::stoi(cells[1]);
      r.baseline_token = std::stoi(cells[2]);
      r.steered_token = std::stoi(cells[3]);
      r.baseline_correct = cells[4] == "1";
      r.steered_correct = cells[5] == "1";
      r.category = parse_outcome(cells[6]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      fail(ErrorKind::kIo, "samples CSV line " + std::to_string(i + 1) + " is malformed");
    }
  }
  return out;
}

std::string interventions_jsonl(const EvalReport& report, const std::map<int, std::string>& labels) {
  std::string out;
  for (InterventionRecord rec : report.interventions) {
    const auto it = labels.find(rec.feature);
    if (it != labels.end()) rec.label = it->second;
    out += to_jsonl(rec);
    out += '\n';
  }
  return out;
}

std::vector<InterventionRecord> parse_interventions_jsonl(const std::string& text) {
  std::vector<InterventionRecord> out;
  for (const auto& line : nonempty_lines(text)) out.push_back(intervention_from_jsonl(line));
  return out;
}

std::string traces_jsonl(const EvalReport& report, const Dataset& data) {
  std::map<int, const Example*> by_id;
  for (const auto& ex : data) by_id[ex.id] = &ex;
  std::string out;
  for (std::size_t i = 0; i < report.episodes.size(); ++i) {
    const Episode& ep = report.episodes[i];
    const Example* ex = by_id.at(ep.sample_id);
    json j;
    j["sample"] = ep.sample_id;
    j["prompt"] = ex->prompt;
    j["answer"] = ex->answer;
    j["reward"] = ep.reward;
    j["category"] = outcome_name(report.results[i].category);
    json steps = json::array();
    for (std::size_t t = 0; t < ep.trace.emitted.size(); ++t) {
      json s;
      s["step"] = t + 1;
      s["token"] = ep.trace.emitted[t];
      json layers = json::array();
      if (t < ep.decisions.size()) {
        for (const auto& ld : ep.decisions[t].layers) {
          layers.push_back({{"layer", ld.layer}, {"feature", ld.feature}, {"activation", ld.activation}});
        }
      }
      s["layers"] = layers;
      if (i < report.values.size() && t < report.values[i].size()) s["value"] = report.values[i][t];
      steps.push_back(s);
    }
    j["steps"] = steps;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<TraceRecord> parse_traces_jsonl(const std::string& text) {
  std::vector<TraceRecord> out;
  int n = 0;
  for (const auto& line : nonempty_lines(text)) {
    ++n;
    try {
      const json j = json::parse(line);
      TraceRecord r;
      r.sample = j.at("sample").get<int>();
      r.prompt = j.at("prompt").get<std::vector<int>>();
      r.answer = j.at("answer").get<int>();
      r.reward = j.at("reward").get<double>();
      r.category = parse_outcome(j.at("category").get<std::string>());
      for (const auto& s : j.at("steps")) {
        r.tokens.push_back(s.at("token").get<int>());
        const auto& layers = s.at("layers");
        r.features.push_back(layers.empty() ? -1 : layers.back().at("feature").get<int>());
        if (s.contains("value")) r.values.push_back(s["value"].get<double>());
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      fail(ErrorKind::kIo, "traces record " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string eval_json(const EvalReport& report, const std::vector<int>& answer_set) {
  json j;
  j["label"] = report.label;
  j["samples"] = report.samples;
  j["accuracy"] = report.accuracy;
  j["baseline_accuracy"] = report.baseline_accuracy;
  j["mean_reward"] = report.mean_reward;
  j["invalid"] = {{"count", report.invalid.invalid},
                  {"total", report.invalid.total},
                  {"rate", report.invalid.rate}};
  j["baseline_invalid"] = {{"count", report.baseline_invalid.invalid},
                           {"total", report.baseline_invalid.total},
                           {"rate", report.baseline_invalid.rate}};
  j["feature_diversity"] = report.diversity;
  json coeff = json::object();
  for (const auto& [layer, c] : report.coefficient) coeff[std::to_string(layer)] = c;
  j["coefficient"] = coeff;
  j["answer_set"] = answer_set;
  std::map<std::string, long> cats;
  for (const auto& r : report.results) ++cats[outcome_name(r.category)];
  j["categories"] = cats;
  return j.dump(2) + "\n";
}

std::vector<int> answer_set_from_eval_json(const std::string& text) {
  try {
    return json::parse(text).at("answer_set").get<std::vector<int>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, std::string("eval report lacks an answer set: ") + e.what());
  }
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "step,mean_reward,policy_loss,critic_loss,eval_accuracy,feature_diversity\n";
  for (const auto& r : rows) {
    os << r.step << ',' << format_number(r.mean_reward) << ',' << format_number(r.policy_loss) << ','
       << format_number(r.critic_loss) << ',' << opt_number(r.eval_accuracy) << ','
       << opt_number(r.feature_diversity) << '\n';
  }
  return os.str();
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::ostringstream os;
  os << "layer,coefficient,accuracy,diversity,error\n";
  for (const auto& c : cells) {
    std::string err = c.error;
    for (char& ch : err) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    os << c.layer << ',' << format_number(c.coefficient) << ',' << opt_number(c.accuracy) << ','
       << opt_number(c.diversity) << ',' << err << '\n';
  }
  return os.str();
}

std::string features_csv(const std::vector<FeatureStat>& stats,
                         const std::map<int, std::string>& labels) {
  std::ostringstream os;
  os << "feature,selections,share,corrected,misguided,impact,label\n";
  for (const auto& s : stats) {
    std::string label;
    if (const auto it = labels.find(s.feature); it != labels.end()) {
      label = it->second;
      for (char& ch : label) {
        if (ch == ',') ch = ';';
      }
    }
    os << s.feature << ',' << s.selections << ',' << format_number(s.share) << ',' << s.corrected
       << ',' << s.misguided << ',' << format_number(s.impact) << ',' << label << '\n';
  }
  return os.str();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const std::string& dir, const RunManifest& m) {
  json j;
  j["command"] = m.command;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(m.config_hash));
  j["config_hash"] = hash;
  j["tool_version"] = m.tool_version;
  j["started_at"] = m.started_at;
  j["finished_at"] = m.finished_at;
  j["sealed"] = m.sealed;
  j["calibration_mode"] = m.calibration_mode;
  json coeff = json::object();
  for (const auto& [layer, c] : m.coefficient) coeff[std::to_string(layer)] = c;
  j["coefficient"] = coeff;
  json files = json::array();
  for (const auto& name : m.files) {
    const auto path = std::filesystem::path(dir) / name;
    json f{{"path", name}};
    if (std::filesystem::is_regular_file(path)) {
      const std::string bytes = read_text_file(path.string());
      char fh[17];
      std::snprintf(fh, sizeof fh, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
      f["bytes"] = bytes.size();
      f["fnv1a64"] = fh;
    }
    files.push_back(f);
  }
  j["files"] = files;
  write_text_file((std::filesystem::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

}  // namespace crl
