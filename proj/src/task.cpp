#include "crl/task.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace crl {

namespace fs = std::filesystem;
using nlohmann::json;

bool RewardSpec::is_valid(int token) const {
  return std::find(answer_set.begin(), answer_set.end(), token) != answer_set.end();
}

const SaeParams& Task::sae_for(int layer) const {
  require(layer >= 1 && static_cast<std::size_t>(layer) <= saes.size(), ErrorKind::kInvalidArgument,
          "no SAE for layer " + std::to_string(layer));
  return saes[layer - 1];
}

void validate(const Task& task) {
  validate(task.lm);
  require(task.saes.size() == static_cast<std::size_t>(task.lm.layers), ErrorKind::kTask,
          "task needs one SAE per model layer");
  for (const auto& sae : task.saes) {
    validate(sae);
    require(sae.d() == static_cast<std::size_t>(task.lm.d), ErrorKind::kTask,
            "SAE input dim does not match model hidden dim");
  }
  require(task.horizon >= 1, ErrorKind::kTask, "horizon must be >= 1");
  require(task.reward.answer_set.size() >= 1, ErrorKind::kTask, "answer set must be nonempty");
  for (int t : task.reward.answer_set) {
    require(t >= 0 && t < task.lm.vocab, ErrorKind::kTask, "answer token outside vocabulary");
  }
  for (const Dataset* data : {&task.train, &task.eval}) {
    for (const auto& ex : *data) {
      require(!ex.prompt.empty(), ErrorKind::kTask, "example with empty prompt");
      require(static_cast<int>(ex.prompt.size()) + task.horizon <= task.lm.max_positions,
              ErrorKind::kTask, "prompt plus horizon exceeds the model context");
      for (int t : ex.prompt) {
        require(t >= 0 && t < task.lm.vocab, ErrorKind::kVocabulary,
                "prompt token outside vocabulary in example " + std::to_string(ex.id));
      }
      require(task.reward.is_valid(ex.answer), ErrorKind::kTask,
              "answer of example " + std::to_string(ex.id) + " is not in the answer set");
    }
  }
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  for (const auto& ex : data) {
    os << json{{"id", ex.id}, {"prompt", ex.prompt}, {"answer", ex.answer}}.dump() << '\n';
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::kIo, "cannot open dataset " + path);
  Dataset data;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Example ex;
      ex.id = j.at("id").get<int>();
      ex.prompt = j.at("prompt").get<std::vector<int>>();
      ex.answer = j.at("answer").get<int>();
      data.push_back(std::move(ex));
    } catch (const json::exception& e) {
      fail(ErrorKind::kIo, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return data;
}

void save_task(const Task& task, const std::string& dir) {
  validate(task);
  fs::create_directories(dir);
  save_toy_lm(task.lm, (fs::path(dir) / "model.crlm").string());
  for (std::size_t l = 0; l < task.saes.size(); ++l) {
    save_sae(task.saes[l], (fs::path(dir) / ("sae_l" + std::to_string(l + 1) + ".crls")).string());
  }
  save_dataset(task.train, (fs::path(dir) / "train.jsonl").string());
  save_dataset(task.eval, (fs::path(dir) / "eval.jsonl").string());
  std::ofstream os(fs::path(dir) / "task.json");
  os << json{{"answer_set", task.reward.answer_set}, {"horizon", task.horizon}}.dump(2) << '\n';
}

Task load_task(const std::string& dir) {
  Task task;
  task.lm = load_toy_lm((fs::path(dir) / "model.crlm").string());
  for (int l = 1; l <= task.lm.layers; ++l) {
    task.saes.push_back(load_sae((fs::path(dir) / ("sae_l" + std::to_string(l) + ".crls")).string()));
  }
  task.train = load_dataset((fs::path(dir) / "train.jsonl").string());
  task.eval = load_dataset((fs::path(dir) / "eval.jsonl").string());
  std::ifstream is(fs::path(dir) / "task.json");
  if (!is) fail(ErrorKind::kIo, "missing task.json in " + dir);
  try {
    const json meta = json::parse(is);
    task.reward.answer_set = meta.at("answer_set").get<std::vector<int>>();
    task.horizon = meta.at("horizon").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, dir + "/task.json: " + e.what());
  }
  validate(task);
  return task;
}

}  // namespace crl
