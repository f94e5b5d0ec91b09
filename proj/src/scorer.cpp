#include "metaicl/scorer.hpp"

#include <set>

#include "metaicl/error.hpp"
#include "metaicl/rng.hpp"

namespace metaicl {

std::string_view to_string(ScoreMethod method) {
  switch (method) {
    case ScoreMethod::direct: return "direct";
    case ScoreMethod::pmi: return "pmi";
    case ScoreMethod::channel: return "channel";
  }
  return "direct";
}

ScoreMethod parse_score_method(std::string_view text) {
  if (text == "direct") return ScoreMethod::direct;
  if (text == "pmi") return ScoreMethod::pmi;
  if (text == "channel") return ScoreMethod::channel;
  throw ConfigError("unknown scoring method '" + std::string(text) + "'");
}

BuildConfig ScoreConfig::resolved_build() const {
  BuildConfig b = build;
  b.k = k;
  b.direction = method == ScoreMethod::channel ? Direction::channel : Direction::direct;
  return b;
}

void ScoreConfig::validate() const { resolved_build().validate(); }

std::size_t argmax_first(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace {

void check_options(std::span<const std::string> options) {
  if (options.empty()) throw DataError("scorer: empty option list");
  std::set<std::string_view> seen;
  for (const auto& o : options) {
    if (o.empty()) throw DataError("scorer: empty option string");
    if (!seen.insert(o).second) throw DataError("scorer: duplicate option '" + o + "'");
  }
}

std::vector<double> score_input(const ModelParams<float>& model, std::span<const Example> shots,
                                std::string_view input, std::span<const std::string> options,
                                const BuildConfig& build, std::string_view task) {
  std::vector<EncodedSequence> seqs;
  seqs.reserve(options.size());
  for (const auto& o : options) seqs.push_back(build_score_sequence(shots, input, o, build, task));
  return score_sequences(model, std::span<const EncodedSequence>(seqs));
}

ScoredCandidates finish(std::span<const std::string> options, std::vector<double> scores, const ScoreConfig& cfg,
                        std::uint64_t seed) {
  ScoredCandidates out;
  out.candidates.assign(options.begin(), options.end());
  out.scores = std::move(scores);
  out.prediction = argmax_first(out.scores);
  out.method = cfg.method;
  out.k = cfg.k;
  out.seed = seed;
  return out;
}

}  // namespace

std::vector<ScoredCandidates> score_many(const ModelParams<float>& model, const FewShotSet& shots,
                                         std::span<const std::string> test_inputs,
                                         std::span<const std::string> options, const ScoreConfig& cfg) {
  cfg.validate();
  check_options(options);
  if (shots.shots.size() != cfg.k) {
    throw ConfigError("scorer: got " + std::to_string(shots.shots.size()) + " shots, config says k=" +
                      std::to_string(cfg.k));
  }
  const BuildConfig build = cfg.resolved_build();
  std::vector<double> calibration;
  if (cfg.method == ScoreMethod::pmi) {
    const std::string_view placeholder = cfg.pmi_empty_input ? std::string_view{} : cfg.pmi_placeholder;
    calibration = score_input(model, shots.shots, placeholder, options, build, shots.task);
  }
  std::vector<ScoredCandidates> out;
  out.reserve(test_inputs.size());
  for (const auto& input : test_inputs) {
    auto scores = score_input(model, shots.shots, input, options, build, shots.task);
    for (std::size_t i = 0; i < calibration.size(); ++i) scores[i] -= calibration[i];
    out.push_back(finish(options, std::move(scores), cfg, shots.seed));
  }
  return out;
}

ScoredCandidates score_candidates(const ModelParams<float>& model, const FewShotSet& shots,
                                  std::string_view test_input, std::span<const std::string> options,
                                  const ScoreConfig& cfg) {
  const std::string input(test_input);
  return std::move(score_many(model, shots, std::span<const std::string>(&input, 1), options, cfg).front());
}

ExampleOutcome evaluate_example(const ModelParams<float>& model, const Task& task, std::size_t example_index,
                                std::uint64_t seed, const ScoreConfig& cfg) {
  if (example_index >= task.examples.size()) throw ConfigError("evaluate_example: example index out of range");
  const Example& test = task.examples[example_index];
  if (!task.has_option(test.output)) {
    throw DataError("evaluate_example: gold '" + test.output + "' is not an option of task '" + task.name + "'");
  }
  FewShotSet shots;
  shots.task = task.name;
  shots.seed = seed;
  if (cfg.k > 0) {
    if (task.examples.size() < cfg.k + 1) {
      throw ConfigError("evaluate_example: task '" + task.name + "' has too few examples for k=" +
                        std::to_string(cfg.k) + " plus a test example");
    }
    Rng rng(shot_stream_seed(task.name, seed));
    for (auto i : sample_without_replacement(rng, task.examples.size(), cfg.k + 1)) {
      if (i == example_index || shots.indices.size() == cfg.k) continue;
      shots.indices.push_back(i);
      shots.shots.push_back(task.examples[i]);
    }
  }
  ExampleOutcome out;
  out.scored = score_candidates(model, shots, test.input, task.options, cfg);
  out.prediction = out.scored.predicted();
  out.gold = test.output;
  out.correct = out.prediction == out.gold;
  return out;
}

}  // namespace metaicl
