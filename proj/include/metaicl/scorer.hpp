#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metaicl/corpus.hpp"
#include "metaicl/model.hpp"
#include "metaicl/seqbuild.hpp"

namespace metaicl {

enum class ScoreMethod { direct, pmi, channel };

std::string_view to_string(ScoreMethod method);
ScoreMethod parse_score_method(std::string_view text);

struct ScoreConfig {
  ScoreMethod method = ScoreMethod::direct;
  std::size_t k = 16;
  BuildConfig build;  // direction is derived from method; build.k is ignored
  std::string pmi_placeholder = "N/A";
  // Calibrate PMI with an empty test input instead of the placeholder.
  bool pmi_empty_input = false;

  // Build config with the direction implied by the method.
  BuildConfig resolved_build() const;
  void validate() const;  // throws ConfigError
};

struct ScoredCandidates {
  std::vector<std::string> candidates;
  std::vector<double> scores;
  std::size_t prediction = 0;  // argmax, lowest index on ties
  ScoreMethod method = ScoreMethod::direct;
  std::size_t k = 0;
  std::uint64_t seed = 0;

  const std::string& predicted() const { return candidates[prediction]; }
};

// Index of the largest value; the first one on ties.
std::size_t argmax_first(std::span<const double> values);

ScoredCandidates score_candidates(const ModelParams<float>& model, const FewShotSet& shots,
                                  std::string_view test_input, std::span<const std::string> options,
                                  const ScoreConfig& cfg);

// Scores many test inputs against one shot set. Computes the PMI
// calibration once, since it does not depend on the test input.
std::vector<ScoredCandidates> score_many(const ModelParams<float>& model, const FewShotSet& shots,
                                         std::span<const std::string> test_inputs,
                                         std::span<const std::string> options, const ScoreConfig& cfg);

struct ExampleOutcome {
  ScoredCandidates scored;
  std::string prediction;
  std::string gold;
  bool correct = false;
};

// Draws k shots for (task, seed) that avoid the test example, then scores it.
// The shots are the first k non-test entries of the seed's permutation.
ExampleOutcome evaluate_example(const ModelParams<float>& model, const Task& task, std::size_t example_index,
                                std::uint64_t seed, const ScoreConfig& cfg);

}  // namespace metaicl
