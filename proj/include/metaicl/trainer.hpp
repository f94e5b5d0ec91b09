#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaicl/corpus.hpp"
#include "metaicl/model.hpp"
#include "metaicl/optimizer.hpp"
#include "metaicl/rng.hpp"
#include "metaicl/seqbuild.hpp"

namespace metaicl {

enum class Regime { metaicl, multitask_zero, finetune };

std::string_view to_string(Regime regime);
Regime parse_regime(std::string_view text);

struct TrainConfig {
  Regime regime = Regime::metaicl;
  Direction direction = Direction::direct;
  std::size_t k = 16;
  std::size_t batch_size = 8;
  double learning_rate = 3e-4;
  std::size_t total_steps = 5000;
  std::size_t warmup_steps = 100;  // linear warmup, then constant
  std::uint64_t seed = 1;
  AdamConfig adam;
  std::size_t max_seq_len = 512;
  std::size_t short_max_seq_len = 256;  // multi-task zero-shot sequences
  std::size_t per_example_cap = 256;
  std::string sep_io = "\n";
  std::string sep_ex = "\n\n\n";
  bool include_instruction = false;
  // Fresh random label words for every sampled episode.
  bool replace_labels_each_iteration = false;

  // Large-model fine-tuning scale: batch 8, lr 1e-5, 30k steps, 1024 tokens.
  static TrainConfig reference_defaults();
  // Batch 8, lr 3e-4, 5k steps, 512 tokens.
  static TrainConfig desk_defaults();

  // k actually used by the regime (0 for multitask_zero and finetune).
  std::size_t effective_k() const;
  BuildConfig build_config() const;
  void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const TrainConfig& cfg);
// Overlays the fields present in `j` onto `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

double learning_rate_at(const TrainConfig& cfg, std::size_t step);

struct TrainLogEntry {
  std::size_t step = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;
  std::vector<std::string> tasks_sampled;
};

nlohmann::json to_json(const TrainLogEntry& entry);

struct TrainResult {
  ModelParams<float> params;
  std::vector<TrainLogEntry> log;
  std::string rng_state;
};

using StepCallback = std::function<void(const TrainLogEntry&)>;

// One supervised episode: k+1 examples of one task, last one supervised.
struct Episode {
  std::string task;
  EncodedSequence sequence;
};

// Draws meta-training episodes: task uniform over the meta-training
// list, k+1 examples without replacement inside the episode (with replacement
// across episodes), optional per-episode label replacement.
class EpisodeSampler {
 public:
  EpisodeSampler(const Corpus& corpus, const Split& split, const TrainConfig& cfg, std::size_t k);

  Episode next();
  std::vector<Episode> next_batch(std::size_t batch_size);

  Rng& rng() { return rng_; }
  const std::vector<const Task*>& tasks() const { return tasks_; }

 private:
  std::vector<const Task*> tasks_;
  std::size_t example_cap_;
  std::size_t k_;
  BuildConfig build_;
  bool replace_labels_;
  Rng rng_;
};

// Shared loop behind meta_train and multitask_zero_train; uses cfg.k and
// cfg.max_seq_len as given.
TrainResult train_episodes(const Corpus& corpus, const Split& split, ModelParams<float> params,
                           const TrainConfig& cfg, const StepCallback& on_step = {});

// MetaICL / Channel MetaICL (regime metaicl, k >= 1).
TrainResult meta_train(const Corpus& corpus, const Split& split, ModelParams<float> params, const TrainConfig& cfg,
                       const StepCallback& on_step = {});

// Multi-task zero-shot: the same loop with k forced to 0 and short sequences.
TrainResult multitask_zero_train(const Corpus& corpus, const Split& split, ModelParams<float> params,
                                 const TrainConfig& cfg, const StepCallback& on_step = {});

// Supervised k=0-style training on the few-shot examples of one target task.
TrainResult finetune(const Task& task, const FewShotSet& shots, ModelParams<float> params, const TrainConfig& cfg,
                     const StepCallback& on_step = {});

}  // namespace metaicl
