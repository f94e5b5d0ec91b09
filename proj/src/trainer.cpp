#include "metaicl/trainer.hpp"

#include <algorithm>

#include "metaicl/error.hpp"

namespace metaicl {

using nlohmann::json;

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::metaicl: return "metaicl";
    case Regime::multitask_zero: return "multitask_zero";
    case Regime::finetune: return "finetune";
  }
  return "metaicl";
}

Regime parse_regime(std::string_view text) {
  if (text == "metaicl") return Regime::metaicl;
  if (text == "multitask_zero") return Regime::multitask_zero;
  if (text == "finetune") return Regime::finetune;
  throw ConfigError("unknown regime '" + std::string(text) + "'");
}

TrainConfig TrainConfig::reference_defaults() {
  TrainConfig cfg;
  cfg.learning_rate = 1e-5;
  cfg.total_steps = 30000;
  cfg.max_seq_len = 1024;
  return cfg;
}

TrainConfig TrainConfig::desk_defaults() { return TrainConfig{}; }

std::size_t TrainConfig::effective_k() const { return regime == Regime::metaicl ? k : 0; }

BuildConfig TrainConfig::build_config() const {
  BuildConfig b;
  b.k = effective_k();
  b.direction = direction;
  b.sep_io = sep_io;
  b.sep_ex = sep_ex;
  b.max_seq_len = regime == Regime::multitask_zero ? short_max_seq_len : max_seq_len;
  b.per_example_cap = std::min(per_example_cap, b.max_seq_len);
  b.include_instruction = include_instruction;
  return b;
}

void TrainConfig::validate() const {
  if (regime == Regime::metaicl && k < 1) throw ConfigError("train config: metaicl needs k >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0 || !(adam.eps > 0.0)) {
    throw ConfigError("train config: invalid Adam hyperparameters");
  }
  build_config().validate();
}

json to_json(const TrainConfig& c) {
  return json{{"regime", to_string(c.regime)},
              {"direction", to_string(c.direction)},
              {"k", c.k},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"total_steps", c.total_steps},
              {"warmup_steps", c.warmup_steps},
              {"seed", c.seed},
              {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
              {"max_seq_len", c.max_seq_len},
              {"short_max_seq_len", c.short_max_seq_len},
              {"per_example_cap", c.per_example_cap},
              {"sep_io", c.sep_io},
              {"sep_ex", c.sep_ex},
              {"include_instruction", c.include_instruction},
              {"replace_labels_each_iteration", c.replace_labels_each_iteration}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  try {
    if (j.contains("regime")) c.regime = parse_regime(j.at("regime").get<std::string>());
    if (j.contains("direction")) c.direction = parse_direction(j.at("direction").get<std::string>());
    if (j.contains("k")) c.k = j.at("k").get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("total_steps")) c.total_steps = j.at("total_steps").get<std::size_t>();
    if (j.contains("warmup_steps")) c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam.beta1 = a.value("beta1", c.adam.beta1);
      c.adam.beta2 = a.value("beta2", c.adam.beta2);
      c.adam.eps = a.value("eps", c.adam.eps);
    }
    if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    if (j.contains("short_max_seq_len")) c.short_max_seq_len = j.at("short_max_seq_len").get<std::size_t>();
    if (j.contains("per_example_cap")) c.per_example_cap = j.at("per_example_cap").get<std::size_t>();
    if (j.contains("sep_io")) c.sep_io = j.at("sep_io").get<std::string>();
    if (j.contains("sep_ex")) c.sep_ex = j.at("sep_ex").get<std::string>();
    if (j.contains("include_instruction")) c.include_instruction = j.at("include_instruction").get<bool>();
    if (j.contains("replace_labels_each_iteration")) {
      c.replace_labels_each_iteration = j.at("replace_labels_each_iteration").get<bool>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

json to_json(const TrainLogEntry& e) {
  return json{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"tasks_sampled", e.tasks_sampled}};
}

// --- EpisodeSampler ------------------------------------------------------------------

EpisodeSampler::EpisodeSampler(const Corpus& corpus, const Split& split, const TrainConfig& cfg, std::size_t k)
    : example_cap_(split.max_train_examples_per_task),
      k_(k),
      build_(cfg.build_config()),
      replace_labels_(cfg.replace_labels_each_iteration),
      rng_(mix_seed({cfg.seed, 0x7a1eULL})) {
  build_.k = k;
  if (split.meta_train.empty()) throw ConfigError("split has no meta-training tasks");
  for (const auto& name : split.meta_train) {
    const Task& t = corpus.at(name);
    const std::size_t available = std::min(t.examples.size(), example_cap_);
    if (available < k + 1) {
      throw ConfigError("meta-training task '" + name + "' has " + std::to_string(available) +
                        " examples, needs k+1 = " + std::to_string(k + 1));
    }
    tasks_.push_back(&t);
  }
}

Episode EpisodeSampler::next() {
  const Task& task = *tasks_[uniform_index(rng_, tasks_.size())];
  const std::size_t available = std::min(task.examples.size(), example_cap_);
  const auto picks = sample_without_replacement(rng_, available, k_ + 1);
  std::vector<Example> shots;
  shots.reserve(picks.size());
  for (auto i : picks) shots.push_back(task.examples[i]);
  if (replace_labels_ && !task.options.empty()) {
    const auto mapping = make_label_mapping(task.options, rng_(), pseudo_words());
    for (auto& ex : shots) ex = mapping.apply(ex);
  }
  BuildConfig build = build_;
  if (task.instruction) build.instruction = *task.instruction;
  return Episode{task.name, build_train_sequence(shots, build, task.name)};
}

std::vector<Episode> EpisodeSampler::next_batch(std::size_t batch_size) {
  std::vector<Episode> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(next());
  return batch;
}

// --- Training loops ------------------------------------------------------------------

namespace {

template <typename NextBatch>
TrainResult run_loop(ModelParams<float> params, const TrainConfig& cfg, NextBatch&& next_batch, Rng& rng,
                     const StepCallback& on_step) {
  TrainResult result{std::move(params), {}, {}};
  Adam<float> adam(result.params.config, cfg.adam);
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<Episode> episodes = next_batch();
    std::vector<EncodedSequence> seqs;
    TrainLogEntry entry;
    entry.step = step + 1;
    entry.lr = learning_rate_at(cfg, step);
    for (auto& e : episodes) {
      entry.tasks_sampled.push_back(e.task);
      seqs.push_back(std::move(e.sequence));
    }
    try {
      auto lg = loss_and_grads(result.params, PaddedBatch::from(seqs));
      entry.loss = lg.loss;
      adam.step(result.params, lg.grads, entry.lr);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
    }
    if (!result.params.all_finite()) {
      throw NumericalError("training diverged at step " + std::to_string(step + 1) + ": non-finite weights");
    }
    if (on_step) on_step(entry);
    result.log.push_back(std::move(entry));
  }
  result.rng_state = rng_state_string(rng);
  return result;
}

}  // namespace

TrainResult train_episodes(const Corpus& corpus, const Split& split, ModelParams<float> params,
                           const TrainConfig& cfg, const StepCallback& on_step) {
  split.validate(corpus);
  if (static_cast<std::size_t>(params.config.max_positions) < cfg.build_config().max_seq_len) {
    throw ConfigError("model max_positions is smaller than the sequence length");
  }
  EpisodeSampler sampler(corpus, split, cfg, cfg.effective_k());
  return run_loop(std::move(params), cfg, [&] { return sampler.next_batch(cfg.batch_size); }, sampler.rng(),
                  on_step);
}

TrainResult meta_train(const Corpus& corpus, const Split& split, ModelParams<float> params, const TrainConfig& cfg,
                       const StepCallback& on_step) {
  if (cfg.regime != Regime::metaicl) throw ConfigError("meta_train requires regime metaicl");
  cfg.validate();
  return train_episodes(corpus, split, std::move(params), cfg, on_step);
}

TrainResult multitask_zero_train(const Corpus& corpus, const Split& split, ModelParams<float> params,
                                 const TrainConfig& cfg, const StepCallback& on_step) {
  if (cfg.regime != Regime::multitask_zero) throw ConfigError("multitask_zero_train requires regime multitask_zero");
  cfg.validate();
  return train_episodes(corpus, split, std::move(params), cfg, on_step);
}

TrainResult finetune(const Task& task, const FewShotSet& shots, ModelParams<float> params, const TrainConfig& cfg,
                     const StepCallback& on_step) {
  if (cfg.regime != Regime::finetune) throw ConfigError("finetune requires regime finetune");
  cfg.validate();
  if (shots.shots.empty()) throw ConfigError("finetune: empty few-shot set");
  BuildConfig build = cfg.build_config();
  if (task.instruction) build.instruction = *task.instruction;
  Rng rng(mix_seed({cfg.seed, shots.seed, fnv1a64(task.name), 0xf17eULL}));
  const std::size_t per_step = std::min(cfg.batch_size, shots.shots.size());
  auto next_batch = [&] {
    std::vector<Episode> batch;
    for (auto i : sample_without_replacement(rng, shots.shots.size(), per_step)) {
      const Example& ex = shots.shots[i];
      batch.push_back(Episode{task.name, build_train_sequence(std::span<const Example>(&ex, 1), build, task.name)});
    }
    return batch;
  };
  return run_loop(std::move(params), cfg, next_batch, rng, on_step);
}

}  // namespace metaicl
