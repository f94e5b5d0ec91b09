#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "metaicl/checkpoint.hpp"
#include "metaicl/error.hpp"
#include "metaicl/optimizer.hpp"
#include "metaicl/synth.hpp"
#include "metaicl/trainer.hpp"

using namespace metaicl;

namespace {

GeneratedCorpus small_corpus(std::size_t tasks = 4) {
  FamilySpec spec;
  spec.tasks = tasks;
  spec.examples_per_task = 32;
  GeneratedCorpus g;
  for (auto& t : generate_family(spec)) {
    g.split.meta_train.push_back(t.name);
    g.corpus.add(std::move(t));
  }
  return g;
}

TrainConfig quick(std::size_t steps, std::size_t k = 2) {
  TrainConfig cfg;
  cfg.k = k;
  cfg.total_steps = steps;
  cfg.batch_size = 2;
  cfg.warmup_steps = 2;
  cfg.max_seq_len = 128;
  cfg.short_max_seq_len = 128;
  cfg.per_example_cap = 64;
  return cfg;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip preserves weights and header") {
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 3);
    CheckpointInfo info;
    info.step = 42;
    info.rng_state = "state";
    info.provenance = {{"regime", "metaicl"}, {"k", 16}};
    const std::string bytes = serialize_checkpoint(p, info);
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(back.params == p);
    CHECK(back.info.step == 42);
    CHECK(back.info.rng_state == "state");
    CHECK(back.info.provenance == info.provenance);
    CHECK(serialize_checkpoint(back.params, back.info) == bytes);
  }

  TEST_CASE("errors") {
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 3);
    const std::string bytes = serialize_checkpoint(p, {});
    const ModelConfig tiny = ModelConfig::tiny();
    CHECK_THROWS_AS(parse_checkpoint(bytes, &tiny), ConfigError);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 4)), DataError);
    CHECK_THROWS_AS(parse_checkpoint("garbage!"), DataError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.ckpt"), IoError);
  }

  TEST_CASE("file round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "metaicl_ckpt_test";
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 4);
    save_checkpoint(dir / "m.ckpt", p, {});
    CHECK(load_checkpoint(dir / "m.ckpt").params == p);
    std::filesystem::remove_all(dir);
  }
}

TEST_SUITE("trainer") {
  TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.warmup_steps = 10;
    CHECK(learning_rate_at(cfg, 0) == doctest::Approx(1e-4));
    CHECK(learning_rate_at(cfg, 9) == doctest::Approx(1e-3));
    CHECK(learning_rate_at(cfg, 500) == doctest::Approx(1e-3));
    CHECK(TrainConfig::reference_defaults().learning_rate == doctest::Approx(1e-5));
    CHECK(TrainConfig::reference_defaults().total_steps == 30000);
    CHECK(TrainConfig::desk_defaults().learning_rate == doctest::Approx(3e-4));
    CHECK(TrainConfig::desk_defaults().batch_size == 8);
  }

  TEST_CASE("config json round trip") {
    TrainConfig cfg = quick(7, 3);
    cfg.direction = Direction::channel;
    cfg.replace_labels_each_iteration = true;
    const TrainConfig back = train_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    CHECK_THROWS_AS(train_config_from_json({{"regime", "nope"}}), ConfigError);
  }

  TEST_CASE("zero steps leave parameters unchanged") {
    auto g = small_corpus();
    const auto init = ModelParams<float>::initialized(ModelConfig::mini(), 2);
    const auto r = meta_train(g.corpus, g.split, init, quick(0));
    CHECK(r.params == init);
    CHECK(r.log.empty());
  }

  TEST_CASE("episodes hold k+1 examples with the last one supervised") {
    auto g = small_corpus(1);
    TrainConfig cfg = quick(1, 1);
    EpisodeSampler sampler(g.corpus, g.split, cfg, 1);
    for (int i = 0; i < 20; ++i) {
      const Episode e = sampler.next();
      const std::string text = decode(e.sequence.tokens);
      std::size_t seps = 0;
      for (std::size_t p = text.find("\n\n\n"); p != std::string::npos; p = text.find("\n\n\n", p + 3)) ++seps;
      CHECK(seps == 1);
      CHECK(e.sequence.masked_count() == 1);
      CHECK(e.sequence.loss_mask.back());
      CHECK(e.sequence.meta.k_effective == 1);
    }
  }

  TEST_CASE("task sampling is uniform") {
    auto g = small_corpus(8);
    TrainConfig cfg = quick(1, 1);
    EpisodeSampler sampler(g.corpus, g.split, cfg, 1);
    std::map<std::string, int> counts;
    const int n = 10000 * 8;
    for (int i = 0; i < n; ++i) ++counts[sampler.next().task];
    REQUIRE(counts.size() == 8);
    for (const auto& [task, c] : counts) CHECK(std::abs(c - n / 8.0) / (n / 8.0) < 0.03);
  }

  TEST_CASE("multitask_zero follows the k=0 meta-training trajectory") {
    auto g = small_corpus();
    const auto init = ModelParams<float>::initialized(ModelConfig::mini(), 5);
    TrainConfig mz = quick(3, 16);
    mz.regime = Regime::multitask_zero;
    TrainConfig mk = quick(3, 0);
    mk.max_seq_len = mz.short_max_seq_len;
    const auto a = multitask_zero_train(g.corpus, g.split, init, mz);
    const auto b = train_episodes(g.corpus, g.split, init, mk);
    CHECK(a.params == b.params);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].tasks_sampled == b.log[i].tasks_sampled);
    // The sequences are byte-identical too.
    EpisodeSampler sa(g.corpus, g.split, mz, 0), sb(g.corpus, g.split, mk, 0);
    for (int i = 0; i < 10; ++i) CHECK(sa.next().sequence.tokens == sb.next().sequence.tokens);
  }

  TEST_CASE("multitask_zero sequences fit the short length and mask by direction") {
    auto g = small_corpus();
    TrainConfig cfg = quick(1);
    cfg.regime = Regime::multitask_zero;
    cfg.short_max_seq_len = 256;
    EpisodeSampler direct(g.corpus, g.split, cfg, 0);
    cfg.direction = Direction::channel;
    EpisodeSampler channel(g.corpus, g.split, cfg, 0);
    for (int i = 0; i < 20; ++i) {
      const auto d = direct.next().sequence;
      const auto c = channel.next().sequence;
      CHECK(d.size() <= 256);
      CHECK(d.masked_text().size() == 1);  // a label letter
      CHECK(c.masked_text().rfind("q: s", 0) == 0);
    }
  }

  TEST_CASE("training is deterministic and reduces the loss") {
    auto g = small_corpus();
    const auto init = ModelParams<float>::initialized(ModelConfig::mini(), 6);
    TrainConfig cfg = quick(60);
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 4;
    const auto a = meta_train(g.corpus, g.split, init, cfg);
    const auto b = meta_train(g.corpus, g.split, init, cfg);
    CHECK(a.params == b.params);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
      first += a.log[static_cast<std::size_t>(i)].loss;
      last += a.log[a.log.size() - 1 - static_cast<std::size_t>(i)].loss;
    }
    CHECK(last < first);
  }

  TEST_CASE("label replacement changes supervised words per episode") {
    auto g = small_corpus();
    TrainConfig cfg = quick(1);
    cfg.replace_labels_each_iteration = true;
    EpisodeSampler sampler(g.corpus, g.split, cfg, 2);
    std::map<std::string, int> targets;
    for (int i = 0; i < 50; ++i) ++targets[sampler.next().sequence.masked_text()];
    CHECK(targets.size() > 20);
    for (const auto& [t, n] : targets) CHECK(t.size() >= 4);  // two-syllable pseudo-words
  }

  TEST_CASE("preconditions") {
    auto g = small_corpus();
    const auto init = ModelParams<float>::initialized(ModelConfig::mini(), 1);
    CHECK_THROWS_AS(meta_train(g.corpus, g.split, init, quick(1, 0)), ConfigError);
    CHECK_THROWS_AS(meta_train(g.corpus, g.split, init, quick(1, 40)), ConfigError);  // 32 examples per task
    TrainConfig wrong = quick(1);
    wrong.regime = Regime::finetune;
    CHECK_THROWS_AS(meta_train(g.corpus, g.split, init, wrong), ConfigError);
    CHECK_THROWS_AS(finetune(g.corpus.tasks()[0], FewShotSet{}, init, wrong), ConfigError);
  }

  TEST_CASE("divergence reports the step") {
    auto g = small_corpus();
    auto init = ModelParams<float>::initialized(ModelConfig::mini(), 1);
    init.layers[0].fc_weight(0, 0) = std::numeric_limits<float>::quiet_NaN();
    try {
      meta_train(g.corpus, g.split, init, quick(2));
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
  }

  TEST_CASE("fine-tuning descends on its shots") {
    auto g = small_corpus(1);
    const Task& task = g.corpus.tasks()[0];
    const FewShotSet shots = sample_few_shot(task, 4, 100);
    TrainConfig cfg = quick(0);
    cfg.regime = Regime::finetune;
    cfg.batch_size = 4;
    const auto init = ModelParams<double>::initialized(ModelConfig::mini(), 2).cast<float>();
    CHECK(finetune(task, shots, init, cfg).params == init);

    // Plain gradient descent with a backtracking line search: every accepted
    // step lowers the loss on the shots.
    std::vector<EncodedSequence> seqs;
    for (const auto& ex : shots.shots) seqs.push_back(build_train_sequence(std::span(&ex, 1), cfg.build_config()));
    const PaddedBatch batch = PaddedBatch::from(seqs);
    auto p = ModelParams<double>::initialized(ModelConfig::mini(), 2);
    double loss = batch_loss(p, batch);
    for (int step = 0; step < 10; ++step) {
      const auto lg = loss_and_grads(p, batch);
      double lr = 1.0;
      for (int tries = 0; tries < 30; ++tries, lr *= 0.5) {
        auto q = p;
        std::vector<double*> qs;
        q.for_each_tensor([&](const std::string&, double* d, Eigen::Index r, Eigen::Index c) {
          for (Eigen::Index i = 0; i < r * c; ++i) qs.push_back(d + i);
        });
        std::size_t i = 0;
        lg.grads.for_each_tensor([&](const std::string&, const double* d, Eigen::Index r, Eigen::Index c) {
          for (Eigen::Index j = 0; j < r * c; ++j) *qs[i++] -= lr * d[j];
        });
        const double next = batch_loss(q, batch);
        if (next < loss) {
          p = std::move(q);
          CHECK(next < loss);
          loss = next;
          break;
        }
      }
    }

    cfg.total_steps = 30;
    cfg.learning_rate = 3e-3;
    const auto tuned = finetune(task, shots, init, cfg);
    CHECK(batch_loss(tuned.params, batch) < batch_loss(init, batch));
  }

  TEST_CASE("Adam matches a hand-computed first step") {
    auto p = ModelParams<double>::zeros(ModelConfig::mini());
    auto g = ModelParams<double>::zeros(ModelConfig::mini());
    g.final_bias(0) = 0.5;
    g.final_bias(1) = -2.0;
    Adam<double> adam(p.config);
    adam.step(p, g, 0.1);
    // Bias-corrected first step moves each coordinate by lr * sign(g).
    CHECK(p.final_bias(0) == doctest::Approx(-0.1));
    CHECK(p.final_bias(1) == doctest::Approx(0.1));
    CHECK(p.final_bias(2) == 0.0);
  }
}
