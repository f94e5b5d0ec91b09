#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "metaicl/error.hpp"
#include "metaicl/eval.hpp"
#include "metaicl/scorer.hpp"
#include "metaicl/synth.hpp"
#include "naive_model.hpp"

using namespace metaicl;

namespace {

Task mapping_task(std::size_t examples = 40) {
  FamilySpec spec;
  spec.tasks = 1;
  spec.examples_per_task = examples;
  return generate_family(spec)[0];
}

ScoreConfig small_score(ScoreMethod m, std::size_t k) {
  ScoreConfig cfg;
  cfg.method = m;
  cfg.k = k;
  cfg.build.max_seq_len = 256;
  cfg.build.per_example_cap = 64;
  return cfg;
}

std::vector<std::string> split_chars(std::string_view s) {
  std::vector<std::string> out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

}  // namespace

TEST_SUITE("scorer") {
  TEST_CASE("ties resolve to the first option") {
    const std::vector<double> v{1.0, 3.0, 3.0, 2.0};
    CHECK(argmax_first(v) == 1);
    const auto uniform = ModelParams<float>::zeros(ModelConfig::mini());
    const Task task = mapping_task();
    const auto shots = sample_few_shot(task, 2, 13);
    const std::vector<std::string> opts{"B", "A", "C"};
    const auto r = score_candidates(uniform, shots, task.examples[30].input, opts, small_score(ScoreMethod::direct, 2));
    CHECK(r.prediction == 0);
    CHECK(r.predicted() == "B");
  }

  TEST_CASE("PMI calibration cancels under a uniform model") {
    const auto uniform = ModelParams<float>::zeros(ModelConfig::mini());
    const Task task = mapping_task();
    const std::vector<std::string> opts{"A", "BB", "CCC"};
    const auto r = score_candidates(uniform, FewShotSet{}, task.examples[0].input, opts,
                                    small_score(ScoreMethod::pmi, 0));
    for (double s : r.scores) CHECK(std::abs(s) < 1e-9);
  }

  TEST_CASE("scores equal the naive per-candidate loop") {
    const auto p = ModelParams<double>::initialized(ModelConfig::mini(), 21);
    const auto pf = p.cast<float>();
    const Task task = mapping_task();
    const auto shots = sample_few_shot(task, 3, 42);
    const std::vector<std::string> opts{"A", "B", "C", "D"};
    for (ScoreMethod m : {ScoreMethod::direct, ScoreMethod::channel, ScoreMethod::pmi}) {
      const ScoreConfig cfg = small_score(m, 3);
      const auto r = score_candidates(pf, shots, task.examples[35].input, opts, cfg);
      for (std::size_t c = 0; c < opts.size(); ++c) {
        double expected = naive::sequence_logprob(
            pf, build_score_sequence(shots.shots, task.examples[35].input, opts[c], cfg.resolved_build()));
        if (m == ScoreMethod::pmi) {
          expected -= naive::sequence_logprob(pf, build_score_sequence(shots.shots, cfg.pmi_placeholder, opts[c],
                                                                       cfg.resolved_build()));
        }
        CHECK(std::abs(r.scores[c] - expected) < 1e-3);
      }
    }
  }

  TEST_CASE("channel scoring is direct scoring of the flipped pairs") {
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 22);
    const Task task = mapping_task();
    const auto shots = sample_few_shot(task, 2, 21);
    const std::string test_input = task.examples[33].input;
    for (const std::string opt : {"A", "C"}) {
      const auto channel = build_score_sequence(shots.shots, test_input, opt, small_score(ScoreMethod::channel, 2).resolved_build());
      std::vector<Example> flipped;
      for (const auto& s : shots.shots) flipped.push_back(flip(s));
      const auto direct = build_score_sequence(flipped, opt, test_input, small_score(ScoreMethod::direct, 2).resolved_build());
      CHECK(channel.tokens == direct.tokens);
      CHECK(channel.loss_mask == direct.loss_mask);
    }
  }

  TEST_CASE("batched scoring equals one-at-a-time scoring") {
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 23);
    const Task task = mapping_task();
    const auto shots = sample_few_shot(task, 2, 87);
    const std::vector<std::string> opts{"A", "B", "C", "D"};
    std::vector<std::string> inputs{task.examples[30].input, task.examples[31].input};
    const ScoreConfig cfg = small_score(ScoreMethod::pmi, 2);
    const auto many = score_many(p, shots, inputs, opts, cfg);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto one = score_candidates(p, shots, inputs[i], opts, cfg);
      CHECK(one.scores == many[i].scores);
    }
  }

  TEST_CASE("evaluate_example never uses the test example as a shot") {
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 24);
    const Task task = mapping_task(12);
    for (std::size_t idx = 0; idx < task.examples.size(); ++idx) {
      const auto o = evaluate_example(p, task, idx, 100, small_score(ScoreMethod::direct, 4));
      CHECK(o.gold == task.examples[idx].output);
      CHECK(o.correct == (o.prediction == o.gold));
    }
    const auto zero = evaluate_example(p, task, 0, 100, small_score(ScoreMethod::direct, 0));
    CHECK(zero.scored.k == 0);
  }

  TEST_CASE("errors") {
    const auto p = ModelParams<float>::initialized(ModelConfig::mini(), 25);
    Task task = mapping_task();
    const auto shots = sample_few_shot(task, 2, 13);
    const std::vector<std::string> dup{"A", "A"};
    CHECK_THROWS_AS(score_candidates(p, shots, "q: s1", dup, small_score(ScoreMethod::direct, 2)), DataError);
    CHECK_THROWS_AS(score_candidates(p, shots, "q: s1", {}, small_score(ScoreMethod::direct, 2)), DataError);
    const std::vector<std::string> opts{"A", "B"};
    CHECK_THROWS_AS(score_candidates(p, shots, "q: s1", opts, small_score(ScoreMethod::direct, 3)), ConfigError);
    task.examples[0].output = "Z";
    CHECK_THROWS_AS(evaluate_example(p, task, 0, 13, small_score(ScoreMethod::direct, 2)), DataError);
    CHECK_THROWS_AS(parse_score_method("noisy"), ConfigError);
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("macro-F1 hand case") {
    {
      const auto gold = split_chars("AABB");
      const auto pred = split_chars("ABBB");
      const std::vector<std::string> ab{"A", "B"};
      CHECK(std::abs(macro_f1(gold, pred, ab) - (2.0 / 3.0 + 4.0 / 5.0) / 2.0) < 1e-9);
      CHECK(std::abs(macro_f1(gold, pred, ab) - 0.7333333333333333) < 1e-9);
    }
    const auto gold = split_chars("AAABBC");
    const auto pred = split_chars("AABBCC");
    const std::vector<std::string> opts{"A", "B", "C", "D"};
    // F1: A 0.8, B 0.5, C 2/3; D is absent on both sides and excluded.
    CHECK(macro_f1(gold, pred, opts) == doctest::Approx((0.8 + 0.5 + 2.0 / 3.0) / 3.0).epsilon(1e-12));
    CHECK(accuracy(gold, pred) == doctest::Approx(4.0 / 6.0));
  }

  TEST_CASE("macro-F1 edge cases") {
    const auto gold = split_chars("AB");
    const std::vector<std::string> opts{"A", "B", "C"};
    CHECK(macro_f1(gold, gold, opts) == 1.0);
    // Predicted-only class counts with F1 0.
    CHECK(macro_f1(gold, split_chars("AC"), opts) == doctest::Approx((1.0 + 0.0 + 0.0) / 3.0));
    CHECK(macro_f1(gold, split_chars("BA"), opts) == 0.0);
    CHECK_THROWS_AS(accuracy(gold, split_chars("A")), ConfigError);
    CHECK_THROWS_AS(accuracy({}, {}), ConfigError);
  }

  TEST_CASE("format picks the metric") {
    CHECK(metric_name(TaskFormat::classification) == "macro_f1");
    CHECK(metric_name(TaskFormat::multichoice) == "accuracy");
    CHECK(protocol_seeds() == std::vector<std::uint64_t>{100, 13, 21, 42, 87});
  }
}

TEST_SUITE("protocol") {
  namespace {
  struct Fixture {
    GeneratedCorpus g;
    ModelParams<float> model = ModelParams<float>::initialized(ModelConfig::mini(), 31);
    ProtocolConfig cfg;
    Fixture() {
      BenchmarkSpec spec;
      spec.mapping_train = 2;
      spec.mapping_target = 2;
      spec.extract_train = 1;
      spec.extract_target = 1;
      spec.majority_target = 1;
      spec.train_examples = 20;
      spec.target_examples = 20;
      g = generate_benchmark(spec);
      cfg.score = small_score(ScoreMethod::direct, 2);
      cfg.seeds = {100, 13};
      cfg.test_cap = 6;
    }
  };
  }  // namespace

  TEST_CASE_FIXTURE(Fixture, "report folds the prediction records") {
    const auto r = run_protocol(model, g.corpus, g.split, cfg);
    CHECK(r.report.tasks.size() == 4);
    CHECK(r.predictions.size() == 4 * 2 * 6);
    for (const auto& t : r.report.tasks) {
      CHECK(t.seeds.size() == 2);
      CHECK(t.min <= t.mean + 1e-12);
      for (const auto& s : t.seeds) CHECK(s.test_size == 6);
    }
    CHECK(r.report.unseen.has_value());
    CHECK(r.report.unseen->tasks == 1);
    const EvalReport folded = fold_report(r.predictions, r.task_info, r.report.metadata);
    CHECK(to_json(folded) == to_json(r.report));
  }

  TEST_CASE_FIXTURE(Fixture, "fold is invariant to record order") {
    auto r = run_protocol(model, g.corpus, g.split, cfg);
    auto shuffled = r.predictions;
    std::reverse(shuffled.begin(), shuffled.end());
    CHECK(to_json(fold_report(shuffled, r.task_info, r.report.metadata)) == to_json(r.report));
  }

  TEST_CASE_FIXTURE(Fixture, "seed order does not change task means") {
    const auto a = run_protocol(model, g.corpus, g.split, cfg);
    cfg.seeds = {13, 100};
    const auto b = run_protocol(model, g.corpus, g.split, cfg);
    for (const auto& t : a.report.tasks) {
      CHECK(b.report.find(t.task)->mean == doctest::Approx(t.mean).epsilon(1e-12));
      CHECK(b.report.find(t.task)->min == doctest::Approx(t.min).epsilon(1e-12));
    }
  }

  TEST_CASE_FIXTURE(Fixture, "dump round trip recomputes the report") {
    cfg.replace_labels = true;
    const auto r = run_protocol(model, g.corpus, g.split, cfg, {}, {{"run", "test"}});
    const Dump d = parse_dump(serialize_dump(r));
    CHECK(d.records.size() == r.predictions.size());
    CHECK(to_json(recompute_from_dump(d)) == to_json(r.report));
    CHECK(serialize_report(recompute_from_dump(d)) == serialize_report(r.report));
    CHECK_THROWS_AS(parse_dump("not json\n"), DataError);
  }

  TEST_CASE_FIXTURE(Fixture, "replaced labels are pseudo-words") {
    cfg.replace_labels = true;
    const auto r = run_protocol(model, g.corpus, g.split, cfg);
    for (const auto& p : r.predictions) CHECK(p.gold.size() > 1);
  }

  TEST_CASE_FIXTURE(Fixture, "adaptation hook runs once per task and seed") {
    int calls = 0;
    AdaptFn adapt = [&](const Task&, const FewShotSet&) {
      ++calls;
      return model;
    };
    const auto plain = run_protocol(model, g.corpus, g.split, cfg);
    const auto adapted = run_protocol(model, g.corpus, g.split, cfg, adapt);
    CHECK(calls == 4 * 2);
    CHECK(to_json(adapted.report)["tasks"] == to_json(plain.report)["tasks"]);
  }

  TEST_CASE_FIXTURE(Fixture, "csv has one row per task and seed") {
    const auto r = run_protocol(model, g.corpus, g.split, cfg);
    const std::string csv = report_csv(r.report);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2 + 4 * 2);
  }
}
