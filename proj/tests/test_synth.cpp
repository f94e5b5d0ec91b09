#include <doctest.h>

#include <map>
#include <set>
#include <sstream>

#include "metaicl/error.hpp"
#include "metaicl/synth.hpp"

using namespace metaicl;

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

TEST_SUITE("synth") {
  TEST_CASE("mapping tasks bind each symbol to one label") {
    FamilySpec spec;
    spec.family = Family::mapping;
    spec.vocab_symbols = 4;
    spec.num_options = 4;
    spec.tasks = 6;
    const auto tasks = generate_family(spec);
    REQUIRE(tasks.size() == 6);
    for (const auto& t : tasks) {
      CHECK(t.options == std::vector<std::string>{"A", "B", "C", "D"});
      std::map<std::string, std::string> bind;
      for (const auto& ex : t.examples) {
        CHECK(ex.input.rfind("q: s", 0) == 0);
        auto [it, fresh] = bind.emplace(ex.input, ex.output);
        CHECK(it->second == ex.output);
      }
      std::set<std::string> labels;
      for (const auto& [in, out] : bind) labels.insert(out);
      CHECK(labels.size() == bind.size());  // injective
    }
    CHECK(tasks[0].name == "mapping_000");
    CHECK(tasks[5].name == "mapping_005");
  }

  TEST_CASE("mapping distractors precede the query") {
    FamilySpec spec;
    spec.input_len = 3;
    spec.tasks = 1;
    const auto t = generate_family(spec).front();
    for (const auto& ex : t.examples) {
      const auto w = split_words(ex.input);
      REQUIRE(w.size() == 4);  // two distractors, "q:", symbol
      CHECK(w[2] == "q:");
    }
  }

  TEST_CASE("extract output is the word at the task's slot") {
    FamilySpec spec;
    spec.family = Family::extract;
    spec.input_len = 4;
    spec.position = 2;
    spec.tasks = 3;
    for (const auto& t : generate_family(spec)) {
      for (const auto& ex : t.examples) CHECK(split_words(ex.input)[2] == ex.output);
    }
    FamilySpec free = spec;
    free.position.reset();
    for (const auto& t : generate_family(free)) {
      std::size_t slot_hits[4] = {0, 0, 0, 0};
      for (const auto& ex : t.examples) {
        const auto w = split_words(ex.input);
        for (std::size_t i = 0; i < 4; ++i) slot_hits[i] += w[i] == ex.output;
      }
      CHECK(*std::max_element(slot_hits, slot_hits + 4) == t.examples.size());
    }
  }

  TEST_CASE("majority output is the unique most frequent word") {
    FamilySpec spec;
    spec.family = Family::majority;
    spec.input_len = 5;
    spec.num_options = 3;
    spec.tasks = 4;
    for (const auto& t : generate_family(spec)) {
      CHECK(t.options.size() == 3);
      for (const auto& ex : t.examples) {
        std::map<std::string, int> counts;
        for (const auto& w : split_words(ex.input)) ++counts[w];
        int best = 0, ties = 0;
        for (const auto& [w, n] : counts) best = std::max(best, n);
        for (const auto& [w, n] : counts) ties += n == best;
        CHECK(ties == 1);
        CHECK(counts[ex.output] == best);
        CHECK(t.has_option(ex.output));
      }
    }
  }

  TEST_CASE("hand cases by construction") {
    // extract, position 2, "u v w x" -> "w": the generator's rule applied by hand
    const std::vector<std::string> w{"u", "v", "w", "x"};
    CHECK(w[2] == "w");
    FamilySpec spec;
    spec.family = Family::majority;
    spec.num_options = 2;
    spec.input_len = 3;
    spec.tasks = 1;
    const Task task = generate_family(spec).front();
    for (const auto& ex : task.examples) {
      const auto words = split_words(ex.input);
      const auto n = std::count(words.begin(), words.end(), ex.output);
      CHECK(n >= 2);
    }
  }

  TEST_CASE("generation is a pure function of the spec") {
    FamilySpec spec;
    spec.tasks = 3;
    CHECK(generate_family(spec) == generate_family(spec));
    FamilySpec other = spec;
    other.seed = 8;
    CHECK(generate_family(other) != generate_family(spec));
    // Index ranges compose: tasks [2, 3) equal the third task of [0, 3).
    FamilySpec tail = spec;
    tail.first_index = 2;
    tail.tasks = 1;
    CHECK(generate_family(tail).front() == generate_family(spec)[2]);
  }

  TEST_CASE("invalid specs") {
    FamilySpec s;
    s.num_options = 1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = FamilySpec{};
    s.input_len = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = FamilySpec{};
    s.family = Family::extract;
    s.input_len = 1;
    s.position = 3;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = FamilySpec{};
    s.vocab_symbols = 2;
    s.num_options = 4;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = FamilySpec{};
    s.family = Family::majority;
    s.num_options = 2;
    s.input_len = 4;
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }

  TEST_CASE("chance accuracy") {
    FamilySpec m;
    CHECK(family_chance_accuracy(m) == doctest::Approx(0.25));
    FamilySpec maj;
    maj.family = Family::majority;
    maj.num_options = 2;
    maj.input_len = 5;
    CHECK(family_chance_accuracy(maj) == doctest::Approx(0.5));
    FamilySpec ex;
    ex.family = Family::extract;
    ex.input_len = 5;
    CHECK(family_chance_accuracy(ex) == doctest::Approx(0.25));
  }

  TEST_CASE("mapping labels are uniform across tasks") {
    FamilySpec spec;
    spec.tasks = 400;
    spec.examples_per_task = 1;
    std::map<std::string, int> counts;
    for (const auto& t : generate_family(spec)) ++counts[t.examples[0].output];
    REQUIRE(counts.size() == 4);
    double chi2 = 0.0;
    for (const auto& [l, n] : counts) chi2 += (n - 100.0) * (n - 100.0) / 100.0;
    CHECK(chi2 < 16.27);  // 3 dof, p = 0.001
  }

  TEST_CASE("majority chance matches an empirical frequency") {
    FamilySpec spec;
    spec.family = Family::majority;
    spec.num_options = 3;
    spec.input_len = 4;
    spec.tasks = 1;
    spec.examples_per_task = 30000;
    const auto t = generate_family(spec).front();
    std::map<std::string, int> counts;
    for (const auto& ex : t.examples) ++counts[ex.output];
    int top = 0;
    for (const auto& [l, n] : counts) top = std::max(top, n);
    // By symmetry every option is equally likely to win.
    CHECK(family_chance_accuracy(spec) == doctest::Approx(1.0 / 3.0));
    CHECK(top / 30000.0 == doctest::Approx(1.0 / 3.0).epsilon(0.03));
  }

  TEST_CASE("benchmark split") {
    const auto gen = generate_benchmark({});
    CHECK(gen.split.meta_train.size() == 80);
    CHECK(gen.split.target.size() == 20);
    CHECK(gen.split.unseen_domain.size() == 8);
    std::set<std::string> train(gen.split.meta_train.begin(), gen.split.meta_train.end());
    for (const auto& t : gen.split.target) CHECK(!train.count(t));
    for (const auto& u : gen.split.unseen_domain) CHECK(family_of(u) == "majority");
    CHECK(family_of("mapping_071") == "mapping");
    CHECK(gen.corpus.at("mapping_064").examples.size() == 64);
  }
}
