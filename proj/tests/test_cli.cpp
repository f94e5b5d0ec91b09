#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "metaicl/checkpoint.hpp"
#include "metaicl/cli.hpp"
#include "metaicl/io.hpp"

using namespace metaicl;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("metaicl_cli_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& s) const { return (path / s).string(); }
};

std::vector<std::string> small_synth(const std::string& out) {
  return {"synth",          "--mapping-train",   "3", "--mapping-target",  "1", "--extract-train", "1",
          "--extract-target", "1", "--majority-target", "1", "--train-examples", "24", "--target-examples",
          "12",             "--out",             out};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("synth is deterministic") {
    TempDir d;
    REQUIRE(cli(small_synth(d / "a")).code == 0);
    REQUIRE(cli(small_synth(d / "b")).code == 0);
    CHECK(read_file(d / "a/corpus.jsonl") == read_file(d / "b/corpus.jsonl"));
    CHECK(read_file(d / "a/split.json") == read_file(d / "b/split.json"));
    auto other = small_synth(d / "c");
    other.insert(other.end(), {"--data-seed", "8"});
    REQUIRE(cli(other).code == 0);
    CHECK(read_file(d / "a/corpus.jsonl") != read_file(d / "c/corpus.jsonl"));
  }

  TEST_CASE("invalid synth spec exits 2") {
    TempDir d;
    const Run r = cli({"synth", "--family", "extract", "--input-len", "3", "--position", "5", "--out", d / "x"});
    CHECK(r.code == 2);
    CHECK(r.err.find("error") != std::string::npos);
  }

  TEST_CASE("train, eval and report") {
    TempDir d;
    REQUIRE(cli(small_synth(d / "data")).code == 0);
    const std::vector<std::string> base{"--model",  "mini", "--corpus", d / "data/corpus.jsonl",
                                        "--split", d / "data/split.json"};
    auto zero = base;
    zero.insert(zero.begin(), "train");
    zero.insert(zero.end(), {"--steps", "0", "--k", "2", "--max-seq-len", "128", "--init-seed", "5", "--out", d / "m0"});
    REQUIRE(cli(zero).code == 0);
    const Checkpoint c0 = load_checkpoint(d / "m0/model.ckpt");
    CHECK(c0.params == ModelParams<float>::initialized(ModelConfig::mini(), 5));
    CHECK(c0.info.provenance.at("regime") == "metaicl");
    CHECK(c0.info.provenance.at("k") == 2);
    CHECK(c0.info.provenance.contains("corpus_hash"));

    auto mz = base;
    mz.insert(mz.begin(), "train");
    mz.insert(mz.end(), {"--regime", "multitask_zero", "--k", "4", "--steps", "2", "--batch-size", "2",
                         "--short-max-seq-len", "64", "--out", d / "mz"});
    const Run w = cli(mz);
    CHECK(w.code == 0);
    CHECK(w.err.find("warning") != std::string::npos);
    CHECK(load_checkpoint(d / "mz/model.ckpt").info.provenance.at("k") == 0);

    auto ev = std::vector<std::string>{"eval",  "--checkpoint", d / "m0/model.ckpt", "--corpus",
                                       d / "data/corpus.jsonl", "--split", d / "data/split.json",
                                       "--k",   "2",  "--seeds", "100,13", "--test-cap", "4"};
    auto ev1 = ev, ev2 = ev;
    ev1.insert(ev1.end(), {"--out", d / "e1"});
    ev2.insert(ev2.end(), {"--out", d / "e2"});
    REQUIRE(cli(ev1).code == 0);
    REQUIRE(cli(ev2).code == 0);
    CHECK(read_file(d / "e1/report.json") == read_file(d / "e2/report.json"));
    CHECK(read_file(d / "e1/predictions.jsonl") == read_file(d / "e2/predictions.jsonl"));

    CHECK(cli({"report", "--dump", d / "e1/predictions.jsonl", "--report", d / "e1/report.json"}).code == 0);
    std::string tampered = read_file(d / "e1/report.json");
    tampered.replace(tampered.find("\"mean\""), 6, "\"mea_\"");
    write_file_atomic(d / "bad.json", tampered);
    CHECK(cli({"report", "--dump", d / "e1/predictions.jsonl", "--report", d / "bad.json"}).code == 2);
  }

  TEST_CASE("exit codes") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"--help"}).code == 0);
    CHECK(cli({"train", "--no-such-flag"}).code == 2);
    CHECK(cli({"eval", "--checkpoint", "/nonexistent/m.ckpt", "--corpus", "/nonexistent/c.jsonl", "--split", "/nonexistent/s.json"}).code == 4);
    CHECK(cli({"train", "--regime", "bogus"}).code == 2);
  }
}
