#include "metaicl/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "metaicl/checkpoint.hpp"
#include "metaicl/corpus.hpp"
#include "metaicl/error.hpp"
#include "metaicl/eval.hpp"
#include "metaicl/io.hpp"
#include "metaicl/model.hpp"
#include "metaicl/rng.hpp"
#include "metaicl/synth.hpp"
#include "metaicl/trainer.hpp"

namespace metaicl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Relative output paths land under $METAICL_OUTPUT_ROOT when it is set.
fs::path output_dir(const std::string& out) {
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv("METAICL_OUTPUT_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return p;
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    json j = json::parse(read_file(path));
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object: " + path);
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

json section(const json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

std::string config_string(const json& sec, const char* key, std::string fallback) {
  return sec.contains(key) ? sec.at(key).get<std::string>() : fallback;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not a non-negative integer: '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

std::vector<std::string> parse_name_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Inputs {
  Corpus corpus;
  Split split;
  std::string corpus_hash;
};

Inputs load_inputs(const std::string& corpus_path, const std::string& split_path) {
  if (corpus_path.empty()) throw ConfigError("--corpus is required");
  if (split_path.empty()) throw ConfigError("--split is required");
  Inputs in{load_corpus(corpus_path), load_split(split_path), {}};
  in.split.validate(in.corpus);
  in.corpus_hash = corpus_hash(in.corpus);
  return in;
}

// --- synth -----------------------------------------------------------------------------

struct SynthOptions {
  std::string family = "benchmark";
  FamilySpec spec;
  std::size_t train_tasks = 0;
  bool unseen = false;
  BenchmarkSpec bench;
  std::string out = ".";
};

json to_json(const SynthOptions& o) {
  json j{{"family", o.family}};
  if (o.family == "benchmark") {
    const auto& b = o.bench;
    j["benchmark"] = {{"mapping_train", b.mapping_train},   {"mapping_target", b.mapping_target},
                      {"extract_train", b.extract_train},   {"extract_target", b.extract_target},
                      {"majority_target", b.majority_target}, {"num_options", b.num_options},
                      {"vocab_symbols", b.vocab_symbols},   {"extract_len", b.extract_len},
                      {"majority_len", b.majority_len},     {"train_examples", b.train_examples},
                      {"target_examples", b.target_examples}, {"seed", b.seed}};
  } else {
    const auto& s = o.spec;
    j["spec"] = {{"vocab_symbols", s.vocab_symbols}, {"num_options", s.num_options},
                 {"input_len", s.input_len},         {"tasks", s.tasks},
                 {"examples_per_task", s.examples_per_task}, {"seed", s.seed},
                 {"name_prefix", s.name_prefix},     {"first_index", s.first_index}};
    if (s.position) j["spec"]["position"] = *s.position;
    j["train_tasks"] = o.train_tasks;
    j["unseen"] = o.unseen;
  }
  return j;
}

void apply_synth_config(const json& sec, SynthOptions& o) {
  try {
    o.family = config_string(sec, "family", o.family);
    o.out = config_string(sec, "out", o.out);
    auto& s = o.spec;
    s.vocab_symbols = sec.value("symbols", s.vocab_symbols);
    s.num_options = sec.value("options", s.num_options);
    s.input_len = sec.value("input_len", s.input_len);
    s.tasks = sec.value("tasks", s.tasks);
    s.examples_per_task = sec.value("examples", s.examples_per_task);
    s.seed = sec.value("seed", s.seed);
    if (sec.contains("position")) s.position = sec.at("position").get<std::size_t>();
    s.name_prefix = sec.value("prefix", s.name_prefix);
    o.train_tasks = sec.value("train_tasks", o.train_tasks);
    o.unseen = sec.value("unseen", o.unseen);
    auto& b = o.bench;
    b.mapping_train = sec.value("mapping_train", b.mapping_train);
    b.mapping_target = sec.value("mapping_target", b.mapping_target);
    b.extract_train = sec.value("extract_train", b.extract_train);
    b.extract_target = sec.value("extract_target", b.extract_target);
    b.majority_target = sec.value("majority_target", b.majority_target);
    b.train_examples = sec.value("train_examples", b.train_examples);
    b.target_examples = sec.value("target_examples", b.target_examples);
    b.extract_len = sec.value("extract_len", b.extract_len);
    b.majority_len = sec.value("majority_len", b.majority_len);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
}

int cmd_synth(SynthOptions o, std::ostream& out) {
  GeneratedCorpus gen;
  if (o.family == "benchmark") {
    o.bench.num_options = o.spec.num_options;
    o.bench.vocab_symbols = o.spec.vocab_symbols;
    o.bench.seed = o.spec.seed;
    gen = generate_benchmark(o.bench);
  } else {
    o.spec.family = parse_family(o.family);
    o.spec.validate();
    if (o.train_tasks > o.spec.tasks) throw ConfigError("--train-tasks exceeds --tasks");
    auto tasks = generate_family(o.spec);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const bool train = i < o.train_tasks;
      (train ? gen.split.meta_train : gen.split.target).push_back(tasks[i].name);
      if (!train && o.unseen) gen.split.unseen_domain.push_back(tasks[i].name);
      gen.corpus.add(std::move(tasks[i]));
    }
    gen.split.validate(gen.corpus);
  }
  const fs::path dir = output_dir(o.out);
  save_corpus(gen.corpus, dir / "corpus.jsonl");
  save_split(gen.split, dir / "split.json");
  const json manifest{{"command", "synth"}, {"config", to_json(o)}, {"corpus_hash", corpus_hash(gen.corpus)}};
  write_file_atomic(dir / "synth_manifest.json", manifest.dump(2) + "\n");

  std::size_t examples = 0;
  for (const auto& t : gen.corpus) examples += t.examples.size();
  out << fmt::format("wrote {} tasks ({} meta-train, {} target, {} unseen-domain), {} examples to {}\n",
                     gen.corpus.size(), gen.split.meta_train.size(), gen.split.target.size(),
                     gen.split.unseen_domain.size(), examples, dir.string());
  return 0;
}

// --- train -----------------------------------------------------------------------------

struct TrainOptions {
  TrainConfig train;
  std::string model = "tiny";
  std::uint64_t init_seed = 1;
  std::string init;  // checkpoint to start from; random init when empty
  std::string corpus, split, out = ".";
  std::string task;               // finetune target
  std::uint64_t shots_seed = 100;  // finetune shot set
  std::size_t log_every = 100;
};

json to_json(const TrainOptions& o) {
  return json{{"train", to_json(o.train)}, {"model", o.model},  {"init_seed", o.init_seed},
              {"init", o.init},            {"corpus", o.corpus}, {"split", o.split},
              {"task", o.task},    {"shots_seed", o.shots_seed}};
}

struct TrainOutcome {
  TrainResult result;
  CheckpointInfo info;
};

TrainOutcome run_training(const TrainOptions& o, const Inputs& in, std::ostream& out, std::ostream& err) {
  o.train.validate();
  const ModelConfig mc = ModelConfig::preset(o.model);
  ModelParams<float> params;
  json init_prov;
  if (o.init.empty()) {
    params = ModelParams<float>::initialized(mc, o.init_seed);
    init_prov = {{"source", "random"}, {"seed", o.init_seed}, {"model", o.model}};
  } else {
    Checkpoint ck = load_checkpoint(o.init);
    params = std::move(ck.params);
    init_prov = {{"source", "checkpoint"}, {"path", o.init}, {"provenance", ck.info.provenance}};
  }
  if (o.train.regime == Regime::multitask_zero && o.train.k != 0) {
    err << fmt::format("warning: regime multitask_zero forces k=0 (got k={})\n", o.train.k);
  }

  const std::size_t every = std::max<std::size_t>(1, o.log_every);
  std::string log;
  double window = 0.0;
  std::size_t window_steps = 0;
  auto on_step = [&](const TrainLogEntry& e) {
    log += metaicl::to_json(e).dump() + "\n";
    window += e.loss;
    ++window_steps;
    if (e.step % every == 0 || e.step == o.train.total_steps) {
      // Mean loss since the previous line.
      out << fmt::format("step {:>6}  loss {:.4f}  lr {:.2e}\n", e.step, window / static_cast<double>(window_steps),
                         e.lr)
          << std::flush;
      window = 0.0;
      window_steps = 0;
    }
  };

  TrainResult result;
  switch (o.train.regime) {
    case Regime::metaicl:
      result = meta_train(in.corpus, in.split, std::move(params), o.train, on_step);
      break;
    case Regime::multitask_zero:
      result = multitask_zero_train(in.corpus, in.split, std::move(params), o.train, on_step);
      break;
    case Regime::finetune: {
      if (o.task.empty()) throw ConfigError("finetune needs --task");
      const Task& task = in.corpus.at(o.task);
      const FewShotSet shots = sample_few_shot(task, o.train.k, o.shots_seed);
      TrainConfig tc = o.train;
      result = finetune(task, shots, std::move(params), tc, on_step);
      break;
    }
  }

  CheckpointInfo info;
  info.step = o.train.total_steps;
  info.rng_state = result.rng_state;
  info.provenance = {{"regime", to_string(o.train.regime)},
                     {"direction", to_string(o.train.direction)},
                     {"k", o.train.effective_k()},
                     {"init", init_prov},
                     {"config", to_json(o)},
                     {"corpus_hash", in.corpus_hash}};
  const fs::path dir = output_dir(o.out);
  save_checkpoint(dir / "model.ckpt", result.params, info);
  write_file_atomic(dir / "train_log.jsonl", log);
  return TrainOutcome{std::move(result), std::move(info)};
}

// --- eval ------------------------------------------------------------------------------

struct EvalOptions {
  ProtocolConfig protocol;
  std::string checkpoint, corpus, split, out = ".";
  std::string separators = "newline";
  std::size_t adapt_steps = 0;  // >0: fine-tune on each shot set before scoring
  double adapt_lr = 3e-4;
  std::size_t adapt_batch = 8;
};

json to_json(const EvalOptions& o) {
  return json{{"protocol", to_json(o.protocol)}, {"checkpoint", o.checkpoint}, {"corpus", o.corpus},
              {"split", o.split},                {"separators", o.separators},
              {"adapt_steps", o.adapt_steps},    {"adapt_lr", o.adapt_lr},     {"adapt_batch", o.adapt_batch}};
}

void apply_separators(const std::string& preset, BuildConfig& b) {
  BuildConfig p;
  if (preset == "newline") {
    p = BuildConfig::newline_preset();
  } else if (preset == "space") {
    p = BuildConfig::space_preset();
  } else {
    throw ConfigError("unknown separator preset '" + preset + "' (newline|space)");
  }
  b.sep_io = p.sep_io;
  b.sep_ex = p.sep_ex;
}

void print_report(const EvalReport& report, std::ostream& out) {
  out << fmt::format("{:<20} {:<9} {:>8} {:>8} {:>8}\n", "task", "metric", "mean", "min", "acc");
  for (const auto& t : report.tasks) {
    out << fmt::format("{:<20} {:<9} {:>8.4f} {:>8.4f} {:>8.4f}{}\n", t.task, t.metric, t.mean, t.min,
                       t.accuracy_mean, t.unseen_domain ? "  (unseen)" : "");
  }
  out << fmt::format("{:<20} {:<9} {:>8.4f} {:>8.4f} {:>8.4f}\n", "MACRO", "", report.all.macro_mean,
                     report.all.macro_min, report.all.accuracy_mean);
  if (report.unseen) {
    out << fmt::format("{:<20} {:<9} {:>8.4f} {:>8.4f} {:>8.4f}\n", "MACRO (unseen)", "", report.unseen->macro_mean,
                       report.unseen->macro_min, report.unseen->accuracy_mean);
  }
}

ProtocolResult run_evaluation(const EvalOptions& o, const Inputs& in, const ModelParams<float>& params,
                              const CheckpointInfo& ck_info, const std::string& checkpoint_id) {
  AdaptFn adapt;
  if (o.adapt_steps > 0) {
    adapt = [&](const Task& task, const FewShotSet& shots) {
      TrainConfig tc;
      tc.regime = Regime::finetune;
      tc.direction = o.protocol.score.method == ScoreMethod::channel ? Direction::channel : Direction::direct;
      tc.total_steps = o.adapt_steps;
      tc.learning_rate = o.adapt_lr;
      tc.batch_size = o.adapt_batch;
      tc.warmup_steps = 0;
      tc.seed = shots.seed;
      tc.sep_io = o.protocol.score.build.sep_io;
      tc.sep_ex = o.protocol.score.build.sep_ex;
      return finetune(task, shots, params, tc).params;
    };
  }
  json meta{{"command", "eval"},
            {"config", to_json(o)},
            {"checkpoint_id", checkpoint_id},
            {"checkpoint_provenance", ck_info.provenance},
            {"corpus_hash", in.corpus_hash},
            {"method", to_string(o.protocol.score.method)},
            {"k", o.protocol.score.k},
            {"seeds", o.protocol.seeds},
            {"test_cap", o.protocol.test_cap}};
  return run_protocol(params, in.corpus, in.split, o.protocol, adapt, std::move(meta));
}

void write_eval_outputs(const ProtocolResult& r, const fs::path& dir) {
  write_file_atomic(dir / "report.json", serialize_report(r.report));
  write_file_atomic(dir / "report.csv", report_csv(r.report));
  write_file_atomic(dir / "predictions.jsonl", serialize_dump(r));
}

std::string checkpoint_id(const std::string& path) {
  return hex64(fnv1a64(read_file(path)));
}

// --- report ----------------------------------------------------------------------------

int cmd_report(const std::string& dump_path, const std::string& report_path, std::ostream& out) {
  const Dump dump = parse_dump(read_file(dump_path));
  const EvalReport recomputed = recompute_from_dump(dump);
  print_report(recomputed, out);
  if (report_path.empty()) return 0;
  const json stored = json::parse(read_file(report_path));
  const json fresh = metaicl::to_json(recomputed);
  // Exact comparison of every number; metadata is compared too.
  if (stored != fresh) throw DataError("report " + report_path + " does not match the prediction dump");
  for (const auto& t : recomputed.tasks) {
    if (t.min > t.mean) throw DataError("task " + t.task + ": min exceeds mean");
  }
  out << "report matches prediction dump\n";
  return 0;
}

// --- sweep -----------------------------------------------------------------------------

enum class Axis { k, num_tasks, diversity };

Axis parse_axis(const std::string& s) {
  if (s == "k") return Axis::k;
  if (s == "num_tasks") return Axis::num_tasks;
  if (s == "diversity") return Axis::diversity;
  throw ConfigError("unknown sweep axis '" + s + "' (k|num_tasks|diversity)");
}

struct SweepPoint {
  std::uint64_t value = 0;
  std::uint64_t subset_seed = 0;
  fs::path dir;
  Split split;
  TrainOptions train;
  EvalOptions eval;
};

// Meta-training tasks drawn round-robin from the first `families` families
// (in first-seen order), `total` tasks overall.
std::vector<std::string> diversity_subset(const Split& split, std::size_t families, std::size_t total) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> by_family;
  for (const auto& name : split.meta_train) {
    const std::string f = family_of(name);
    if (!by_family.count(f)) order.push_back(f);
    by_family[f].push_back(name);
  }
  if (families == 0 || families > order.size()) {
    throw ConfigError(fmt::format("diversity point {} invalid: split has {} meta-training families", families,
                                  order.size()));
  }
  std::vector<std::string> out;
  for (std::size_t round = 0; out.size() < total; ++round) {
    bool any = false;
    for (std::size_t f = 0; f < families && out.size() < total; ++f) {
      const auto& names = by_family[order[f]];
      if (round < names.size()) {
        out.push_back(names[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}


struct SweepOptions {
  std::string axis = "k";
  std::string values;  // default grid depends on the axis
  std::string subset_seeds = "1,2,3,4,5,6,7,8,9,10";
  std::size_t tasks_per_point = 16;  // diversity axis
  std::size_t parallel = 1;
};

struct SweepRow {
  std::uint64_t value = 0;
  std::uint64_t subset_seed = 0;
  std::size_t meta_train_tasks = 0;
  SubsetSummary summary;
};

int cmd_sweep(const SweepOptions& so, const TrainOptions& base_train, const EvalOptions& base_eval,
              std::ostream& out, std::ostream& err) {
  const Axis axis = parse_axis(so.axis);
  std::vector<std::uint64_t> grid;
  if (!so.values.empty()) {
    grid = parse_u64_list(so.values);
  } else if (axis == Axis::k) {
    grid = {0, 4, 8, 16, 32};
  } else {
    throw ConfigError("--values is required for the " + so.axis + " axis");
  }
  const Inputs in = load_inputs(base_train.corpus, base_train.split);
  const fs::path root = output_dir(base_train.out);

  std::vector<SweepPoint> points;
  for (auto v : grid) {
    std::vector<std::uint64_t> subset_seeds{0};
    if (axis == Axis::num_tasks) subset_seeds = parse_u64_list(so.subset_seeds);
    for (auto ss : subset_seeds) {
      SweepPoint p;
      p.value = v;
      p.subset_seed = ss;
      p.split = in.split;
      p.train = base_train;
      p.eval = base_eval;
      std::string name = fmt::format("{}_{}", so.axis, v);
      switch (axis) {
        case Axis::k:
          p.train.train.k = v;
          p.train.train.regime = v == 0 ? Regime::multitask_zero : Regime::metaicl;
          p.eval.protocol.score.k = v;
          break;
        case Axis::num_tasks: {
          if (v == 0 || v > in.split.meta_train.size()) {
            throw ConfigError(fmt::format("num_tasks point {} invalid: split has {} meta-training tasks", v,
                                          in.split.meta_train.size()));
          }
          Rng rng(mix_seed({ss, v, 0x5a3bULL}));
          std::vector<std::string> picked;
          for (auto i : sample_without_replacement(rng, in.split.meta_train.size(), v)) {
            picked.push_back(in.split.meta_train[i]);
          }
          p.split.meta_train = std::move(picked);
          p.train.train.seed = mix_seed({base_train.train.seed, ss});
          name += fmt::format("_s{}", ss);
          break;
        }
        case Axis::diversity:
          p.split.meta_train = diversity_subset(in.split, v, so.tasks_per_point);
          break;
      }
      p.dir = root / name;
      p.train.out = p.dir.string();
      p.eval.out = p.dir.string();
      p.train.train.validate();
      p.eval.protocol.validate();
      points.push_back(std::move(p));
    }
  }

  std::vector<SweepRow> rows(points.size());
  std::vector<std::string> logs(points.size());
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= points.size() || failure) return;
        i = next++;
      }
      try {
        const SweepPoint& p = points[i];
        Inputs local{in.corpus, p.split, in.corpus_hash};
        std::ostringstream quiet, warn;
        TrainOutcome trained = run_training(p.train, local, quiet, warn);
        const std::string ck_path = (p.dir / "model.ckpt").string();
        ProtocolResult r = run_evaluation(p.eval, local, trained.result.params, trained.info, checkpoint_id(ck_path));
        write_eval_outputs(r, p.dir);
        rows[i] = SweepRow{p.value, p.subset_seed, p.split.meta_train.size(), r.report.all};
        logs[i] = warn.str() + fmt::format("{}={} seed={} tasks={}: macro {:.4f} (min {:.4f}) acc {:.4f}\n", so.axis,
                                           p.value, p.subset_seed, p.split.meta_train.size(),
                                           r.report.all.macro_mean, r.report.all.macro_min,
                                           r.report.all.accuracy_mean);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
      std::lock_guard lock(mu);
      out << logs[i];
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(so.parallel, points.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  const json header{{"command", "sweep"},
                    {"axis", so.axis},
                    {"grid", grid},
                    {"train", to_json(base_train)},
                    {"eval", to_json(base_eval)},
                    {"corpus_hash", in.corpus_hash}};
  std::string csv = "# " + header.dump() + "\n";
  csv += "axis,value,subset_seed,meta_train_tasks,macro_mean,macro_min,accuracy_mean\n";
  for (const auto& r : rows) {
    csv += fmt::format("{},{},{},{},{:.17g},{:.17g},{:.17g}\n", so.axis, r.value, r.subset_seed, r.meta_train_tasks,
                       r.summary.macro_mean, r.summary.macro_min, r.summary.accuracy_mean);
  }
  write_file_atomic(root / fmt::format("sweep_{}.csv", so.axis), csv);

  if (axis == Axis::num_tasks) {
    std::string agg = "# " + header.dump() + "\n";
    agg += "value,seeds,mean,std,min,max\n";
    for (auto v : grid) {
      std::vector<double> xs;
      for (const auto& r : rows) {
        if (r.value == v) xs.push_back(r.summary.macro_mean);
      }
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
      agg += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g}\n", v, xs.size(), mean, sd,
                         *std::min_element(xs.begin(), xs.end()), *std::max_element(xs.begin(), xs.end()));
      out << fmt::format("num_tasks={}: mean {:.4f} sd {:.4f} over {} seeds\n", v, mean, sd, xs.size());
    }
    write_file_atomic(root / "sweep_num_tasks_summary.csv", agg);
  }
  (void)err;
  return 0;
}

// Flag values are staged and copied onto the config only when the flag was
// given, so the order is: defaults, then config file, then flags.
class Overrides {
 public:
  template <typename T>
  CLI::Option* option(CLI::App* app, const std::string& name, T& target, const std::string& desc) {
    auto staged = std::make_shared<T>(target);
    CLI::Option* opt = app->add_option(name, *staged, desc);
    appliers_.push_back([opt, staged, &target] {
      if (opt->count() > 0) target = *staged;
    });
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, bool& target, const std::string& desc) {
    auto staged = std::make_shared<bool>(false);
    CLI::Option* opt = app->add_flag(name, *staged, desc);
    appliers_.push_back([opt, staged, &target] {
      if (opt->count() > 0) target = *staged;
    });
    return opt;
  }

  template <typename F>
  CLI::Option* custom(CLI::App* app, const std::string& name, F apply, const std::string& desc) {
    auto staged = std::make_shared<std::string>();
    CLI::Option* opt = app->add_option(name, *staged, desc);
    appliers_.push_back([opt, staged, apply] {
      if (opt->count() > 0) apply(*staged);
    });
    return opt;
  }

  void apply() {
    for (auto& f : appliers_) f();
  }

 private:
  std::vector<std::function<void()>> appliers_;
};

void apply_train_config(const json& sec, TrainOptions& o) {
  o.train = train_config_from_json(sec, o.train);
  try {
    o.model = config_string(sec, "model", o.model);
    o.init_seed = sec.value("init_seed", o.init_seed);
    o.init = config_string(sec, "init", o.init);
    o.corpus = config_string(sec, "corpus", o.corpus);
    o.split = config_string(sec, "split", o.split);
    o.out = config_string(sec, "out", o.out);
    o.task = config_string(sec, "task", o.task);
    o.shots_seed = sec.value("shots_seed", o.shots_seed);
    o.log_every = sec.value("log_every", o.log_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

void apply_eval_config(const json& sec, EvalOptions& o) {
  o.protocol = protocol_config_from_json(sec, o.protocol);
  try {
    o.checkpoint = config_string(sec, "checkpoint", o.checkpoint);
    o.corpus = config_string(sec, "corpus", o.corpus);
    o.split = config_string(sec, "split", o.split);
    o.out = config_string(sec, "out", o.out);
    o.adapt_steps = sec.value("adapt_steps", o.adapt_steps);
    o.adapt_lr = sec.value("adapt_lr", o.adapt_lr);
    o.adapt_batch = sec.value("adapt_batch", o.adapt_batch);
    if (sec.contains("separators")) {
      o.separators = sec.at("separators").get<std::string>();
      apply_separators(o.separators, o.protocol.score.build);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval config: ") + e.what());
  }
}

void apply_sweep_config(const json& sec, SweepOptions& o) {
  try {
    o.axis = config_string(sec, "axis", o.axis);
    o.values = config_string(sec, "values", o.values);
    o.subset_seeds = config_string(sec, "subset_seeds", o.subset_seeds);
    o.tasks_per_point = sec.value("tasks_per_point", o.tasks_per_point);
    o.parallel = sec.value("parallel", o.parallel);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep config: ") + e.what());
  }
}

void add_train_flags(CLI::App* app, Overrides& ov, TrainOptions& o) {
  ov.custom(app, "--regime", [&o](const std::string& s) { o.train.regime = parse_regime(s); },
            "metaicl | multitask_zero | finetune");
  ov.custom(app, "--direction", [&o](const std::string& s) { o.train.direction = parse_direction(s); },
            "direct | channel");
  ov.option(app, "--k", o.train.k, "examples per episode before the supervised one");
  ov.option(app, "--steps", o.train.total_steps, "optimizer steps");
  ov.option(app, "--lr", o.train.learning_rate, "peak learning rate");
  ov.option(app, "--batch-size", o.train.batch_size, "episodes per step");
  ov.option(app, "--warmup", o.train.warmup_steps, "linear warmup steps");
  ov.option(app, "--train-seed", o.train.seed, "sampling seed");
  ov.option(app, "--max-seq-len", o.train.max_seq_len, "sequence length (metaicl, finetune)");
  ov.option(app, "--short-max-seq-len", o.train.short_max_seq_len, "sequence length (multitask_zero)");
  ov.option(app, "--per-example-cap", o.train.per_example_cap, "input tokens kept per example");
  ov.flag(app, "--replace-labels", o.train.replace_labels_each_iteration,
          "fresh random label words every episode");
  ov.custom(app, "--preset",
            [&o](const std::string& s) {
              if (s == "reference") {
                const TrainConfig p = TrainConfig::reference_defaults();
                o.train.learning_rate = p.learning_rate;
                o.train.total_steps = p.total_steps;
                o.train.max_seq_len = p.max_seq_len;
              } else if (s != "desk") {
                throw ConfigError("unknown preset '" + s + "' (desk|reference)");
              }
            },
            "desk | reference hyperparameters");
  ov.option(app, "--model", o.model, "tiny | mini");
  ov.option(app, "--init-seed", o.init_seed, "seed of the random initialization");
  ov.option(app, "--init", o.init, "start from this checkpoint");
  ov.option(app, "--corpus", o.corpus, "corpus JSONL file or directory");
  ov.option(app, "--split", o.split, "split JSON");
  ov.option(app, "--out", o.out, "output directory");
  ov.option(app, "--task", o.task, "target task (finetune)");
  ov.option(app, "--shots-seed", o.shots_seed, "few-shot sampling seed (finetune)");
  ov.option(app, "--log-every", o.log_every, "print every N steps");
}

void add_eval_flags(CLI::App* app, Overrides& ov, EvalOptions& o, bool with_paths) {
  ov.custom(app, "--method", [&o](const std::string& s) { o.protocol.score.method = parse_score_method(s); },
            "direct | pmi | channel");
  ov.custom(app, "--seeds", [&o](const std::string& s) { o.protocol.seeds = parse_u64_list(s); },
            "comma-separated few-shot seeds");
  ov.option(app, "--test-cap", o.protocol.test_cap, "test examples per task and seed");
  ov.flag(app, "--eval-replace-labels", o.protocol.replace_labels, "replace labels with random words per seed");
  ov.option(app, "--label-seed", o.protocol.label_seed, "label replacement seed");
  ov.custom(app, "--tasks", [&o](const std::string& s) { o.protocol.tasks = parse_name_list(s); },
            "comma-separated subset of target tasks");
  ov.custom(app, "--separators",
            [&o](const std::string& s) {
              o.separators = s;
              apply_separators(s, o.protocol.score.build);
            },
            "newline | space");
  ov.option(app, "--pmi-placeholder", o.protocol.score.pmi_placeholder, "content-free calibration input");
  ov.flag(app, "--pmi-empty-input", o.protocol.score.pmi_empty_input, "calibrate with an empty input");
  ov.option(app, "--adapt-steps", o.adapt_steps, "fine-tune on each shot set for N steps before scoring");
  ov.option(app, "--adapt-lr", o.adapt_lr, "fine-tuning learning rate");
  ov.option(app, "--adapt-batch", o.adapt_batch, "fine-tuning batch size");
  if (with_paths) {
    ov.custom(app, "--k", [&o](const std::string& s) { o.protocol.score.k = parse_u64_list(s).front(); },
              "in-context examples");
    ov.option(app, "--checkpoint", o.checkpoint, "model checkpoint");
    ov.option(app, "--corpus", o.corpus, "corpus JSONL file or directory");
    ov.option(app, "--split", o.split, "split JSON");
    ov.option(app, "--out", o.out, "output directory");
  } else {
    ov.custom(app, "--eval-k", [&o](const std::string& s) { o.protocol.score.k = parse_u64_list(s).front(); },
              "in-context examples at evaluation");
  }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-training for in-context learning on synthetic task families", "metaicl"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file (sections: synth, train, eval, sweep)");
  app.add_option("--seed", seed, "overrides every seed (sampling, init, data, label replacement)");

  Overrides ov;
  SynthOptions synth;
  TrainOptions train;
  EvalOptions eval;
  SweepOptions sweep;
  std::string dump_path, report_path;

  CLI::App* s = app.add_subcommand("synth", "generate a synthetic corpus and split");
  ov.option(s, "--family", synth.family, "benchmark | mapping | extract | majority");
  ov.option(s, "--tasks", synth.spec.tasks, "tasks in the family");
  ov.option(s, "--train-tasks", synth.train_tasks, "first N tasks go to meta-training, the rest are targets");
  ov.option(s, "--options", synth.spec.num_options, "label words per task");
  ov.option(s, "--symbols", synth.spec.vocab_symbols, "symbol pool size (mapping)");
  ov.option(s, "--input-len", synth.spec.input_len, "input length in words");
  ov.custom(s, "--position", [&synth](const std::string& v) { synth.spec.position = parse_u64_list(v).front(); },
            "fixed extraction slot (extract)");
  ov.option(s, "--examples", synth.spec.examples_per_task, "examples per task");
  ov.option(s, "--prefix", synth.spec.name_prefix, "task name prefix");
  ov.option(s, "--data-seed", synth.spec.seed, "generator seed");
  ov.flag(s, "--unseen", synth.unseen, "tag target tasks as unseen-domain");
  ov.option(s, "--mapping-train", synth.bench.mapping_train, "benchmark: meta-training mapping tasks");
  ov.option(s, "--mapping-target", synth.bench.mapping_target, "benchmark: held-out mapping tasks");
  ov.option(s, "--extract-train", synth.bench.extract_train, "benchmark: meta-training extract tasks");
  ov.option(s, "--extract-target", synth.bench.extract_target, "benchmark: held-out extract tasks");
  ov.option(s, "--majority-target", synth.bench.majority_target, "benchmark: unseen-family majority tasks");
  ov.option(s, "--train-examples", synth.bench.train_examples, "benchmark: examples per meta-training task");
  ov.option(s, "--target-examples", synth.bench.target_examples, "benchmark: examples per target task");
  ov.option(s, "--out", synth.out, "output directory");

  CLI::App* t = app.add_subcommand("train", "meta-train, multi-task train, or fine-tune a model");
  add_train_flags(t, ov, train);

  CLI::App* e = app.add_subcommand("eval", "run the few-shot evaluation protocol on a checkpoint");
  add_eval_flags(e, ov, eval, true);

  CLI::App* w = app.add_subcommand("sweep", "train and evaluate along one ablation axis");
  ov.option(w, "--axis", sweep.axis, "k | num_tasks | diversity");
  ov.option(w, "--values", sweep.values, "comma-separated grid");
  ov.option(w, "--subset-seeds", sweep.subset_seeds, "task-subsampling seeds (num_tasks)");
  ov.option(w, "--tasks-per-point", sweep.tasks_per_point, "meta-training tasks per point (diversity)");
  ov.option(w, "--parallel", sweep.parallel, "points run concurrently");
  add_train_flags(w, ov, train);
  add_eval_flags(w, ov, eval, false);

  CLI::App* r = app.add_subcommand("report", "recompute a report from its prediction dump");
  r->add_option("--dump", dump_path, "predictions.jsonl")->required();
  r->add_option("--report", report_path, "report.json to verify against the dump");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? 0 : 2;
  }

  const json cfg = load_config_file(config_path);
  apply_synth_config(section(cfg, "synth"), synth);
  apply_train_config(section(cfg, "train"), train);
  apply_eval_config(section(cfg, "eval"), eval);
  apply_sweep_config(section(cfg, "sweep"), sweep);
  if (!seed && cfg.contains("seed")) seed = cfg.at("seed").get<std::uint64_t>();
  ov.apply();
  if (seed) {
    synth.spec.seed = *seed;
    train.train.seed = *seed;
    train.init_seed = mix_seed({*seed, 0x1417ULL});
    train.shots_seed = *seed;
    eval.protocol.label_seed = *seed;
  }

  if (s->parsed()) return cmd_synth(synth, out);
  if (t->parsed()) {
    const Inputs in = load_inputs(train.corpus, train.split);
    run_training(train, in, out, err);
    out << "wrote " << (output_dir(train.out) / "model.ckpt").string() << "\n";
    return 0;
  }
  if (e->parsed()) {
    if (eval.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    eval.protocol.validate();
    const Inputs in = load_inputs(eval.corpus, eval.split);
    const Checkpoint ck = load_checkpoint(eval.checkpoint);
    const ProtocolResult res = run_evaluation(eval, in, ck.params, ck.info, checkpoint_id(eval.checkpoint));
    write_eval_outputs(res, output_dir(eval.out));
    print_report(res.report, out);
    return 0;
  }
  if (w->parsed()) return cmd_sweep(sweep, train, eval, out, err);
  if (r->parsed()) return cmd_report(dump_path, report_path, out);
  return 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace metaicl
