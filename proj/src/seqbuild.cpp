#include "metaicl/seqbuild.hpp"

#include <algorithm>

#include "metaicl/error.hpp"

namespace metaicl {

namespace {

struct Segment {
  std::string text;
  bool supervised = false;
};

std::string prepared_input(const Example& ex, const BuildConfig& cfg) {
  if (cfg.include_instruction && !cfg.instruction.empty()) return cfg.instruction + cfg.sep_io + ex.input;
  return ex.input;
}

// Concatenates the segments and keeps at most max_seq_len trailing tokens.
EncodedSequence assemble(const std::vector<Segment>& segments, const BuildConfig& cfg, SequenceMeta meta) {
  EncodedSequence seq;
  seq.meta = std::move(meta);
  for (const auto& seg : segments) {
    auto ids = encode(seg.text);
    seq.tokens.insert(seq.tokens.end(), ids.begin(), ids.end());
    seq.loss_mask.insert(seq.loss_mask.end(), ids.size(), seg.supervised);
  }
  const std::size_t supervised_begin = seq.first_masked();
  if (supervised_begin == seq.size()) throw ConfigError("sequence has an empty supervised segment");
  std::size_t supervised_end = supervised_begin;
  while (supervised_end < seq.size() && seq.loss_mask[supervised_end]) ++supervised_end;
  const std::size_t supervised_len = supervised_end - supervised_begin;
  if (supervised_len > cfg.max_seq_len) {
    throw ConfigError("supervised segment of " + std::to_string(supervised_len) + " tokens exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  if (seq.size() > cfg.max_seq_len) {
    // Drop the earliest tokens; the supervised segment always survives.
    const std::size_t drop = seq.size() - cfg.max_seq_len;
    seq.tokens.erase(seq.tokens.begin(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(drop));
    seq.loss_mask.erase(seq.loss_mask.begin(), seq.loss_mask.begin() + static_cast<std::ptrdiff_t>(drop));
  }
  return seq;
}

void append_pair(std::vector<Segment>& segs, const std::string& first, const std::string& second,
                 const BuildConfig& cfg, bool first_supervised, bool second_supervised) {
  if (!segs.empty()) segs.push_back({cfg.sep_ex, false});
  segs.push_back({first, first_supervised});
  segs.push_back({cfg.sep_io, false});
  segs.push_back({second, second_supervised});
}

void append_context(std::vector<Segment>& segs, std::span<const Example> shots, const BuildConfig& cfg,
                    bool preserve_answers) {
  for (const auto& raw : shots) {
    const Example ex = truncate_example(raw, cfg.per_example_cap, preserve_answers && raw.answer_span_required);
    const std::string x = prepared_input(ex, cfg);
    if (cfg.direction == Direction::direct) {
      append_pair(segs, x, ex.output, cfg, false, false);
    } else {
      append_pair(segs, ex.output, x, cfg, false, false);
    }
  }
}

}  // namespace

std::string_view to_string(Direction direction) {
  return direction == Direction::direct ? "direct" : "channel";
}

Direction parse_direction(std::string_view text) {
  if (text == "direct") return Direction::direct;
  if (text == "channel") return Direction::channel;
  throw ConfigError("unknown direction '" + std::string(text) + "'");
}

void BuildConfig::validate() const {
  if (sep_io.empty()) throw ConfigError("build config: sep_io must be non-empty");
  if (sep_ex.empty()) throw ConfigError("build config: sep_ex must be non-empty");
  if (per_example_cap < 1) throw ConfigError("build config: per_example_cap must be positive");
  if (per_example_cap > max_seq_len) throw ConfigError("build config: per_example_cap exceeds max_seq_len");
}

BuildConfig BuildConfig::newline_preset() { return BuildConfig{}; }

BuildConfig BuildConfig::space_preset() {
  BuildConfig cfg;
  cfg.sep_io = " ";
  cfg.sep_ex = " ";
  return cfg;
}

std::size_t EncodedSequence::masked_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
}

std::size_t EncodedSequence::first_masked() const {
  auto it = std::find(loss_mask.begin(), loss_mask.end(), true);
  return static_cast<std::size_t>(it - loss_mask.begin());
}

std::string EncodedSequence::masked_text() const {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (loss_mask[i]) ids.push_back(tokens[i]);
  }
  return decode(ids);
}

Example truncate_example(const Example& ex, std::size_t cap, bool preserve_answer) {
  if (cap < 1) throw ConfigError("truncate_example: cap must be positive");
  std::size_t answer_pos = std::string::npos;
  if (preserve_answer) {
    answer_pos = ex.input.find(ex.output);
    if (answer_pos == std::string::npos) throw DataError("truncate_example: answer does not occur in the input");
    if (ex.output.size() > cap) throw DataError("truncate_example: answer span longer than the cap");
  }
  if (ex.input.size() <= cap) return ex;

  Example out = ex;
  std::size_t start = 0;
  if (preserve_answer) {
    const std::size_t span_mid = answer_pos + ex.output.size() / 2;
    start = span_mid > cap / 2 ? span_mid - cap / 2 : 0;
    start = std::min({start, ex.input.size() - cap, answer_pos});
    if (start + cap < answer_pos + ex.output.size()) start = answer_pos + ex.output.size() - cap;
  }
  out.input = ex.input.substr(start, cap);
  return out;
}

EncodedSequence build_train_sequence(std::span<const Example> shots, const BuildConfig& cfg,
                                     std::string_view task_name) {
  cfg.validate();
  if (shots.empty()) throw ConfigError("build_train_sequence: no examples");
  std::vector<Segment> segs;
  append_context(segs, shots.first(shots.size() - 1), cfg, true);
  const auto& raw = shots.back();
  const Example last = truncate_example(raw, cfg.per_example_cap, raw.answer_span_required);
  const std::string x = prepared_input(last, cfg);
  if (cfg.direction == Direction::direct) {
    append_pair(segs, x, last.output, cfg, false, true);
  } else {
    append_pair(segs, last.output, x, cfg, false, true);
  }
  return assemble(segs, cfg, {std::string(task_name), cfg.direction, shots.size() - 1});
}

EncodedSequence build_score_sequence(std::span<const Example> shots, std::string_view test_input,
                                     std::string_view candidate, const BuildConfig& cfg, std::string_view task_name) {
  cfg.validate();
  if (candidate.empty()) throw ConfigError("build_score_sequence: empty candidate");
  std::vector<Segment> segs;
  // Shots are capped but never answer-preserved at inference.
  append_context(segs, shots, cfg, false);
  const Example test =
      truncate_example(Example{std::string(test_input), std::string(candidate), false}, cfg.per_example_cap, false);
  const std::string x = prepared_input(test, cfg);
  if (cfg.direction == Direction::direct) {
    append_pair(segs, x, test.output, cfg, false, true);
  } else {
    if (x.empty()) throw ConfigError("build_score_sequence: channel scoring needs a non-empty test input");
    append_pair(segs, test.output, x, cfg, false, true);
  }
  return assemble(segs, cfg, {std::string(task_name), cfg.direction, shots.size()});
}

Example flip(const Example& ex) { return Example{ex.output, ex.input, false}; }

}  // namespace metaicl
