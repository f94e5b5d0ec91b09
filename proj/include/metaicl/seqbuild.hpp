#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metaicl/corpus.hpp"
#include "metaicl/tokenizer.hpp"

namespace metaicl {

// direct: condition on x, supervise y. channel: every pair is flipped, so the
// model conditions on y and is supervised on x.
enum class Direction { direct, channel };

std::string_view to_string(Direction direction);
Direction parse_direction(std::string_view text);

struct BuildConfig {
  std::size_t k = 16;
  Direction direction = Direction::direct;
  std::string sep_io = "\n";
  std::string sep_ex = "\n\n\n";
  std::size_t max_seq_len = 512;
  std::size_t per_example_cap = 256;
  bool include_instruction = false;
  std::string instruction;  // used when include_instruction is set

  void validate() const;  // throws ConfigError

  // Separator presets: newlines for meta-trained models, spaces for the
  // raw-LM convention.
  static BuildConfig newline_preset();
  static BuildConfig space_preset();
};

struct SequenceMeta {
  std::string task;
  Direction direction = Direction::direct;
  std::size_t k_effective = 0;
};

// mask[t] marks that token t is supervised/scored given tokens [0, t).
struct EncodedSequence {
  std::vector<TokenId> tokens;
  std::vector<bool> loss_mask;
  SequenceMeta meta;

  std::size_t size() const { return tokens.size(); }
  std::size_t masked_count() const;
  // Index of the first masked token; size() when none.
  std::size_t first_masked() const;
  // Text of the masked tokens, in order.
  std::string masked_text() const;
};

// Keeps a window of at most `cap` input tokens (the leading ones by default);
// the output is never shortened. With `preserve_answer`, the window is
// centered on the first occurrence of the output inside the input.
Example truncate_example(const Example& ex, std::size_t cap, bool preserve_answer);

// k+1 shots; the last one is supervised.
EncodedSequence build_train_sequence(std::span<const Example> shots, const BuildConfig& cfg,
                                     std::string_view task_name = {});

// k shots, then the test input paired with `candidate`. Direct masks the
// candidate; channel masks the test input.
EncodedSequence build_score_sequence(std::span<const Example> shots, std::string_view test_input,
                                     std::string_view candidate, const BuildConfig& cfg,
                                     std::string_view task_name = {});

Example flip(const Example& ex);

}  // namespace metaicl
