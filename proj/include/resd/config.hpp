#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "resd/toylm.hpp"
#include "resd/trainer.hpp"

namespace resd::config {

// Everything a run needs. Plain key = value text, '#' starts a comment.
struct RunConfig {
  lm::ModelConfig model;  // vocab_size always comes from the built-in vocabulary
  train::TrainConfig train;

  std::string train_tasks;
  std::string test_tasks;
  std::string out_dir;
  std::size_t checkpoint_every = 0;
  bool log_token_losses = false;

  // Template files for the external advisor; empty selects the built-in text.
  std::string reflect_template_path;
  std::string curate_template_path;

  void validate() const;
};

// Defaults for the tape task: reverse KL, upper clip 5, M_max 200,
// prioritized concise, K = 4, N = 1, B = 32, eta = 1e-4.
RunConfig defaults();

// Every accepted key, in echo order.
const std::vector<std::string>& keys();

// Throws kConfig naming the key for unknown keys and unparsable values.
void apply(RunConfig& config, const std::string& key, const std::string& value);

RunConfig parse(std::istream& in, RunConfig base = defaults());
RunConfig load(const std::string& path);

// Resolved config, one "key = value" line per key; parses back to the same
// config.
std::string render(const RunConfig& config);

}  // namespace resd::config
