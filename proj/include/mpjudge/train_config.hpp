#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mpjudge/model.hpp"
#include "mpjudge/objectives.hpp"

namespace CLI {
class App;
}

namespace mpjudge {

struct TrainConfig {
  // model: a preset plus optional overrides (0 keeps the preset value)
  std::string preset = "tiny";  // tiny | full
  std::size_t dim = 0;
  std::size_t depth = 0;
  std::size_t heads = 0;
  std::size_t image_size = 0;
  std::size_t patch_size = 0;
  std::size_t n_frames = 0;

  double lr = 1e-5;
  double weight_decay = 0.05;
  std::size_t batch_size = 16;  // the paper trains at 1024
  double lambda_reg = 1.0;
  double lambda_dpo = 0.5;
  double beta_dpo = 1.0;
  std::size_t warmup_epochs = 5;  // regression only; the snapshot after it is the reference model
  std::size_t max_epochs = 100;
  std::size_t patience = 10;  // epochs without a validation SRCC gain
  double mix_ratio = 0.5;     // preference batches per scalar batch after warmup
  double max_minutes = 0.0;   // wall-clock budget, 0 for none
  double tau = 0.5;
  std::uint64_t seed = 1;

  std::string data_root = ".";
  std::string pairs = "pairs.jsonl";
  std::string preferences = "preferences.jsonl";
  std::string out = "run";

  ModelConfig model_config() const;
  LossWeights loss_weights() const { return {lambda_reg, lambda_dpo}; }
  AdamConfig adam_config() const;
  // ContractError naming the first invalid field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Registers every TrainConfig field as a long option ("--batch-size", ...)
// on `app`; INI keys are the option names without the leading dashes.
void bind_train_options(CLI::App& app, TrainConfig& config);

// key = value lines, doubles printed with 17 significant digits.
std::string to_ini(const TrainConfig& config);
TrainConfig parse_train_ini(const std::string& text);

}  // namespace mpjudge
