#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpjudge/annotation.hpp"
#include "mpjudge/audio.hpp"
#include "mpjudge/metrics.hpp"
#include "mpjudge/model.hpp"
#include "mpjudge/train_config.hpp"

namespace mpjudge {

enum class Split { kTrain, kVal, kTest };

// 80/10/10 by FNV-1a hash of the id.
Split split_of(const std::string& id);
std::uint64_t fnv1a64(const std::string& s);

// Decoded model inputs keyed by media id.
struct Corpus {
  ModelConfig config;
  std::vector<PairRecord> pairs;              // scored pairs only
  std::vector<PairRecord> unscored;           // media decoded, no target yet
  std::vector<PreferenceRecord> preferences;  // consensus-resolved only
  std::map<std::string, std::vector<float>> paintings;  // [3 x S x S]
  std::map<std::string, std::vector<float>> music;      // [frames x mels]

  std::vector<std::size_t> pair_indices(Split split) const;
  std::vector<std::size_t> preference_indices(Split split) const;
};

// Spectrogram rows for the model: longer clips are cropped, shorter ones
// padded with the silence value.
std::vector<float> model_mels(const audio::AudioClip& clip, const ModelConfig& config);

// Loads manifests and media. Every referenced file is checked first; a
// ContractError lists up to 10 missing paths. Preference tasks are resolved
// to media through the pair manifest.
Corpus load_corpus(const std::filesystem::path& root, const std::string& pairs_file,
                   const std::string& preferences_file, const ModelConfig& config);

// (painting id, music id) of a preference candidate.
std::pair<std::string, std::string> preference_pair(const PreferenceRecord& task, const std::string& candidate);

struct PreferenceAccuracy {
  double accuracy = 0.0;
  std::size_t tasks = 0;
};

// Eval-mode scores, batched.
std::vector<double> predict(MPJudgeModel<float>& model, const Corpus& corpus,
                            const std::vector<std::pair<std::string, std::string>>& items);
metrics::EvalResult evaluate_pairs(MPJudgeModel<float>& model, const Corpus& corpus,
                                   const std::vector<std::size_t>& indices, double tau,
                                   std::vector<double>* predictions = nullptr);
// Fraction of tasks where the consensus winner scores strictly higher.
PreferenceAccuracy preference_accuracy(MPJudgeModel<float>& model, const Corpus& corpus,
                                       const std::vector<std::size_t>& indices);

using LogSink = std::function<void(const nlohmann::json&)>;

struct TrainResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_srcc = 0.0;
  bool stopped_early = false;
  bool out_of_time = false;
  metrics::EvalResult test;        // final model on the test split
  metrics::EvalResult best_test;   // best checkpoint on the test split
  std::optional<PreferenceAccuracy> reference_preference;  // reference model, held-out tasks
  std::optional<PreferenceAccuracy> final_preference;      // final model, held-out tasks
  double seconds = 0.0;
};

// Runs the two-phase schedule and writes into config.out:
//   config.ini, last.mpj (every epoch, for resuming),
//   reference.mpj (after warmup), best.mpj, final.mpj.
// Step and epoch events go to `log`; the CLI appends them to log.jsonl.
// With `resume`, continues from out/last.mpj when it exists.
TrainResult train(const TrainConfig& config, const Corpus& corpus, const LogSink& log, bool resume = false);

// Loads a checkpoint's model (configuration from its meta entry).
MPJudgeModel<float> load_model(const std::filesystem::path& path);

// Held-out preference tasks: every task outside the training split.
std::vector<std::size_t> held_out_preferences(const Corpus& corpus);

}  // namespace mpjudge
