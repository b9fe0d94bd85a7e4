#include "mpjudge/train_config.hpp"

#include <cstdio>
#include <sstream>

#include "CLI11.hpp"
#include "mpjudge/errors.hpp"

namespace mpjudge {

ModelConfig TrainConfig::model_config() const {
  ModelConfig c;
  if (preset == "tiny")
    c = ModelConfig::tiny();
  else if (preset == "full")
    c = ModelConfig::full();
  else
    throw ContractError("unknown model preset '" + preset + "' (expected tiny or full)");
  if (dim) c.painting.dim = c.music.embed_dim = dim;
  if (depth) c.painting.depth = depth;
  if (heads) c.painting.heads = heads;
  if (image_size) c.painting.image_size = image_size;
  if (patch_size) c.painting.patch_size = patch_size;
  if (n_frames) c.n_frames = n_frames;
  return c;
}

AdamConfig TrainConfig::adam_config() const {
  AdamConfig a;
  a.lr = lr;
  a.weight_decay = weight_decay;
  return a;
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) throw ContractError(std::string(name) + " must be positive");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0)) throw ContractError(std::string(name) + " must be non-negative");
  };
  positive(lr, "lr");
  non_negative(weight_decay, "weight_decay");
  positive(static_cast<double>(batch_size), "batch_size");
  non_negative(lambda_reg, "lambda_reg");
  non_negative(lambda_dpo, "lambda_dpo");
  positive(beta_dpo, "beta_dpo");
  positive(static_cast<double>(max_epochs), "max_epochs");
  positive(static_cast<double>(patience), "patience");
  non_negative(mix_ratio, "mix_ratio");
  non_negative(max_minutes, "max_minutes");
  if (!(tau > 0 && tau < 1)) throw ContractError("tau must lie in (0, 1)");
  if (warmup_epochs > max_epochs) throw ContractError("warmup_epochs exceeds max_epochs");
  model_config().validate();
}

void bind_train_options(CLI::App& app, TrainConfig& c) {
  app.add_option("--preset", c.preset, "Model preset: tiny or full")->capture_default_str();
  app.add_option("--dim", c.dim, "Embedding width override");
  app.add_option("--depth", c.depth, "Transformer depth override");
  app.add_option("--heads", c.heads, "Attention heads override");
  app.add_option("--image-size", c.image_size, "Painting side override");
  app.add_option("--patch-size", c.patch_size, "Patch side override");
  app.add_option("--n-frames", c.n_frames, "Spectrogram frames override");
  app.add_option("--lr", c.lr, "Learning rate")->capture_default_str();
  app.add_option("--weight-decay", c.weight_decay, "Decoupled weight decay")->capture_default_str();
  app.add_option("--batch-size", c.batch_size, "Batch size")->capture_default_str();
  app.add_option("--lambda-reg", c.lambda_reg, "Regression loss weight")->capture_default_str();
  app.add_option("--lambda-dpo", c.lambda_dpo, "Preference loss weight")->capture_default_str();
  app.add_option("--beta-dpo", c.beta_dpo, "Preference loss temperature")->capture_default_str();
  app.add_option("--warmup-epochs", c.warmup_epochs, "Regression-only epochs")->capture_default_str();
  app.add_option("--max-epochs", c.max_epochs, "Epoch limit")->capture_default_str();
  app.add_option("--patience", c.patience, "Early stopping patience")->capture_default_str();
  app.add_option("--mix-ratio", c.mix_ratio, "Preference batches per scalar batch")->capture_default_str();
  app.add_option("--max-minutes", c.max_minutes, "Wall-clock budget (0 = none)")->capture_default_str();
  app.add_option("--tau", c.tau, "Accuracy threshold")->capture_default_str();
  app.add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app.add_option("--data-root", c.data_root, "Dataset directory")->capture_default_str();
  app.add_option("--pairs", c.pairs, "Pair manifest, relative to the data root")->capture_default_str();
  app.add_option("--preferences", c.preferences, "Preference manifest, relative to the data root")
      ->capture_default_str();
  app.add_option("--out", c.out, "Output directory")->capture_default_str();
}

std::string to_ini(const TrainConfig& c) {
  std::ostringstream out;
  auto num = [&](const char* key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << key << " = " << buf << "\n";
  };
  auto count = [&](const char* key, std::uint64_t v) { out << key << " = " << v << "\n"; };
  auto str = [&](const char* key, const std::string& v) { out << key << " = \"" << v << "\"\n"; };
  str("preset", c.preset);
  count("dim", c.dim);
  count("depth", c.depth);
  count("heads", c.heads);
  count("image-size", c.image_size);
  count("patch-size", c.patch_size);
  count("n-frames", c.n_frames);
  num("lr", c.lr);
  num("weight-decay", c.weight_decay);
  count("batch-size", c.batch_size);
  num("lambda-reg", c.lambda_reg);
  num("lambda-dpo", c.lambda_dpo);
  num("beta-dpo", c.beta_dpo);
  count("warmup-epochs", c.warmup_epochs);
  count("max-epochs", c.max_epochs);
  count("patience", c.patience);
  num("mix-ratio", c.mix_ratio);
  num("max-minutes", c.max_minutes);
  num("tau", c.tau);
  count("seed", c.seed);
  str("data-root", c.data_root);
  str("pairs", c.pairs);
  str("preferences", c.preferences);
  str("out", c.out);
  return out.str();
}

TrainConfig parse_train_ini(const std::string& text) {
  TrainConfig c;
  CLI::App app;
  bind_train_options(app, c);
  app.allow_config_extras(CLI::config_extras_mode::error);
  std::istringstream in(text);
  try {
    app.parse_from_stream(in);
  } catch (const CLI::ParseError& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

}  // namespace mpjudge
