#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mpjudge/ops.hpp"
#include "mpjudge/tensor.hpp"

namespace mpjudge {

struct MusicEncoderConfig {
  std::array<std::size_t, 4> channels{64, 128, 256, 512};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t embed_dim = 512;

  bool operator==(const MusicEncoderConfig&) const = default;
};

struct PaintingEncoderConfig {
  std::size_t image_size = 256;
  std::size_t patch_size = 16;
  std::size_t depth = 12;
  std::size_t heads = 8;
  std::size_t dim = 512;
  std::size_t mlp_ratio = 4;
  std::size_t channels = 3;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t token_count() const { return grid_side() * grid_side(); }
  bool operator==(const PaintingEncoderConfig&) const = default;
};

struct ModelConfig {
  MusicEncoderConfig music;
  PaintingEncoderConfig painting;
  std::size_t n_frames = 469;  // spectrogram rows fed to the music encoder
  std::size_t n_mels = 128;

  static ModelConfig full();
  // Desk-scale: dim 128, depth 4, 64x64 images, 2-second clips.
  static ModelConfig tiny();

  // Throws ContractError describing the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ModelCost {
  std::size_t music_params = 0;
  std::size_t painting_params = 0;  // MAN projections included
  std::size_t head_params = 0;
  std::size_t music_flops = 0;  // 2 per multiply-add, matmul and conv only
  std::size_t painting_flops = 0;
  std::size_t head_flops = 0;

  std::size_t total_params() const { return music_params + painting_params + head_params; }
};

ModelCost count_params_flops(const ModelConfig& config);

// (rows, cols) of the music feature map after the last convolution stage.
std::pair<std::size_t, std::size_t> music_token_grid(const ModelConfig& config);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ManParams {
  Tensor<T> gamma_weight;  // [d x d]
  Tensor<T> gamma_bias;    // [d]
  Tensor<T> beta_weight;
  Tensor<T> beta_bias;
};

// gamma(y) * standardize(x) + beta(y); x [B x L x d], y [B x d].
template <typename T>
Tensor<T> man_modulate(const Tensor<T>& x, const Tensor<T>& y, const ManParams<T>& params);

// Residual stream immediately before (x_a) and after (x_b) each MAN layer.
template <typename T>
struct MimTrace {
  std::vector<Tensor<T>> before;
  std::vector<Tensor<T>> after;
};

struct ModulationIntensityMap {
  std::size_t grid_side = 0;
  std::vector<std::vector<double>> per_layer;  // one value per token, row-major grid
  std::vector<double> per_layer_scalar;
};

// Per-token L1 distance between x_b and x_a for one batch item. A zero
// grid_side skips the square-grid check.
template <typename T>
ModulationIntensityMap modulation_intensity_map(const MimTrace<T>& trace, std::size_t grid_side,
                                                std::size_t batch_index = 0);

template <typename T>
class MPJudgeModel {
 public:
  MPJudgeModel(const ModelConfig& config, std::uint64_t seed);

  // Independent deep copy (weights and batch-norm statistics).
  MPJudgeModel clone() const;
  MPJudgeModel(MPJudgeModel&&) noexcept = default;
  MPJudgeModel& operator=(MPJudgeModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  // Handles share storage with the model, in a fixed order.
  std::vector<NamedTensor<T>> parameters() const;
  // Non-trainable state (batch-norm running statistics).
  std::vector<NamedTensor<T>> buffers() const;

  // mels [B x frames x n_mels] -> [B x dim].
  Tensor<T> encode_music(const Tensor<T>& mels, ops::Mode mode);
  // image [B x 3 x H x W], music [B x dim] -> tokens [B x N x dim].
  Tensor<T> encode_painting(const Tensor<T>& image, const Tensor<T>& music,
                            MimTrace<T>* trace = nullptr) const;
  // Scores in (0,1), shape [B].
  Tensor<T> forward(const Tensor<T>& image, const Tensor<T>& mels, ops::Mode mode,
                    MimTrace<T>* trace = nullptr);

  // Eval-mode score of a single pair, kept strictly inside (0,1).
  double predict_score(const Tensor<T>& image, const Tensor<T>& mels);

  const ManParams<T>& man(std::size_t layer) const { return blocks_.at(layer).man; }

 private:
  struct ConvBlock {
    Tensor<T> kernel;
    Tensor<T> bn_gamma, bn_beta;
    ops::BatchNormStats<T> stats;
  };
  struct Block {
    Tensor<T> ln1_gamma, ln1_beta;
    Tensor<T> qkv_weight, qkv_bias;
    Tensor<T> proj_weight, proj_bias;
    ManParams<T> man;
    Tensor<T> ln2_gamma, ln2_beta;
    Tensor<T> fc1_weight, fc1_bias;
    Tensor<T> fc2_weight, fc2_bias;
  };

  MPJudgeModel() = default;

  ModelConfig config_;
  std::array<ConvBlock, 4> conv_;
  Tensor<T> music_proj_weight_, music_proj_bias_;
  Tensor<T> patch_weight_, patch_bias_;
  Tensor<T> pos_;
  std::vector<Block> blocks_;
  Tensor<T> head_weight_, head_bias_;
};

// Copies parameter and buffer values between models of equal configuration.
template <typename T>
void copy_weights(const MPJudgeModel<T>& from, MPJudgeModel<T>& to);

extern template class MPJudgeModel<float>;
extern template class MPJudgeModel<double>;

}  // namespace mpjudge
