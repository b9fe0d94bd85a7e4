#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpjudge/checkpoint.hpp"
#include "mpjudge/model.hpp"
#include "mpjudge/tensor.hpp"

namespace mpjudge {

struct LossWeights {
  double reg = 1.0;
  double dpo = 0.5;
};

// Mean of (predicted - target)^2 over the batch. Targets must lie in [0,1].
template <typename T>
Tensor<T> regression_loss(const Tensor<T>& predicted, const Tensor<T>& target);

// Mean over the batch of -log sigmoid(beta * margin), where
// margin = (theta_pos - theta_neg) - (ref_pos - ref_neg). The reference
// scores are treated as constants.
template <typename T>
Tensor<T> dpo_loss(const Tensor<T>& theta_pos, const Tensor<T>& theta_neg, const Tensor<T>& ref_pos,
                   const Tensor<T>& ref_neg, double beta);

// Closed form of the same loss for one preference, log1p-based.
double dpo_loss_value(double theta_pos, double theta_neg, double ref_pos, double ref_neg, double beta);

// weights.reg * reg + weights.dpo * dpo. Either term may be undefined
// (absent for that batch); at least one must be present.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& reg, const Tensor<T>& dpo, const LossWeights& weights);

struct AdamConfig {
  double lr = 1e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
};

// One AdamW update of a single tensor at 1-based step `step`: decoupled
// decay p *= 1 - lr * decay, then the bias-corrected adaptive step.
void adam_step(std::span<float> param, std::span<const float> grad, AdamMoments& state, std::uint64_t step,
               const AdamConfig& config, bool apply_decay);

// AdamW over a model's parameters. Rank-1 tensors (biases and
// normalization affines) are not decayed.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<float>> params, const AdamConfig& config);

  void step();
  void zero_grad();
  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

  // "opt.step", "opt.m.<name>", "opt.v.<name>".
  std::vector<checkpoint::Entry> state_entries() const;
  void load_state(const std::vector<checkpoint::Entry>& entries);

 private:
  std::vector<NamedTensor<float>> params_;
  std::vector<AdamMoments> moments_;
  AdamConfig config_;
  std::uint64_t step_ = 0;
};

}  // namespace mpjudge
