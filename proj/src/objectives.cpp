#include "mpjudge/objectives.hpp"

#include <cmath>

#include "mpjudge/errors.hpp"
#include "mpjudge/ops.hpp"

namespace mpjudge {

namespace {

template <typename T>
Tensor<T> detached(const Tensor<T>& t) {
  return Tensor<T>(t.shape(), std::vector<T>(t.data().begin(), t.data().end()));
}

template <typename T>
void require_batch(const Tensor<T>& t, const Shape& shape, const char* what) {
  if (!t.defined() || t.shape() != shape)
    throw ContractError(std::string(what) + ": expected shape " + shape_string(shape) + ", got " +
                        (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
}

}  // namespace

template <typename T>
Tensor<T> regression_loss(const Tensor<T>& predicted, const Tensor<T>& target) {
  require_batch(target, predicted.shape(), "regression_loss target");
  for (T v : target.data())
    if (!(v >= T(0) && v <= T(1)))
      throw ContractError("regression_loss: target " + std::to_string(static_cast<double>(v)) +
                          " is outside [0, 1]");
  return ops::mean(ops::square(ops::sub(predicted, detached(target))));
}

template <typename T>
Tensor<T> dpo_loss(const Tensor<T>& theta_pos, const Tensor<T>& theta_neg, const Tensor<T>& ref_pos,
                   const Tensor<T>& ref_neg, double beta) {
  if (!(beta > 0)) throw ContractError("dpo_loss: beta must be positive");
  const Shape& s = theta_pos.shape();
  require_batch(theta_neg, s, "dpo_loss theta_neg");
  require_batch(ref_pos, s, "dpo_loss ref_pos");
  require_batch(ref_neg, s, "dpo_loss ref_neg");
  Tensor<T> ref_margin(s);
  for (std::size_t i = 0; i < ref_margin.numel(); ++i) ref_margin[i] = ref_pos[i] - ref_neg[i];
  const Tensor<T> margin = ops::sub(ops::sub(theta_pos, theta_neg), ref_margin);
  return ops::scale(ops::mean(ops::log_sigmoid(ops::scale(margin, static_cast<T>(beta)))), T(-1));
}

double dpo_loss_value(double theta_pos, double theta_neg, double ref_pos, double ref_neg, double beta) {
  const double x = beta * ((theta_pos - theta_neg) - (ref_pos - ref_neg));
  // softplus(-x)
  return x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& reg, const Tensor<T>& dpo, const LossWeights& w) {
  if (w.reg < 0 || w.dpo < 0) throw ContractError("total_loss: weights must be non-negative");
  if (!reg.defined() && !dpo.defined()) throw ContractError("total_loss: no loss terms");
  for (const Tensor<T>* t : {&reg, &dpo})
    if (t->defined() && (t->numel() != 1 || t->item() < T(0)))
      throw ContractError("total_loss: loss terms must be non-negative scalars");
  const bool use_dpo = dpo.defined() && w.dpo != 0.0;
  if (!reg.defined()) return ops::scale(dpo, static_cast<T>(w.dpo));
  const Tensor<T> r = w.reg == 1.0 ? reg : ops::scale(reg, static_cast<T>(w.reg));
  return use_dpo ? ops::add(r, ops::scale(dpo, static_cast<T>(w.dpo))) : r;
}

void adam_step(std::span<float> param, std::span<const float> grad, AdamMoments& state, std::uint64_t step,
               const AdamConfig& c, bool apply_decay) {
  if (grad.size() != param.size())
    throw ContractError("adam_step: gradient has " + std::to_string(grad.size()) + " elements, parameter " +
                        std::to_string(param.size()));
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), 0.0f);
    state.v.assign(param.size(), 0.0f);
  }
  if (state.m.size() != param.size() || state.v.size() != param.size())
    throw ContractError("adam_step: moment buffers do not match the parameter");
  if (step == 0) throw ContractError("adam_step: step is 1-based");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  const double decay = apply_decay ? 1.0 - c.lr * c.weight_decay : 1.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    const double v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double p = param[i] * decay;
    param[i] = static_cast<float>(p - c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps));
  }
}

AdamW::AdamW(std::vector<NamedTensor<float>> params, const AdamConfig& config)
    : params_(std::move(params)), moments_(params_.size()), config_(config) {
  if (!(config.lr > 0) || config.weight_decay < 0 || !(config.beta1 >= 0 && config.beta1 < 1) ||
      !(config.beta2 >= 0 && config.beta2 < 1) || !(config.eps > 0))
    throw ContractError("AdamW: invalid hyperparameters");
}

void AdamW::step() {
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    const std::vector<float> g = t.grad();
    adam_step(t.data(), g, moments_[i], step_, config_, t.rank() > 1);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::vector<checkpoint::Entry> AdamW::state_entries() const {
  std::vector<checkpoint::Entry> out;
  // split so both halves are exact in float
  out.push_back({"opt.step", Shape{2},
                 {static_cast<float>(step_ & 0xFFFFu), static_cast<float>(step_ >> 16)}});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& t = params_[i].tensor;
    const auto& mo = moments_[i];
    std::vector<float> m = mo.m.empty() ? std::vector<float>(t.numel(), 0.0f) : mo.m;
    std::vector<float> v = mo.v.empty() ? std::vector<float>(t.numel(), 0.0f) : mo.v;
    out.push_back({"opt.m." + params_[i].name, t.shape(), std::move(m)});
    out.push_back({"opt.v." + params_[i].name, t.shape(), std::move(v)});
  }
  return out;
}

void AdamW::load_state(const std::vector<checkpoint::Entry>& entries) {
  const auto* s = checkpoint::find(entries, "opt.step");
  if (!s || s->values.size() != 2) throw CheckpointError("checkpoint has no optimizer step");
  std::vector<AdamMoments> loaded(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto* m = checkpoint::find(entries, "opt.m." + params_[i].name);
    const auto* v = checkpoint::find(entries, "opt.v." + params_[i].name);
    if (!m || !v) throw CheckpointError("checkpoint is missing optimizer state for " + params_[i].name);
    if (m->shape != params_[i].tensor.shape() || v->shape != params_[i].tensor.shape())
      throw CheckpointError("optimizer state for " + params_[i].name + " has the wrong shape");
    loaded[i] = {m->values, v->values};
  }
  moments_ = std::move(loaded);
  step_ = static_cast<std::uint64_t>(s->values[0]) + (static_cast<std::uint64_t>(s->values[1]) << 16);
}

template Tensor<float> regression_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> regression_loss(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> dpo_loss(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                const Tensor<float>&, double);
template Tensor<double> dpo_loss(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                 const Tensor<double>&, double);
template Tensor<float> total_loss(const Tensor<float>&, const Tensor<float>&, const LossWeights&);
template Tensor<double> total_loss(const Tensor<double>&, const Tensor<double>&, const LossWeights&);

}  // namespace mpjudge
