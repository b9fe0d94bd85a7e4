#include "mpjudge/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mpjudge/errors.hpp"

namespace mpjudge {

namespace {

std::size_t stage_extent(std::size_t n, std::size_t k, std::size_t s, std::size_t pad) {
  return (n + 2 * pad - k) / s + 1;
}

template <typename T>
Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> filled(Shape shape, double value) {
  Tensor<T> t(std::move(shape), static_cast<T>(value));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
ops::BatchNormStats<T> clone_stats(const ops::BatchNormStats<T>& s) {
  ops::BatchNormStats<T> c;
  c.running_mean = s.running_mean.clone();
  c.running_var = s.running_var.clone();
  c.momentum = s.momentum;
  c.eps = s.eps;
  return c;
}

template <typename T>
Tensor<T> clone_param(const Tensor<T>& t) {
  Tensor<T> c = t.clone();
  c.set_requires_grad(t.requires_grad());
  return c;
}

}  // namespace

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.music.channels = {16, 32, 64, 128};
  c.music.embed_dim = 128;
  c.painting.image_size = 64;
  c.painting.patch_size = 16;
  c.painting.depth = 4;
  c.painting.heads = 4;
  c.painting.dim = 128;
  c.n_frames = 63;  // 2 s at 16 kHz, hop 512
  return c;
}

void ModelConfig::validate() const {
  const auto& p = painting;
  if (p.patch_size == 0 || p.image_size == 0 || p.image_size % p.patch_size != 0)
    throw ContractError("image_size must be a positive multiple of patch_size");
  if (p.heads == 0 || p.dim == 0 || p.dim % p.heads != 0)
    throw ContractError("dim must be a positive multiple of heads");
  if (p.depth == 0 || p.mlp_ratio == 0 || p.channels == 0)
    throw ContractError("depth, mlp_ratio and channels must be positive");
  if (music.embed_dim != p.dim)
    throw ContractError("music embed_dim " + std::to_string(music.embed_dim) +
                        " must equal painting dim " + std::to_string(p.dim));
  if (music.kernel == 0 || music.stride == 0) throw ContractError("music kernel and stride must be positive");
  for (auto c : music.channels)
    if (c == 0) throw ContractError("music channel widths must be positive");
  std::size_t h = n_frames, w = n_mels;
  for (std::size_t i = 0; i < music.channels.size(); ++i) {
    if (h < music.kernel || w < music.kernel) {
      throw DimensionError("spectrogram " + std::to_string(n_frames) + "x" + std::to_string(n_mels) +
                           " is too small for " + std::to_string(music.channels.size()) +
                           " stride-" + std::to_string(music.stride) + " stages");
    }
    h = stage_extent(h, music.kernel, music.stride, music.kernel / 2);
    w = stage_extent(w, music.kernel, music.stride, music.kernel / 2);
  }
}

std::pair<std::size_t, std::size_t> music_token_grid(const ModelConfig& c) {
  c.validate();
  std::size_t h = c.n_frames, w = c.n_mels;
  const std::size_t k = c.music.kernel;
  for (std::size_t i = 0; i < c.music.channels.size(); ++i) {
    h = stage_extent(h, k, c.music.stride, k / 2);
    w = stage_extent(w, k, c.music.stride, k / 2);
  }
  return {h, w};
}

ModelCost count_params_flops(const ModelConfig& c) {
  c.validate();
  ModelCost cost;
  std::size_t macs = 0;
  std::size_t in_ch = 1, h = c.n_frames, w = c.n_mels;
  const std::size_t k = c.music.kernel;
  for (std::size_t out_ch : c.music.channels) {
    h = stage_extent(h, k, c.music.stride, k / 2);
    w = stage_extent(w, k, c.music.stride, k / 2);
    cost.music_params += out_ch * in_ch * k * k + 2 * out_ch;  // conv (no bias) + bn affine
    macs += h * w * out_ch * in_ch * k * k;
    in_ch = out_ch;
  }
  const std::size_t d = c.painting.dim;
  cost.music_params += in_ch * d + d;
  macs += h * w * in_ch * d;
  cost.music_flops = 2 * macs;

  const auto& p = c.painting;
  const std::size_t n = p.token_count();
  const std::size_t patch_in = p.channels * p.patch_size * p.patch_size;
  const std::size_t hidden = p.mlp_ratio * d;
  std::size_t params = patch_in * d + d + n * d;
  macs = n * patch_in * d;
  const std::size_t block_params = 2 * d                  // ln1
                                   + d * 3 * d + 3 * d    // qkv
                                   + d * d + d            // output projection
                                   + 2 * (d * d + d)      // MAN gamma/beta
                                   + 2 * d                // ln2
                                   + d * hidden + hidden  // fc1
                                   + hidden * d + d;      // fc2
  const std::size_t block_macs = n * d * 3 * d  // qkv
                                 + 2 * n * n * d  // scores and weighted values
                                 + n * d * d      // output projection
                                 + 2 * d * d      // MAN projections of the music vector
                                 + 2 * n * d * hidden;
  params += p.depth * block_params;
  macs += p.depth * block_macs;
  cost.painting_params = params;
  cost.painting_flops = 2 * macs;
  cost.head_params = d + 1;
  cost.head_flops = 2 * d;
  return cost;
}

template <typename T>
Tensor<T> man_modulate(const Tensor<T>& x, const Tensor<T>& y, const ManParams<T>& p) {
  if (x.rank() != 3 || y.rank() != 2 || x.dim(0) != y.dim(0) || x.dim(2) != y.dim(1)) {
    throw ContractError("man_modulate: stream " + shape_string(x.shape()) + " and music " +
                        shape_string(y.shape()) + " disagree");
  }
  const std::size_t d = x.dim(2);
  for (const Tensor<T>* w : {&p.gamma_weight, &p.beta_weight})
    if (w->shape() != Shape{d, d})
      throw ContractError("man_modulate: projection " + shape_string(w->shape()) + " for dim " +
                          std::to_string(d));
  for (const Tensor<T>* b : {&p.gamma_bias, &p.beta_bias})
    if (b->shape() != Shape{d})
      throw ContractError("man_modulate: bias " + shape_string(b->shape()) + " for dim " +
                          std::to_string(d));
  const Tensor<T> z = ops::sequence_normalized(x);
  const Tensor<T> gamma = ops::linear(y, p.gamma_weight, p.gamma_bias);
  const Tensor<T> beta = ops::linear(y, p.beta_weight, p.beta_bias);
  return ops::modulate(z, gamma, beta);
}

template <typename T>
ModulationIntensityMap modulation_intensity_map(const MimTrace<T>& trace, std::size_t grid_side,
                                                std::size_t batch_index) {
  if (trace.before.empty() || trace.before.size() != trace.after.size())
    throw ContractError("modulation_intensity_map: trace is missing or incomplete");
  ModulationIntensityMap map;
  map.grid_side = grid_side;
  for (std::size_t l = 0; l < trace.before.size(); ++l) {
    const Tensor<T>& a = trace.before[l];
    const Tensor<T>& b = trace.after[l];
    if (!a.defined() || !b.defined() || a.shape() != b.shape() || a.rank() != 3)
      throw ContractError("modulation_intensity_map: layer " + std::to_string(l) + " trace is malformed");
    const std::size_t tokens = a.dim(1), d = a.dim(2);
    if (grid_side != 0 && tokens != grid_side * grid_side)
      throw ContractError("modulation_intensity_map: " + std::to_string(tokens) +
                          " tokens do not form a " + std::to_string(grid_side) + "-wide grid");
    if (batch_index >= a.dim(0)) throw ContractError("modulation_intensity_map: batch index out of range");
    std::vector<double> grid(tokens);
    double total = 0.0;
    for (std::size_t i = 0; i < tokens; ++i) {
      const std::size_t base = (batch_index * tokens + i) * d;
      double l1 = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        l1 += std::abs(static_cast<double>(b[base + c]) - static_cast<double>(a[base + c]));
      grid[i] = l1;
      total += l1;
    }
    map.per_layer.push_back(std::move(grid));
    map.per_layer_scalar.push_back(total / static_cast<double>(tokens));
  }
  return map;
}

template <typename T>
MPJudgeModel<T>::MPJudgeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t k = config_.music.kernel;
  std::size_t in_ch = 1;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    const std::size_t out_ch = config_.music.channels[i];
    auto& b = conv_[i];
    b.kernel = normal<T>({out_ch, in_ch, k, k}, std::sqrt(2.0 / static_cast<double>(in_ch * k * k)), rng);
    b.bn_gamma = filled<T>({out_ch}, 1.0);
    b.bn_beta = filled<T>({out_ch}, 0.0);
    b.stats = ops::BatchNormStats<T>(out_ch);
    in_ch = out_ch;
  }
  const auto& p = config_.painting;
  const std::size_t d = p.dim, hidden = p.mlp_ratio * d;
  music_proj_weight_ = normal<T>({in_ch, d}, 0.02, rng);
  music_proj_bias_ = filled<T>({d}, 0.0);
  patch_weight_ = normal<T>({p.channels * p.patch_size * p.patch_size, d}, 0.02, rng);
  patch_bias_ = filled<T>({d}, 0.0);
  pos_ = normal<T>({p.token_count(), d}, 0.02, rng);
  blocks_.resize(p.depth);
  for (auto& b : blocks_) {
    b.ln1_gamma = filled<T>({d}, 1.0);
    b.ln1_beta = filled<T>({d}, 0.0);
    b.qkv_weight = normal<T>({d, 3 * d}, 0.02, rng);
    b.qkv_bias = filled<T>({3 * d}, 0.0);
    b.proj_weight = normal<T>({d, d}, 0.02, rng);
    b.proj_bias = filled<T>({d}, 0.0);
    b.man.gamma_weight = filled<T>({d, d}, 0.0);
    b.man.gamma_bias = filled<T>({d}, 1.0);
    b.man.beta_weight = filled<T>({d, d}, 0.0);
    b.man.beta_bias = filled<T>({d}, 0.0);
    b.ln2_gamma = filled<T>({d}, 1.0);
    b.ln2_beta = filled<T>({d}, 0.0);
    b.fc1_weight = normal<T>({d, hidden}, 0.02, rng);
    b.fc1_bias = filled<T>({hidden}, 0.0);
    b.fc2_weight = normal<T>({hidden, d}, 0.02, rng);
    b.fc2_bias = filled<T>({d}, 0.0);
  }
  head_weight_ = normal<T>({d, 1}, 0.02, rng);
  head_bias_ = filled<T>({1}, 0.0);
}

template <typename T>
MPJudgeModel<T> MPJudgeModel<T>::clone() const {
  MPJudgeModel m;
  m.config_ = config_;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    m.conv_[i].kernel = clone_param(conv_[i].kernel);
    m.conv_[i].bn_gamma = clone_param(conv_[i].bn_gamma);
    m.conv_[i].bn_beta = clone_param(conv_[i].bn_beta);
    m.conv_[i].stats = clone_stats(conv_[i].stats);
  }
  m.music_proj_weight_ = clone_param(music_proj_weight_);
  m.music_proj_bias_ = clone_param(music_proj_bias_);
  m.patch_weight_ = clone_param(patch_weight_);
  m.patch_bias_ = clone_param(patch_bias_);
  m.pos_ = clone_param(pos_);
  for (const auto& b : blocks_) {
    Block c;
    c.ln1_gamma = clone_param(b.ln1_gamma);
    c.ln1_beta = clone_param(b.ln1_beta);
    c.qkv_weight = clone_param(b.qkv_weight);
    c.qkv_bias = clone_param(b.qkv_bias);
    c.proj_weight = clone_param(b.proj_weight);
    c.proj_bias = clone_param(b.proj_bias);
    c.man.gamma_weight = clone_param(b.man.gamma_weight);
    c.man.gamma_bias = clone_param(b.man.gamma_bias);
    c.man.beta_weight = clone_param(b.man.beta_weight);
    c.man.beta_bias = clone_param(b.man.beta_bias);
    c.ln2_gamma = clone_param(b.ln2_gamma);
    c.ln2_beta = clone_param(b.ln2_beta);
    c.fc1_weight = clone_param(b.fc1_weight);
    c.fc1_bias = clone_param(b.fc1_bias);
    c.fc2_weight = clone_param(b.fc2_weight);
    c.fc2_bias = clone_param(b.fc2_bias);
    m.blocks_.push_back(std::move(c));
  }
  m.head_weight_ = clone_param(head_weight_);
  m.head_bias_ = clone_param(head_bias_);
  return m;
}

template <typename T>
std::vector<NamedTensor<T>> MPJudgeModel<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    const std::string pre = "music.conv" + std::to_string(i) + ".";
    out.push_back({pre + "weight", conv_[i].kernel});
    out.push_back({pre + "bn.gamma", conv_[i].bn_gamma});
    out.push_back({pre + "bn.beta", conv_[i].bn_beta});
  }
  out.push_back({"music.proj.weight", music_proj_weight_});
  out.push_back({"music.proj.bias", music_proj_bias_});
  out.push_back({"painting.patch.weight", patch_weight_});
  out.push_back({"painting.patch.bias", patch_bias_});
  out.push_back({"painting.pos", pos_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string pre = "painting.block" + std::to_string(i) + ".";
    out.push_back({pre + "ln1.gamma", b.ln1_gamma});
    out.push_back({pre + "ln1.beta", b.ln1_beta});
    out.push_back({pre + "attn.qkv.weight", b.qkv_weight});
    out.push_back({pre + "attn.qkv.bias", b.qkv_bias});
    out.push_back({pre + "attn.proj.weight", b.proj_weight});
    out.push_back({pre + "attn.proj.bias", b.proj_bias});
    out.push_back({pre + "man.gamma.weight", b.man.gamma_weight});
    out.push_back({pre + "man.gamma.bias", b.man.gamma_bias});
    out.push_back({pre + "man.beta.weight", b.man.beta_weight});
    out.push_back({pre + "man.beta.bias", b.man.beta_bias});
    out.push_back({pre + "ln2.gamma", b.ln2_gamma});
    out.push_back({pre + "ln2.beta", b.ln2_beta});
    out.push_back({pre + "mlp.fc1.weight", b.fc1_weight});
    out.push_back({pre + "mlp.fc1.bias", b.fc1_bias});
    out.push_back({pre + "mlp.fc2.weight", b.fc2_weight});
    out.push_back({pre + "mlp.fc2.bias", b.fc2_bias});
  }
  out.push_back({"head.weight", head_weight_});
  out.push_back({"head.bias", head_bias_});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> MPJudgeModel<T>::buffers() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    const std::string pre = "music.conv" + std::to_string(i) + ".bn.";
    out.push_back({pre + "running_mean", conv_[i].stats.running_mean});
    out.push_back({pre + "running_var", conv_[i].stats.running_var});
  }
  return out;
}

template <typename T>
Tensor<T> MPJudgeModel<T>::encode_music(const Tensor<T>& mels, ops::Mode mode) {
  if (mels.rank() != 3 || mels.dim(1) != config_.n_frames || mels.dim(2) != config_.n_mels) {
    throw DimensionError("encode_music: expected [B x " + std::to_string(config_.n_frames) + " x " +
                         std::to_string(config_.n_mels) + "], got " + shape_string(mels.shape()));
  }
  Tensor<T> x = ops::reshape(mels, Shape{mels.dim(0), 1, mels.dim(1), mels.dim(2)});
  const std::size_t pad = config_.music.kernel / 2;
  for (auto& b : conv_) {
    x = ops::conv2d(x, b.kernel, config_.music.stride, pad);
    x = ops::batch_norm2d(x, b.bn_gamma, b.bn_beta, b.stats, mode);
    x = ops::silu(x);
  }
  x = ops::channels_to_tokens(x);
  x = ops::linear(x, music_proj_weight_, music_proj_bias_);
  return ops::sequence_mean(x);
}

template <typename T>
Tensor<T> MPJudgeModel<T>::encode_painting(const Tensor<T>& image, const Tensor<T>& music,
                                           MimTrace<T>* trace) const {
  const auto& p = config_.painting;
  if (image.rank() != 4 || image.dim(1) != p.channels || image.dim(2) != p.image_size ||
      image.dim(3) != p.image_size) {
    throw DimensionError("encode_painting: expected [B x " + std::to_string(p.channels) + " x " +
                         std::to_string(p.image_size) + " x " + std::to_string(p.image_size) +
                         "], got " + shape_string(image.shape()));
  }
  if (music.rank() != 2 || music.dim(0) != image.dim(0) || music.dim(1) != p.dim) {
    throw DimensionError("encode_painting: music embedding " + shape_string(music.shape()) +
                         " does not match batch " + std::to_string(image.dim(0)) + " and dim " +
                         std::to_string(p.dim));
  }
  if (trace) *trace = {};
  Tensor<T> x = ops::linear(ops::patchify(image, p.patch_size), patch_weight_, patch_bias_);
  x = ops::add_broadcast(x, pos_);
  for (const auto& b : blocks_) {
    Tensor<T> h = ops::layer_norm(x, b.ln1_gamma, b.ln1_beta);
    h = ops::attention(ops::linear(h, b.qkv_weight, b.qkv_bias), p.heads);
    x = ops::add(x, ops::linear(h, b.proj_weight, b.proj_bias));
    if (trace) trace->before.push_back(x.clone());
    x = man_modulate(x, music, b.man);
    if (trace) trace->after.push_back(x.clone());
    h = ops::layer_norm(x, b.ln2_gamma, b.ln2_beta);
    h = ops::gelu(ops::linear(h, b.fc1_weight, b.fc1_bias));
    x = ops::add(x, ops::linear(h, b.fc2_weight, b.fc2_bias));
  }
  return x;
}

template <typename T>
Tensor<T> MPJudgeModel<T>::forward(const Tensor<T>& image, const Tensor<T>& mels, ops::Mode mode,
                                   MimTrace<T>* trace) {
  if (image.rank() != 4 || mels.rank() != 3 || image.dim(0) != mels.dim(0)) {
    throw DimensionError("forward: image " + shape_string(image.shape()) + " and spectrogram " +
                         shape_string(mels.shape()) + " batch sizes differ");
  }
  const Tensor<T> music = encode_music(mels, mode);
  const Tensor<T> tokens = encode_painting(image, music, trace);
  const Tensor<T> logit = ops::linear(ops::sequence_mean(tokens), head_weight_, head_bias_);
  return ops::reshape(ops::sigmoid(logit), Shape{image.dim(0)});
}

template <typename T>
double MPJudgeModel<T>::predict_score(const Tensor<T>& image, const Tensor<T>& mels) {
  const Tensor<T> s = forward(image, mels, ops::Mode::kEval);
  if (s.numel() != 1) throw DimensionError("predict_score: expected a single pair");
  const double lo = std::numeric_limits<float>::min();
  return std::clamp(static_cast<double>(s[0]), lo, std::nextafter(1.0, 0.0));
}

template <typename T>
void copy_weights(const MPJudgeModel<T>& from, MPJudgeModel<T>& to) {
  if (!(from.config() == to.config())) throw ContractError("copy_weights: configurations differ");
  auto copy = [](const std::vector<NamedTensor<T>>& src, const std::vector<NamedTensor<T>>& dst) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto out = dst[i].tensor;
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), out.data().begin());
    }
  };
  copy(from.parameters(), to.parameters());
  copy(from.buffers(), to.buffers());
}

template class MPJudgeModel<float>;
template class MPJudgeModel<double>;
template Tensor<float> man_modulate(const Tensor<float>&, const Tensor<float>&, const ManParams<float>&);
template Tensor<double> man_modulate(const Tensor<double>&, const Tensor<double>&, const ManParams<double>&);
template ModulationIntensityMap modulation_intensity_map(const MimTrace<float>&, std::size_t, std::size_t);
template ModulationIntensityMap modulation_intensity_map(const MimTrace<double>&, std::size_t, std::size_t);
template void copy_weights(const MPJudgeModel<float>&, MPJudgeModel<float>&);
template void copy_weights(const MPJudgeModel<double>&, MPJudgeModel<double>&);

}  // namespace mpjudge
