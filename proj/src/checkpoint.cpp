#include "mpjudge/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "binary_io.hpp"
#include "mpjudge/errors.hpp"

namespace mpjudge::checkpoint {

namespace {

constexpr char kMagic[] = "MPJ1";
constexpr const char* kConfigName = "meta.config";

std::vector<Entry> tensor_entries(const std::vector<NamedTensor<float>>& named, const std::string& prefix) {
  std::vector<Entry> out;
  for (const auto& n : named) {
    out.push_back({prefix + n.name, n.tensor.shape(),
                   std::vector<float>(n.tensor.data().begin(), n.tensor.data().end())});
  }
  return out;
}

}  // namespace

std::size_t encoded_size(const std::vector<Entry>& entries) {
  std::size_t n = 4 + 1 + 4;
  for (const auto& e : entries) n += 4 + e.name.size() + 4 + 4 * e.shape.size() + 4 * e.values.size();
  return n;
}

std::vector<std::uint8_t> encode(const std::vector<Entry>& entries) {
  detail::ByteWriter w;
  w.buffer().reserve(encoded_size(entries));
  w.tag(kMagic);
  w.u8(kVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (shape_numel(e.shape) != e.values.size())
      throw CheckpointError("tensor " + e.name + " has " + std::to_string(e.values.size()) +
                            " values for shape " + shape_string(e.shape));
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.tag(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  return std::move(w.buffer());
}

std::vector<Entry> decode(std::span<const std::uint8_t> bytes, const std::string& what) {
  detail::ByteReader<CheckpointError> r(bytes.data(), bytes.size(), what + " is truncated or corrupt");
  if (bytes.size() < 5 || r.tag(4) != kMagic)
    throw CheckpointError(what + ": not an MPJ1 checkpoint (bad magic)");
  const std::uint8_t version = r.u8();
  if (version != kVersion)
    throw CheckpointError(what + ": incompatible checkpoint version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kVersion));
  const std::uint32_t count = r.u32();
  std::vector<Entry> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t len = r.u32();
    e.name = r.tag(len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError(what + ": tensor " + e.name + " has implausible rank " + std::to_string(rank));
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      numel *= e.shape.back();
    }
    if (numel * 4 > r.remaining())
      throw CheckpointError(what + " is truncated or corrupt: tensor " + e.name + " needs " +
                            std::to_string(numel * 4) + " bytes");
    e.values.resize(numel);
    for (auto& v : e.values) v = r.f32();
    if (!seen.insert(e.name).second) throw CheckpointError(what + ": duplicate tensor " + e.name);
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw CheckpointError(what + " is corrupt: trailing bytes after last tensor");
  return out;
}

void save(const std::filesystem::path& path, const std::vector<Entry>& entries) {
  detail::write_file_atomic(path, encode(entries));
}

std::vector<Entry> load(const std::filesystem::path& path) {
  const auto bytes = detail::read_file<CheckpointError>(path);
  return decode(bytes, path.string());
}

const Entry* find(const std::vector<Entry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

Entry config_entry(const ModelConfig& c) {
  const auto& m = c.music;
  const auto& p = c.painting;
  std::vector<std::size_t> v{m.channels[0], m.channels[1], m.channels[2], m.channels[3], m.kernel,
                             m.stride, m.embed_dim, p.image_size, p.patch_size, p.depth,
                             p.heads, p.dim, p.mlp_ratio, p.channels, c.n_frames, c.n_mels};
  Entry e{kConfigName, Shape{v.size()}, {}};
  for (auto x : v) e.values.push_back(static_cast<float>(x));
  return e;
}

ModelConfig config_from(const std::vector<Entry>& entries) {
  const Entry* e = find(entries, kConfigName);
  if (!e) throw CheckpointError("checkpoint has no model configuration");
  if (e->values.size() != 16) throw CheckpointError("checkpoint configuration has the wrong length");
  std::vector<std::size_t> v;
  for (float x : e->values) {
    if (!(x >= 0) || x != std::floor(x)) throw CheckpointError("checkpoint configuration is corrupt");
    v.push_back(static_cast<std::size_t>(x));
  }
  ModelConfig c;
  c.music.channels = {v[0], v[1], v[2], v[3]};
  c.music.kernel = v[4];
  c.music.stride = v[5];
  c.music.embed_dim = v[6];
  c.painting.image_size = v[7];
  c.painting.patch_size = v[8];
  c.painting.depth = v[9];
  c.painting.heads = v[10];
  c.painting.dim = v[11];
  c.painting.mlp_ratio = v[12];
  c.painting.channels = v[13];
  c.n_frames = v[14];
  c.n_mels = v[15];
  try {
    c.validate();
  } catch (const Error& err) {
    throw CheckpointError(std::string("checkpoint configuration is invalid: ") + err.what());
  }
  return c;
}

std::vector<Entry> model_entries(const MPJudgeModel<float>& model, const std::string& prefix) {
  std::vector<Entry> out;
  if (prefix.empty()) out.push_back(config_entry(model.config()));
  for (auto& e : tensor_entries(model.parameters(), prefix)) out.push_back(std::move(e));
  for (auto& e : tensor_entries(model.buffers(), prefix)) out.push_back(std::move(e));
  return out;
}

void apply_entries(const std::vector<Entry>& entries, MPJudgeModel<float>& model, const std::string& prefix) {
  if (prefix.empty() && find(entries, kConfigName)) {
    const ModelConfig stored = config_from(entries);
    if (!(stored == model.config()))
      throw CheckpointError("checkpoint was written for a different model configuration");
  }
  auto targets = model.parameters();
  for (auto& b : model.buffers()) targets.push_back(b);
  std::vector<const Entry*> sources;
  for (const auto& t : targets) {
    const Entry* e = find(entries, prefix + t.name);
    if (!e) throw CheckpointError("checkpoint is missing tensor " + prefix + t.name);
    if (e->shape != t.tensor.shape())
      throw CheckpointError("checkpoint tensor " + prefix + t.name + " has shape " + shape_string(e->shape) +
                            ", model expects " + shape_string(t.tensor.shape()));
    sources.push_back(e);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto dst = targets[i].tensor;
    std::copy(sources[i]->values.begin(), sources[i]->values.end(), dst.data().begin());
  }
}

}  // namespace mpjudge::checkpoint
