#include <bit>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mpjudge/checkpoint.hpp"
#include "mpjudge/errors.hpp"

using namespace mpjudge;
namespace ck = mpjudge::checkpoint;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mpjudge_ck_" + name);
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("round trip is bit exact for every named tensor") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 21);
  auto entries = ck::model_entries(m);
  entries.push_back({"special", Shape{4}, {-0.0f, 1e-40f, 3.4e38f, -1.5f}});
  auto path = temp_path("roundtrip.mpj");
  ck::save(path, entries);
  auto back = ck::load(path);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].shape == entries[i].shape);
    CHECK(same_bits(back[i].values, entries[i].values));
  }
  CHECK(std::filesystem::file_size(path) == ck::encoded_size(entries));

  MPJudgeModel<float> other(ModelConfig::tiny(), 99);
  ck::apply_entries(back, other);
  auto pa = m.parameters(), pb = other.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    std::vector<float> a(pa[i].tensor.data().begin(), pa[i].tensor.data().end());
    std::vector<float> b(pb[i].tensor.data().begin(), pb[i].tensor.data().end());
    CHECK(same_bits(a, b));
  }
  CHECK(ck::config_from(back) == ModelConfig::tiny());
  std::filesystem::remove(path);
}

TEST_CASE("bad magic and version are rejected") {
  auto bytes = ck::encode({{"x", Shape{1}, {1.0f}}});
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(ck::decode(bad), doctest::Contains("bad magic"), CheckpointError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(ck::decode(bad), doctest::Contains("incompatible checkpoint version 2"), CheckpointError);
  CHECK_THROWS_AS(ck::decode(std::vector<std::uint8_t>{}), CheckpointError);
}

TEST_CASE("truncated file is a corruption error and leaves the model untouched") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 22);
  auto bytes = ck::encode(ck::model_entries(m));
  MPJudgeModel<float> target(ModelConfig::tiny(), 23);
  const auto before = ck::model_entries(target);
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{7}, std::size_t{20}}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_WITH_AS(ck::decode(part), doctest::Contains("truncated"), CheckpointError);
  }
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(ck::decode(extra), CheckpointError);

  // a structurally valid file missing one tensor must not partially apply
  auto entries = ck::model_entries(m);
  entries.pop_back();
  CHECK_THROWS_WITH_AS(ck::apply_entries(entries, target), doctest::Contains("missing tensor"), CheckpointError);
  auto after = ck::model_entries(target);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(same_bits(before[i].values, after[i].values));
}

TEST_CASE("configuration mismatch is a load error") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 24);
  auto entries = ck::model_entries(m);
  ModelConfig wider = ModelConfig::tiny();
  wider.painting.depth = 2;
  MPJudgeModel<float> other(wider, 24);
  CHECK_THROWS_WITH_AS(ck::apply_entries(entries, other), doctest::Contains("different model configuration"),
                       CheckpointError);
  // without the stored configuration the shape check still catches it
  auto no_meta = std::vector<ck::Entry>(entries.begin() + 1, entries.end());
  ModelConfig narrow = ModelConfig::tiny();
  narrow.painting.dim = 64;
  narrow.music.embed_dim = 64;
  MPJudgeModel<float> n(narrow, 24);
  CHECK_THROWS_WITH_AS(ck::apply_entries(no_meta, n), doctest::Contains("has shape"), CheckpointError);
}

TEST_CASE("full-size checkpoint is four bytes per parameter plus a small header") {
  MPJudgeModel<float> m(ModelConfig::full(), 25);
  const auto entries = ck::model_entries(m);
  const auto cost = count_params_flops(ModelConfig::full());
  std::size_t stored = 0, header = 4 + 1 + 4;
  for (const auto& e : entries) {
    stored += e.values.size();
    header += 4 + e.name.size() + 4 + 4 * e.shape.size();
  }
  const std::size_t bn_buffers = 2 * (64 + 128 + 256 + 512);
  CHECK(stored == cost.total_params() + bn_buffers + 16);
  const std::size_t bytes = ck::encode(entries).size();
  CHECK(bytes == 4 * stored + header);
  CHECK(static_cast<double>(bytes - 4 * cost.total_params()) / static_cast<double>(bytes) < 1e-3);
}
