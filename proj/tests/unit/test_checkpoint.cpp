// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "spt/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace spt;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "spt_checkpoint_tests";
  fs::create_directories(dir);
  return dir / name;
}

ModelConfig config() {
  ModelConfig c;
  c.layers = 2, c.hidden = 8, c.heads = 2, c.mlp_size = 12, c.num_classes = 3, c.max_len = 16;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

template <class T>
bool bit_identical(const SPTModel<T>& a, const SPTModel<T>& b) {
  std::vector<const Matrix<T>*> pb;
  b.for_each_parameter([&](const ParamInfo&, const Matrix<T>& w) { pb.push_back(&w); });
  bool same = a.config == b.config;
  std::size_t i = 0;
  a.for_each_parameter([&](const ParamInfo&, const Matrix<T>& w) {
    same = same && w.rows() == pb[i]->rows() && w.cols() == pb[i]->cols() &&
           std::memcmp(w.data(), pb[i]->data(), sizeof(T) * w.size()) == 0;
    ++i;
  });
  return same;
}

}  // namespace

TEST(Checkpoint, FloatRoundTripIsBitExact) {
  const auto m = build_model<float>(config(), 11);
  save_checkpoint(m, scratch("f.ckpt"));
  EXPECT_TRUE(bit_identical(m, load_checkpoint<float>(scratch("f.ckpt"))));
  EXPECT_TRUE(bit_identical(m, load_checkpoint<float>(scratch("f.ckpt"), config())));
}

TEST(Checkpoint, DoubleRoundTripIsBitExact) {
  auto m = build_model<double>(config(), 12);
  m.params.head_b(0, 1) = -0.0;
  m.params.pos(3, 2) = 1e-300;
  save_checkpoint(m, scratch("d.ckpt"));
  EXPECT_TRUE(bit_identical(m, load_checkpoint<double>(scratch("d.ckpt"))));
}

TEST(Checkpoint, SavingTwiceGivesIdenticalBytes) {
  const auto m = build_model<float>(config(), 3);
  save_checkpoint(m, scratch("a.ckpt"));
  save_checkpoint(load_checkpoint<float>(scratch("a.ckpt")), scratch("b.ckpt"));
  EXPECT_EQ(slurp(scratch("a.ckpt")), slurp(scratch("b.ckpt")));
}

TEST(Checkpoint, DoubleLoadsIntoFloatByRounding) {
  const auto m = build_model<double>(config(), 4);
  save_checkpoint(m, scratch("wide.ckpt"));
  const auto narrow = load_checkpoint<float>(scratch("wide.ckpt"));
  EXPECT_TRUE(bit_identical(m.cast<float>(), narrow));
}

TEST(Checkpoint, FloatLoadsIntoDoubleExactly) {
  const auto m = build_model<float>(config(), 5);
  save_checkpoint(m, scratch("narrow.ckpt"));
  const auto wide = load_checkpoint<double>(scratch("narrow.ckpt"));
  EXPECT_TRUE(bit_identical(m.cast<double>(), wide));
}

TEST(Checkpoint, ConfigMismatchIsRejected) {
  save_checkpoint(build_model<float>(config(), 1), scratch("c.ckpt"));
  ModelConfig other = config();
  other.num_classes = 4;
  try {
    load_checkpoint<float>(scratch("c.ckpt"), other);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("does not match"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  save_checkpoint(build_model<float>(config(), 1), scratch("ok.ckpt"));
  const std::string good = slurp(scratch("ok.ckpt"));

  std::string bad = good;
  bad[0] = 'X';
  spit(scratch("magic.ckpt"), bad);
  EXPECT_THROW(load_checkpoint<float>(scratch("magic.ckpt")), CheckpointError);

  bad = good;
  bad[8] = 9;  // version
  spit(scratch("version.ckpt"), bad);
  EXPECT_THROW(load_checkpoint<float>(scratch("version.ckpt")), CheckpointError);

  spit(scratch("short.ckpt"), good.substr(0, good.size() / 2));
  EXPECT_THROW(load_checkpoint<float>(scratch("short.ckpt")), CheckpointError);

  bad = good;
  bad[good.size() / 2] ^= 0x40;  // inside the data section
  spit(scratch("flip.ckpt"), bad);
  try {
    load_checkpoint<float>(scratch("flip.ckpt"));
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
  }

  spit(scratch("trailing.ckpt"), good + "x");
  EXPECT_THROW(load_checkpoint<float>(scratch("trailing.ckpt")), CheckpointError);
  EXPECT_THROW(load_checkpoint<float>(scratch("absent.ckpt")), CheckpointError);
}
