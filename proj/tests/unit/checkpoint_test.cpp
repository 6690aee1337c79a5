#include <gtest/gtest.h>

#include <filesystem>

#include "rmkd/binary_io.hpp"
#include "rmkd/checkpoint.hpp"

using namespace rmkd;

namespace {

Checkpoint sample() {
  Checkpoint ck;
  ck.config = ModelConfig::desk();
  ck.config.pitch_mean = 171.25;
  ck.params = init_parameters(ck.config, 4);
  ck.metadata["stage"] = "reference";
  ck.metadata["seed"] = "4";
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripF64IsExact) {
  const Checkpoint ck = sample();
  const auto bytes = encode_checkpoint(ck);
  Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.params.content_hash(), ck.params.content_hash());
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.stage(), "reference");
  EXPECT_EQ(back.get("seed"), "4");
  EXPECT_EQ(back.get("missing", "x"), "x");
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = encode_checkpoint(sample());
  ASSERT_GT(bytes.size(), 13u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "RMKD1");
  ByteReader r(bytes);
  r.expect_magic("RMKD1");
  EXPECT_EQ(r.u32(), 1u);
  EXPECT_EQ(r.u32(), sample().params.size());
  EXPECT_EQ(r.str(), "phoneme_embedding");
  EXPECT_EQ(r.u32(), 2u);
}

TEST(Checkpoint, F32StoresRoundedValues) {
  const Checkpoint ck = sample();
  Checkpoint back = decode_checkpoint(encode_checkpoint(ck, DType::kF32));
  const Tensor& a = ck.params.at("mel_linear.weight");
  const Tensor& b = back.params.at("mel_linear.weight");
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(b[i], static_cast<double>(static_cast<float>(a[i])));
}

TEST(Checkpoint, TruncationRaisesWithOffset) {
  const auto bytes = encode_checkpoint(sample());
  for (std::size_t cut : {std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    try {
      decode_checkpoint(part);
      FAIL() << "accepted truncated checkpoint at " << cut;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
  }
}

TEST(Checkpoint, BadMagicAndTrailingBytes) {
  auto bytes = encode_checkpoint(sample());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, LayoutMismatchRejected) {
  Checkpoint ck = sample();
  ck.config.d_model = 16;
  ck.config.n_heads = 2;
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(ck)), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "rmkd_checkpoint_test.rmkd";
  const Checkpoint ck = sample();
  save_checkpoint(path, ck);
  EXPECT_EQ(load_checkpoint(path).params, ck.params);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}
