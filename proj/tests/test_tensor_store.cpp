#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <unistd.h>

#include "eshift/error.hpp"
#include "eshift/rng.hpp"
#include "eshift/tensor_store.hpp"
#include "oracles.hpp"

using namespace eshift;
namespace fs = std::filesystem;

namespace {

class TensorStoreTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("eshift_ts_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  // Container with a literal header string and payload.
  fs::path raw(const std::string& name, const std::string& header, std::size_t payload_bytes) {
    std::string bytes(8, '\0');
    std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((n >> (8 * i)) & 0xff);
    bytes += header;
    bytes.append(payload_bytes, '\x01');
    std::ofstream(path(name), std::ios::binary) << bytes;
    return path(name);
  }

  fs::path dir_;
};

std::vector<std::byte> slurp(const fs::path& p) { return read_file_bytes(p); }

Matrix distinct_values(std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = 0.25 * static_cast<double>(i) - 3.0;
  return m;
}

}  // namespace

TEST_F(TensorStoreTest, SingleEntryHeader) {
  const std::vector<TensorBlob> blobs = {matrix_blob("lm_head", distinct_values(8, 4), DType::f32)};
  write_tensor_file(path("a.safetensors"), blobs);
  const auto tf = read_tensor_file(path("a.safetensors"));
  ASSERT_EQ(tf.entries().size(), 1u);
  const auto& e = tf.entry("lm_head");
  EXPECT_EQ(e.dtype, DType::f32);
  EXPECT_EQ(e.shape, (std::vector<std::uint64_t>{8, 4}));
  EXPECT_EQ(e.byte_length(), 8u * 4u * 4u);
}

TEST_F(TensorStoreTest, EmptyHeader) {
  const auto tf = read_tensor_file(raw("empty.safetensors", "{}", 0));
  EXPECT_TRUE(tf.entries().empty());
  EXPECT_EQ(tf.file_size(), 10u);
}

TEST_F(TensorStoreTest, LayoutArithmetic) {
  const std::vector<TensorBlob> blobs = {matrix_blob("b", distinct_values(3, 5), DType::f64),
                                         matrix_blob("a", distinct_values(2, 2), DType::f32)};
  write_tensor_file(path("x.safetensors"), blobs, {{"note", "hi"}});
  const auto bytes = slurp(path("x.safetensors"));
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  EXPECT_EQ(header_len % 8, 0u);
  const auto tf = read_tensor_file(path("x.safetensors"));
  std::uint64_t payload = 0;
  for (const auto& e : tf.entries()) payload += e.byte_length();
  EXPECT_EQ(8 + header_len + payload, bytes.size());
  EXPECT_EQ(tf.metadata().at("note"), "hi");
  // Blobs are laid out in the given order.
  EXPECT_EQ(tf.entries()[0].name, "b");
  EXPECT_EQ(tf.entries()[0].begin, 0u);
}

TEST_F(TensorStoreTest, OutOfBoundsFromTruncation) {
  const std::vector<TensorBlob> blobs = {matrix_blob("lm_head", distinct_values(8, 4), DType::f32)};
  write_tensor_file(path("full.safetensors"), blobs);
  auto bytes = slurp(path("full.safetensors"));
  bytes.resize(bytes.size() - 4);
  std::ofstream(path("cut.safetensors"), std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  try {
    read_tensor_file(path("cut.safetensors"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("out-of-bounds tensor"), std::string::npos);
    const std::uint64_t header_len = bytes.size() + 4 - 128 - 8;
    EXPECT_EQ(e.offset(), 8 + header_len);  // the entry's payload start
  }
}

TEST_F(TensorStoreTest, MalformedContainersReportOffsets) {
  EXPECT_THROW(read_tensor_file(path("does_not_exist.safetensors")), IoError);
  {
    std::ofstream(path("tiny.safetensors"), std::ios::binary) << "abc";
    EXPECT_THROW(read_tensor_file(path("tiny.safetensors")), FormatError);
  }
  try {
    read_tensor_file(raw("badjson.safetensors", "{\"a\": [1,", 0));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("invalid JSON header"), std::string::npos);
    EXPECT_GE(e.offset(), 8u);
  }
  EXPECT_THROW(read_tensor_file(raw("dtype.safetensors",
                                    R"({"t":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})", 4)),
               FormatError);
  EXPECT_THROW(read_tensor_file(raw("overlap.safetensors",
                                    R"({"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},)"
                                    R"("b":{"dtype":"U8","shape":[4],"data_offsets":[2,6]}})",
                                    6)),
               FormatError);
  EXPECT_THROW(read_tensor_file(raw("gap.safetensors",
                                    R"({"a":{"dtype":"U8","shape":[2],"data_offsets":[2,4]}})", 4)),
               FormatError);
  EXPECT_THROW(read_tensor_file(raw("size.safetensors",
                                    R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})", 4)),
               FormatError);
  EXPECT_THROW(read_tensor_file(raw("trailing.safetensors",
                                    R"({"a":{"dtype":"U8","shape":[2],"data_offsets":[0,2]}})", 5)),
               FormatError);
}

TEST_F(TensorStoreTest, WeightMatrixRoundTrip) {
  for (DType dt : {DType::f32, DType::f64}) {
    const WeightMatrix w{distinct_values(8, 4), dt};
    const std::vector<TensorBlob> blobs = {weight_blob("lm_head", w)};
    write_tensor_file(path("w.safetensors"), blobs);
    const auto tf = read_tensor_file(path("w.safetensors"));
    const auto back = load_weight_matrix(tf, "lm_head");
    EXPECT_EQ(back.values, w.values);
    EXPECT_EQ(back.dtype, dt);
    EXPECT_EQ(tf.payload("lm_head"), encode_values(w.values.values(), dt));
    const std::vector<TensorBlob> again = {weight_blob("lm_head", back)};
    write_tensor_file(path("w2.safetensors"), again);
    EXPECT_EQ(slurp(path("w.safetensors")), slurp(path("w2.safetensors")));
  }
}

TEST_F(TensorStoreTest, LoadMatrixErrors) {
  TensorBlob vec{"v", DType::f32, {4}, encode_values(std::vector<double>{1, 2, 3, 4}, DType::f32)};
  TensorBlob nan{"n", DType::f64, {1, 2}, encode_values(std::vector<double>{1, NAN}, DType::f64)};
  const std::vector<TensorBlob> blobs = {vec, nan};
  write_tensor_file(path("e.safetensors"), blobs);
  const auto tf = read_tensor_file(path("e.safetensors"));
  try {
    load_weight_matrix(tf, "missing");
    FAIL();
  } catch (const NotFoundError& e) {
    EXPECT_NE(std::string(e.what()).find("entry not found"), std::string::npos);
  }
  try {
    load_weight_matrix(tf, "v");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("rank mismatch"), std::string::npos);
  }
  EXPECT_THROW(load_weight_matrix(tf, "n"), DataError);
}

TEST_F(TensorStoreTest, ActivationDatasetCounts) {
  ActivationDataset ds;
  ds.hidden_states = distinct_values(4, 3);
  ds.labels = {1, 0, 1, 0};
  ds.meta = {{"extraction_position", "preceding-token"}};
  write_activation_dataset(path("d.safetensors"), ds);
  const auto back = load_activation_dataset(read_tensor_file(path("d.safetensors")));
  EXPECT_EQ(back.toxic_count(), 2u);
  EXPECT_EQ(back.nontoxic_count(), 2u);
  EXPECT_EQ(back.hidden_states, ds.hidden_states);  // values are exact in f32
  EXPECT_EQ(back.meta, ds.meta);
}

TEST_F(TensorStoreTest, ActivationDatasetErrors) {
  const auto states = matrix_blob(std::string(kHiddenStatesEntry), distinct_values(4, 3), DType::f32);
  auto labels = [](std::vector<std::uint8_t> v) {
    TensorBlob b{std::string(kLabelsEntry), DType::u8, {v.size()}, {}};
    for (auto x : v) b.bytes.push_back(static_cast<std::byte>(x));
    return b;
  };
  {
    const std::vector<TensorBlob> blobs = {states, labels({1, 0, 1})};
    write_tensor_file(path("short.safetensors"), blobs);
    try {
      load_activation_dataset(read_tensor_file(path("short.safetensors")));
      FAIL();
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
    }
  }
  {
    const std::vector<TensorBlob> blobs = {states, labels({1, 0, 2, 0})};
    write_tensor_file(path("two.safetensors"), blobs);
    try {
      load_activation_dataset(read_tensor_file(path("two.safetensors")));
      FAIL();
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("invalid label"), std::string::npos);
    }
  }
  {
    const std::vector<TensorBlob> blobs = {states};
    write_tensor_file(path("nolabels.safetensors"), blobs);
    EXPECT_THROW(load_activation_dataset(read_tensor_file(path("nolabels.safetensors"))), NotFoundError);
  }
}

TEST_F(TensorStoreTest, RandomContainersRoundTripByteExact) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TensorBlob> blobs;
    const auto count = 1 + rng.below(4);
    for (std::uint64_t k = 0; k < count; ++k) {
      const auto r = 1 + rng.below(9), c = 1 + rng.below(9);
      const DType dt = rng.below(2) ? DType::f32 : DType::f64;
      blobs.push_back(matrix_blob("t" + std::to_string(k), oracle::random_matrix(rng, r, c), dt));
    }
    write_tensor_file(path("r.safetensors"), blobs, {{"trial", std::to_string(trial)}});
    const auto before = slurp(path("r.safetensors"));
    const auto tf = read_tensor_file(path("r.safetensors"));
    write_tensor_file(path("r2.safetensors"), read_all_blobs(tf), tf.metadata());
    EXPECT_EQ(before, slurp(path("r2.safetensors")));
    EXPECT_EQ(before, slurp(path("r.safetensors")));  // reading leaves the source untouched
  }
}

TEST_F(TensorStoreTest, ReplacedPayloadKeepsEverythingElse) {
  const std::vector<TensorBlob> blobs = {matrix_blob("embedding", distinct_values(5, 2), DType::f32),
                                         matrix_blob("lm_head", distinct_values(6, 2), DType::f32),
                                         matrix_blob("w1", distinct_values(3, 2), DType::f64)};
  write_tensor_file(path("src.safetensors"), blobs);
  const auto src = read_tensor_file(path("src.safetensors"));
  Matrix head = distinct_values(6, 2);
  head(0, 0) = 42.0;
  write_with_replaced_payload(src, "lm_head", encode_values(head.values(), DType::f32), path("dst.safetensors"));
  const auto dst = read_tensor_file(path("dst.safetensors"));
  EXPECT_EQ(dst.payload("embedding"), src.payload("embedding"));
  EXPECT_EQ(dst.payload("w1"), src.payload("w1"));
  EXPECT_EQ(load_matrix(dst, "lm_head"), head);
  EXPECT_EQ(dst.header_length(), src.header_length());
  EXPECT_THROW(write_with_replaced_payload(src, "lm_head", std::vector<std::byte>(3), path("bad.safetensors")),
               std::invalid_argument);
}
