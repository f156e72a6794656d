#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian
// header length, a UTF-8 JSON header, then raw little-endian payloads.
// Activation dumps use the same container with the reserved entries
// "hidden_states" (n x d) and "labels" (n, uint8).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eshift/matrix.hpp"

namespace eshift {

enum class DType { f32, f64, u8 };

std::size_t dtype_size(DType t) noexcept;
std::string_view dtype_name(DType t) noexcept;  // "F32", "F64", "U8"
std::optional<DType> parse_dtype(std::string_view name) noexcept;

struct TensorEntry {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin = 0;  // offsets relative to the start of the payload area
  std::uint64_t end = 0;

  std::uint64_t byte_length() const noexcept { return end - begin; }
  std::uint64_t element_count() const noexcept;
};

// Parsed header of a container file. Payloads stay on disk until
// payload() is called; the object itself is immutable after parsing.
class TensorFile {
 public:
  const std::filesystem::path& path() const noexcept { return path_; }
  std::uint64_t header_length() const noexcept { return header_length_; }
  std::uint64_t data_offset() const noexcept { return 8 + header_length_; }
  std::uint64_t file_size() const noexcept { return file_size_; }

  // Sorted by payload offset.
  const std::vector<TensorEntry>& entries() const noexcept { return entries_; }
  const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }

  bool contains(std::string_view name) const noexcept;
  const TensorEntry& entry(std::string_view name) const;  // NotFoundError

  std::vector<std::byte> payload(std::string_view name) const;

 private:
  friend TensorFile parse_tensor_header(std::span<const std::byte>, std::uint64_t,
                                        const std::filesystem::path&);

  std::filesystem::path path_;
  std::uint64_t header_length_ = 0;
  std::uint64_t file_size_ = 0;
  std::vector<TensorEntry> entries_;
  std::map<std::string, std::string> metadata_;
};

// Throws IoError when the file cannot be read and FormatError (with the
// byte offset) for malformed prefixes, JSON, dtypes or byte ranges.
TensorFile read_tensor_file(const std::filesystem::path& path);

// Parses a header held in memory. `file_size` is the full container size.
TensorFile parse_tensor_header(std::span<const std::byte> prefix_and_header, std::uint64_t file_size,
                               const std::filesystem::path& path = {});

// A tensor ready to be written.
struct TensorBlob {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;
};

// Serialises blobs in the given order. Header keys are emitted sorted and
// the header is space-padded to a multiple of 8 bytes.
std::vector<std::byte> encode_tensor_file(std::span<const TensorBlob> blobs,
                                          const std::map<std::string, std::string>& metadata = {});

// encode_tensor_file + write-to-temp-then-rename.
void write_tensor_file(const std::filesystem::path& path, std::span<const TensorBlob> blobs,
                       const std::map<std::string, std::string>& metadata = {});

// Reads every entry of `tf` back into blobs, in payload order.
std::vector<TensorBlob> read_all_blobs(const TensorFile& tf);

// Copies the source file to `dst`, replacing the payload bytes of one entry.
// The replacement must have the entry's exact byte length; header and all
// other payloads are copied verbatim.
void write_with_replaced_payload(const TensorFile& src, std::string_view name,
                                 std::span<const std::byte> bytes, const std::filesystem::path& dst);

// Output-projection matrix, V rows (vocabulary) by d columns (hidden).
// Values are held in float64; `dtype` records the on-disk type.
struct WeightMatrix {
  Matrix values;
  DType dtype = DType::f64;

  std::size_t rows() const noexcept { return values.rows(); }
  std::size_t cols() const noexcept { return values.cols(); }
};

// Rank-2 float32/float64 entry widened to float64. Errors: NotFoundError,
// DataError ("rank mismatch", unsupported dtype, non-finite values).
Matrix load_matrix(const TensorFile& tf, std::string_view name);
WeightMatrix load_weight_matrix(const TensorFile& tf, std::string_view name);

// Encodes a matrix as f32 or f64. Narrowing to f32 rounds to nearest.
TensorBlob matrix_blob(std::string name, const Matrix& m, DType dtype);
TensorBlob weight_blob(std::string name, const WeightMatrix& w);
std::vector<std::byte> encode_values(std::span<const double> values, DType dtype);

struct ActivationDataset {
  Matrix hidden_states;              // n x d, one hidden state per row
  std::vector<std::uint8_t> labels;  // 1 = toxic, 0 = non-toxic
  nlohmann::json meta = nlohmann::json::object();

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return hidden_states.cols(); }
  std::size_t toxic_count() const noexcept;
  std::size_t nontoxic_count() const noexcept { return size() - toxic_count(); }
};

inline constexpr std::string_view kHiddenStatesEntry = "hidden_states";
inline constexpr std::string_view kLabelsEntry = "labels";
inline constexpr std::string_view kDatasetMetaKey = "meta";

// Errors: NotFoundError for missing reserved entries; DataError for
// "shape mismatch", "invalid label" or non-finite states.
ActivationDataset load_activation_dataset(const TensorFile& tf);

// Hidden states are stored as float32. `extra` entries are appended after
// the reserved ones.
void write_activation_dataset(const std::filesystem::path& path, const ActivationDataset& ds,
                              std::span<const TensorBlob> extra = {});

// Writes `text` atomically (temp file + rename).
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);

}  // namespace eshift
