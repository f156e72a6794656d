#include "eshift/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <unistd.h>

#include "eshift/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "payloads are read and written in host order; big-endian hosts are unsupported");

namespace eshift {
namespace {

using json = nlohmann::json;

std::uint64_t read_le64(std::span<const std::byte> b) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= std::to_integer<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void append_le64(std::vector<std::byte>& out, std::uint64_t v) {
  for (std::size_t i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
}

// Offset of a key inside the header text, for error messages.
std::uint64_t key_offset(const std::string& header, const std::string& key) {
  const auto pos = header.find('"' + key + '"');
  return 8 + (pos == std::string::npos ? 0 : pos);
}

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return false;
  out = a * b;
  return true;
}

std::string temp_path_for(const std::filesystem::path& path) {
  return path.string() + ".tmp." + std::to_string(::getpid());
}

void write_bytes_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  const auto tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw IoError("write failed: " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
  }
}

}  // namespace

std::size_t dtype_size(DType t) noexcept {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

std::string_view dtype_name(DType t) noexcept {
  switch (t) {
    case DType::f32: return "F32";
    case DType::f64: return "F64";
    case DType::u8: return "U8";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view name) noexcept {
  if (name == "F32") return DType::f32;
  if (name == "F64") return DType::f64;
  if (name == "U8") return DType::u8;
  return std::nullopt;
}

std::uint64_t TensorEntry::element_count() const noexcept {
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

bool TensorFile::contains(std::string_view name) const noexcept {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
}

const TensorEntry& TensorFile::entry(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw NotFoundError("entry not found: " + std::string(name));
}

std::vector<std::byte> TensorFile::payload(std::string_view name) const {
  const auto& e = entry(name);
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path_.string());
  std::vector<std::byte> buf(e.byte_length());
  in.seekg(static_cast<std::streamoff>(data_offset() + e.begin));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw IoError("short read of entry " + e.name + " in " + path_.string());
  return buf;
}

TensorFile parse_tensor_header(std::span<const std::byte> bytes, std::uint64_t file_size,
                               const std::filesystem::path& path) {
  if (bytes.size() < 8 || file_size < 8) throw FormatError("truncated header-length prefix", 0);
  const std::uint64_t header_len = read_le64(bytes);
  if (header_len > file_size - 8) throw FormatError("header length exceeds file size", 0);
  if (bytes.size() < 8 + header_len) throw FormatError("truncated header", bytes.size());

  const std::string header(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  json doc;
  try {
    doc = json::parse(header);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("invalid JSON header: ") + e.what(), 8 + e.byte);
  }
  if (!doc.is_object()) throw FormatError("header is not a JSON object", 8);

  TensorFile tf;
  tf.path_ = path;
  tf.header_length_ = header_len;
  tf.file_size_ = file_size;
  const std::uint64_t data_size = file_size - 8 - header_len;

  for (const auto& [key, value] : doc.items()) {
    const std::uint64_t at = key_offset(header, key);
    if (key == "__metadata__") {
      if (!value.is_object()) throw FormatError("__metadata__ must be an object", at);
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) throw FormatError("__metadata__ values must be strings", at);
        tf.metadata_.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
        !value.contains("data_offsets"))
      throw FormatError("entry '" + key + "' lacks dtype/shape/data_offsets", at);

    TensorEntry e;
    e.name = key;
    const auto& dt = value["dtype"];
    const auto parsed = dt.is_string() ? parse_dtype(dt.get<std::string>()) : std::nullopt;
    if (!parsed) throw FormatError("unsupported dtype " + dt.dump() + " for '" + key + "'", at);
    e.dtype = *parsed;

    const auto& shape = value["shape"];
    if (!shape.is_array()) throw FormatError("shape of '" + key + "' is not an array", at);
    for (const auto& s : shape) {
      if (!s.is_number_unsigned()) throw FormatError("shape of '" + key + "' has a non-integer extent", at);
      e.shape.push_back(s.get<std::uint64_t>());
    }
    const auto& offs = value["data_offsets"];
    if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned())
      throw FormatError("data_offsets of '" + key + "' must be two integers", at);
    e.begin = offs[0].get<std::uint64_t>();
    e.end = offs[1].get<std::uint64_t>();
    if (e.end < e.begin) throw FormatError("reversed data_offsets for '" + key + "'", at);
    if (e.end > data_size)
      throw FormatError("out-of-bounds tensor '" + key + "'", 8 + header_len + e.begin);

    std::uint64_t expected = dtype_size(e.dtype);
    for (auto s : e.shape)
      if (!checked_mul(expected, s, expected)) throw FormatError("shape of '" + key + "' overflows", at);
    if (expected != e.byte_length())
      throw FormatError("byte range of '" + key + "' does not match shape and dtype", at);
    tf.entries_.push_back(std::move(e));
  }

  std::stable_sort(tf.entries_.begin(), tf.entries_.end(),
                   [](const auto& a, const auto& b) { return a.begin < b.begin; });
  std::uint64_t cursor = 0;
  for (const auto& e : tf.entries_) {
    if (e.begin < cursor)
      throw FormatError("overlapping tensor '" + e.name + "'", 8 + header_len + e.begin);
    if (e.begin > cursor) throw FormatError("gap before tensor '" + e.name + "'", 8 + header_len + cursor);
    cursor = e.end;
  }
  if (cursor != data_size) throw FormatError("trailing bytes after last tensor", 8 + header_len + cursor);
  return tf;
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  std::vector<std::byte> prefix(std::min<std::uint64_t>(size, 8));
  in.read(reinterpret_cast<char*>(prefix.data()), static_cast<std::streamsize>(prefix.size()));
  if (size < 8) throw FormatError("truncated header-length prefix", 0);
  const std::uint64_t header_len = read_le64(prefix);
  if (header_len > size - 8) throw FormatError("header length exceeds file size", 0);

  prefix.resize(8 + header_len);
  in.read(reinterpret_cast<char*>(prefix.data() + 8), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("short read of header: " + path.string());
  return parse_tensor_header(prefix, size, path);
}

std::vector<std::byte> encode_tensor_file(std::span<const TensorBlob> blobs,
                                          const std::map<std::string, std::string>& metadata) {
  json header = json::object();
  std::uint64_t cursor = 0;
  for (const auto& b : blobs) {
    std::uint64_t expected = dtype_size(b.dtype);
    for (auto s : b.shape) expected *= s;
    if (expected != b.bytes.size())
      throw std::invalid_argument("encode_tensor_file: '" + b.name + "' bytes do not match shape");
    if (b.name == "__metadata__" || header.contains(b.name))
      throw std::invalid_argument("encode_tensor_file: duplicate or reserved name '" + b.name + "'");
    header[b.name] = {{"dtype", std::string(dtype_name(b.dtype))},
                      {"shape", b.shape},
                      {"data_offsets", {cursor, cursor + b.bytes.size()}}};
    cursor += b.bytes.size();
  }
  if (!metadata.empty()) header["__metadata__"] = metadata;

  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out;
  out.reserve(8 + text.size() + cursor);
  append_le64(out, text.size());
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  for (const auto& b : blobs) out.insert(out.end(), b.bytes.begin(), b.bytes.end());
  return out;
}

void write_tensor_file(const std::filesystem::path& path, std::span<const TensorBlob> blobs,
                       const std::map<std::string, std::string>& metadata) {
  write_bytes_atomic(path, encode_tensor_file(blobs, metadata));
}

std::vector<TensorBlob> read_all_blobs(const TensorFile& tf) {
  std::vector<TensorBlob> out;
  out.reserve(tf.entries().size());
  for (const auto& e : tf.entries()) out.push_back({e.name, e.dtype, e.shape, tf.payload(e.name)});
  return out;
}

void write_with_replaced_payload(const TensorFile& src, std::string_view name,
                                 std::span<const std::byte> bytes, const std::filesystem::path& dst) {
  const auto& e = src.entry(name);
  if (bytes.size() != e.byte_length())
    throw std::invalid_argument("replacement for '" + e.name + "' has the wrong byte length");
  auto all = read_file_bytes(src.path());
  if (all.size() != src.file_size()) throw IoError("source changed since it was parsed: " + src.path().string());
  std::copy(bytes.begin(), bytes.end(), all.begin() + static_cast<std::ptrdiff_t>(src.data_offset() + e.begin));
  write_bytes_atomic(dst, all);
}

Matrix load_matrix(const TensorFile& tf, std::string_view name) {
  const auto& e = tf.entry(name);
  if (e.shape.size() != 2)
    throw DataError("rank mismatch: '" + e.name + "' has rank " + std::to_string(e.shape.size()) + ", expected 2");
  if (e.dtype != DType::f32 && e.dtype != DType::f64)
    throw DataError("'" + e.name + "' has dtype " + std::string(dtype_name(e.dtype)) + ", expected F32 or F64");
  const auto bytes = tf.payload(name);
  const auto rows = static_cast<std::size_t>(e.shape[0]);
  const auto cols = static_cast<std::size_t>(e.shape[1]);
  std::vector<double> values(rows * cols);
  if (e.dtype == DType::f64) {
    std::memcpy(values.data(), bytes.data(), bytes.size());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      values[i] = f;
    }
  }
  Matrix m(rows, cols, std::move(values));
  if (!m.all_finite()) throw DataError("'" + e.name + "' contains non-finite values");
  return m;
}

WeightMatrix load_weight_matrix(const TensorFile& tf, std::string_view name) {
  WeightMatrix w{load_matrix(tf, name), tf.entry(name).dtype};
  if (w.rows() == 0 || w.cols() == 0) throw DataError("'" + std::string(name) + "' is empty");
  return w;
}

std::vector<std::byte> encode_values(std::span<const double> values, DType dtype) {
  std::vector<std::byte> out(values.size() * dtype_size(dtype));
  switch (dtype) {
    case DType::f64:
      std::memcpy(out.data(), values.data(), out.size());
      break;
    case DType::f32:
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto f = static_cast<float>(values[i]);
        std::memcpy(out.data() + 4 * i, &f, 4);
      }
      break;
    case DType::u8:
      throw std::invalid_argument("encode_values: U8 is reserved for labels");
  }
  return out;
}

TensorBlob matrix_blob(std::string name, const Matrix& m, DType dtype) {
  return {std::move(name), dtype, {m.rows(), m.cols()}, encode_values(m.data(), dtype)};
}

TensorBlob weight_blob(std::string name, const WeightMatrix& w) {
  return matrix_blob(std::move(name), w.values, w.dtype);
}

std::size_t ActivationDataset::toxic_count() const noexcept {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

ActivationDataset load_activation_dataset(const TensorFile& tf) {
  ActivationDataset ds;
  ds.hidden_states = load_matrix(tf, kHiddenStatesEntry);
  const auto& le = tf.entry(kLabelsEntry);
  if (le.dtype != DType::u8) throw DataError("labels must be U8");
  if (le.shape.size() != 1 || le.shape[0] != ds.hidden_states.rows())
    throw DataError("shape mismatch: " + std::to_string(ds.hidden_states.rows()) + " hidden states but labels of " +
                    (le.shape.size() == 1 ? std::to_string(le.shape[0]) : std::string("rank ") +
                                                                              std::to_string(le.shape.size())));
  if (ds.hidden_states.rows() == 0) throw DataError("dataset has no rows");
  const auto raw = tf.payload(kLabelsEntry);
  ds.labels.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto v = std::to_integer<std::uint8_t>(raw[i]);
    if (v > 1) throw DataError("invalid label " + std::to_string(v) + " at row " + std::to_string(i));
    ds.labels.push_back(v);
  }
  if (const auto it = tf.metadata().find(std::string(kDatasetMetaKey)); it != tf.metadata().end()) {
    try {
      ds.meta = json::parse(it->second);
    } catch (const json::parse_error&) {
      throw DataError("dataset metadata is not valid JSON");
    }
  }
  return ds;
}

void write_activation_dataset(const std::filesystem::path& path, const ActivationDataset& ds,
                              std::span<const TensorBlob> extra) {
  if (ds.labels.size() != ds.hidden_states.rows()) throw DataError("shape mismatch between states and labels");
  std::vector<TensorBlob> blobs;
  blobs.push_back(matrix_blob(std::string(kHiddenStatesEntry), ds.hidden_states, DType::f32));
  TensorBlob labels{std::string(kLabelsEntry), DType::u8, {ds.labels.size()}, {}};
  for (auto v : ds.labels) labels.bytes.push_back(static_cast<std::byte>(v));
  blobs.push_back(std::move(labels));
  blobs.insert(blobs.end(), extra.begin(), extra.end());
  write_tensor_file(path, blobs, {{std::string(kDatasetMetaKey), ds.meta.dump()}});
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_bytes_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  in.seekg(0, std::ios::end);
  std::vector<std::byte> buf(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw IoError("short read: " + path.string());
  return buf;
}

}  // namespace eshift
