#include "calmargin/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

namespace calmargin {

namespace {

static_assert(std::endian::native == std::endian::little,
              "CALT encoding assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'A', 'L', 'T'};
// Payloads beyond 16 GiB are treated as corrupt headers.
constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 34;

template <typename T>
void append_raw(std::vector<std::uint8_t>& out, const T* data, std::size_t count) {
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(data);
  out.insert(out.end(), bytes, bytes + count * sizeof(T));
}

std::uint64_t element_count(const std::vector<std::uint32_t>& dims) {
  std::uint64_t count = 1;
  for (std::uint32_t d : dims) {
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d) {
      fail(ErrorCode::kDimensionOverflow, "dimension product overflows");
    }
    count *= d;
  }
  return count;
}

template <typename TensorT>
std::vector<std::uint8_t> encode_impl(const TensorT& t, DType dtype) {
  require(t.dims.size() <= 255, ErrorCode::kDimensionOverflow, "rank exceeds 255");
  require(element_count(t.dims) == t.data.size(), ErrorCode::kShapeMismatch,
          "tensor data size does not match dims");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kCaltVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(t.dims.size()));
  append_raw(out, t.dims.data(), t.dims.size());
  append_raw(out, t.data.data(), t.data.size());
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor) {
  if (const auto* f = std::get_if<Float64Tensor>(&tensor)) return encode_impl(*f, DType::kFloat64);
  return encode_impl(std::get<Int32Tensor>(tensor), DType::kInt32);
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 7, ErrorCode::kTruncatedPayload, "header shorter than 7 bytes");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::kBadMagic, "bad magic");
  require(bytes[4] == kCaltVersion, ErrorCode::kBadVersion,
          "unsupported version " + std::to_string(bytes[4]));
  const std::uint8_t dtype = bytes[5];
  require(dtype <= 1, ErrorCode::kDtypeMismatch, "unknown dtype code " + std::to_string(dtype));
  const std::size_t rank = bytes[6];
  std::size_t offset = 7;
  require(bytes.size() >= offset + 4 * rank, ErrorCode::kTruncatedPayload, "truncated dims");
  std::vector<std::uint32_t> dims(rank);
  std::memcpy(dims.data(), bytes.data() + offset, 4 * rank);
  offset += 4 * rank;

  const std::uint64_t count = element_count(dims);
  const std::uint64_t width = dtype == 0 ? 8 : 4;
  require(count <= kMaxPayloadBytes / width, ErrorCode::kDimensionOverflow,
          "payload size exceeds limit");
  const std::uint64_t payload = count * width;
  require(bytes.size() - offset >= payload, ErrorCode::kTruncatedPayload, "truncated payload");
  require(bytes.size() - offset == payload, ErrorCode::kTruncatedPayload,
          "trailing bytes after payload");

  if (dtype == 0) {
    Float64Tensor t{std::move(dims), std::vector<double>(count)};
    std::memcpy(t.data.data(), bytes.data() + offset, payload);
    return t;
  }
  Int32Tensor t{std::move(dims), std::vector<std::int32_t>(count)};
  std::memcpy(t.data.data(), bytes.data() + offset, payload);
  return t;
}

void save_tensor(const Tensor& tensor, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

Tensor to_tensor(const LogitField& field) {
  return Float64Tensor{{static_cast<std::uint32_t>(field.height()),
                        static_cast<std::uint32_t>(field.width()),
                        static_cast<std::uint32_t>(field.num_classes())},
                       field.values()};
}

Tensor to_tensor(const LabelField& field) {
  return Int32Tensor{{static_cast<std::uint32_t>(field.height()),
                      static_cast<std::uint32_t>(field.width())},
                     field.values()};
}

LogitField to_logit_field(const Tensor& tensor) {
  const auto* t = std::get_if<Float64Tensor>(&tensor);
  require(t != nullptr, ErrorCode::kDtypeMismatch, "logit field requires float64 data");
  require(t->dims.size() == 3, ErrorCode::kShapeMismatch, "logit field requires rank 3");
  return LogitField(t->dims[0], t->dims[1], t->dims[2], t->data);
}

LabelField to_label_field(const Tensor& tensor, std::size_t num_classes,
                          std::size_t background_class) {
  const auto* t = std::get_if<Int32Tensor>(&tensor);
  require(t != nullptr, ErrorCode::kDtypeMismatch, "label field requires int32 data");
  require(t->dims.size() == 2, ErrorCode::kShapeMismatch, "label field requires rank 2");
  return LabelField(t->dims[0], t->dims[1], num_classes, t->data, background_class);
}

void save_tensor(const LogitField& field, const std::filesystem::path& path) {
  save_tensor(to_tensor(field), path);
}

void save_tensor(const LabelField& field, const std::filesystem::path& path) {
  save_tensor(to_tensor(field), path);
}

}  // namespace calmargin
