#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedvib/fed/weights.hpp"

namespace fedvib::fed {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::array<std::uint8_t, 4> kFrameMagic{'F', 'V', 'W', '1'};
inline constexpr std::array<std::uint8_t, 4> kDeltaMagic{'F', 'V', 'D', '1'};
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kMaxRank = 3;
/// magic(4) + version(1) + msg_type(1) + payload_len(8)
inline constexpr std::size_t kFrameHeaderSize = 14;
/// Frames above this size are rejected before any allocation.
inline constexpr std::uint64_t kMaxPayloadSize = std::uint64_t{1} << 32;

/// Little-endian append-only encoder.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v);
  void f64(double v);
  void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  /// u16 length prefix + bytes.
  void str16(const std::string& s);
  /// u32 length prefix + bytes.
  void str32(const std::string& s);

  std::size_t size() const { return buf_.size(); }
  Bytes take() { return std::move(buf_); }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }

  Bytes buf_;
};

/// Bounds-checked little-endian decoder; every failure is a ParseError that
/// carries the offending byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, std::size_t base_offset = 0)
      : bytes_(bytes), base_(base_offset) {}

  std::uint8_t u8();
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32();
  double f64();
  std::span<const std::uint8_t> raw(std::size_t n);
  std::string str16();
  std::string str32();

  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  /// Throws unless every byte was consumed.
  void expect_end(const char* what) const;
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n, const char* what) const;

  template <typename T>
  T get_le() {
    need(sizeof(T), "integer");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(T(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

// --- weights and deltas ----------------------------------------------------

/// Layout: "FVW1" | version u8 | tensor_count u32 | per tensor:
/// name_len u16 | name | rank u8 | dims u64 x rank | values f32 x numel.
Bytes serialize_weights(const ModelWeights& weights);
ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes);
/// 9 + sum(2 + name_len + 1 + 8 * rank + 4 * numel).
std::size_t serialized_weights_size(const ModelWeights& weights);

/// Layout: "FVD1" | version u8 | base_round u64 | tensor_count u32 | tensors
/// as in the weights blob with f64 values.
Bytes serialize_delta(const WeightDelta& delta);
WeightDelta deserialize_delta(std::span<const std::uint8_t> bytes);
/// 17 + sum(2 + name_len + 1 + 8 * rank + 8 * numel).
std::size_t serialized_delta_size(const WeightDelta& delta);

// --- messages --------------------------------------------------------------

enum class MessageType : std::uint8_t {
  register_client = 1,
  global_model = 2,
  delta_submission = 3,
  ack = 4,
  error = 5,
};

std::string to_string(MessageType type);

struct Register {
  std::string client_id;
};

struct GlobalModel {
  std::uint64_t round = 0;
  ModelWeights weights;
};

struct DeltaSubmission {
  std::string client_id;
  std::uint64_t round = 0;
  std::uint64_t windows_trained = 0;
  WeightDelta delta;
};

struct Ack {};

enum class ErrorCode : std::uint16_t {
  duplicate_client = 1,
  layout_mismatch = 2,
  round_aborted = 3,
  unexpected_message = 4,
  stale_round = 5,
};

std::string to_string(ErrorCode code);

struct ErrorMessage {
  ErrorCode code = ErrorCode::unexpected_message;
  std::string text;
};

using Message = std::variant<Register, GlobalModel, DeltaSubmission, Ack, ErrorMessage>;

MessageType type_of(const Message& message);

Bytes encode_payload(const Message& message);
Message decode_payload(MessageType type, std::span<const std::uint8_t> payload);

/// Frame: "FVW1" | version u8 | msg_type u8 | payload_len u64 | payload.
Bytes encode_frame(const Message& message);

struct FrameHeader {
  MessageType type = MessageType::ack;
  std::uint64_t payload_len = 0;
};

/// Parses the fixed 14-byte header; rejects bad magic, version, type and
/// oversized payloads.
FrameHeader decode_frame_header(std::span<const std::uint8_t> header);

/// Decodes one complete frame; trailing bytes are an error.
Message decode_frame(std::span<const std::uint8_t> frame);

/// Size of encode_frame(message) without encoding it.
std::size_t frame_size(const Message& message);

// --- schema ------------------------------------------------------------------

enum class FieldKind {
  identifier,     // short text naming a participant
  counter,        // unsigned integer
  status_code,    // enumerated code
  diagnostic,     // human-readable text
  model_weights,  // named float32 parameter tensors
  model_delta,    // named float64 parameter differences
};

struct FieldSchema {
  std::string name;
  FieldKind kind;
};

struct MessageSchema {
  MessageType type;
  std::vector<FieldSchema> fields;
};

/// Field-level description of every message, in encoding order.
std::vector<MessageSchema> wire_schema();

}  // namespace fedvib::fed
