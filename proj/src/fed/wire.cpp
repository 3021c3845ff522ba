#include "fedvib/fed/wire.hpp"

#include <bit>
#include <cstring>
#include <set>

#include "fedvib/errors.hpp"

namespace fedvib::fed {

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str16(const std::string& s) {
  if (s.size() > UINT16_MAX) throw ProtocolError("string too long for a u16 length prefix");
  u16(std::uint16_t(s.size()));
  raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void ByteWriter::str32(const std::string& s) {
  if (s.size() > UINT32_MAX) throw ProtocolError("string too long for a u32 length prefix");
  u32(std::uint32_t(s.size()));
  raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void ByteReader::fail(const std::string& what) const { throw ParseError(what, offset()); }

void ByteReader::need(std::size_t n, const char* what) const {
  if (remaining() < n) {
    fail(std::string("truncated input: ") + what + " needs " + std::to_string(n) + " bytes, " +
         std::to_string(remaining()) + " left");
  }
}

std::uint8_t ByteReader::u8() {
  need(1, "byte");
  return bytes_[pos_++];
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n, "byte string");
  auto out = bytes_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string ByteReader::str16() {
  const auto n = u16();
  auto b = raw(n);
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::string ByteReader::str32() {
  const auto n = u32();
  auto b = raw(n);
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

void ByteReader::expect_end(const char* what) const {
  if (remaining() != 0) fail(std::to_string(remaining()) + " trailing bytes after " + what);
}

namespace {

void write_header(ByteWriter& w, const Tensor::Shape& shape, const std::string& name) {
  w.str16(name);
  if (shape.size() > kMaxRank) throw DimensionError("tensor '" + name + "' has rank above 3");
  w.u8(std::uint8_t(shape.size()));
  for (std::size_t d : shape) w.u64(d);
}

/// Reads name, rank and dims; checks that numel * value_size bytes remain.
std::pair<std::string, Tensor::Shape> read_header(ByteReader& r, std::size_t value_size,
                                                  std::set<std::string>& seen) {
  const std::size_t at = r.offset();
  std::string name = r.str16();
  if (name.empty()) throw ParseError("empty tensor name", at);
  if (!seen.insert(name).second) throw ParseError("duplicate tensor name '" + name + "'", at);
  const std::size_t rank_at = r.offset();
  const std::uint8_t rank = r.u8();
  if (rank > kMaxRank) throw ParseError("tensor rank " + std::to_string(rank) + " above 3", rank_at);
  Tensor::Shape shape(rank);
  std::uint64_t numel = 1;
  for (auto& d : shape) {
    const std::size_t dim_at = r.offset();
    const std::uint64_t v = r.u64();
    if (v != 0 && numel > (UINT64_MAX / value_size) / v) throw ParseError("tensor dimensions overflow", dim_at);
    numel *= v;
    d = std::size_t(v);
  }
  if (numel * value_size > r.remaining()) {
    r.fail("truncated input: tensor '" + name + "' declares " + std::to_string(numel) + " values");
  }
  return {std::move(name), std::move(shape)};
}

void expect_magic(ByteReader& r, const std::array<std::uint8_t, 4>& magic, const char* what) {
  const std::size_t at = r.offset();
  auto m = r.raw(4);
  if (!std::equal(m.begin(), m.end(), magic.begin())) throw ParseError(std::string("bad magic for ") + what, at);
  const std::size_t vat = r.offset();
  const auto version = r.u8();
  if (version != kWireVersion) {
    throw ParseError(std::string("unsupported ") + what + " version " + std::to_string(version), vat);
  }
}

std::uint32_t read_count(ByteReader& r) {
  const std::size_t at = r.offset();
  const std::uint32_t n = r.u32();
  // Every tensor takes at least 3 bytes (empty-name prefix and rank).
  if (n > r.remaining() / 3) throw ParseError("tensor count " + std::to_string(n) + " exceeds payload", at);
  return n;
}

void write_weights(ByteWriter& w, const ModelWeights& weights) {
  w.raw(kFrameMagic);
  w.u8(kWireVersion);
  w.u32(std::uint32_t(weights.tensors.size()));
  for (const auto& t : weights.tensors) {
    write_header(w, t.tensor.shape(), t.name);
    for (float v : t.tensor.values()) w.f32(v);
  }
}

ModelWeights read_weights(ByteReader& r) {
  expect_magic(r, kFrameMagic, "weights");
  const auto n = read_count(r);
  ModelWeights out;
  out.tensors.reserve(n);
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < n; ++k) {
    auto [name, shape] = read_header(r, 4, seen);
    std::vector<float> values(element_count(shape));
    for (auto& v : values) v = r.f32();
    out.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void write_delta(ByteWriter& w, const WeightDelta& delta) {
  w.raw(kDeltaMagic);
  w.u8(kWireVersion);
  w.u64(delta.base_round);
  w.u32(std::uint32_t(delta.tensors.size()));
  for (const auto& t : delta.tensors) {
    if (t.values.size() != element_count(t.shape)) {
      throw DimensionError("delta tensor '" + t.name + "' value count does not match its shape");
    }
    write_header(w, t.shape, t.name);
    for (double v : t.values) w.f64(v);
  }
}

WeightDelta read_delta(ByteReader& r) {
  expect_magic(r, kDeltaMagic, "delta");
  WeightDelta out;
  out.base_round = r.u64();
  const auto n = read_count(r);
  out.tensors.reserve(n);
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < n; ++k) {
    auto [name, shape] = read_header(r, 8, seen);
    std::vector<double> values(element_count(shape));
    for (auto& v : values) v = r.f64();
    out.tensors.push_back({std::move(name), std::move(shape), std::move(values)});
  }
  return out;
}

std::size_t tensor_header_size(const std::string& name, std::size_t rank) { return 2 + name.size() + 1 + 8 * rank; }

}  // namespace

Bytes serialize_weights(const ModelWeights& weights) {
  ByteWriter w;
  write_weights(w, weights);
  return w.take();
}

ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto out = read_weights(r);
  r.expect_end("weights");
  return out;
}

std::size_t serialized_weights_size(const ModelWeights& weights) {
  std::size_t n = 9;
  for (const auto& t : weights.tensors) n += tensor_header_size(t.name, t.tensor.rank()) + 4 * t.tensor.size();
  return n;
}

Bytes serialize_delta(const WeightDelta& delta) {
  ByteWriter w;
  write_delta(w, delta);
  return w.take();
}

WeightDelta deserialize_delta(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto out = read_delta(r);
  r.expect_end("delta");
  return out;
}

std::size_t serialized_delta_size(const WeightDelta& delta) {
  std::size_t n = 17;
  for (const auto& t : delta.tensors) n += tensor_header_size(t.name, t.shape.size()) + 8 * t.values.size();
  return n;
}

std::string to_string(MessageType type) {
  switch (type) {
    case MessageType::register_client: return "Register";
    case MessageType::global_model: return "GlobalModel";
    case MessageType::delta_submission: return "DeltaSubmission";
    case MessageType::ack: return "Ack";
    case MessageType::error: return "Error";
  }
  return "Unknown(" + std::to_string(int(type)) + ")";
}

std::string to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::duplicate_client: return "duplicate_client";
    case ErrorCode::layout_mismatch: return "layout_mismatch";
    case ErrorCode::round_aborted: return "round_aborted";
    case ErrorCode::unexpected_message: return "unexpected_message";
    case ErrorCode::stale_round: return "stale_round";
  }
  return "unknown(" + std::to_string(int(code)) + ")";
}

MessageType type_of(const Message& message) {
  return std::visit(
      [](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Register>) return MessageType::register_client;
        else if constexpr (std::is_same_v<T, GlobalModel>) return MessageType::global_model;
        else if constexpr (std::is_same_v<T, DeltaSubmission>) return MessageType::delta_submission;
        else if constexpr (std::is_same_v<T, Ack>) return MessageType::ack;
        else return MessageType::error;
      },
      message);
}

Bytes encode_payload(const Message& message) {
  ByteWriter w;
  std::visit(
      [&w](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Register>) {
          w.str16(m.client_id);
        } else if constexpr (std::is_same_v<T, GlobalModel>) {
          w.u64(m.round);
          write_weights(w, m.weights);
        } else if constexpr (std::is_same_v<T, DeltaSubmission>) {
          w.str16(m.client_id);
          w.u64(m.round);
          w.u64(m.windows_trained);
          write_delta(w, m.delta);
        } else if constexpr (std::is_same_v<T, ErrorMessage>) {
          w.u16(std::uint16_t(m.code));
          w.str32(m.text);
        }
      },
      message);
  return w.take();
}

Message decode_payload(MessageType type, std::span<const std::uint8_t> payload) {
  ByteReader r(payload, kFrameHeaderSize);
  Message out;
  switch (type) {
    case MessageType::register_client:
      out = Register{r.str16()};
      break;
    case MessageType::global_model: {
      GlobalModel m;
      m.round = r.u64();
      m.weights = read_weights(r);
      out = std::move(m);
      break;
    }
    case MessageType::delta_submission: {
      DeltaSubmission m;
      m.client_id = r.str16();
      m.round = r.u64();
      m.windows_trained = r.u64();
      m.delta = read_delta(r);
      out = std::move(m);
      break;
    }
    case MessageType::ack:
      out = Ack{};
      break;
    case MessageType::error: {
      const std::size_t at = r.offset();
      const auto code = r.u16();
      if (code < 1 || code > 5) throw ParseError("unknown error code " + std::to_string(code), at);
      out = ErrorMessage{ErrorCode(code), r.str32()};
      break;
    }
    default:
      throw ParseError("unknown message type " + std::to_string(int(type)), 5);
  }
  r.expect_end(to_string(type).c_str());
  return out;
}

Bytes encode_frame(const Message& message) {
  const Bytes payload = encode_payload(message);
  ByteWriter w;
  w.raw(kFrameMagic);
  w.u8(kWireVersion);
  w.u8(std::uint8_t(type_of(message)));
  w.u64(payload.size());
  w.raw(payload);
  return w.take();
}

FrameHeader decode_frame_header(std::span<const std::uint8_t> header) {
  ByteReader r(header.first(std::min(header.size(), kFrameHeaderSize)));
  expect_magic(r, kFrameMagic, "frame");
  const auto type = r.u8();
  if (type < 1 || type > 5) throw ParseError("unknown message type " + std::to_string(type), 5);
  FrameHeader h;
  h.type = MessageType(type);
  h.payload_len = r.u64();
  if (h.payload_len > kMaxPayloadSize) throw ParseError("payload length above limit", 6);
  return h;
}

Message decode_frame(std::span<const std::uint8_t> frame) {
  const FrameHeader h = decode_frame_header(frame);
  const std::size_t available = frame.size() - kFrameHeaderSize;
  if (available < h.payload_len) {
    throw ParseError("truncated frame: payload needs " + std::to_string(h.payload_len) + " bytes, " +
                         std::to_string(available) + " present",
                     frame.size());
  }
  if (available > h.payload_len) {
    throw ParseError("trailing bytes after frame payload", kFrameHeaderSize + std::size_t(h.payload_len));
  }
  return decode_payload(h.type, frame.subspan(kFrameHeaderSize));
}

std::size_t frame_size(const Message& message) {
  const std::size_t payload = std::visit(
      [](const auto& m) -> std::size_t {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, Register>) return 2 + m.client_id.size();
        else if constexpr (std::is_same_v<T, GlobalModel>) return 8 + serialized_weights_size(m.weights);
        else if constexpr (std::is_same_v<T, DeltaSubmission>)
          return 2 + m.client_id.size() + 16 + serialized_delta_size(m.delta);
        else if constexpr (std::is_same_v<T, Ack>) return 0;
        else return 2 + 4 + m.text.size();
      },
      message);
  return kFrameHeaderSize + payload;
}

std::vector<MessageSchema> wire_schema() {
  return {
      {MessageType::register_client, {{"client_id", FieldKind::identifier}}},
      {MessageType::global_model, {{"round", FieldKind::counter}, {"weights", FieldKind::model_weights}}},
      {MessageType::delta_submission,
       {{"client_id", FieldKind::identifier},
        {"round", FieldKind::counter},
        {"windows_trained", FieldKind::counter},
        {"delta", FieldKind::model_delta}}},
      {MessageType::ack, {}},
      {MessageType::error, {{"code", FieldKind::status_code}, {"text", FieldKind::diagnostic}}},
  };
}

}  // namespace fedvib::fed
