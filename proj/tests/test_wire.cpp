#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstring>
#include <limits>
#include <set>

#include "fedvib/cm/training.hpp"
#include "fedvib/errors.hpp"
#include "fedvib/fed/weights.hpp"
#include "fedvib/fed/wire.hpp"
#include "support.hpp"

using namespace fedvib;
using namespace fedvib::fed;
using namespace fedvib::testing;

namespace {

std::string random_name(Rng& rng) {
  std::string s;
  const std::size_t n = 1 + rng.below(24);
  for (std::size_t i = 0; i < n; ++i) s += char('a' + rng.below(26));
  return s;
}

// Random layout with unique names; values include the awkward float cases.
ModelWeights random_weights(Rng& rng) {
  ModelWeights w;
  std::set<std::string> used;
  const std::size_t count = 1 + rng.below(8);
  while (w.tensors.size() < count) {
    auto name = random_name(rng);
    if (!used.insert(name).second) continue;
    auto t = random_tensor(rng, random_shape(rng, 7), -10.0, 10.0);
    for (auto& v : t.values()) {
      switch (rng.below(40)) {
        case 0: v = std::numeric_limits<float>::quiet_NaN(); break;
        case 1: v = -std::numeric_limits<float>::infinity(); break;
        case 2: v = -0.0f; break;
        case 3: v = std::numeric_limits<float>::denorm_min(); break;
        default: break;
      }
    }
    w.tensors.push_back({std::move(name), std::move(t)});
  }
  return w;
}

WeightDelta random_delta(Rng& rng) {
  const auto a = random_weights(rng);
  auto b = a;
  for (auto& t : b.tensors)
    for (auto& v : t.tensor.values()) v = float(rng.normal());
  auto d = compute_delta(b, a, rng.below(1000));
  for (auto& t : d.tensors)
    if (!t.values.empty() && rng.below(4) == 0) t.values[0] = std::numeric_limits<double>::max();
  return d;
}

bool same_bits(float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); }
bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

// Sizes computed from the documented layout, independently of the codec.
std::size_t expected_weights_size(const ModelWeights& w) {
  std::size_t n = 4 + 1 + 4;
  for (const auto& t : w.tensors) n += 2 + t.name.size() + 1 + 8 * t.tensor.rank() + 4 * t.tensor.size();
  return n;
}

std::size_t expected_delta_size(const WeightDelta& d) {
  std::size_t n = 4 + 1 + 8 + 4;
  for (const auto& t : d.tensors) n += 2 + t.name.size() + 1 + 8 * t.shape.size() + 8 * t.values.size();
  return n;
}

// Walks an encoded payload using only the field schema. Returns the tensor
// names found in weight or delta fields.
std::vector<std::string> walk_schema(const MessageSchema& schema, std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  std::vector<std::string> names;
  auto blob = [&](bool delta) {
    r.raw(4);
    r.u8();
    if (delta) r.u64();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      names.push_back(r.str16());
      const auto rank = r.u8();
      std::uint64_t numel = 1;
      for (std::uint8_t k = 0; k < rank; ++k) numel *= r.u64();
      r.raw(numel * (delta ? 8 : 4));
    }
  };
  for (const auto& f : schema.fields) {
    switch (f.kind) {
      case FieldKind::identifier: r.str16(); break;
      case FieldKind::counter: r.u64(); break;
      case FieldKind::status_code: r.u16(); break;
      case FieldKind::diagnostic: r.str32(); break;
      case FieldKind::model_weights: blob(false); break;
      case FieldKind::model_delta: blob(true); break;
    }
  }
  r.expect_end("schema walk");
  return names;
}

Message sample_message(MessageType type, Rng& rng) {
  switch (type) {
    case MessageType::register_client: return Register{random_name(rng)};
    case MessageType::global_model: return GlobalModel{rng.below(100), random_weights(rng)};
    case MessageType::delta_submission: return DeltaSubmission{random_name(rng), rng.below(100), rng.below(5000), random_delta(rng)};
    case MessageType::ack: return Ack{};
    case MessageType::error: return ErrorMessage{ErrorCode::stale_round, "round " + random_name(rng)};
  }
  return Ack{};
}

constexpr MessageType kAllTypes[] = {MessageType::register_client, MessageType::global_model,
                                     MessageType::delta_submission, MessageType::ack, MessageType::error};

}  // namespace

TEST_SUITE("weights codec") {
  TEST_CASE("100 random weight sets round-trip bitwise with the documented size") {
    Rng rng(1);
    for (int c = 0; c < 100; ++c) {
      CAPTURE(c);
      const auto w = random_weights(rng);
      const auto bytes = serialize_weights(w);
      CHECK(bytes.size() == expected_weights_size(w));
      CHECK(serialized_weights_size(w) == bytes.size());
      const auto back = deserialize_weights(bytes);
      REQUIRE(back.tensors.size() == w.tensors.size());
      CHECK(back.identical(w));
      CHECK(back.fingerprint() == w.fingerprint());
      for (std::size_t k = 0; k < w.tensors.size(); ++k) {
        CHECK(back.tensors[k].name == w.tensors[k].name);
        CHECK(back.tensors[k].tensor.shape() == w.tensors[k].tensor.shape());
        for (std::size_t i = 0; i < w.tensors[k].tensor.size(); ++i)
          REQUIRE(same_bits(back.tensors[k].tensor[i], w.tensors[k].tensor[i]));
      }
    }
  }

  TEST_CASE("layout is little-endian as documented") {
    ModelWeights w;
    w.tensors.push_back({"ab", Tensor({2}, {1.0f, -2.0f})});
    const auto b = serialize_weights(w);
    const Bytes expect{'F', 'V', 'W', '1', 1, 1, 0, 0, 0, 2, 0, 'a', 'b', 1, 2, 0, 0, 0, 0, 0, 0, 0,
                       0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
    CHECK(b == expect);
  }

  TEST_CASE("default model blob size is a constant of the layout") {
    nn::AutoencoderConfig cfg;
    cfg.feature_count = 3;
    const auto a = weights_of(cm::build_autoencoder(cfg, 1));
    const auto b = weights_of(cm::build_autoencoder(cfg, 2));
    const std::size_t P = nn::parameter_count(cfg);
    CHECK(a.parameter_count() == P);
    CHECK(serialize_weights(a).size() == serialize_weights(b).size());
    CHECK(serialize_weights(a).size() == expected_weights_size(a));
    const std::size_t metadata = serialize_weights(a).size() - 4 * P;
    // Header, then 11 tensors: nine 11-character names (encoder.0.W ...) and two
    // 8-character ones, each with a 2-byte length and a rank byte; seven
    // matrices with two dims and four bias vectors with one.
    CHECK(metadata == 9 + 11 * (2 + 1) + (9 * 11 + 2 * 8) + 8 * (7 * 2 + 4 * 1));
  }

  TEST_CASE("every truncation is a parse error") {
    Rng rng(2);
    for (int c = 0; c < 10; ++c) {
      const auto bytes = serialize_weights(random_weights(rng));
      for (std::size_t n = 0; n < bytes.size(); ++n) {
        CHECK_THROWS_AS(deserialize_weights(std::span(bytes).first(n)), ParseError);
      }
      auto longer = bytes;
      longer.push_back(0);
      CHECK_THROWS_AS(deserialize_weights(longer), ParseError);
    }
  }

  TEST_CASE("corrupted blobs parse or fail cleanly") {
    Rng rng(3);
    std::size_t errors = 0, decoded = 0;
    for (int c = 0; c < 3000; ++c) {
      auto bytes = serialize_weights(random_weights(rng));
      const std::size_t flips = 1 + rng.below(4);
      for (std::size_t k = 0; k < flips; ++k) bytes[rng.below(bytes.size())] = std::uint8_t(rng.below(256));
      try {
        const auto w = deserialize_weights(bytes);
        CHECK(serialized_weights_size(w) == bytes.size());
        ++decoded;
      } catch (const ParseError& e) {
        CHECK(e.offset() <= bytes.size());
        ++errors;
      }
    }
    CHECK(errors > 0);
    CHECK(errors + decoded == 3000);
  }

  TEST_CASE("structural rejections") {
    ModelWeights w;
    w.tensors.push_back({"a", Tensor({1}, {1.0f})});
    auto bytes = serialize_weights(w);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_weights(bad), ParseError);
    bad = bytes;
    bad[4] = 2;  // version
    CHECK_THROWS_AS(deserialize_weights(bad), ParseError);
    bad = bytes;
    bad[12] = 4;  // rank beyond the maximum
    CHECK_THROWS_AS(deserialize_weights(bad), ParseError);
    bad = bytes;
    bad[13] = 0xff;  // huge dimension
    bad[20] = 0x7f;
    CHECK_THROWS_AS(deserialize_weights(bad), ParseError);

    w.tensors.push_back({"a", Tensor({1}, {2.0f})});
    CHECK_THROWS_AS(deserialize_weights(serialize_weights(w)), ParseError);  // duplicate name
    ModelWeights empty_name;
    empty_name.tensors.push_back({"", Tensor({1}, {1.0f})});
    CHECK_THROWS_AS(deserialize_weights(serialize_weights(empty_name)), ParseError);
  }
}

TEST_SUITE("delta codec") {
  TEST_CASE("round trip, size and truncation") {
    Rng rng(4);
    for (int c = 0; c < 100; ++c) {
      const auto d = random_delta(rng);
      const auto bytes = serialize_delta(d);
      CHECK(bytes.size() == expected_delta_size(d));
      CHECK(serialized_delta_size(d) == bytes.size());
      const auto back = deserialize_delta(bytes);
      CHECK(back.base_round == d.base_round);
      REQUIRE(back.tensors.size() == d.tensors.size());
      for (std::size_t k = 0; k < d.tensors.size(); ++k) {
        CHECK(back.tensors[k].name == d.tensors[k].name);
        CHECK(back.tensors[k].shape == d.tensors[k].shape);
        for (std::size_t i = 0; i < d.tensors[k].values.size(); ++i)
          REQUIRE(same_bits(back.tensors[k].values[i], d.tensors[k].values[i]));
      }
      const std::size_t cut = rng.below(bytes.size());
      CHECK_THROWS_AS(deserialize_delta(std::span(bytes).first(cut)), ParseError);
    }
  }
}

TEST_SUITE("frames") {
  TEST_CASE("every message type round-trips") {
    Rng rng(5);
    for (int c = 0; c < 20; ++c) {
      for (auto type : kAllTypes) {
        const auto m = sample_message(type, rng);
        const auto frame = encode_frame(m);
        CHECK(frame.size() == frame_size(m));
        CHECK(frame.size() == kFrameHeaderSize + encode_payload(m).size());
        const auto h = decode_frame_header(std::span(frame).first(kFrameHeaderSize));
        CHECK(h.type == type);
        CHECK(h.payload_len == frame.size() - kFrameHeaderSize);
        const auto back = decode_frame(frame);
        REQUIRE(type_of(back) == type);
        CHECK(encode_frame(back) == frame);
      }
    }
  }

  TEST_CASE("header layout") {
    const auto f = encode_frame(Register{"n1"});
    const Bytes expect{'F', 'V', 'W', '1', 1, 1, 4, 0, 0, 0, 0, 0, 0, 0, 2, 0, 'n', '1'};
    CHECK(f == expect);
  }

  TEST_CASE("header rejections") {
    const auto f = encode_frame(Ack{});
    auto bad = f;
    bad[1] = 'X';
    CHECK_THROWS_AS(decode_frame(bad), ParseError);
    bad = f;
    bad[4] = 9;
    CHECK_THROWS_AS(decode_frame(bad), ParseError);
    bad = f;
    bad[5] = 0;
    CHECK_THROWS_AS(decode_frame(bad), ParseError);
    bad = f;
    bad[5] = 6;
    CHECK_THROWS_AS(decode_frame(bad), ParseError);
    bad = f;
    bad[13] = 0x01;  // 2^56 byte payload
    CHECK_THROWS_AS(decode_frame_header(std::span(bad).first(kFrameHeaderSize)), ParseError);
    bad = f;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_frame(bad), ParseError);
  }

  TEST_CASE("offsets inside a payload are frame offsets") {
    const auto f = encode_frame(Register{"abcdef"});
    try {
      decode_frame(std::span(f).first(f.size() - 1));
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.offset() >= kFrameHeaderSize);
    }
  }

  TEST_CASE("truncated and corrupted frames never crash") {
    Rng rng(6);
    std::size_t failures = 0;
    for (int c = 0; c < 400; ++c) {
      auto frame = encode_frame(sample_message(kAllTypes[rng.below(5)], rng));
      if (rng.below(2)) {
        frame.resize(rng.below(frame.size()));
      } else {
        frame[rng.below(frame.size())] ^= std::uint8_t(1 + rng.below(255));
      }
      try {
        decode_frame(frame);
      } catch (const ParseError&) {
        ++failures;
      }
    }
    CHECK(failures > 200);
  }
}

TEST_SUITE("privacy boundary") {
  TEST_CASE("the schema covers every message and matches the encoding") {
    const auto schema = wire_schema();
    REQUIRE(schema.size() == std::size(kAllTypes));
    Rng rng(7);
    for (const auto& s : schema) {
      for (int c = 0; c < 10; ++c) {
        const auto m = sample_message(s.type, rng);
        CHECK_NOTHROW(walk_schema(s, encode_payload(m)));
      }
    }
  }

  TEST_CASE("no message field can carry samples") {
    for (const auto& s : wire_schema()) {
      for (const auto& f : s.fields) {
        // Every field kind is metadata or model parameters; there is no kind
        // for signal data, and bulk fields appear only where models travel.
        const bool bulk = f.kind == FieldKind::model_weights || f.kind == FieldKind::model_delta;
        if (bulk) CHECK((s.type == MessageType::global_model || s.type == MessageType::delta_submission));
        CHECK(f.name.find("sample") == std::string::npos);
        if (f.name.find("window") != std::string::npos) CHECK(f.kind == FieldKind::counter);
      }
    }
  }

  TEST_CASE("model fields carry only parameter tensors of the autoencoder") {
    nn::AutoencoderConfig cfg{10, 3, {8}, 4};
    const auto g = weights_of(cm::build_autoencoder(cfg, 1));
    const auto l = weights_of(cm::build_autoencoder(cfg, 2));
    const auto schema = wire_schema();
    std::set<std::string> params;
    for (const auto& t : g.tensors) params.insert(t.name);
    const Message msgs[] = {GlobalModel{0, g}, DeltaSubmission{"n", 0, 64, compute_delta(l, g)}};
    for (const auto& m : msgs) {
      const auto& s = *std::find_if(schema.begin(), schema.end(), [&](const auto& x) { return x.type == type_of(m); });
      for (const auto& name : walk_schema(s, encode_payload(m))) CHECK(params.count(name) == 1);
    }
  }
}
