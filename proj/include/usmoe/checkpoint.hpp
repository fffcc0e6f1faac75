// Copyright 2026 The usmoe-lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "usmoe/moe_layer.hpp"

namespace usmoe {

// Parameter checkpoint: one JSON document,
//   {"format": "usmoe-checkpoint", "version": 1,
//    "dims": {"d": .., "d_ff": .., "num_experts": ..},
//    "activation": "tanh" | "linear", "dtype": "float64-le",
//    "router": <b64>,
//    "experts": [{"w1": <b64>, "b1": <b64>, "w2": <b64>, "b2": <b64>}, ...]}
// Each <b64> is standard base64 (with '=' padding) of the row-major values
// as IEEE-754 binary64 little-endian bytes.
namespace checkpoint {

inline constexpr std::string_view kFormat = "usmoe-checkpoint";
inline constexpr int kVersion = 1;

namespace detail {

inline constexpr char kAlphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = in[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw std::invalid_argument("checkpoint: bad base64 length");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      if (in[i + k] == '=' && i + 4 == in.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(in[i + k]);
        if (v[k] < 0 || pad) throw std::invalid_argument("checkpoint: bad base64 character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

inline std::string encode_values(std::span<const double> values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  return base64_encode(bytes);
}

inline std::vector<double> decode_values(std::string_view text, std::size_t expected) {
  const auto bytes = base64_decode(text);
  if (bytes.size() != expected * 8) {
    throw std::invalid_argument("checkpoint: array holds " + std::to_string(bytes.size() / 8) +
                                " values, expected " + std::to_string(expected));
  }
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(bytes[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const MoeLayerParams& p) {
  using detail::encode_values;
  nlohmann::json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["dims"] = {{"d", p.d()}, {"d_ff", p.d_ff()}, {"num_experts", p.num_experts()}};
  j["activation"] = to_string(p.activation);
  j["dtype"] = "float64-le";
  j["router"] = encode_values(p.router.data());
  j["experts"] = nlohmann::json::array();
  for (const auto& e : p.experts) {
    j["experts"].push_back({{"w1", encode_values(e.w1.data())},
                            {"b1", encode_values(e.b1)},
                            {"w2", encode_values(e.w2.data())},
                            {"b2", encode_values(e.b2)}});
  }
  return j;
}

inline MoeLayerParams from_json(const nlohmann::json& j) {
  using detail::decode_values;
  if (j.value("format", "") != kFormat || j.value("version", 0) != kVersion) {
    throw std::invalid_argument("checkpoint: unrecognized format or version");
  }
  if (j.value("dtype", "") != "float64-le") throw std::invalid_argument("checkpoint: bad dtype");
  const std::size_t d = j.at("dims").at("d");
  const std::size_t f = j.at("dims").at("d_ff");
  const std::size_t n = j.at("dims").at("num_experts");
  MoeLayerParams p;
  p.activation = parse_activation(j.at("activation"));
  p.router = Matrix(d, n, decode_values(j.at("router").get<std::string>(), d * n));
  const auto& ex = j.at("experts");
  if (ex.size() != n) throw std::invalid_argument("checkpoint: expert count mismatch");
  for (const auto& e : ex) {
    p.experts.push_back({Matrix(d, f, decode_values(e.at("w1").get<std::string>(), d * f)),
                         decode_values(e.at("b1").get<std::string>(), f),
                         Matrix(f, d, decode_values(e.at("w2").get<std::string>(), f * d)),
                         decode_values(e.at("b2").get<std::string>(), d)});
  }
  p.validate();
  return p;
}

inline std::string save(const MoeLayerParams& p) { return to_json(p).dump(2); }

inline MoeLayerParams load(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("checkpoint: ") + e.what());
  }
  return from_json(j);
}

}  // namespace checkpoint
}  // namespace usmoe
