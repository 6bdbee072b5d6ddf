#pragma once

// Frame layout (all integers little-endian):
//   frame    = len:u32 | body
//   request  = opcode:u8 | node_id:u32 | dim:u32 | dim × f64
//   response = 0x81 | t:u64 | dim:u32 | dim × f64
//   error    = 0xFF | code:u16 | UTF-8 message

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dml/error.hpp"
#include "dml/linalg.hpp"

namespace dml::wire {

enum class Opcode : std::uint8_t {
  pull = 0x01,
  push_swap = 0x02,
  shutdown = 0x03,
  reply = 0x81,
  error = 0xFF,
};

enum class ErrorCode : std::uint16_t {
  malformed = 1,
  unknown_opcode = 2,
  dimension_mismatch = 3,
  invalid_value = 4,
};

struct Request {
  Opcode op = Opcode::pull;
  std::uint32_t node_id = 0;
  std::vector<double> values;
};

struct Response {
  std::uint64_t t = 0;
  std::vector<double> values;
};

struct ErrorResponse {
  ErrorCode code = ErrorCode::malformed;
  std::string message;
};

using Bytes = std::vector<std::uint8_t>;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

template <typename T>
void put(Bytes& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

inline void put_f64(Bytes& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw InvalidArgument("truncated frame body");
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  std::span<const std::uint8_t> rest() const { return data_.subspan(pos_); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline Bytes framed(const Bytes& body) {
  Bytes out;
  out.reserve(body.size() + 4);
  put(out, static_cast<std::uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

}  // namespace detail

inline std::size_t request_frame_size(std::size_t dim) { return 4 + 1 + 4 + 4 + 8 * dim; }
inline std::size_t response_frame_size(std::size_t dim) { return 4 + 1 + 8 + 4 + 8 * dim; }

inline Bytes encode(const Request& req) {
  Bytes body;
  detail::put(body, static_cast<std::uint8_t>(req.op));
  detail::put(body, req.node_id);
  detail::put(body, static_cast<std::uint32_t>(req.values.size()));
  for (double v : req.values) detail::put_f64(body, v);
  return detail::framed(body);
}

inline Bytes encode(const Response& resp) {
  Bytes body;
  detail::put(body, static_cast<std::uint8_t>(Opcode::reply));
  detail::put(body, resp.t);
  detail::put(body, static_cast<std::uint32_t>(resp.values.size()));
  for (double v : resp.values) detail::put_f64(body, v);
  return detail::framed(body);
}

inline Bytes encode(const ErrorResponse& err) {
  Bytes body;
  detail::put(body, static_cast<std::uint8_t>(Opcode::error));
  detail::put(body, static_cast<std::uint16_t>(err.code));
  body.insert(body.end(), err.message.begin(), err.message.end());
  return detail::framed(body);
}

/// Decodes a request body (the bytes after the length prefix).
inline Request decode_request(std::span<const std::uint8_t> body) {
  detail::Reader r(body);
  Request req;
  const auto op = r.get<std::uint8_t>();
  if (op != 0x01 && op != 0x02 && op != 0x03) {
    throw InvalidArgument("unknown request opcode " + std::to_string(op));
  }
  req.op = static_cast<Opcode>(op);
  req.node_id = r.get<std::uint32_t>();
  const auto dim = r.get<std::uint32_t>();
  if (r.remaining() != std::size_t{dim} * 8) throw InvalidArgument("request payload length does not match dim");
  req.values.resize(dim);
  for (auto& v : req.values) v = r.get_f64();
  return req;
}

/// Decodes a response body into either a reply or an error.
inline std::variant<Response, ErrorResponse> decode_response(std::span<const std::uint8_t> body) {
  detail::Reader r(body);
  const auto op = r.get<std::uint8_t>();
  if (op == static_cast<std::uint8_t>(Opcode::error)) {
    ErrorResponse err;
    err.code = static_cast<ErrorCode>(r.get<std::uint16_t>());
    const auto rest = r.rest();
    err.message.assign(rest.begin(), rest.end());
    return err;
  }
  if (op != static_cast<std::uint8_t>(Opcode::reply)) {
    throw InvalidArgument("unknown response opcode " + std::to_string(op));
  }
  Response resp;
  resp.t = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint32_t>();
  if (r.remaining() != std::size_t{dim} * 8) throw InvalidArgument("response payload length does not match dim");
  resp.values.resize(dim);
  for (auto& v : resp.values) v = r.get_f64();
  return resp;
}

/// Reads the u32 length prefix of a frame.
inline std::uint32_t decode_length(std::span<const std::uint8_t, 4> prefix) {
  detail::Reader r(prefix);
  return r.get<std::uint32_t>();
}

inline std::vector<double> to_values(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_values(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace dml::wire
