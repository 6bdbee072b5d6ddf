#pragma once

#include <cstddef>
#include <cstdint>
#include <type_traits>
#include <utility>
#include <vector>

namespace dml {

/// Message types allowed to leave a node. Specialize to true for summary
/// statistics; raw datasets must never qualify.
template <typename T>
struct is_summary_message : std::false_type {};

template <typename T>
inline constexpr bool is_summary_message_v = is_summary_message<std::remove_cvref_t<T>>::value;

/// Simulated node-to-server link that only carries summary messages and
/// accounts for how many reals each node sent.
template <typename Message>
class SummaryChannel {
  static_assert(is_summary_message_v<Message>, "only summary messages may cross a node boundary");

 public:
  struct Envelope {
    std::uint32_t from;
    Message message;
  };

  void send(std::uint32_t from, Message message) {
    reals_ += message.wire_reals();
    log_.push_back(Envelope{from, std::move(message)});
  }

  const std::vector<Envelope>& messages() const noexcept { return log_; }
  std::size_t reals_sent() const noexcept { return reals_; }

  std::size_t reals_sent_by(std::uint32_t node) const {
    std::size_t n = 0;
    for (const auto& e : log_) {
      if (e.from == node) n += e.message.wire_reals();
    }
    return n;
  }

 private:
  std::vector<Envelope> log_;
  std::size_t reals_ = 0;
};

}  // namespace dml
