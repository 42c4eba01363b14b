#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

namespace pneudrive::wire {

/// Largest value carried by a payload word (10-bit ADC).
inline constexpr std::uint16_t kMaxPayloadWord = 0x03FF;
/// First address on the bus; each further device decrements by one.
inline constexpr std::uint16_t kFirstAddress = 0xFFFF;
/// Lowest address reachable with the 4-position address switch.
inline constexpr std::uint16_t kLowestSwitchAddress = 0xFFFC;
/// Lowest address accepted anywhere; software-programmed addresses stop here.
inline constexpr std::uint16_t kLowestAddress = 0x0400;

inline constexpr std::size_t kPayloadWords = 4;
inline constexpr std::size_t kPacketWords = 1 + kPayloadWords;
inline constexpr std::size_t kPacketBytes = 2 * kPacketWords;
inline constexpr std::size_t kMaxDevices = 256;

/// Full-scale sensor pressure (100 psig) in kPa gauge.
inline constexpr double kFullScaleKpa = 689.48;

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class InvalidCountError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DeviceAddress {
  std::size_t index = 0;
  std::uint16_t value = kFirstAddress;

  static DeviceAddress from_index(std::size_t index);
  friend bool operator==(const DeviceAddress&, const DeviceAddress&) = default;
};

using Payload = std::array<std::uint16_t, kPayloadWords>;
using PacketBytes = std::array<std::uint8_t, kPacketBytes>;

struct Packet {
  std::uint16_t address = kFirstAddress;
  Payload payload{};

  friend bool operator==(const Packet&, const Packet&) = default;
};

/// Addresses 0xFFFF, 0xFFFE, ... for `device_count` devices.
std::vector<DeviceAddress> assign_addresses(std::size_t device_count);

enum class AddressMode { strict, extended };

/// Serialize to the 10-byte wire form, each word low byte first.
PacketBytes encode_packet(const Packet& packet, AddressMode mode = AddressMode::strict);

struct NotAddressed {};
struct Malformed {
  std::size_t offset = 0;  // byte index of the matched address word
};
using DecodeResult = std::variant<Packet, NotAddressed, Malformed>;

/// Find the first packet for `expected` in a received byte stream. Packets may
/// only start at a gap mark (idle-line boundary reported by the transport);
/// byte 0 is always treated as a boundary. After an address match the next 8
/// bytes must arrive before the following gap or end of stream.
DecodeResult decode_stream(std::span<const std::uint8_t> bytes, std::uint16_t expected,
                           std::span<const std::size_t> gap_marks);

inline bool is_packet(const DecodeResult& r) { return std::holds_alternative<Packet>(r); }

/// Gauge kPa -> ADC word, clamping to [0, full scale].
std::uint16_t pressure_to_word(double kpa_gauge);
double word_to_pressure(std::uint16_t word);

Payload pressures_to_payload(std::span<const double, kPayloadWords> kpa_gauge);
std::array<double, kPayloadWords> payload_to_pressures(const Payload& payload);

}  // namespace pneudrive::wire
