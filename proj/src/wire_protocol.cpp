#include "pneudrive/wire_protocol.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pneudrive::wire {

namespace {

std::uint16_t read_word(std::span<const std::uint8_t> bytes, std::size_t at) {
  return static_cast<std::uint16_t>(bytes[at] | (bytes[at + 1] << 8));
}

void check_address(std::uint16_t address, AddressMode mode) {
  const std::uint16_t floor = mode == AddressMode::strict ? kLowestSwitchAddress : kLowestAddress;
  if (address < floor) {
    throw RangeError("address word " + std::to_string(address) + " below lowest admissible " +
                     std::to_string(floor));
  }
}

}  // namespace

DeviceAddress DeviceAddress::from_index(std::size_t index) {
  if (index >= kMaxDevices) {
    throw InvalidCountError("device index " + std::to_string(index) + " out of range");
  }
  return DeviceAddress{index, static_cast<std::uint16_t>(kFirstAddress - index)};
}

std::vector<DeviceAddress> assign_addresses(std::size_t device_count) {
  if (device_count == 0 || device_count > kMaxDevices) {
    throw InvalidCountError("device count must be in [1, 256], got " + std::to_string(device_count));
  }
  std::vector<DeviceAddress> out;
  out.reserve(device_count);
  for (std::size_t i = 0; i < device_count; ++i) out.push_back(DeviceAddress::from_index(i));
  return out;
}

PacketBytes encode_packet(const Packet& packet, AddressMode mode) {
  check_address(packet.address, mode);
  PacketBytes out{};
  out[0] = static_cast<std::uint8_t>(packet.address & 0xFF);
  out[1] = static_cast<std::uint8_t>(packet.address >> 8);
  for (std::size_t i = 0; i < kPayloadWords; ++i) {
    const auto w = packet.payload[i];
    if (w > kMaxPayloadWord) {
      throw RangeError("payload word " + std::to_string(i) + " = " + std::to_string(w) +
                       " exceeds 1023");
    }
    out[2 + 2 * i] = static_cast<std::uint8_t>(w & 0xFF);
    out[3 + 2 * i] = static_cast<std::uint8_t>(w >> 8);
  }
  return out;
}

DecodeResult decode_stream(std::span<const std::uint8_t> bytes, std::uint16_t expected,
                           std::span<const std::size_t> gap_marks) {
  std::vector<std::size_t> bounds{0};
  for (auto g : gap_marks) {
    if (g < bytes.size()) bounds.push_back(g);
  }
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());

  for (std::size_t k = 0; k < bounds.size(); ++k) {
    const std::size_t start = bounds[k];
    const std::size_t stop = k + 1 < bounds.size() ? bounds[k + 1] : bytes.size();
    if (stop - start < 2) continue;
    if (read_word(bytes, start) != expected) continue;

    if (stop - start < kPacketBytes) return Malformed{start};
    Packet p;
    p.address = expected;
    for (std::size_t i = 0; i < kPayloadWords; ++i) {
      p.payload[i] = read_word(bytes, start + 2 + 2 * i);
      if (p.payload[i] > kMaxPayloadWord) return Malformed{start};
    }
    return p;
  }
  return NotAddressed{};
}

std::uint16_t pressure_to_word(double kpa_gauge) {
  if (std::isnan(kpa_gauge)) kpa_gauge = 0.0;
  const double clamped = std::clamp(kpa_gauge, 0.0, kFullScaleKpa);
  return static_cast<std::uint16_t>(std::lround(clamped / kFullScaleKpa * kMaxPayloadWord));
}

double word_to_pressure(std::uint16_t word) {
  return static_cast<double>(std::min(word, kMaxPayloadWord)) / kMaxPayloadWord * kFullScaleKpa;
}

Payload pressures_to_payload(std::span<const double, kPayloadWords> kpa_gauge) {
  Payload out{};
  for (std::size_t i = 0; i < kPayloadWords; ++i) out[i] = pressure_to_word(kpa_gauge[i]);
  return out;
}

std::array<double, kPayloadWords> payload_to_pressures(const Payload& payload) {
  std::array<double, kPayloadWords> out{};
  for (std::size_t i = 0; i < kPayloadWords; ++i) out[i] = word_to_pressure(payload[i]);
  return out;
}

}  // namespace pneudrive::wire
