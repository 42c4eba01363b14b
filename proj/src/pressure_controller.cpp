#include "pneudrive/pressure_controller.hpp"

#include <sys/stat.h>

#include <charconv>
#include <cstdio>
#include <fstream>

namespace pneudrive {

namespace {

std::string hex_address(std::uint16_t address) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "0x%04X", address);
  return buf;
}

SimulationSetup setup_from_port(const std::string& port) {
  struct stat st {};
  if (::stat(port.c_str(), &st) == 0) {
    if (S_ISCHR(st.st_mode)) {
      throw std::runtime_error("'" + port + "' is a serial device; only the simulated transport is available");
    }
    std::ifstream in(port);
    if (!in) throw std::runtime_error("cannot read simulation config '" + port + "'");
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("simulation config '" + port + "': " + e.what());
    }
    return simulation_setup_from_json(doc);
  }
  SimulationSetup setup;
  if (port == "sim") return setup;
  if (port.rfind("sim:", 0) == 0) {
    const char* first = port.data() + 4;
    const char* last = port.data() + port.size();
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(first, last, n);
    if (ec != std::errc{} || ptr != last) throw std::invalid_argument("bad simulated port '" + port + "'");
    setup.devices_present = n;
    if (n == 0) throw std::invalid_argument("simulated port needs at least one device");
    return setup;
  }
  throw std::invalid_argument("port '" + port + "' is neither a simulation config nor 'sim[:N]'");
}

}  // namespace

DeviceError::DeviceError(std::uint16_t address, const std::string& what)
    : std::runtime_error("device " + hex_address(address) + ": " + what), address_(address) {}

SimulationSetup simulation_setup_from_json(const nlohmann::json& doc) {
  SimulationSetup setup;
  if (auto it = doc.find("bus"); it != doc.end()) setup.bus = bus::bus_config_from_json(*it);
  if (auto it = doc.find("device"); it != doc.end()) setup.device = control::device_config_from_json(*it);
  if (auto it = doc.find("devices_present"); it != doc.end()) setup.devices_present = it->get<std::size_t>();
  if (auto it = doc.find("seed"); it != doc.end()) setup.seed = it->get<std::uint64_t>();
  return setup;
}

PressureController::PressureController(const std::string& port, int num_devices)
    : PressureController(setup_from_port(port), num_devices) {}

PressureController::PressureController(const SimulationSetup& setup, int num_devices) : num_devices_(num_devices) {
  if (num_devices <= 0 || num_devices > static_cast<int>(wire::kMaxDevices)) {
    throw std::invalid_argument("num_devices must be in 1.." + std::to_string(wire::kMaxDevices));
  }
  const std::size_t present = setup.devices_present == 0 ? static_cast<std::size_t>(num_devices) : setup.devices_present;
  bus_ = std::make_unique<bus::BusSimulation>(setup.bus, setup.seed);
  for (std::size_t d = 0; d < present; ++d) {
    auto cfg = setup.device;
    cfg.seed = setup.device.seed + d;
    bus_->attach(std::make_shared<control::EmulatedDevice>(wire::DeviceAddress::from_index(d), cfg));
  }
  std::array<double, 4> initial{};
  initial.fill(control::pa_to_gauge_kpa(setup.device.initial_pressure_pa));
  commands_.assign(static_cast<std::size_t>(num_devices), wire::pressures_to_payload(initial));
}

wire::DeviceAddress PressureController::checked_address(int i) const {
  if (i < 0 || i >= num_devices_) {
    throw std::out_of_range("device index " + std::to_string(i) + " outside 0.." + std::to_string(num_devices_ - 1));
  }
  return wire::DeviceAddress::from_index(static_cast<std::size_t>(i));
}

wire::Payload PressureController::transact(wire::DeviceAddress address, const wire::Payload& commands) {
  ++transactions_;
  const auto result = bus_->transact(address, commands);
  if (result.status != bus::TransactStatus::ok || !result.response) {
    throw DeviceError(address.value, std::string(bus::to_string(result.status)));
  }
  return result.response->payload;
}

void PressureController::ping_devices() {
  for (int i = 0; i < num_devices_; ++i) {
    const auto address = checked_address(i);
    transact(address, commands_[static_cast<std::size_t>(i)]);
  }
}

void PressureController::set_pressure_commands(int i, std::span<const double> commands_kpa) {
  const auto address = checked_address(i);
  if (commands_kpa.size() != 4) throw std::invalid_argument("expected 4 pressure commands");
  const auto payload = wire::pressures_to_payload(std::span<const double, 4>(commands_kpa.data(), 4));
  commands_[static_cast<std::size_t>(i)] = payload;
  transact(address, payload);
}

std::array<double, 4> PressureController::get_pressure_data(int i) {
  const auto address = checked_address(i);
  return wire::payload_to_pressures(transact(address, commands_[static_cast<std::size_t>(i)]));
}

void PressureController::advance(double seconds) { bus_->idle(seconds); }

}  // namespace pneudrive
