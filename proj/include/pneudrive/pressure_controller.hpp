#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pneudrive/bus_sim.hpp"
#include "pneudrive/controller.hpp"

namespace pneudrive {

/// A device did not answer, or answered with a corrupt packet.
class DeviceError : public std::runtime_error {
 public:
  DeviceError(std::uint16_t address, const std::string& what);
  std::uint16_t address() const { return address_; }

 private:
  std::uint16_t address_;
};

/// Simulated bus plus the emulated boards attached to it.
struct SimulationSetup {
  bus::BusTimingConfig bus;
  control::DeviceConfig device = control::default_device_config();
  std::size_t devices_present = 0;  // 0: same as the expected count
  std::uint64_t seed = 0;
};

/// Reads {"bus": {...}, "device": {...}, "devices_present": n, "seed": s}.
SimulationSetup simulation_setup_from_json(const nlohmann::json& doc);

/// Scripting-level handle: one bus transaction per call, pressures in kPa gauge.
class PressureController {
 public:
  /// `port` is a simulation config path, or "sim" / "sim:N" for N attached
  /// devices with defaults. Character devices are rejected.
  PressureController(const std::string& port, int num_devices);
  PressureController(const SimulationSetup& setup, int num_devices);

  void ping_devices();
  void set_pressure_commands(int i, std::span<const double> commands_kpa);
  std::array<double, 4> get_pressure_data(int i);

  int num_devices() const { return num_devices_; }
  /// Let simulated time pass with the bus idle.
  void advance(double seconds);
  bus::BusSimulation& bus() { return *bus_; }
  std::size_t transactions() const { return transactions_; }

 private:
  wire::DeviceAddress checked_address(int i) const;
  wire::Payload transact(wire::DeviceAddress address, const wire::Payload& commands);

  int num_devices_;
  std::unique_ptr<bus::BusSimulation> bus_;
  std::vector<wire::Payload> commands_;
  std::size_t transactions_ = 0;
};

}  // namespace pneudrive
