#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pneudrive/wire_protocol.hpp"

namespace pneudrive::bus {

/// Seconds per 8N1 frame (10 bits).
double frame_time(double baud);
/// Seconds per 10-frame packet.
double packet_time(double baud);

/// 555 monostable pulse length 1.1 R C, with R in ohms and C in microfarads.
double write_enable_duration(double r_ohm, double c_uf);

struct BusTimingConfig {
  double baud = 1'000'000.0;
  double timer_resistance_ohm = 976.0;
  double timer_capacitance_uf = 0.1;
  /// Replaces the RC-derived pulse when set (fault studies).
  std::optional<double> write_enable_override_s;
  double per_transaction_overhead_s = 0.0;
  double per_sweep_overhead_s = 0.0;
  /// Standard deviation of Gaussian jitter added to each sweep's overhead.
  double overhead_jitter_s = 0.0;
  double device_compute_delay_s = 0.0;
  double response_timeout_s = 1e-3;
  /// Idle time, in frames, that the receiver reports as a packet gap.
  double idle_gap_frames = 1.0;

  double write_enable_s() const;
};

nlohmann::json to_json(const BusTimingConfig& cfg);
BusTimingConfig bus_config_from_json(const nlohmann::json& doc, BusTimingConfig base = {});

enum class EventKind {
  master_tx_start,
  master_tx_end,
  device_we_pulse_start,
  device_we_pulse_end,
  device_tx_start,
  device_tx_end,
  collision,
  corruption,
  protocol_violation,
  timeout,
};

std::string_view to_string(EventKind kind);

struct SimEvent {
  double timestamp = 0.0;
  EventKind kind = EventKind::master_tx_start;
  std::optional<std::uint16_t> device;  // empty for the master
};

/// A node on the bus. Implementations latch commands and report measurements.
class BusDevice {
 public:
  virtual ~BusDevice() = default;
  virtual wire::DeviceAddress address() const = 0;
  /// Advance internal state (controllers, plants) to simulated time t.
  virtual void advance_to(double t) = 0;
  /// Called once the addressed command packet is decoded; returns the
  /// measurement payload to send back.
  virtual wire::Payload exchange(const wire::Payload& commands) = 0;
};

/// Echoes back a fixed measurement and remembers the last commands.
class StaticDevice : public BusDevice {
 public:
  explicit StaticDevice(wire::DeviceAddress address, wire::Payload measurements = {});
  wire::DeviceAddress address() const override { return address_; }
  void advance_to(double) override {}
  wire::Payload exchange(const wire::Payload& commands) override;
  const wire::Payload& last_commands() const { return commands_; }
  std::size_t exchanges() const { return exchanges_; }

 private:
  wire::DeviceAddress address_;
  wire::Payload measurements_;
  wire::Payload commands_{};
  std::size_t exchanges_ = 0;
};

enum class TransactStatus { ok, timeout, malformed, collision };
std::string_view to_string(TransactStatus status);

struct TransactionResult {
  TransactStatus status = TransactStatus::ok;
  std::optional<wire::Packet> response;
  double elapsed = 0.0;
  std::vector<SimEvent> events;
};

enum class FaultKind { flip_byte, drop_byte, hold_write_mode };
FaultKind parse_fault_kind(std::string_view name);

enum class Direction { outbound, response };

struct FaultLocation {
  Direction direction = Direction::response;
  std::size_t byte_index = 0;
  std::size_t device_index = 0;  // for hold_write_mode
};

struct LoopRateStats {
  std::size_t device_count = 0;
  std::size_t iterations = 0;
  double mean_hz = 0.0;
  double std_hz = 0.0;
};

nlohmann::json to_json(const LoopRateStats& stats);

/// Discrete-event model of the half-duplex bus: one master polling devices,
/// resolved at frame (byte) boundaries.
class BusSimulation {
 public:
  explicit BusSimulation(BusTimingConfig config, std::uint64_t seed = 0);

  void attach(std::shared_ptr<BusDevice> device);
  std::size_t device_count() const { return devices_.size(); }
  BusDevice& device(std::size_t index) { return *devices_.at(index); }

  /// Commands the master sends to `address` during sweeps.
  void set_commands(std::uint16_t address, const wire::Payload& commands);

  TransactionResult transact(wire::DeviceAddress address, const wire::Payload& commands);
  TransactionResult transact(std::uint16_t address, const wire::Payload& commands);

  /// Arms a fault for the next transaction.
  void inject_fault(FaultKind kind, FaultLocation location);

  /// Poll every attached device once per sweep.
  LoopRateStats run_sweeps(std::size_t iterations);
  /// One sweep; returns the per-device results in attach order.
  std::vector<TransactionResult> sweep();

  /// Leave the bus idle for `seconds` of simulated time.
  void idle(double seconds);

  double now() const { return now_; }
  const BusTimingConfig& config() const { return config_; }
  const std::vector<SimEvent>& event_log() const { return log_; }
  void clear_event_log() { log_.clear(); }
  void write_event_csv(std::ostream& out) const;

 private:
  struct Frame {
    double start = 0.0;
    std::uint8_t byte = 0;
  };

  struct PendingFault {
    FaultKind kind;
    FaultLocation location;
  };

  double next_start() const;
  void advance_devices(double t);
  void record(std::vector<SimEvent>& events, double t, EventKind kind, std::optional<std::uint16_t> dev);
  std::vector<std::size_t> gap_marks(std::span<const Frame> frames) const;

  BusTimingConfig config_;
  std::mt19937_64 rng_;
  std::vector<std::shared_ptr<BusDevice>> devices_;
  std::map<std::uint16_t, wire::Payload> commands_;
  std::vector<PendingFault> faults_;
  std::vector<SimEvent> log_;
  double now_ = 0.0;       // master ready time
  double bus_free_ = 0.0;  // end of the last write-enable window
};

/// Sweeps `device_count` static devices for `iterations` sweeps.
LoopRateStats measure_loop_rate(const BusTimingConfig& config, std::size_t device_count,
                                std::size_t iterations, std::uint64_t seed = 0);

struct LoopRateObservation {
  std::size_t device_count = 0;
  double mean_hz = 0.0;
};

struct OverheadCalibration {
  double per_transaction_s = 0.0;
  double per_sweep_s = 0.0;
};

/// Nonnegative least-squares fit of loop period = sweep + N (protocol + tx)
/// overheads to observed loop rates.
OverheadCalibration calibrate_overhead(std::span<const LoopRateObservation> rows, const BusTimingConfig& base);

/// Table I loop rates of the reference hardware, 2044 iterations each.
inline constexpr LoopRateObservation kReferenceLoopRates[] = {{1, 1164.3}, {2, 980.9}, {3, 749.5}};
inline constexpr double kReferenceStdHz[] = {37.5, 19.9, 53.0};
inline constexpr std::size_t kReferenceIterations = 2044;

/// Default configuration with overheads fitted to the first two reference rows
/// and jitter sized to the first row's spread.
BusTimingConfig calibrated_reference_config();

}  // namespace pneudrive::bus
