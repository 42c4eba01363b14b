#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "pneudrive/bus_sim.hpp"
#include "pneudrive/dynamics.hpp"
#include "pneudrive/wire_protocol.hpp"

namespace pneudrive::control {

using dynamics::kChambers;
using PressureArray = std::array<double, kChambers>;

double gauge_kpa_to_pa(double kpa_gauge);
double pa_to_gauge_kpa(double pa_abs);

struct ControllerConfig {
  double k_p = 1.2e-4;  // V/Pa
  double u_min = 0.0;
  double u_max = 12.0;  // supply voltage
  double u_offset = 0.0;  // valve-closed command
  double control_rate_hz = 100.0;
};

/// clamp(k_p (p_des - p) + u_offset, u_min, u_max)
double control_law(double p_des, double p, const ControllerConfig& config);

/// Controller whose zero-error output sits at the valve's closed center.
ControllerConfig centered_controller(const dynamics::ValveParams& valve, ControllerConfig base = {});

/// Prescribed joint trajectory q_j(t) = offset + amplitude sin(2 pi f t + phase).
struct JointMotion {
  std::array<double, 2> offset{};
  std::array<double, 2> amplitude{};
  std::array<double, 2> frequency_hz{};
  std::array<double, 2> phase{};

  dynamics::JointState at(double t) const;
  bool frozen() const { return amplitude[0] == 0.0 && amplitude[1] == 0.0; }
};

struct ChamberConfig {
  dynamics::ModelParams model = dynamics::NonlinearParams{};
  ControllerConfig controller;
};

struct DeviceConfig {
  std::array<ChamberConfig, kChambers> chambers;
  JointMotion joint;
  double sensor_noise_pa = 0.0;
  double initial_pressure_pa = gauge_kpa_to_pa(50.0);
  std::uint64_t seed = 0;

  double control_dt() const { return 1.0 / chambers[0].controller.control_rate_hz; }
};

/// Nonlinear plant on every chamber, with small per-chamber hardware spread.
DeviceConfig default_device_config();
/// Same device with the given model on every chamber.
DeviceConfig uniform_device_config(const dynamics::ModelParams& model);

nlohmann::json to_json(const DeviceConfig& cfg);
DeviceConfig device_config_from_json(const nlohmann::json& doc, DeviceConfig base = default_device_config());

/// One control tick. Pressures are absolute Pa; `u` is the command held over
/// the following control period.
struct LogRow {
  double t = 0.0;
  PressureArray p_des{};
  PressureArray p{};
  PressureArray u{};
  dynamics::JointState joint;
};

using TrackingLog = std::vector<LogRow>;

/// CSV header shared by tracking logs and datasets (gauge kPa, volts, rad).
extern const char* const kLogCsvHeader;
void write_log_csv(std::ostream& out, const TrackingLog& log);

/// Embedded pressure-control board: four chambers, each under proportional
/// control at the configured rate, reachable over the bus.
class EmulatedDevice : public bus::BusDevice {
 public:
  EmulatedDevice(wire::DeviceAddress address, DeviceConfig config);

  wire::DeviceAddress address() const override { return address_; }
  void advance_to(double t) override;
  wire::Payload exchange(const wire::Payload& commands) override;

  /// Set targets directly in absolute Pa, bypassing word quantization.
  void set_targets(const PressureArray& p_des);
  void set_pressures(const PressureArray& p);

  double time() const { return static_cast<double>(ticks_) * dt_; }
  const PressureArray& pressures() const { return p_; }
  const PressureArray& measured() const { return measured_; }
  const PressureArray& targets() const { return p_des_; }
  const DeviceConfig& config() const { return config_; }

  void enable_log(bool on) { logging_ = on; }
  const TrackingLog& log() const { return log_; }
  TrackingLog take_log() { return std::move(log_); }

 private:
  void tick();

  wire::DeviceAddress address_;
  DeviceConfig config_;
  double dt_;
  std::uint64_t ticks_ = 0;
  PressureArray p_{};
  PressureArray p_des_{};
  PressureArray measured_{};
  std::mt19937_64 rng_;
  bool logging_ = false;
  TrackingLog log_;
};

struct StepMetrics {
  double rise_time = 0.0;        // 10 % -> 90 % of the step, s (NaN if never reached)
  double overshoot = 0.0;        // fraction of the step
  double settling_time = 0.0;    // s; after this the response stays in the band
  double steady_state_error = 0.0;  // Pa, target minus final mean
  bool settled = false;
};

StepMetrics step_metrics(const std::vector<double>& t, const std::vector<double>& p, double p0, double target,
                         double band = 0.05);

struct StepResponse {
  TrackingLog log;
  std::array<StepMetrics, kChambers> metrics;
};

/// Closed-loop step of all four chambers from p0 to p_cmd (absolute Pa).
StepResponse step_response(const DeviceConfig& config, double p0, double p_cmd, double duration);

/// Sampled reference of four pressure commands (absolute Pa), held between samples.
struct PressureReference {
  double dt = 0.01;
  std::vector<PressureArray> samples;

  PressureArray at(double t) const;
  double duration() const { return dt * static_cast<double>(samples.size()); }
};

PressureReference constant_reference(const PressureArray& p, double duration, double dt = 0.01);
PressureReference sine_reference(double duration, double dt, double frequency_hz, double lo_pa, double hi_pa);
/// Random hold levels in [lo, hi] joined by cosine ramps; independent per chamber.
PressureReference level_reference(double duration, double dt, double lo_pa, double hi_pa, std::uint64_t seed,
                                  double hold_min = 1.0, double hold_max = 4.0, double ramp = 0.3);

struct TrackingResult {
  TrackingLog log;
  PressureArray iae{};  // Pa s
};

PressureArray tracking_iae(const TrackingLog& log, double dt);

/// Drive one device directly with the reference.
TrackingResult track_trajectory(const DeviceConfig& config, const PressureReference& reference);

/// Poll several devices over the simulated bus; commands go through the wire
/// format, so targets are quantized to 10-bit words.
std::vector<TrackingResult> track_on_bus(const bus::BusTimingConfig& bus_config,
                                         const std::vector<DeviceConfig>& devices,
                                         const std::vector<PressureReference>& references, double duration,
                                         std::uint64_t seed = 0);

}  // namespace pneudrive::control
