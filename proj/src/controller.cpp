#include "pneudrive/controller.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "pneudrive/params_json.hpp"

namespace pneudrive::control {

using dynamics::ChamberInput;
using dynamics::JointState;
using dynamics::NonlinearParams;

double gauge_kpa_to_pa(double kpa_gauge) { return kpa_gauge * 1e3 + dynamics::kAtmosphericPa; }
double pa_to_gauge_kpa(double pa_abs) { return (pa_abs - dynamics::kAtmosphericPa) * 1e-3; }

double control_law(double p_des, double p, const ControllerConfig& config) {
  return std::clamp(config.k_p * (p_des - p) + config.u_offset, config.u_min, config.u_max);
}

ControllerConfig centered_controller(const dynamics::ValveParams& valve, ControllerConfig base) {
  base.u_offset = 0.5 * (valve.center_in + valve.center_out);
  return base;
}

JointState JointMotion::at(double t) const {
  JointState s;
  for (std::size_t j = 0; j < 2; ++j) {
    const double w = 2.0 * std::numbers::pi * frequency_hz[j];
    s.q[j] = offset[j] + amplitude[j] * std::sin(w * t + phase[j]);
    s.q_dot[j] = amplitude[j] * w * std::cos(w * t + phase[j]);
  }
  return s;
}

DeviceConfig default_device_config() {
  // Spread between the four valve/chamber pairs of one board.
  constexpr std::array<double, kChambers> gain_scale{1.0, 0.92, 1.08, 0.96};
  constexpr std::array<double, kChambers> leak_scale{1.0, 1.2, 0.9, 1.1};
  constexpr std::array<double, kChambers> center_shift{0.0, 0.05, -0.05, 0.02};

  DeviceConfig cfg;
  for (std::size_t i = 0; i < kChambers; ++i) {
    NonlinearParams plant;
    plant.valve.gain *= gain_scale[i];
    plant.valve.leak_in *= leak_scale[i];
    plant.valve.leak_out *= leak_scale[i];
    plant.valve.center_in += center_shift[i];
    plant.valve.center_out += center_shift[i];
    cfg.chambers[i].model = plant;
    cfg.chambers[i].controller = centered_controller(plant.valve);
  }
  return cfg;
}

DeviceConfig uniform_device_config(const dynamics::ModelParams& model) {
  DeviceConfig cfg;
  for (auto& ch : cfg.chambers) {
    ch.model = model;
    if (const auto* nl = std::get_if<NonlinearParams>(&model)) ch.controller = centered_controller(nl->valve);
  }
  return cfg;
}

namespace {

nlohmann::json to_json(const ControllerConfig& c) {
  return {{"k_p_V_per_Pa", c.k_p},
          {"u_min_V", c.u_min},
          {"u_max_V", c.u_max},
          {"u_offset_V", c.u_offset},
          {"control_rate_Hz", c.control_rate_hz}};
}

ControllerConfig controller_from_json(const nlohmann::json& doc, ControllerConfig c) {
  const auto read = [&doc](const char* key, double& out) {
    if (auto it = doc.find(key); it != doc.end()) out = it->get<double>();
  };
  read("k_p_V_per_Pa", c.k_p);
  read("u_min_V", c.u_min);
  read("u_max_V", c.u_max);
  read("u_offset_V", c.u_offset);
  read("control_rate_Hz", c.control_rate_hz);
  return c;
}

void validate(const ControllerConfig& c) {
  if (!(c.u_min < c.u_max)) throw std::invalid_argument("controller needs u_min < u_max");
  if (!(c.k_p > 0.0)) throw std::invalid_argument("controller gain k_p must be positive");
  if (!(c.control_rate_hz > 0.0)) throw std::invalid_argument("control rate must be positive");
}

nlohmann::json to_json(const JointMotion& m) {
  return {{"offset_rad", m.offset},
          {"amplitude_rad", m.amplitude},
          {"frequency_Hz", m.frequency_hz},
          {"phase_rad", m.phase}};
}

JointMotion joint_from_json(const nlohmann::json& doc, JointMotion m) {
  const auto read = [&doc](const char* key, std::array<double, 2>& out) {
    if (auto it = doc.find(key); it != doc.end()) out = it->get<std::array<double, 2>>();
  };
  read("offset_rad", m.offset);
  read("amplitude_rad", m.amplitude);
  read("frequency_Hz", m.frequency_hz);
  read("phase_rad", m.phase);
  return m;
}

}  // namespace

nlohmann::json to_json(const DeviceConfig& cfg) {
  nlohmann::json chambers = nlohmann::json::array();
  for (const auto& ch : cfg.chambers) {
    chambers.push_back({{"model", dynamics::to_json(ch.model)}, {"controller", to_json(ch.controller)}});
  }
  return {{"chambers", chambers},
          {"joint_motion", to_json(cfg.joint)},
          {"sensor_noise_kPa", cfg.sensor_noise_pa * 1e-3},
          {"initial_pressure_kPa", pa_to_gauge_kpa(cfg.initial_pressure_pa)},
          {"seed", cfg.seed}};
}

DeviceConfig device_config_from_json(const nlohmann::json& doc, DeviceConfig cfg) {
  if (auto it = doc.find("model"); it != doc.end()) {
    const auto model = dynamics::model_params_from_json(*it);
    auto uniform = uniform_device_config(model);
    cfg.chambers = uniform.chambers;
  }
  if (auto it = doc.find("chambers"); it != doc.end()) {
    if (!it->is_array() || it->size() != kChambers) throw std::invalid_argument("'chambers' must list 4 entries");
    for (std::size_t i = 0; i < kChambers; ++i) {
      const auto& entry = (*it)[i];
      auto& ch = cfg.chambers[i];
      if (entry.contains("model")) {
        ch.model = dynamics::model_params_from_json(entry["model"]);
        if (const auto* nl = std::get_if<NonlinearParams>(&ch.model)) ch.controller = centered_controller(nl->valve, ch.controller);
      }
      if (entry.contains("controller")) ch.controller = controller_from_json(entry["controller"], ch.controller);
    }
  }
  if (auto it = doc.find("controller"); it != doc.end()) {
    for (auto& ch : cfg.chambers) ch.controller = controller_from_json(*it, ch.controller);
  }
  if (auto it = doc.find("joint_motion"); it != doc.end()) cfg.joint = joint_from_json(*it, cfg.joint);
  if (auto it = doc.find("sensor_noise_kPa"); it != doc.end()) cfg.sensor_noise_pa = it->get<double>() * 1e3;
  if (auto it = doc.find("initial_pressure_kPa"); it != doc.end()) {
    cfg.initial_pressure_pa = gauge_kpa_to_pa(it->get<double>());
  }
  if (auto it = doc.find("seed"); it != doc.end()) cfg.seed = it->get<std::uint64_t>();
  for (const auto& ch : cfg.chambers) validate(ch.controller);
  return cfg;
}

const char* const kLogCsvHeader =
    "t_s,p_des0_kPa,p_des1_kPa,p_des2_kPa,p_des3_kPa,p0_kPa,p1_kPa,p2_kPa,p3_kPa,"
    "u0_V,u1_V,u2_V,u3_V,q_u_rad,q_v_rad,qdot_u_rad_s,qdot_v_rad_s";

void write_log_csv(std::ostream& out, const TrackingLog& log) {
  out << kLogCsvHeader << '\n';
  char buf[64];
  const auto put = [&](const char* fmt, double v, bool last = false) {
    std::snprintf(buf, sizeof buf, fmt, v);
    out << buf << (last ? '\n' : ',');
  };
  for (const auto& row : log) {
    put("%.4f", row.t);
    for (double v : row.p_des) put("%.6f", pa_to_gauge_kpa(v));
    for (double v : row.p) put("%.6f", pa_to_gauge_kpa(v));
    for (double v : row.u) put("%.6f", v);
    put("%.8f", row.joint.q[0]);
    put("%.8f", row.joint.q[1]);
    put("%.8f", row.joint.q_dot[0]);
    put("%.8f", row.joint.q_dot[1], true);
  }
}

EmulatedDevice::EmulatedDevice(wire::DeviceAddress address, DeviceConfig config)
    : address_(address),
      config_(std::move(config)),
      dt_(config_.control_dt()),
      rng_(config_.seed ^ (0x9E3779B97F4A7C15ULL * (address.index + 1))) {
  for (const auto& ch : config_.chambers) validate(ch.controller);
  p_.fill(config_.initial_pressure_pa);
  p_des_ = p_;
  measured_ = p_;
}

void EmulatedDevice::set_targets(const PressureArray& p_des) { p_des_ = p_des; }

void EmulatedDevice::set_pressures(const PressureArray& p) {
  p_ = p;
  measured_ = p;
}

void EmulatedDevice::advance_to(double t) {
  while (time() + dt_ <= t + 1e-12) tick();
}

wire::Payload EmulatedDevice::exchange(const wire::Payload& commands) {
  const auto kpa = wire::payload_to_pressures(commands);
  for (std::size_t i = 0; i < kChambers; ++i) p_des_[i] = gauge_kpa_to_pa(kpa[i]);
  std::array<double, kChambers> measured_kpa{};
  for (std::size_t i = 0; i < kChambers; ++i) measured_kpa[i] = pa_to_gauge_kpa(measured_[i]);
  return wire::pressures_to_payload(measured_kpa);
}

void EmulatedDevice::tick() {
  const double t = time();
  const JointState j0 = config_.joint.at(t);
  const JointState j1 = config_.joint.at(t + dt_);

  std::normal_distribution<double> noise(0.0, 1.0);
  PressureArray u{};
  for (std::size_t i = 0; i < kChambers; ++i) {
    measured_[i] = p_[i] + (config_.sensor_noise_pa > 0.0 ? config_.sensor_noise_pa * noise(rng_) : 0.0);
    u[i] = control_law(p_des_[i], measured_[i], config_.chambers[i].controller);
  }
  if (logging_) log_.push_back({t, p_des_, p_, u, j0});

  for (std::size_t i = 0; i < kChambers; ++i) {
    const auto& model = config_.chambers[i].model;
    const ChamberInput from{p_des_[i], u[i], j0};
    const ChamberInput to{p_des_[i], u[i], j1};
    p_[i] = dynamics::rk4_step(model, i, p_[i], from, to, dt_);
    const double limit = 10.0 * std::max({dynamics::reference_pressure(model), std::abs(p_des_[i]), 1e6});
    if (!std::isfinite(p_[i]) || std::abs(p_[i]) > limit) throw dynamics::DivergenceError(ticks_ + 1, p_[i]);
  }
  ++ticks_;
}

StepMetrics step_metrics(const std::vector<double>& t, const std::vector<double>& p, double p0, double target,
                         double band) {
  if (t.size() != p.size() || t.empty()) throw std::invalid_argument("step metrics need matching, nonempty series");
  StepMetrics m;
  const std::size_t n = p.size();
  const std::size_t tail = std::max<std::size_t>(1, n / 10);
  double final_mean = 0.0;
  for (std::size_t k = n - tail; k < n; ++k) final_mean += p[k];
  final_mean /= static_cast<double>(tail);
  m.steady_state_error = target - final_mean;

  const double step = target - p0;
  if (std::abs(step) < 1e-9) {
    m.settled = true;
    return m;
  }
  std::vector<double> y(n);
  for (std::size_t k = 0; k < n; ++k) y[k] = (p[k] - p0) / step;

  const auto first_at = [&](double level) -> double {
    for (std::size_t k = 0; k < n; ++k) {
      if (y[k] >= level) return t[k];
    }
    return std::nan("");
  };
  m.rise_time = first_at(0.9) - first_at(0.1);
  m.overshoot = std::max(0.0, *std::max_element(y.begin(), y.end()) - 1.0);

  std::size_t last_out = n;  // none outside
  for (std::size_t k = n; k-- > 0;) {
    if (std::abs(y[k] - 1.0) > band) {
      last_out = k;
      break;
    }
  }
  if (last_out == n) {
    m.settling_time = t.front();
    m.settled = true;
  } else if (last_out + 1 < n) {
    m.settling_time = t[last_out + 1];
    m.settled = true;
  } else {
    m.settling_time = std::nan("");
    m.settled = false;
  }
  return m;
}

StepResponse step_response(const DeviceConfig& config, double p0, double p_cmd, double duration) {
  EmulatedDevice dev(wire::DeviceAddress::from_index(0), config);
  PressureArray start{};
  start.fill(p0);
  PressureArray target{};
  target.fill(p_cmd);
  dev.set_pressures(start);
  dev.set_targets(target);
  dev.enable_log(true);
  dev.advance_to(duration);

  StepResponse out;
  out.log = dev.take_log();
  std::vector<double> t;
  t.reserve(out.log.size());
  for (const auto& row : out.log) t.push_back(row.t);
  for (std::size_t i = 0; i < kChambers; ++i) {
    std::vector<double> p;
    p.reserve(out.log.size());
    for (const auto& row : out.log) p.push_back(row.p[i]);
    out.metrics[i] = step_metrics(t, p, p0, p_cmd);
  }
  return out;
}

PressureArray PressureReference::at(double t) const {
  if (samples.empty()) throw std::logic_error("empty pressure reference");
  const double idx = std::floor(t / dt + 1e-9);
  const auto k = static_cast<std::size_t>(std::clamp(idx, 0.0, static_cast<double>(samples.size() - 1)));
  return samples[k];
}

PressureReference constant_reference(const PressureArray& p, double duration, double dt) {
  PressureReference ref;
  ref.dt = dt;
  ref.samples.assign(static_cast<std::size_t>(std::llround(duration / dt)), p);
  return ref;
}

PressureReference sine_reference(double duration, double dt, double frequency_hz, double lo_pa, double hi_pa) {
  PressureReference ref;
  ref.dt = dt;
  const auto n = static_cast<std::size_t>(std::llround(duration / dt));
  const double mid = 0.5 * (lo_pa + hi_pa);
  const double amp = 0.5 * (hi_pa - lo_pa);
  for (std::size_t k = 0; k < n; ++k) {
    PressureArray row{};
    for (std::size_t i = 0; i < kChambers; ++i) {
      const double phase = std::numbers::pi / 2.0 * static_cast<double>(i);
      row[i] = mid + amp * std::sin(2.0 * std::numbers::pi * frequency_hz * k * dt + phase);
    }
    ref.samples.push_back(row);
  }
  return ref;
}

PressureReference level_reference(double duration, double dt, double lo_pa, double hi_pa, std::uint64_t seed,
                                  double hold_min, double hold_max, double ramp) {
  PressureReference ref;
  ref.dt = dt;
  const auto n = static_cast<std::size_t>(std::llround(duration / dt));
  ref.samples.assign(n, PressureArray{});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> level(lo_pa, hi_pa);
  std::uniform_real_distribution<double> hold(hold_min, hold_max);
  for (std::size_t i = 0; i < kChambers; ++i) {
    double from = level(rng);
    double to = level(rng);
    double ramp_start = hold(rng);
    for (std::size_t k = 0; k < n; ++k) {
      const double t = static_cast<double>(k) * dt;
      while (t >= ramp_start + ramp) {
        from = to;
        to = level(rng);
        ramp_start += ramp + hold(rng);
      }
      double value = from;
      if (t > ramp_start) {
        const double s = (t - ramp_start) / ramp;
        value = from + (to - from) * 0.5 * (1.0 - std::cos(std::numbers::pi * s));
      }
      ref.samples[k][i] = value;
    }
  }
  return ref;
}

PressureArray tracking_iae(const TrackingLog& log, double dt) {
  PressureArray iae{};
  for (const auto& row : log) {
    for (std::size_t i = 0; i < kChambers; ++i) iae[i] += std::abs(row.p_des[i] - row.p[i]) * dt;
  }
  return iae;
}

TrackingResult track_trajectory(const DeviceConfig& config, const PressureReference& reference) {
  EmulatedDevice dev(wire::DeviceAddress::from_index(0), config);
  dev.enable_log(true);
  const double dt = config.control_dt();
  const double end = reference.duration();
  while (dev.time() + dt <= end + 1e-12) {
    dev.set_targets(reference.at(dev.time()));
    dev.advance_to(dev.time() + dt);
  }
  TrackingResult out;
  out.log = dev.take_log();
  out.iae = tracking_iae(out.log, dt);
  return out;
}

std::vector<TrackingResult> track_on_bus(const bus::BusTimingConfig& bus_config,
                                         const std::vector<DeviceConfig>& devices,
                                         const std::vector<PressureReference>& references, double duration,
                                         std::uint64_t seed) {
  if (devices.size() != references.size()) throw std::invalid_argument("one reference per device required");
  bus::BusSimulation sim(bus_config, seed);
  std::vector<std::shared_ptr<EmulatedDevice>> nodes;
  for (std::size_t d = 0; d < devices.size(); ++d) {
    auto node = std::make_shared<EmulatedDevice>(wire::DeviceAddress::from_index(d), devices[d]);
    node->enable_log(true);
    nodes.push_back(node);
    sim.attach(node);
  }
  while (sim.now() < duration) {
    for (std::size_t d = 0; d < nodes.size(); ++d) {
      const auto target = references[d].at(sim.now());
      std::array<double, kChambers> kpa{};
      for (std::size_t i = 0; i < kChambers; ++i) kpa[i] = pa_to_gauge_kpa(target[i]);
      sim.set_commands(nodes[d]->address().value, wire::pressures_to_payload(kpa));
    }
    sim.sweep();
  }
  std::vector<TrackingResult> out;
  for (auto& node : nodes) {
    node->advance_to(duration);
    TrackingResult r;
    r.log = node->take_log();
    r.iae = tracking_iae(r.log, node->config().control_dt());
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pneudrive::control
