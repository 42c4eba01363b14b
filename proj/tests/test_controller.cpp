#include <doctest.h>

#include <cmath>

#include "pneudrive/controller.hpp"

using namespace pneudrive;
using namespace pneudrive::control;

namespace {

const double kP0 = gauge_kpa_to_pa(50.0);
const double kP1 = gauge_kpa_to_pa(300.0);

double max_abs_diff(const TrackingLog& a, const TrackingLog& b, std::size_t chamber) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k].p[chamber] - b[k].p[chamber]));
  return worst;
}

}  // namespace

TEST_CASE("control law") {
  ControllerConfig c;
  c.k_p = 0.001;
  c.u_min = 0.0;
  c.u_max = 12.0;
  CHECK(control_law(110e3, 100e3, c) == doctest::Approx(10.0));
  CHECK(control_law(100e3, 100e3, c) == 0.0);
  CHECK(control_law(0.0, 1e6, c) == c.u_min);
  CHECK(control_law(1e6, 0.0, c) == c.u_max);

  const auto centered = centered_controller(dynamics::ValveParams{});
  CHECK(centered.u_offset == doctest::Approx(6.0));
  CHECK(control_law(2e5, 2e5, centered) == doctest::Approx(6.0));
  for (double e = -1e6; e <= 1e6; e += 1e4) {
    const double u = control_law(e, 0.0, centered);
    CHECK(u >= centered.u_min);
    CHECK(u <= centered.u_max);
  }
}

TEST_CASE("gauge conversion") {
  CHECK(gauge_kpa_to_pa(0.0) == dynamics::kAtmosphericPa);
  CHECK(pa_to_gauge_kpa(gauge_kpa_to_pa(123.4)) == doctest::Approx(123.4));
}

TEST_CASE("step metrics on a first-order response") {
  const double a = 4.0;
  std::vector<double> t, p;
  for (int k = 0; k <= 500; ++k) {
    t.push_back(k * 0.01);
    p.push_back(1.0 - std::exp(-a * t.back()));
  }
  const auto m = step_metrics(t, p, 0.0, 1.0);
  CHECK(m.rise_time == doctest::Approx(std::log(9.0) / a).epsilon(0.02));
  CHECK(m.overshoot == 0.0);
  CHECK(m.settled);
  CHECK(m.settling_time == doctest::Approx(std::log(20.0) / a).epsilon(0.02));
  CHECK(std::abs(m.steady_state_error) < 1e-6);
  CHECK_THROWS_AS(step_metrics({}, {}, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("linear plant with unity gain settles exactly") {
  const auto cfg = uniform_device_config(dynamics::LinearParams{10.0, 10.0});
  const auto r = step_response(cfg, kP0, kP1, 3.0);
  CHECK(r.log.size() == 300);
  for (const auto& m : r.metrics) {
    CHECK(m.settled);
    CHECK(std::abs(m.steady_state_error) < 1e-6 * (kP1 - kP0));
    CHECK(m.overshoot == 0.0);
  }
}

TEST_CASE("zero step stays flat") {
  const auto lin = step_response(uniform_device_config(dynamics::LinearParams{3.0, 3.0}), kP0, kP0, 2.0);
  for (const auto& row : lin.log) {
    for (double p : row.p) CHECK(p == doctest::Approx(kP0).epsilon(1e-12));
  }
  const auto nl = step_response(default_device_config(), kP0, kP0, 2.0);
  for (const auto& row : nl.log) {
    for (double p : row.p) CHECK(std::abs(p - kP0) < 5e3);
  }
}

TEST_CASE("nonlinear step from 50 to 300 kPa") {
  const auto r = step_response(default_device_config(), kP0, kP1, 3.0);
  for (const auto& m : r.metrics) {
    CHECK(m.settled);
    CHECK(m.rise_time < 1.0);
    CHECK(m.overshoot < 0.05);
    CHECK(std::abs(m.steady_state_error) < 0.05 * (kP1 - kP0));
  }
}

TEST_CASE("tracking error shrinks as the gain grows") {
  double previous = 1e300;
  for (double k_p : {2e-5, 4e-5, 8e-5, 1.6e-4}) {
    auto cfg = default_device_config();
    for (auto& ch : cfg.chambers) ch.controller.k_p = k_p;
    const auto r = step_response(cfg, kP0, kP1, 6.0);
    double worst = 0.0;
    for (const auto& m : r.metrics) worst = std::max(worst, std::abs(m.steady_state_error));
    CHECK(worst < previous);
    previous = worst;
  }
}

TEST_CASE("sinusoidal tracking stays bounded") {
  const auto ref = sine_reference(20.0, 0.01, 0.2, kP0, kP1);
  const auto r = track_trajectory(default_device_config(), ref);
  CHECK(r.log.size() == 2000);
  // Chambers start at 50 kPa; skip the initial pull-in.
  double worst = 0.0;
  for (const auto& row : r.log) {
    for (std::size_t i = 0; i < kChambers; ++i) {
      REQUIRE(std::isfinite(row.p[i]));
      if (row.t >= 1.0) worst = std::max(worst, std::abs(row.p_des[i] - row.p[i]));
    }
  }
  CHECK(worst < 30e3);
  for (double iae : r.iae) CHECK(iae > 0.0);

  const PressureArray hold{kP1, kP1, kP1, kP1};
  const auto constant = track_trajectory(default_device_config(), constant_reference(hold, 3.0));
  auto cfg = default_device_config();
  const auto step = step_response(cfg, cfg.initial_pressure_pa, kP1, 3.0);
  for (std::size_t i = 0; i < kChambers; ++i) CHECK(max_abs_diff(constant.log, step.log, i) < 1e-9);
}

TEST_CASE("three devices on the bus give twelve chamber logs") {
  const double duration = 2.0;
  std::vector<DeviceConfig> devices(3, default_device_config());
  std::vector<PressureReference> refs;
  for (std::uint64_t d = 0; d < 3; ++d) refs.push_back(level_reference(duration, 0.01, kP0, kP1, d));
  const auto out = track_on_bus(bus::calibrated_reference_config(), devices, refs, duration, 1);
  REQUIRE(out.size() == 3);
  std::size_t chambers = 0;
  for (const auto& r : out) {
    CHECK(r.log.size() == 200);
    chambers += kChambers;
    for (std::size_t i = 0; i < kChambers; ++i) CHECK(std::isfinite(r.iae[i]));
  }
  CHECK(chambers == 12);
  CHECK_THROWS_AS(track_on_bus(bus::calibrated_reference_config(), devices, {}, duration), std::invalid_argument);
}

TEST_CASE("antagonistic coupling through chamber volume") {
  // Chamber 0 steps while chamber 1 holds its command.
  const auto run = [](const JointMotion& joint, bool step_first) {
    auto cfg = default_device_config();
    cfg.joint = joint;
    const PressureArray start{kP0, kP0, kP0, kP0};
    auto ref = constant_reference(start, 3.0);
    if (step_first) {
      for (std::size_t k = 50; k < ref.samples.size(); ++k) ref.samples[k][0] = kP1;
    }
    return track_trajectory(cfg, ref).log;
  };

  JointMotion frozen;
  CHECK(max_abs_diff(run(frozen, true), run(frozen, false), 1) == 0.0);

  JointMotion moving;
  moving.amplitude = {0.3, 0.0};
  moving.frequency_hz = {0.5, 0.0};
  const auto with_motion = run(moving, true);
  CHECK(max_abs_diff(with_motion, run(frozen, true), 1) > 1e3);
}

TEST_CASE("emulated device over the wire") {
  EmulatedDevice dev(wire::DeviceAddress::from_index(2), default_device_config());
  CHECK(dev.address().value == 0xFFFD);
  const auto reply = dev.exchange(wire::pressures_to_payload(std::array<double, 4>{300.0, 200.0, 100.0, 50.0}));
  CHECK(reply == wire::pressures_to_payload(std::array<double, 4>{50.0, 50.0, 50.0, 50.0}));
  CHECK(pa_to_gauge_kpa(dev.targets()[0]) == doctest::Approx(300.0).epsilon(0.002));
  dev.advance_to(2.0);
  CHECK(dev.time() == doctest::Approx(2.0));
  CHECK(pa_to_gauge_kpa(dev.pressures()[0]) > 250.0);
  CHECK(pa_to_gauge_kpa(dev.pressures()[3]) < 60.0);
}

TEST_CASE("device config JSON round trip") {
  auto cfg = default_device_config();
  cfg.sensor_noise_pa = 120.0;
  cfg.joint.amplitude = {0.2, 0.1};
  cfg.chambers[2].controller.k_p = 3e-4;
  const auto back = device_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  nlohmann::json bad = to_json(cfg);
  bad["chambers"][0]["controller"]["control_rate_Hz"] = -1.0;
  CHECK_THROWS(device_config_from_json(bad));
}
