#include <doctest.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "pneudrive/bus_sim.hpp"

using namespace pneudrive;
using namespace pneudrive::bus;

namespace {

BusTimingConfig bare() {
  BusTimingConfig c;
  c.per_transaction_overhead_s = 0.0;
  c.per_sweep_overhead_s = 0.0;
  c.overhead_jitter_s = 0.0;
  return c;
}

BusSimulation with_devices(const BusTimingConfig& cfg, std::size_t n, std::uint64_t seed = 0) {
  BusSimulation sim(cfg, seed);
  for (const auto& a : wire::assign_addresses(n)) sim.attach(std::make_shared<StaticDevice>(a, wire::Payload{5, 6, 7, 8}));
  return sim;
}

bool has(const std::vector<SimEvent>& ev, EventKind kind) {
  return std::any_of(ev.begin(), ev.end(), [&](const SimEvent& e) { return e.kind == kind; });
}

}  // namespace

TEST_CASE("timing calculators") {
  CHECK(frame_time(1e6) == doctest::Approx(10e-6).epsilon(1e-12));
  CHECK(packet_time(1e6) == doctest::Approx(100e-6).epsilon(1e-12));
  CHECK(write_enable_duration(976.0, 0.1) * 1e6 == doctest::Approx(107.36).epsilon(1e-12));
  CHECK(write_enable_duration(976.0 * 0.99, 0.1 * 0.95) * 1e6 == doctest::Approx(100.97).epsilon(1e-4));
  CHECK(write_enable_duration(976.0 * 1.01, 0.1 * 1.05) * 1e6 == doctest::Approx(113.85).epsilon(1e-4));
  CHECK_THROWS_AS(write_enable_duration(0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(write_enable_duration(976.0, -1.0), std::invalid_argument);
}

TEST_CASE("single transaction with zero overhead takes two packet times") {
  auto cfg = bare();
  cfg.device_compute_delay_s = 7e-6;
  auto sim = with_devices(cfg, 1);
  const auto r = sim.transact(wire::DeviceAddress::from_index(0), {1, 2, 3, 4});
  REQUIRE(r.status == TransactStatus::ok);
  REQUIRE(r.response);
  CHECK(r.response->address == 0xFFFF);
  CHECK(r.response->payload == wire::Payload{5, 6, 7, 8});
  CHECK(r.elapsed == doctest::Approx(200e-6 + 7e-6).epsilon(1e-9));
  auto& dev = dynamic_cast<StaticDevice&>(sim.device(0));
  CHECK(dev.last_commands() == wire::Payload{1, 2, 3, 4});
}

TEST_CASE("only the addressed device exchanges") {
  auto sim = with_devices(bare(), 3);
  sim.transact(wire::DeviceAddress::from_index(1), {9, 9, 9, 9});
  CHECK(dynamic_cast<StaticDevice&>(sim.device(0)).exchanges() == 0);
  CHECK(dynamic_cast<StaticDevice&>(sim.device(1)).exchanges() == 1);
  CHECK(dynamic_cast<StaticDevice&>(sim.device(2)).exchanges() == 0);
}

TEST_CASE("absent address times out") {
  auto cfg = bare();
  auto sim = with_devices(cfg, 2);
  const auto r = sim.transact(std::uint16_t{0xFFF0}, {0, 0, 0, 0});
  CHECK(r.status == TransactStatus::timeout);
  CHECK_FALSE(r.response);
  CHECK(r.elapsed == doctest::Approx(100e-6 + cfg.response_timeout_s));
  CHECK(has(r.events, EventKind::timeout));
}

TEST_CASE("short write-enable pulse is a protocol violation") {
  auto cfg = bare();
  cfg.write_enable_override_s = 90e-6;
  auto sim = with_devices(cfg, 1);
  const auto r = sim.transact(wire::DeviceAddress::from_index(0), {0, 0, 0, 0});
  CHECK(has(r.events, EventKind::protocol_violation));
  CHECK(r.status != TransactStatus::ok);

  auto ok = with_devices(bare(), 1);
  CHECK_FALSE(has(ok.transact(wire::DeviceAddress::from_index(0), {}).events, EventKind::protocol_violation));
}

TEST_CASE("fault injection") {
  SUBCASE("flipped response address reads as not addressed") {
    auto sim = with_devices(bare(), 1);
    sim.inject_fault(FaultKind::flip_byte, {Direction::response, 0, 0});
    CHECK(sim.transact(wire::DeviceAddress::from_index(0), {}).status == TransactStatus::timeout);
    CHECK(sim.transact(wire::DeviceAddress::from_index(0), {}).status == TransactStatus::ok);
  }
  SUBCASE("dropped payload byte is malformed") {
    auto sim = with_devices(bare(), 1);
    sim.inject_fault(FaultKind::drop_byte, {Direction::response, 5, 0});
    CHECK(sim.transact(wire::DeviceAddress::from_index(0), {}).status == TransactStatus::malformed);
  }
  SUBCASE("flipped outbound address means nobody answers") {
    auto sim = with_devices(bare(), 1);
    sim.inject_fault(FaultKind::flip_byte, {Direction::outbound, 1, 0});
    CHECK(sim.transact(wire::DeviceAddress::from_index(0), {}).status == TransactStatus::timeout);
  }
  SUBCASE("device stuck in write mode collides") {
    auto sim = with_devices(bare(), 2);
    sim.inject_fault(FaultKind::hold_write_mode, {Direction::response, 0, 0});
    const auto r = sim.transact(wire::DeviceAddress::from_index(1), {});
    CHECK(r.status == TransactStatus::collision);
    CHECK(has(r.events, EventKind::collision));
    CHECK(has(r.events, EventKind::corruption));
  }
  SUBCASE("bad fault parameters") {
    auto sim = with_devices(bare(), 1);
    CHECK_THROWS_AS(sim.inject_fault(FaultKind::hold_write_mode, {Direction::response, 0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(sim.inject_fault(FaultKind::flip_byte, {Direction::response, 10, 0}), std::invalid_argument);
    CHECK_THROWS_AS(parse_fault_kind("melt"), std::invalid_argument);
    CHECK(parse_fault_kind("drop_byte") == FaultKind::drop_byte);
  }
}

TEST_CASE("event stream is ordered and half duplex") {
  auto cfg = calibrated_reference_config();
  auto sim = with_devices(cfg, 3, 11);
  sim.run_sweeps(50);
  const auto& ev = sim.event_log();
  REQUIRE_FALSE(ev.empty());
  for (std::size_t i = 1; i < ev.size(); ++i) CHECK(ev[i - 1].timestamp <= ev[i].timestamp);

  // Transmissions never overlap without a collision event.
  CHECK_FALSE(has(ev, EventKind::collision));
  int talking = 0;
  for (const auto& e : ev) {
    if (e.kind == EventKind::master_tx_start || e.kind == EventKind::device_tx_start) ++talking;
    if (e.kind == EventKind::master_tx_end || e.kind == EventKind::device_tx_end) --talking;
    CHECK(talking <= 1);
  }

  // Each device transmits only inside its write-enable window.
  std::map<std::uint16_t, double> pulse_start;
  for (const auto& e : ev) {
    if (!e.device) continue;
    if (e.kind == EventKind::device_we_pulse_start) pulse_start[*e.device] = e.timestamp;
    if (e.kind == EventKind::device_tx_start) CHECK(e.timestamp >= pulse_start[*e.device]);
    if (e.kind == EventKind::device_tx_end) {
      CHECK(e.timestamp <= pulse_start[*e.device] + cfg.write_enable_s() + 1e-12);
    }
  }
}

TEST_CASE("determinism: same seed, same events") {
  auto cfg = calibrated_reference_config();
  auto a = with_devices(cfg, 2, 5);
  auto b = with_devices(cfg, 2, 5);
  const auto sa = a.run_sweeps(200);
  const auto sb = b.run_sweeps(200);
  CHECK(sa.mean_hz == sb.mean_hz);
  CHECK(sa.std_hz == sb.std_hz);
  std::ostringstream ca, cb;
  a.write_event_csv(ca);
  b.write_event_csv(cb);
  CHECK(ca.str() == cb.str());
  CHECK(ca.str().rfind("timestamp_s,kind,device\n", 0) == 0);
  CHECK(ca.str().find(",0xFFFE\n") != std::string::npos);
  CHECK(ca.str().find(",master\n") != std::string::npos);
}

TEST_CASE("loop rate bounds and monotonicity") {
  const auto ceiling = measure_loop_rate(bare(), 1, 1);
  CHECK(ceiling.mean_hz == doctest::Approx(5000.0).epsilon(1e-9));

  for (double overhead : {0.0, 50e-6, 400e-6}) {
    auto cfg = bare();
    cfg.per_sweep_overhead_s = overhead;
    cfg.per_transaction_overhead_s = overhead / 4;
    double previous = 1e300;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto s = measure_loop_rate(cfg, n, 300);
      CHECK(s.mean_hz > 0.0);
      CHECK(s.std_hz >= 0.0);
      CHECK(s.mean_hz < previous);
      CHECK(1.0 / s.mean_hz >= n * 2.0 * packet_time(cfg.baud) - 1e-12);
      previous = s.mean_hz;
    }
  }
}

TEST_CASE("calibration against the reference loop rates") {
  const auto cfg = calibrated_reference_config();
  CHECK(cfg.per_transaction_overhead_s >= 0.0);
  CHECK(cfg.per_sweep_overhead_s >= 0.0);
  const auto one = measure_loop_rate(cfg, 1, kReferenceIterations, 1);
  CHECK(one.mean_hz == doctest::Approx(1164.3).epsilon(0.05));
  const auto two = measure_loop_rate(cfg, 2, kReferenceIterations, 1);
  CHECK(std::abs(two.mean_hz - 980.9) / 980.9 < 0.25);

  // Rates simulated from known overheads are reproduced by the fitted ones, up
  // to the turnaround waits that overheads partly absorb.
  auto truth = bare();
  truth.per_sweep_overhead_s = 500e-6;
  truth.per_transaction_overhead_s = 40e-6;
  std::vector<LoopRateObservation> rows;
  for (std::size_t n = 1; n <= 3; ++n) rows.push_back({n, measure_loop_rate(truth, n, 64).mean_hz});
  const auto cal = calibrate_overhead(rows, bare());
  auto fitted = bare();
  fitted.per_sweep_overhead_s = cal.per_sweep_s;
  fitted.per_transaction_overhead_s = cal.per_transaction_s;
  for (const auto& row : rows) {
    CHECK(measure_loop_rate(fitted, row.device_count, 64).mean_hz == doctest::Approx(row.mean_hz).epsilon(0.025));
  }
}

TEST_CASE("config JSON round trip and validation") {
  auto cfg = calibrated_reference_config();
  cfg.write_enable_override_s = 1e-4;
  const auto back = bus_config_from_json(to_json(cfg));
  CHECK(back.per_sweep_overhead_s == cfg.per_sweep_overhead_s);
  CHECK(back.overhead_jitter_s == cfg.overhead_jitter_s);
  CHECK(back.write_enable_override_s == cfg.write_enable_override_s);
  auto sim = with_devices(bare(), 1);
  CHECK_THROWS_AS(sim.attach(std::make_shared<StaticDevice>(wire::DeviceAddress::from_index(0))), std::invalid_argument);
  CHECK_THROWS_AS(sim.run_sweeps(0), std::invalid_argument);
}
