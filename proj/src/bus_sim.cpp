#include "pneudrive/bus_sim.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace pneudrive::bus {

double frame_time(double baud) { return 10.0 / baud; }
double packet_time(double baud) { return static_cast<double>(wire::kPacketBytes) * frame_time(baud); }

double write_enable_duration(double r_ohm, double c_uf) {
  if (!(r_ohm > 0.0) || !(c_uf > 0.0)) {
    throw std::invalid_argument("timer resistance and capacitance must be positive");
  }
  return 1.1 * r_ohm * c_uf * 1e-6;
}

double BusTimingConfig::write_enable_s() const {
  if (write_enable_override_s) return *write_enable_override_s;
  return write_enable_duration(timer_resistance_ohm, timer_capacitance_uf);
}

nlohmann::json to_json(const BusTimingConfig& cfg) {
  nlohmann::json doc{{"baud", cfg.baud},
                     {"timer_resistance_ohm", cfg.timer_resistance_ohm},
                     {"timer_capacitance_uF", cfg.timer_capacitance_uf},
                     {"per_transaction_overhead_s", cfg.per_transaction_overhead_s},
                     {"per_sweep_overhead_s", cfg.per_sweep_overhead_s},
                     {"overhead_jitter_s", cfg.overhead_jitter_s},
                     {"device_compute_delay_s", cfg.device_compute_delay_s},
                     {"response_timeout_s", cfg.response_timeout_s},
                     {"idle_gap_frames", cfg.idle_gap_frames}};
  if (cfg.write_enable_override_s) doc["write_enable_override_s"] = *cfg.write_enable_override_s;
  return doc;
}

BusTimingConfig bus_config_from_json(const nlohmann::json& doc, BusTimingConfig cfg) {
  const auto read = [&doc](const char* key, double& out) {
    if (auto it = doc.find(key); it != doc.end()) out = it->get<double>();
  };
  read("baud", cfg.baud);
  read("timer_resistance_ohm", cfg.timer_resistance_ohm);
  read("timer_capacitance_uF", cfg.timer_capacitance_uf);
  read("per_transaction_overhead_s", cfg.per_transaction_overhead_s);
  read("per_sweep_overhead_s", cfg.per_sweep_overhead_s);
  read("overhead_jitter_s", cfg.overhead_jitter_s);
  read("device_compute_delay_s", cfg.device_compute_delay_s);
  read("response_timeout_s", cfg.response_timeout_s);
  read("idle_gap_frames", cfg.idle_gap_frames);
  if (auto it = doc.find("write_enable_override_s"); it != doc.end() && !it->is_null()) {
    cfg.write_enable_override_s = it->get<double>();
  }
  return cfg;
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::master_tx_start:
      return "master_tx_start";
    case EventKind::master_tx_end:
      return "master_tx_end";
    case EventKind::device_we_pulse_start:
      return "device_we_pulse_start";
    case EventKind::device_we_pulse_end:
      return "device_we_pulse_end";
    case EventKind::device_tx_start:
      return "device_tx_start";
    case EventKind::device_tx_end:
      return "device_tx_end";
    case EventKind::collision:
      return "collision";
    case EventKind::corruption:
      return "corruption";
    case EventKind::protocol_violation:
      return "protocol_violation";
    case EventKind::timeout:
      return "timeout";
  }
  return "unknown";
}

std::string_view to_string(TransactStatus status) {
  switch (status) {
    case TransactStatus::ok:
      return "ok";
    case TransactStatus::timeout:
      return "timeout";
    case TransactStatus::malformed:
      return "malformed";
    case TransactStatus::collision:
      return "collision";
  }
  return "unknown";
}

FaultKind parse_fault_kind(std::string_view name) {
  if (name == "flip_byte") return FaultKind::flip_byte;
  if (name == "drop_byte") return FaultKind::drop_byte;
  if (name == "hold_write_mode") return FaultKind::hold_write_mode;
  throw std::invalid_argument("unknown fault kind '" + std::string(name) + "'");
}

nlohmann::json to_json(const LoopRateStats& stats) {
  return {{"device_count", stats.device_count},
          {"iterations", stats.iterations},
          {"mean_hz", stats.mean_hz},
          {"std_hz", stats.std_hz}};
}

StaticDevice::StaticDevice(wire::DeviceAddress address, wire::Payload measurements)
    : address_(address), measurements_(measurements) {}

wire::Payload StaticDevice::exchange(const wire::Payload& commands) {
  commands_ = commands;
  ++exchanges_;
  return measurements_;
}

BusSimulation::BusSimulation(BusTimingConfig config, std::uint64_t seed) : config_(config), rng_(seed) {
  if (!(config_.baud > 0.0)) throw std::invalid_argument("baud must be positive");
  if (!(config_.write_enable_s() > 0.0)) throw std::invalid_argument("write-enable duration must be positive");
}

void BusSimulation::attach(std::shared_ptr<BusDevice> device) {
  for (const auto& d : devices_) {
    if (d->address().value == device->address().value) {
      throw std::invalid_argument("duplicate device address " + std::to_string(device->address().value));
    }
  }
  devices_.push_back(std::move(device));
}

void BusSimulation::set_commands(std::uint16_t address, const wire::Payload& commands) {
  commands_[address] = commands;
}

void BusSimulation::inject_fault(FaultKind kind, FaultLocation location) {
  if (kind == FaultKind::hold_write_mode && location.device_index >= devices_.size()) {
    throw std::invalid_argument("hold_write_mode targets a device that is not attached");
  }
  if (kind != FaultKind::hold_write_mode && location.byte_index >= wire::kPacketBytes) {
    throw std::invalid_argument("fault byte index beyond packet length");
  }
  faults_.push_back({kind, location});
}

double BusSimulation::next_start() const { return std::max(now_, bus_free_); }

void BusSimulation::advance_devices(double t) {
  for (auto& d : devices_) d->advance_to(t);
}

void BusSimulation::record(std::vector<SimEvent>& events, double t, EventKind kind,
                           std::optional<std::uint16_t> dev) {
  events.push_back({t, kind, dev});
}

std::vector<std::size_t> BusSimulation::gap_marks(std::span<const Frame> frames) const {
  const double frame = frame_time(config_.baud);
  const double threshold = config_.idle_gap_frames * frame - 1e-12;
  std::vector<std::size_t> marks{0};
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const double idle = frames[i].start - (frames[i - 1].start + frame);
    if (idle >= threshold) marks.push_back(i);
  }
  return marks;
}

TransactionResult BusSimulation::transact(wire::DeviceAddress address, const wire::Payload& commands) {
  return transact(address.value, commands);
}

TransactionResult BusSimulation::transact(std::uint16_t address, const wire::Payload& commands) {
  const double frame = frame_time(config_.baud);
  const double packet = packet_time(config_.baud);
  const double enable = config_.write_enable_s();

  std::vector<PendingFault> faults;
  faults.swap(faults_);

  TransactionResult result;
  auto& ev = result.events;
  const double t0 = next_start();
  advance_devices(t0);

  // Devices stuck in write mode drive the line for the whole transaction.
  std::vector<std::size_t> held;
  for (const auto& f : faults) {
    if (f.kind == FaultKind::hold_write_mode) {
      held.push_back(f.location.device_index);
      record(ev, t0, EventKind::device_we_pulse_start, devices_[f.location.device_index]->address().value);
    }
  }

  bool collided = false;
  const auto contend = [&](std::vector<Frame>& frames, std::optional<std::size_t> driver) {
    if (held.empty()) return;
    for (auto& f : frames) {
      const bool clash = std::any_of(held.begin(), held.end(), [&](std::size_t h) {
        return !driver || *driver != h;
      });
      if (!clash) continue;
      if (!collided) record(ev, f.start, EventKind::collision, std::nullopt);
      collided = true;
      f.byte ^= static_cast<std::uint8_t>(std::uniform_int_distribution<int>(1, 255)(rng_));
      record(ev, f.start, EventKind::corruption, std::nullopt);
    }
  };

  const auto apply_faults = [&](std::vector<Frame>& frames, Direction dir) {
    // Highest index first so drops do not shift later targets.
    std::vector<PendingFault> mine;
    for (const auto& f : faults) {
      if (f.kind != FaultKind::hold_write_mode && f.location.direction == dir) mine.push_back(f);
    }
    std::sort(mine.begin(), mine.end(),
              [](const auto& a, const auto& b) { return a.location.byte_index > b.location.byte_index; });
    for (const auto& f : mine) {
      const auto at = f.location.byte_index;
      if (at >= frames.size()) continue;
      record(ev, frames[at].start, EventKind::corruption, std::nullopt);
      if (f.kind == FaultKind::flip_byte) {
        frames[at].byte ^= 0xFF;
      } else {
        frames.erase(frames.begin() + static_cast<std::ptrdiff_t>(at));
      }
    }
  };

  // Outbound packet from the master.
  record(ev, t0, EventKind::master_tx_start, std::nullopt);
  const auto out_bytes = wire::encode_packet(wire::Packet{address, commands}, wire::AddressMode::extended);
  std::vector<Frame> outbound;
  for (std::size_t i = 0; i < out_bytes.size(); ++i) outbound.push_back({t0 + i * frame, out_bytes[i]});
  apply_faults(outbound, Direction::outbound);
  contend(outbound, std::nullopt);
  const double master_end = t0 + packet;
  record(ev, master_end, EventKind::master_tx_end, std::nullopt);

  std::vector<std::uint8_t> rx;
  for (const auto& f : outbound) rx.push_back(f.byte);
  const auto rx_gaps = gap_marks(outbound);

  // Every device listens; only the addressed one answers.
  std::optional<std::size_t> responder;
  wire::Packet request;
  for (std::size_t d = 0; d < devices_.size(); ++d) {
    if (std::find(held.begin(), held.end(), d) != held.end()) continue;
    auto decoded = wire::decode_stream(rx, devices_[d]->address().value, rx_gaps);
    if (auto* pkt = std::get_if<wire::Packet>(&decoded)) {
      responder = d;
      request = *pkt;
      break;
    }
  }

  double end = master_end + config_.response_timeout_s;
  bool answered = false;
  if (responder) {
    auto& dev = *devices_[*responder];
    const std::uint16_t dev_addr = dev.address().value;
    const double t1 = master_end + config_.device_compute_delay_s;
    dev.advance_to(t1);
    const auto measurements = dev.exchange(request.payload);
    const auto bytes = wire::encode_packet(wire::Packet{dev_addr, measurements}, wire::AddressMode::extended);

    const double pulse_end = t1 + enable;
    record(ev, t1, EventKind::device_we_pulse_start, dev_addr);
    record(ev, t1, EventKind::device_tx_start, dev_addr);
    std::vector<Frame> response;
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      const double start = t1 + i * frame;
      // Frames past the write-enable window never reach the line.
      if (start + frame <= pulse_end + 1e-12) response.push_back({start, bytes[i]});
    }
    if (enable < packet) record(ev, pulse_end, EventKind::protocol_violation, dev_addr);
    apply_faults(response, Direction::response);
    contend(response, responder);
    record(ev, t1 + packet, EventKind::device_tx_end, dev_addr);
    record(ev, pulse_end, EventKind::device_we_pulse_end, dev_addr);
    bus_free_ = std::max(bus_free_, pulse_end);

    std::vector<std::uint8_t> master_rx;
    for (const auto& f : response) master_rx.push_back(f.byte);
    const auto decoded = wire::decode_stream(master_rx, dev_addr, gap_marks(response));
    if (const auto* pkt = std::get_if<wire::Packet>(&decoded)) {
      result.response = *pkt;
      result.status = TransactStatus::ok;
      end = response.back().start + frame;
      answered = true;
    } else if (std::holds_alternative<wire::Malformed>(decoded)) {
      result.status = TransactStatus::malformed;
      end = response.back().start + frame + config_.idle_gap_frames * frame;
      answered = true;
    }
  }
  if (!answered) {
    result.status = TransactStatus::timeout;
    record(ev, end, EventKind::timeout, std::nullopt);
  }
  if (collided) {
    result.status = TransactStatus::collision;
    result.response.reset();
  }

  for (auto h : held) {
    record(ev, end, EventKind::device_we_pulse_end, devices_[h]->address().value);
    bus_free_ = std::max(bus_free_, end);
  }

  now_ = end + config_.per_transaction_overhead_s;
  result.elapsed = now_ - t0;
  std::stable_sort(ev.begin(), ev.end(),
                   [](const SimEvent& a, const SimEvent& b) { return a.timestamp < b.timestamp; });
  log_.insert(log_.end(), ev.begin(), ev.end());
  return result;
}

std::vector<TransactionResult> BusSimulation::sweep() {
  std::vector<TransactionResult> out;
  out.reserve(devices_.size());
  for (auto& d : devices_) {
    const auto addr = d->address().value;
    const auto it = commands_.find(addr);
    out.push_back(transact(addr, it == commands_.end() ? wire::Payload{} : it->second));
  }
  double overhead = config_.per_sweep_overhead_s;
  if (config_.overhead_jitter_s > 0.0) {
    overhead += std::normal_distribution<double>(0.0, config_.overhead_jitter_s)(rng_);
  }
  now_ += std::max(0.0, overhead);
  return out;
}

LoopRateStats BusSimulation::run_sweeps(std::size_t iterations) {
  if (iterations == 0) throw std::invalid_argument("iterations must be positive");
  if (devices_.empty()) throw std::invalid_argument("no devices attached");
  std::vector<double> starts;
  starts.reserve(iterations);
  for (std::size_t k = 0; k < iterations; ++k) {
    starts.push_back(next_start());
    sweep();
  }
  const double end = now_;
  std::vector<double> rates;
  rates.reserve(iterations);
  for (std::size_t k = 0; k < iterations; ++k) {
    const double next = k + 1 < iterations ? starts[k + 1] : end;
    rates.push_back(1.0 / (next - starts[k]));
  }

  LoopRateStats stats;
  stats.device_count = devices_.size();
  stats.iterations = iterations;
  stats.mean_hz = static_cast<double>(iterations) / (end - starts.front());
  if (iterations > 1) {
    const double mean = std::accumulate(rates.begin(), rates.end(), 0.0) / rates.size();
    double ss = 0.0;
    for (double r : rates) ss += (r - mean) * (r - mean);
    stats.std_hz = std::sqrt(ss / static_cast<double>(rates.size() - 1));
  }
  return stats;
}

void BusSimulation::idle(double seconds) {
  if (seconds < 0.0) throw std::invalid_argument("idle time must be nonnegative");
  now_ = next_start() + seconds;
  advance_devices(now_);
}

void BusSimulation::write_event_csv(std::ostream& out) const {
  out << "timestamp_s,kind,device\n";
  out << std::setprecision(9) << std::fixed;
  for (const auto& e : log_) {
    out << e.timestamp << ',' << to_string(e.kind) << ',';
    if (e.device) {
      out << "0x" << std::hex << std::uppercase << std::setw(4) << std::setfill('0') << *e.device << std::dec
          << std::nouppercase << std::setfill(' ');
    } else {
      out << "master";
    }
    out << '\n';
  }
}

LoopRateStats measure_loop_rate(const BusTimingConfig& config, std::size_t device_count, std::size_t iterations,
                                std::uint64_t seed) {
  BusSimulation sim(config, seed);
  for (const auto& addr : wire::assign_addresses(device_count)) {
    sim.attach(std::make_shared<StaticDevice>(addr));
  }
  return sim.run_sweeps(iterations);
}

OverheadCalibration calibrate_overhead(std::span<const LoopRateObservation> rows, const BusTimingConfig& base) {
  if (rows.empty()) throw std::invalid_argument("calibration needs at least one observation");

  // Protocol-only period per device count, taken from the simulator itself so
  // that bus turnaround waits are included.
  BusTimingConfig bare = base;
  bare.per_transaction_overhead_s = 0.0;
  bare.per_sweep_overhead_s = 0.0;
  bare.overhead_jitter_s = 0.0;

  std::vector<double> n, y;
  for (const auto& row : rows) {
    if (row.device_count == 0 || !(row.mean_hz > 0.0)) throw std::invalid_argument("bad calibration row");
    const double floor = 1.0 / measure_loop_rate(bare, row.device_count, 64).mean_hz;
    n.push_back(static_cast<double>(row.device_count));
    y.push_back(1.0 / row.mean_hz - floor);
  }

  const auto sse = [&](double sweep, double tx) {
    double s = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i) s += std::pow(y[i] - sweep - n[i] * tx, 2);
    return s;
  };

  std::vector<OverheadCalibration> candidates;
  const double m = static_cast<double>(n.size());
  const double sn = std::accumulate(n.begin(), n.end(), 0.0);
  const double sy = std::accumulate(y.begin(), y.end(), 0.0);
  double snn = 0.0, sny = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    snn += n[i] * n[i];
    sny += n[i] * y[i];
  }
  const double det = m * snn - sn * sn;
  if (std::abs(det) > 1e-12) {
    const double tx = (m * sny - sn * sy) / det;
    const double sweep = (sy - tx * sn) / m;
    if (tx >= 0.0 && sweep >= 0.0) candidates.push_back({tx, sweep});
  }
  candidates.push_back({0.0, std::max(0.0, sy / m)});
  candidates.push_back({std::max(0.0, sny / snn), 0.0});

  return *std::min_element(candidates.begin(), candidates.end(), [&](const auto& a, const auto& b) {
    return sse(a.per_sweep_s, a.per_transaction_s) < sse(b.per_sweep_s, b.per_transaction_s);
  });
}

BusTimingConfig calibrated_reference_config() {
  BusTimingConfig cfg;
  const auto cal = calibrate_overhead(std::span(kReferenceLoopRates, 2), cfg);
  cfg.per_transaction_overhead_s = cal.per_transaction_s;
  cfg.per_sweep_overhead_s = cal.per_sweep_s;
  const double mean = kReferenceLoopRates[0].mean_hz;
  cfg.overhead_jitter_s = kReferenceStdHz[0] / (mean * mean);
  return cfg;
}

}  // namespace pneudrive::bus
