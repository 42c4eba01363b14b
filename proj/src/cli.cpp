#include "pneudrive/cli.hpp"

#include <CLI11.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "pneudrive/bus_sim.hpp"
#include "pneudrive/controller.hpp"
#include "pneudrive/dynamics.hpp"
#include "pneudrive/params_json.hpp"
#include "pneudrive/sysid.hpp"

namespace pneudrive::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool timing = false;
  CLI::Option* seed_opt = nullptr;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw sysid::DataError("cannot open config '" + path + "'");
  try {
    json doc;
    in >> doc;
    if (!doc.is_object()) throw sysid::DataError("config '" + path + "' must be a JSON object");
    return doc;
  } catch (const json::parse_error& e) {
    throw sysid::DataError("config '" + path + "': " + e.what());
  }
}

json section(const json& doc, const char* name) {
  if (auto it = doc.find(name); it != doc.end()) {
    if (!it->is_object()) throw sysid::DataError(std::string("config section '") + name + "' must be an object");
    return *it;
  }
  return json::object();
}

/// Flag value when given on the command line, else config value, else default.
template <typename T>
T pick(const CLI::Option* opt, const T& flag, const json& sec, const char* key, const T& fallback) {
  if (opt != nullptr && opt->count() > 0) return flag;
  if (auto it = sec.find(key); it != sec.end()) return it->get<T>();
  return fallback;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

fs::path prepare_out(const Common& c) {
  fs::path dir(c.out_dir);
  fs::create_directories(dir);
  return dir;
}

control::DeviceConfig device_from(const json& doc) {
  if (auto it = doc.find("device"); it != doc.end()) return control::device_config_from_json(*it);
  return control::default_device_config();
}

bus::BusTimingConfig bus_from(const json& doc) {
  if (auto it = doc.find("bus"); it != doc.end()) return bus::bus_config_from_json(*it, bus::calibrated_reference_config());
  return bus::calibrated_reference_config();
}

json echo(const std::string& sub, const Common& c, std::uint64_t seed, json resolved) {
  return {{"subcommand", sub}, {"seed", seed}, {"config_file", c.config_path}, {sub, std::move(resolved)}};
}

std::uint64_t resolve_seed(const Common& c, const json& doc) {
  return pick<std::uint64_t>(c.seed_opt, c.seed, doc, "seed", 0);
}

// ---------------------------------------------------------------- bus-bench

struct BusBenchArgs {
  std::size_t devices = 3;
  std::size_t iterations = bus::kReferenceIterations;
  double overhead_us = 0.0;
  CLI::Option* devices_opt = nullptr;
  CLI::Option* iterations_opt = nullptr;
  CLI::Option* overhead_opt = nullptr;
};

int cmd_bus_bench(const Common& c, const BusBenchArgs& a, std::ostream& out) {
  const json doc = load_config(c.config_path);
  const json sec = section(doc, "bus_bench");
  const auto seed = resolve_seed(c, doc);
  const auto devices = pick<std::size_t>(a.devices_opt, a.devices, sec, "devices", 3);
  const auto iterations = pick<std::size_t>(a.iterations_opt, a.iterations, sec, "iterations", bus::kReferenceIterations);
  if (devices < 1 || devices > 4) throw UsageError("--devices must be in 1..4");
  if (iterations < 1) throw UsageError("--iterations must be positive");

  auto cfg = bus_from(doc);
  std::optional<double> overhead;
  if (a.overhead_opt->count() > 0) {
    overhead = a.overhead_us;
  } else if (auto it = sec.find("overhead_us"); it != sec.end()) {
    overhead = it->get<double>();
  }
  if (overhead) {
    if (*overhead < 0.0) throw UsageError("--overhead must be nonnegative");
    cfg.per_sweep_overhead_s = *overhead * 1e-6;
    cfg.per_transaction_overhead_s = 0.0;
    cfg.overhead_jitter_s = 0.0;
  }

  const auto dir = prepare_out(c);
  json rows = json::array();
  std::ostringstream csv;
  csv << "devices,iterations,mean_hz,std_hz,ceiling_hz,reference_hz\n";
  out << "devices  mean_hz    std_hz    ceiling_hz  reference_hz\n";
  for (std::size_t n = 1; n <= devices; ++n) {
    const auto stats = bus::measure_loop_rate(cfg, n, iterations, seed);
    const double ceiling = 1.0 / (static_cast<double>(n) * 2.0 * bus::packet_time(cfg.baud));
    std::optional<double> reference;
    if (n <= 3) reference = bus::kReferenceLoopRates[n - 1].mean_hz;
    json row = bus::to_json(stats);
    row["ceiling_hz"] = ceiling;
    row["reference_hz"] = reference ? json(*reference) : json(nullptr);
    rows.push_back(row);
    csv << n << ',' << iterations << ',' << fmt("%.3f", stats.mean_hz) << ',' << fmt("%.3f", stats.std_hz) << ','
        << fmt("%.3f", ceiling) << ',' << (reference ? fmt("%.1f", *reference) : std::string{}) << '\n';
    out << fmt("%7.0f", static_cast<double>(n)) << "  " << fmt("%9.1f", stats.mean_hz) << "  "
        << fmt("%8.1f", stats.std_hz) << "  " << fmt("%10.1f", ceiling) << "  "
        << (reference ? fmt("%12.1f", *reference) : std::string("           -")) << '\n';
  }
  write_text(dir / "bus_bench.csv", csv.str());
  write_json(dir / "bus_bench.json", {{"bus", bus::to_json(cfg)}, {"rows", rows}});
  write_json(dir / "config_echo.json",
             echo("bus_bench", c, seed,
                  {{"devices", devices},
                   {"iterations", iterations},
                   {"overhead_us", overhead ? json(*overhead) : json(nullptr)},
                   {"bus", bus::to_json(cfg)}}));
  return kOk;
}

// --------------------------------------------------------------------- step

struct StepArgs {
  std::size_t trials = 10;
  double p0_kpa = 50.0;
  double p_cmd_kpa = 300.0;
  double duration = 3.0;
  CLI::Option* trials_opt = nullptr;
  CLI::Option* p0_opt = nullptr;
  CLI::Option* p_cmd_opt = nullptr;
  CLI::Option* duration_opt = nullptr;
};

/// Two-sided 95 % Student-t half width; zero for a single trial.
double ci_half_width(double sd, std::size_t n) {
  if (n < 2) return 0.0;
  const boost::math::students_t dist(static_cast<double>(n - 1));
  const double tq = boost::math::quantile(boost::math::complement(dist, 0.025));
  return tq * sd / std::sqrt(static_cast<double>(n));
}

int cmd_step(const Common& c, const StepArgs& a, std::ostream& out) {
  const json doc = load_config(c.config_path);
  const json sec = section(doc, "step");
  const auto seed = resolve_seed(c, doc);
  const auto trials = pick<std::size_t>(a.trials_opt, a.trials, sec, "trials", 10);
  const double p0_kpa = pick<double>(a.p0_opt, a.p0_kpa, sec, "p0_kPa", 50.0);
  const double p_cmd_kpa = pick<double>(a.p_cmd_opt, a.p_cmd_kpa, sec, "p_cmd_kPa", 300.0);
  const double duration = pick<double>(a.duration_opt, a.duration, sec, "duration_s", 3.0);
  if (trials < 1) throw UsageError("--trials must be positive");
  if (!(duration > 0.0)) throw UsageError("--duration must be positive");
  const auto device = device_from(doc);

  const double p0 = control::gauge_kpa_to_pa(p0_kpa);
  const double p_cmd = control::gauge_kpa_to_pa(p_cmd_kpa);
  std::vector<control::StepResponse> runs;
  for (std::size_t k = 0; k < trials; ++k) {
    auto cfg = device;
    cfg.seed = seed + k;
    runs.push_back(control::step_response(cfg, p0, p_cmd, duration));
  }
  const auto& t_log = runs.front().log;
  const std::size_t n = t_log.size();
  std::vector<double> t(n);
  for (std::size_t k = 0; k < n; ++k) t[k] = t_log[k].t;

  const auto dir = prepare_out(c);
  json chambers = json::array();
  out << "chamber  rise_s   overshoot  settling_s  sse_kPa  settled  ci_max_kPa\n";
  for (std::size_t i = 0; i < control::kChambers; ++i) {
    std::vector<double> mean(n, 0.0);
    std::vector<double> half(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      // Shifted by the first trial so identical trials give exactly zero spread.
      const double ref = runs.front().log[k].p[i];
      double s = 0.0, s2 = 0.0;
      for (const auto& r : runs) {
        const double d = r.log[k].p[i] - ref;
        s += d;
        s2 += d * d;
      }
      const double nt = static_cast<double>(trials);
      const double var = std::max(0.0, s2 - s * s / nt);
      const double sd = trials > 1 ? std::sqrt(var / (nt - 1.0)) : 0.0;
      mean[k] = ref + s / nt;
      half[k] = ci_half_width(sd, trials);
    }
    std::ostringstream csv;
    csv << "t_s,p_des_kPa,mean_kPa,ci_low_kPa,ci_high_kPa\n";
    double ci_max = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      ci_max = std::max(ci_max, half[k]);
      csv << fmt("%.4f", t[k]) << ',' << fmt("%.4f", p_cmd_kpa) << ',' << fmt("%.4f", control::pa_to_gauge_kpa(mean[k]))
          << ',' << fmt("%.4f", control::pa_to_gauge_kpa(mean[k] - half[k])) << ','
          << fmt("%.4f", control::pa_to_gauge_kpa(mean[k] + half[k])) << '\n';
    }
    write_text(dir / ("step_chamber" + std::to_string(i) + ".csv"), csv.str());
    const auto m = control::step_metrics(t, mean, p0, p_cmd);
    const auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    chambers.push_back({{"chamber", i},
                        {"rise_time_s", num(m.rise_time)},
                        {"overshoot", num(m.overshoot)},
                        {"settling_time_s", num(m.settling_time)},
                        {"steady_state_error_kPa", num(m.steady_state_error * 1e-3)},
                        {"settled", m.settled},
                        {"ci_max_half_width_kPa", ci_max * 1e-3}});
    out << fmt("%7.0f", static_cast<double>(i)) << "  " << fmt("%6.3f", m.rise_time) << "  " << fmt("%9.4f", m.overshoot)
        << "  " << fmt("%10.3f", m.settling_time) << "  " << fmt("%7.3f", m.steady_state_error * 1e-3) << "  "
        << (m.settled ? "    yes" : "     no") << "  " << fmt("%10.4f", ci_max * 1e-3) << '\n';
  }
  write_json(dir / "step_metrics.json", {{"trials", trials},
                                         {"p0_kPa", p0_kpa},
                                         {"p_cmd_kPa", p_cmd_kpa},
                                         {"band", 0.05},
                                         {"chambers", chambers}});
  write_json(dir / "config_echo.json",
             echo("step", c, seed,
                  {{"trials", trials},
                   {"p0_kPa", p0_kpa},
                   {"p_cmd_kPa", p_cmd_kpa},
                   {"duration_s", duration},
                   {"device", control::to_json(device)}}));
  return kOk;
}

// -------------------------------------------------------------------- track

struct TrackArgs {
  std::size_t devices = 1;
  double duration = 20.0;
  std::string reference = "sine";
  double frequency = 0.2;
  double lo_kpa = 50.0;
  double hi_kpa = 300.0;
  bool use_bus = false;
  CLI::Option* devices_opt = nullptr;
  CLI::Option* duration_opt = nullptr;
  CLI::Option* reference_opt = nullptr;
  CLI::Option* frequency_opt = nullptr;
  CLI::Option* lo_opt = nullptr;
  CLI::Option* hi_opt = nullptr;
  CLI::Option* bus_opt = nullptr;
};

int cmd_track(const Common& c, const TrackArgs& a, std::ostream& out) {
  const json doc = load_config(c.config_path);
  const json sec = section(doc, "track");
  const auto seed = resolve_seed(c, doc);
  const auto devices = pick<std::size_t>(a.devices_opt, a.devices, sec, "devices", 1);
  const double duration = pick<double>(a.duration_opt, a.duration, sec, "duration_s", 20.0);
  const auto reference = pick<std::string>(a.reference_opt, a.reference, sec, "reference", "sine");
  const double frequency = pick<double>(a.frequency_opt, a.frequency, sec, "frequency_Hz", 0.2);
  const double lo = pick<double>(a.lo_opt, a.lo_kpa, sec, "lo_kPa", 50.0);
  const double hi = pick<double>(a.hi_opt, a.hi_kpa, sec, "hi_kPa", 300.0);
  const bool use_bus = pick<bool>(a.bus_opt, a.use_bus, sec, "bus", false) || devices > 1;
  if (devices < 1 || devices > wire::kMaxDevices) throw UsageError("--devices must be in 1..256");
  if (!(duration > 0.0)) throw UsageError("--duration must be positive");
  if (!(lo < hi)) throw UsageError("reference range is empty");
  if (reference != "sine" && reference != "levels") throw UsageError("--reference must be 'sine' or 'levels'");

  const auto device = device_from(doc);
  const double dt = device.control_dt();
  std::vector<control::DeviceConfig> configs;
  std::vector<control::PressureReference> refs;
  for (std::size_t d = 0; d < devices; ++d) {
    auto cfg = device;
    cfg.seed = seed + d;
    configs.push_back(cfg);
    const double lo_pa = control::gauge_kpa_to_pa(lo);
    const double hi_pa = control::gauge_kpa_to_pa(hi);
    refs.push_back(reference == "sine" ? control::sine_reference(duration, dt, frequency, lo_pa, hi_pa)
                                       : control::level_reference(duration, dt, lo_pa, hi_pa, seed + d));
  }
  std::vector<control::TrackingResult> results;
  const auto bus_cfg = bus_from(doc);
  if (use_bus) {
    results = control::track_on_bus(bus_cfg, configs, refs, duration, seed);
  } else {
    results.push_back(control::track_trajectory(configs.front(), refs.front()));
  }

  const auto dir = prepare_out(c);
  json devs = json::array();
  out << "device  address  iae0_Pa_s    iae1_Pa_s    iae2_Pa_s    iae3_Pa_s\n";
  for (std::size_t d = 0; d < results.size(); ++d) {
    std::ostringstream csv;
    control::write_log_csv(csv, results[d].log);
    write_text(dir / ("track_device" + std::to_string(d) + ".csv"), csv.str());
    const auto addr = wire::DeviceAddress::from_index(d).value;
    char hex[8];
    std::snprintf(hex, sizeof hex, "0x%04X", addr);
    devs.push_back({{"device", d}, {"address", hex}, {"samples", results[d].log.size()}, {"iae_Pa_s", results[d].iae}});
    out << fmt("%6.0f", static_cast<double>(d)) << "  " << hex;
    for (double v : results[d].iae) out << "  " << fmt("%11.2f", v);
    out << '\n';
  }
  write_json(dir / "track_metrics.json", {{"via_bus", use_bus}, {"devices", devs}});
  json resolved = {{"devices", devices},   {"duration_s", duration}, {"reference", reference},
                   {"frequency_Hz", frequency}, {"lo_kPa", lo},     {"hi_kPa", hi},
                   {"bus", use_bus},       {"device", control::to_json(device)}};
  if (use_bus) resolved["bus_timing"] = bus::to_json(bus_cfg);
  write_json(dir / "config_echo.json", echo("track", c, seed, resolved));
  return kOk;
}

// ----------------------------------------------------------------- generate

struct GenerateArgs {
  double duration = 220.0;
  double noise = 0.0;
  double lo_kpa = 50.0;
  double hi_kpa = 300.0;
  std::string output;
  CLI::Option* duration_opt = nullptr;
  CLI::Option* noise_opt = nullptr;
  CLI::Option* lo_opt = nullptr;
  CLI::Option* hi_opt = nullptr;
  CLI::Option* output_opt = nullptr;
};

int cmd_generate(const Common& c, const GenerateArgs& a, std::ostream& out) {
  const json doc = load_config(c.config_path);
  const json sec = section(doc, "generate");
  const auto seed = resolve_seed(c, doc);
  sysid::GenerateOptions g;
  g.seed = seed;
  g.duration = pick<double>(a.duration_opt, a.duration, sec, "duration_s", 220.0);
  g.noise_fraction = pick<double>(a.noise_opt, a.noise, sec, "noise_fraction", 0.0);
  g.lo_kpa = pick<double>(a.lo_opt, a.lo_kpa, sec, "lo_kPa", 50.0);
  g.hi_kpa = pick<double>(a.hi_opt, a.hi_kpa, sec, "hi_kPa", 300.0);
  if (!(g.duration > 0.0)) throw UsageError("--duration must be positive");
  if (g.noise_fraction < 0.0) throw UsageError("--noise must be nonnegative");
  if (!(g.lo_kpa < g.hi_kpa)) throw UsageError("command range is empty");
  const auto device = device_from(doc);
  const auto data = sysid::generate_dataset(device, g);

  const auto dir = prepare_out(c);
  const fs::path target = a.output.empty() ? dir / "dataset.csv" : fs::path(a.output);
  std::ostringstream csv;
  sysid::write_dataset_csv(csv, data);
  write_text(target, csv.str());
  out << "wrote " << data.size() << " rows to " << target.string() << '\n';
  write_json(dir / "config_echo.json", echo("generate", c, seed,
                                            {{"duration_s", g.duration},
                                             {"noise_fraction", g.noise_fraction},
                                             {"lo_kPa", g.lo_kpa},
                                             {"hi_kPa", g.hi_kpa},
                                             {"device", control::to_json(device)}}));
  return kOk;
}

// -------------------------------------------------------------- fit/compare

struct FitArgs {
  std::string data;
  std::string model = "nonlinear";
  std::vector<std::string> models;
  std::size_t restarts = 20;
  unsigned threads = 1;
  std::size_t n_train = 20000;
  std::vector<std::size_t> chambers;
  std::size_t initial_window = 50;
  CLI::Option* data_opt = nullptr;
  CLI::Option* model_opt = nullptr;
  CLI::Option* models_opt = nullptr;
  CLI::Option* restarts_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* n_train_opt = nullptr;
  CLI::Option* chambers_opt = nullptr;
  CLI::Option* initial_window_opt = nullptr;
};

sysid::FitOptions fit_options(const json& doc, std::size_t restarts, unsigned threads, std::uint64_t seed) {
  sysid::FitOptions o;
  o.n_restarts = restarts;
  o.threads = threads;
  o.seed = seed;
  const json opt = section(doc, "optimizer");
  o.lm.max_iterations = opt.value("max_iterations", o.lm.max_iterations);
  o.lm.ftol = opt.value("ftol", o.lm.ftol);
  o.lm.xtol = opt.value("xtol", o.lm.xtol);
  o.lm.gtol = opt.value("gtol", o.lm.gtol);
  o.nelder_mead.max_evaluations = opt.value("nelder_mead_max_evaluations", o.nelder_mead.max_evaluations);
  o.nelder_mead_fallback = opt.value("nelder_mead_fallback", o.nelder_mead_fallback);
  const auto device = device_from(doc);
  for (const auto& ch : device.chambers) {
    if (const auto* nl = std::get_if<dynamics::NonlinearParams>(&ch.model)) {
      o.nonlinear_context = *nl;
      o.parametric_context.p_atm = nl->p_atm;
      o.parametric_context.p_src = nl->p_src;
      o.parametric_context.geometry = nl->geometry;
      break;
    }
  }
  return o;
}

json optimizer_echo(const sysid::FitOptions& o) {
  return {{"max_iterations", o.lm.max_iterations},
          {"ftol", o.lm.ftol},
          {"xtol", o.lm.xtol},
          {"gtol", o.lm.gtol},
          {"nelder_mead_max_evaluations", o.nelder_mead.max_evaluations},
          {"nelder_mead_fallback", o.nelder_mead_fallback}};
}

std::pair<sysid::Dataset, sysid::Dataset> train_split(const sysid::Dataset& data, std::size_t n_train,
                                                      bool need_validation) {
  if (data.size() < 3) throw sysid::DataError("dataset has fewer than 3 rows");
  std::size_t n = std::min(n_train, data.size());
  if (need_validation && data.size() - n < 2) n = data.size() - data.size() / 10;
  return sysid::split_dataset(data, n);
}

std::string data_path(const FitArgs& a, const json& sec) {
  const auto path = pick<std::string>(a.data_opt, a.data, sec, "data", "");
  if (path.empty()) throw UsageError("--data is required");
  return path;
}

int cmd_fit(const Common& c, const FitArgs& a, std::ostream& out) {
  const json doc = load_config(c.config_path);
  const json sec = section(doc, "fit");
  const auto seed = resolve_seed(c, doc);
  const auto path = data_path(a, sec);
  const auto model_name = pick<std::string>(a.model_opt, a.model, sec, "model", "nonlinear");
  const auto restarts = pick<std::size_t>(a.restarts_opt, a.restarts, sec, "restarts", 20);
  const auto threads = pick<unsigned>(a.threads_opt, a.threads, sec, "threads", 1);
  const auto n_train = pick<std::size_t>(a.n_train_opt, a.n_train, sec, "n_train", 20000);
  auto chambers = pick<std::vector<std::size_t>>(a.chambers_opt, a.chambers, sec, "chambers", {0, 1, 2, 3});
  dynamics::ModelKind kind;
  try {
    kind = dynamics::parse_model_kind(model_name);
  } catch (const std::exception&) {
    throw UsageError("unknown model '" + model_name + "'");
  }
  if (restarts < 1) throw UsageError("--restarts must be positive");
  for (auto ch : chambers) {
    if (ch >= control::kChambers) throw UsageError("chamber index out of range");
  }

  const auto data = sysid::load_dataset_file(path);
  const auto [train, rest] = train_split(data, n_train, false);
  const auto options = fit_options(doc, restarts, threads, seed);
  const auto dir = prepare_out(c);

  json results = json::array();
  out << "chamber  r2_pdot_train  iae_train_Pa_s  converged\n";
  for (auto ch : chambers) {
    const auto r = sysid::fit(kind, train, ch, options);
    results.push_back(sysid::to_json(r, c.timing));
    out << fmt("%7.0f", static_cast<double>(ch)) << "  " << fmt("%13.6f", r.r_squared) << "  "
        << fmt("%14.2f", r.iae) << "  " << r.n_converged << "/" << r.n_restarts << '\n';
  }
  write_json(dir / ("fit_" + model_name + ".json"),
             {{"model_kind", model_name}, {"n_train", train.size()}, {"chambers", results}});
  write_json(dir / "config_echo.json", echo("fit", c, seed,
                                            {{"data", path},
                                             {"model", model_name},
                                             {"restarts", restarts},
                                             {"threads", threads},
                                             {"n_train", train.size()},
                                             {"chambers", chambers},
                                             {"optimizer", optimizer_echo(options)},
                                             {"parameter_space", sysid::to_json(sysid::ParameterSpace(
                                                                     kind, sysid::context_for(kind, options)))}}));
  return kOk;
}

int cmd_compare(const Common& c, const FitArgs& a, std::ostream& out) {
  const json doc = load_config(c.config_path);
  const json sec = section(doc, "compare");
  const auto seed = resolve_seed(c, doc);
  const auto path = data_path(a, sec);
  const auto restarts = pick<std::size_t>(a.restarts_opt, a.restarts, sec, "restarts", 20);
  const auto threads = pick<unsigned>(a.threads_opt, a.threads, sec, "threads", 1);
  const auto n_train = pick<std::size_t>(a.n_train_opt, a.n_train, sec, "n_train", 20000);
  const auto names = pick<std::vector<std::string>>(a.models_opt, a.models, sec, "models",
                                                    {"linear", "nonlinear", "parametric"});
  if (restarts < 1) throw UsageError("--restarts must be positive");
  sysid::CompareOptions options;
  options.models.clear();
  for (const auto& name : names) {
    try {
      options.models.push_back(dynamics::parse_model_kind(name));
    } catch (const std::exception&) {
      throw UsageError("unknown model '" + name + "'");
    }
  }
  if (options.models.empty()) throw UsageError("no models selected");
  options.fit = fit_options(doc, restarts, threads, seed);
  options.eval_samples = c.timing ? 100000 : 0;
  options.initial_window = pick<std::size_t>(a.initial_window_opt, a.initial_window, sec, "initial_window", 50);

  const auto data = sysid::load_dataset_file(path);
  const auto [train, validation] = train_split(data, n_train, true);
  const auto report = sysid::compare_models(train, validation, options);
  const auto dir = prepare_out(c);

  write_json(dir / "comparison.json", sysid::to_json(report, c.timing));
  std::ostringstream csv;
  sysid::write_comparison_csv(csv, report, c.timing);
  write_text(dir / "comparison.csv", csv.str());
  out << csv.str();

  std::ostringstream pred;
  pred << "t_s";
  for (std::size_t i = 0; i < control::kChambers; ++i) pred << ",p" << i << "_kPa";
  for (const auto kind : report.models) {
    for (std::size_t i = 0; i < control::kChambers; ++i) pred << ',' << dynamics::to_string(kind) << i << "_kPa";
  }
  pred << '\n';
  std::vector<std::vector<double>> series;
  for (const auto kind : report.models) {
    for (std::size_t i = 0; i < control::kChambers; ++i) {
      const auto& cell = report.cell(kind, i);
      series.push_back(cell.predicted);
    }
  }
  for (std::size_t k = 0; k < validation.size(); ++k) {
    pred << fmt("%.4f", validation.t[k]);
    for (std::size_t i = 0; i < control::kChambers; ++i) pred << ',' << fmt("%.4f", control::pa_to_gauge_kpa(validation.p[k][i]));
    for (const auto& s : series) {
      pred << ',';
      if (!s.empty()) pred << fmt("%.4f", control::pa_to_gauge_kpa(s[k]));
    }
    pred << '\n';
  }
  write_text(dir / "predictions.csv", pred.str());
  write_json(dir / "config_echo.json", echo("compare", c, seed,
                                            {{"data", path},
                                             {"models", names},
                                             {"restarts", restarts},
                                             {"threads", threads},
                                             {"n_train", train.size()},
                                             {"n_validation", validation.size()},
                                             {"initial_window", options.initial_window},
                                             {"optimizer", optimizer_echo(options.fit)}}));
  return kOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("-o,--out", c.out_dir, "Output directory")->capture_default_str();
  c.seed_opt = sub->add_option("-s,--seed", c.seed, "Random seed");
  sub->add_flag("--timing", c.timing, "Include wall-clock measurements (outputs are then not reproducible)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pneumatic drive bus, plant and identification toolkit", "pneudrive"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "pneudrive 0.1.0");

  Common common_bus, common_step, common_track, common_gen, common_fit, common_cmp;

  BusBenchArgs bb;
  auto* s_bus = app.add_subcommand("bus-bench", "Simulated loop-rate benchmark over 1..N devices");
  add_common(s_bus, common_bus);
  bb.devices_opt = s_bus->add_option("-n,--devices", bb.devices, "Largest device count (1..4)");
  bb.iterations_opt = s_bus->add_option("-i,--iterations", bb.iterations, "Sweeps per device count");
  bb.overhead_opt = s_bus->add_option("--overhead", bb.overhead_us,
                                      "Per-sweep master overhead in microseconds; disables calibration and jitter");

  StepArgs st;
  auto* s_step = app.add_subcommand("step", "Closed-loop step response, mean and 95% CI over seeded trials");
  add_common(s_step, common_step);
  st.trials_opt = s_step->add_option("--trials", st.trials, "Number of trials");
  st.p0_opt = s_step->add_option("--p0", st.p0_kpa, "Initial pressure, kPa gauge");
  st.p_cmd_opt = s_step->add_option("--p-cmd", st.p_cmd_kpa, "Commanded pressure, kPa gauge");
  st.duration_opt = s_step->add_option("--duration", st.duration, "Simulated seconds");

  TrackArgs tr;
  auto* s_track = app.add_subcommand("track", "Trajectory tracking, optionally through the simulated bus");
  add_common(s_track, common_track);
  tr.devices_opt = s_track->add_option("-n,--devices", tr.devices, "Daisy-chained devices (more than one implies --bus)");
  tr.duration_opt = s_track->add_option("--duration", tr.duration, "Simulated seconds");
  tr.reference_opt = s_track->add_option("--reference", tr.reference, "sine or levels");
  tr.frequency_opt = s_track->add_option("--frequency", tr.frequency, "Sine frequency, Hz");
  tr.lo_opt = s_track->add_option("--lo", tr.lo_kpa, "Lowest command, kPa gauge");
  tr.hi_opt = s_track->add_option("--hi", tr.hi_kpa, "Highest command, kPa gauge");
  tr.bus_opt = s_track->add_flag("--bus", tr.use_bus, "Poll through the simulated bus");

  GenerateArgs ge;
  auto* s_gen = app.add_subcommand("generate", "Synthetic identification dataset in the log CSV schema");
  add_common(s_gen, common_gen);
  ge.duration_opt = s_gen->add_option("--duration", ge.duration, "Simulated seconds (100 rows per second)");
  ge.noise_opt = s_gen->add_option("--noise", ge.noise, "Measurement noise, fraction of absolute pressure");
  ge.lo_opt = s_gen->add_option("--lo", ge.lo_kpa, "Lowest command, kPa gauge");
  ge.hi_opt = s_gen->add_option("--hi", ge.hi_kpa, "Highest command, kPa gauge");
  ge.output_opt = s_gen->add_option("--output", ge.output, "CSV path (default <out>/dataset.csv)");

  FitArgs fi;
  auto* s_fit = app.add_subcommand("fit", "Multi-start fit of one model per chamber");
  add_common(s_fit, common_fit);
  fi.data_opt = s_fit->add_option("-d,--data", fi.data, "Dataset CSV");
  fi.model_opt = s_fit->add_option("-m,--model", fi.model, "linear, nonlinear or parametric");
  fi.restarts_opt = s_fit->add_option("-r,--restarts", fi.restarts, "Random restarts");
  fi.threads_opt = s_fit->add_option("-j,--threads", fi.threads, "Worker threads for restarts");
  fi.n_train_opt = s_fit->add_option("--n-train", fi.n_train, "Leading rows used for training");
  fi.chambers_opt = s_fit->add_option("--chambers", fi.chambers, "Chambers to fit (default all)");

  FitArgs cm;
  auto* s_cmp = app.add_subcommand("compare", "Fit all models and compare open-loop validation error");
  add_common(s_cmp, common_cmp);
  cm.data_opt = s_cmp->add_option("-d,--data", cm.data, "Dataset CSV");
  cm.models_opt = s_cmp->add_option("-m,--models", cm.models, "Models to compare (default all three)");
  cm.restarts_opt = s_cmp->add_option("-r,--restarts", cm.restarts, "Random restarts per fit");
  cm.threads_opt = s_cmp->add_option("-j,--threads", cm.threads, "Worker threads for restarts");
  cm.n_train_opt = s_cmp->add_option("--n-train", cm.n_train, "Leading rows used for training; the rest validates");
  cm.initial_window_opt = s_cmp->add_option("--initial-window", cm.initial_window,
                                            "Validation samples used to estimate the initial pressure (1 = first sample)");

  std::vector<const char*> argv{"pneudrive"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (s_bus->parsed()) return cmd_bus_bench(common_bus, bb, out);
    if (s_step->parsed()) return cmd_step(common_step, st, out);
    if (s_track->parsed()) return cmd_track(common_track, tr, out);
    if (s_gen->parsed()) return cmd_generate(common_gen, ge, out);
    if (s_fit->parsed()) return cmd_fit(common_fit, fi, out);
    if (s_cmp->parsed()) return cmd_compare(common_cmp, cm, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const sysid::DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const sysid::FitError& e) {
    err << "fit failed: " << e.what() << '\n' << e.diagnostics().dump(2) << '\n';
    return kNumerical;
  } catch (const dynamics::DivergenceError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}

}  // namespace pneudrive::cli
