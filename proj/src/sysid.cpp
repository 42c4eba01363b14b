#include "pneudrive/sysid.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "pneudrive/params_json.hpp"

namespace pneudrive::sysid {

namespace {

std::string with_row(const std::string& what, std::optional<std::size_t> row) {
  return row ? "row " + std::to_string(*row) + ": " + what : what;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto first = cell.find_first_not_of(" \t\r");
    const auto last = cell.find_last_not_of(" \t\r");
    out.push_back(first == std::string::npos ? std::string{} : cell.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

const std::vector<std::string>& required_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c = split_csv_line(control::kLogCsvHeader);
    return c;
  }();
  return cols;
}

double finite_or_inf(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::infinity(); }

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

DataError::DataError(const std::string& what, std::optional<std::size_t> row)
    : std::runtime_error(with_row(what, row)), row_(row) {}

std::vector<double> Dataset::pressure(std::size_t chamber) const {
  std::vector<double> out(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) out[k] = p[k][chamber];
  return out;
}

std::vector<dynamics::ChamberInput> Dataset::inputs(std::size_t chamber) const {
  std::vector<dynamics::ChamberInput> out(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) out[k] = {p_cmd[k][chamber], u[k][chamber], joint[k]};
  return out;
}

Dataset load_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty dataset: missing header", 1);
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < header.size(); ++c) index[header[c]] = c;
  std::vector<std::size_t> col;
  for (const auto& name : required_columns()) {
    const auto it = index.find(name);
    if (it == index.end()) throw DataError("missing column '" + name + "'", 1);
    col.push_back(it->second);
  }

  Dataset d;
  std::vector<std::size_t> line_of;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()),
                      line_no);
    }
    std::vector<double> v(col.size());
    for (std::size_t c = 0; c < col.size(); ++c) {
      const std::string& s = cells[col[c]];
      char* end = nullptr;
      const double x = std::strtod(s.c_str(), &end);
      if (s.empty() || end != s.c_str() + s.size()) {
        throw DataError("unparsable value '" + s + "' in column '" + required_columns()[c] + "'", line_no);
      }
      if (!std::isfinite(x)) throw DataError("non-finite value in column '" + required_columns()[c] + "'", line_no);
      v[c] = x;
    }
    d.t.push_back(v[0]);
    PressureArray p_des{}, p{}, u{};
    for (std::size_t i = 0; i < kChambers; ++i) {
      p_des[i] = control::gauge_kpa_to_pa(v[1 + i]);
      p[i] = control::gauge_kpa_to_pa(v[5 + i]);
      u[i] = v[9 + i];
    }
    d.p_cmd.push_back(p_des);
    d.p.push_back(p);
    d.u.push_back(u);
    dynamics::JointState j;
    j.q = {v[13], v[14]};
    j.q_dot = {v[15], v[16]};
    d.joint.push_back(j);
    line_of.push_back(line_no);
  }

  if (d.size() >= 2) {
    std::vector<double> steps(d.size() - 1);
    for (std::size_t k = 1; k < d.size(); ++k) steps[k - 1] = d.t[k] - d.t[k - 1];
    std::nth_element(steps.begin(), steps.begin() + steps.size() / 2, steps.end());
    const double dt = steps[steps.size() / 2];
    if (!(dt > 0.0)) throw DataError("time column is not increasing", line_of[1]);
    for (std::size_t k = 1; k < d.size(); ++k) {
      if (std::abs(d.t[k] - d.t[k - 1] - dt) > 0.01 * dt) {
        throw DataError("nonuniform time grid (step " + std::to_string(d.t[k] - d.t[k - 1]) + " s, expected " +
                            std::to_string(dt) + " s)",
                        line_of[k]);
      }
    }
    d.dt = dt;
  }
  return d;
}

Dataset load_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return load_dataset(in);
}

control::TrackingLog dataset_to_log(const Dataset& data) {
  control::TrackingLog log(data.size());
  for (std::size_t k = 0; k < data.size(); ++k) log[k] = {data.t[k], data.p_cmd[k], data.p[k], data.u[k], data.joint[k]};
  return log;
}

void write_dataset_csv(std::ostream& out, const Dataset& data) { control::write_log_csv(out, dataset_to_log(data)); }

Dataset dataset_from_log(const control::TrackingLog& log, double dt) {
  Dataset d;
  d.dt = dt;
  for (const auto& row : log) {
    d.t.push_back(row.t);
    d.p_cmd.push_back(row.p_des);
    d.p.push_back(row.p);
    d.u.push_back(row.u);
    d.joint.push_back(row.joint);
  }
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, std::size_t n_train) {
  if (n_train > data.size()) {
    throw DataError("cannot take " + std::to_string(n_train) + " training rows from " + std::to_string(data.size()));
  }
  const auto slice = [&](std::size_t from, std::size_t to) {
    Dataset d;
    d.dt = data.dt;
    const auto a = static_cast<std::ptrdiff_t>(from);
    const auto b = static_cast<std::ptrdiff_t>(to);
    d.t.assign(data.t.begin() + a, data.t.begin() + b);
    d.p.assign(data.p.begin() + a, data.p.begin() + b);
    d.p_cmd.assign(data.p_cmd.begin() + a, data.p_cmd.begin() + b);
    d.u.assign(data.u.begin() + a, data.u.begin() + b);
    d.joint.assign(data.joint.begin() + a, data.joint.begin() + b);
    return d;
  };
  return {slice(0, n_train), slice(n_train, data.size())};
}

Dataset with_measurement_noise(const Dataset& data, double fraction, std::uint64_t seed) {
  if (fraction < 0.0) throw std::invalid_argument("noise fraction must be nonnegative");
  Dataset d = data;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& row : d.p) {
    for (double& v : row) v += fraction * std::abs(v) * n01(rng);
  }
  return d;
}

std::vector<double> central_difference(std::span<const double> x, double dt) {
  const std::size_t n = x.size();
  std::vector<double> d(n, 0.0);
  if (n < 2) return d;
  if (n == 2) {
    d[0] = d[1] = (x[1] - x[0]) / dt;
    return d;
  }
  d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt);
  for (std::size_t k = 1; k + 1 < n; ++k) d[k] = (x[k + 1] - x[k - 1]) / (2.0 * dt);
  d[n - 1] = (3.0 * x[n - 1] - 4.0 * x[n - 2] + x[n - 3]) / (2.0 * dt);
  return d;
}

Dataset generate_dataset(const control::DeviceConfig& device, const GenerateOptions& options) {
  if (!(options.duration > 0.0)) throw std::invalid_argument("duration must be positive");
  if (!(options.lo_kpa < options.hi_kpa)) throw std::invalid_argument("command range is empty");
  const double dt = device.control_dt();
  const auto reference = control::level_reference(options.duration, dt, control::gauge_kpa_to_pa(options.lo_kpa),
                                                  control::gauge_kpa_to_pa(options.hi_kpa), options.seed);
  const bool all_linear = std::all_of(device.chambers.begin(), device.chambers.end(), [](const auto& ch) {
    return dynamics::kind_of(ch.model) == ModelKind::linear;
  });

  Dataset d;
  if (all_linear) {
    const std::size_t n = reference.samples.size();
    d.dt = dt;
    d.t.resize(n);
    d.p.resize(n);
    d.p_cmd = reference.samples;
    d.u.resize(n);
    d.joint.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      d.t[k] = static_cast<double>(k) * dt;
      d.joint[k] = device.joint.at(d.t[k]);
    }
    for (std::size_t i = 0; i < kChambers; ++i) {
      const auto in = d.inputs(i);
      const auto p = dynamics::integrate(device.chambers[i].model, i, device.initial_pressure_pa, in, dt);
      for (std::size_t k = 0; k < n; ++k) {
        d.p[k][i] = p[k];
        d.u[k][i] = control::control_law(d.p_cmd[k][i], p[k], device.chambers[i].controller);
      }
    }
  } else {
    d = dataset_from_log(control::track_trajectory(device, reference).log, dt);
  }
  if (options.noise_fraction > 0.0) d = with_measurement_noise(d, options.noise_fraction, splitmix64(options.seed));
  return d;
}

double r_squared(std::span<const double> predicted, std::span<const double> measured) {
  if (predicted.size() != measured.size()) throw std::invalid_argument("R^2 needs equal-length series");
  if (measured.empty()) throw std::invalid_argument("R^2 needs nonempty series");
  double mean = 0.0;
  for (double v : measured) mean += v;
  mean /= static_cast<double>(measured.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t k = 0; k < measured.size(); ++k) {
    ss_res += (measured[k] - predicted[k]) * (measured[k] - predicted[k]);
    ss_tot += (measured[k] - mean) * (measured[k] - mean);
  }
  // A constant signal has no variance to explain.
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

Metrics metrics(std::span<const double> predicted, std::span<const double> measured, double dt) {
  if (predicted.size() != measured.size()) {
    throw std::invalid_argument("metrics: predicted has " + std::to_string(predicted.size()) + " samples, measured " +
                                std::to_string(measured.size()));
  }
  if (measured.size() < 2) throw std::invalid_argument("metrics need at least two samples");
  Metrics m;
  m.r_squared = r_squared(predicted, measured);
  m.r_squared_pdot = r_squared(central_difference(predicted, dt), central_difference(measured, dt));
  double sum = 0.0;
  for (std::size_t k = 0; k < measured.size(); ++k) sum += std::abs(measured[k] - predicted[k]);
  m.iae = sum * dt;
  m.sum_abs_error_gpa = sum * 1e-9;
  return m;
}

double estimate_initial_pressure(const ModelParams& params, const Dataset& data, std::size_t chamber,
                                 std::size_t window) {
  if (chamber >= kChambers) throw std::out_of_range("chamber index out of range");
  if (data.empty()) throw DataError("initial pressure estimate needs a nonempty dataset");
  const double first = data.p[0][chamber];
  const std::size_t n = std::min(window, data.size());
  if (n <= 1) return first;

  const auto in = data.inputs(chamber);
  const std::span<const dynamics::ChamberInput> head(in.data(), n);
  const auto measured = data.pressure(chamber);
  const auto residuals = [&](std::span<const double> x, std::span<double> r) {
    try {
      const auto p = dynamics::integrate(params, chamber, x[0], head, data.dt);
      for (std::size_t k = 0; k < n; ++k) r[k] = p[k] - measured[k];
    } catch (const dynamics::DivergenceError&) {
      std::fill(r.begin(), r.end(), std::numeric_limits<double>::infinity());
    }
  };
  const Box box{{0.5 * first}, {1.5 * first}};
  LmOptions opt;
  opt.ftol = 1e-12;
  const auto best = minimize_least_squares(residuals, n, {first}, box, opt);
  return std::isfinite(best.cost) ? best.x[0] : first;
}

std::vector<double> predict_open_loop(const ModelParams& params, const Dataset& data, std::size_t chamber,
                                      std::size_t initial_window) {
  if (chamber >= kChambers) throw std::out_of_range("chamber index out of range");
  if (data.empty()) return {};
  const double p0 = estimate_initial_pressure(params, data, chamber, initial_window);
  if (data.size() == 1) return {p0};
  const auto in = data.inputs(chamber);
  return dynamics::integrate(params, chamber, p0, in, data.dt);
}

double ParamSpec::to_unit(double value) const {
  double z = 0.0;
  if (upper == lower) return 0.0;
  if (log_scale) {
    z = (std::log(value) - std::log(lower)) / (std::log(upper) - std::log(lower));
  } else {
    z = (value - lower) / (upper - lower);
  }
  return std::clamp(z, 0.0, 1.0);
}

double ParamSpec::from_unit(double z) const {
  z = std::clamp(z, 0.0, 1.0);
  if (log_scale) return std::exp(std::log(lower) + z * (std::log(upper) - std::log(lower)));
  return lower + z * (upper - lower);
}

ParameterSpace::ParameterSpace(ModelKind kind, ModelParams context) : kind_(kind), context_(std::move(context)) {
  if (dynamics::kind_of(context_) != kind) throw std::invalid_argument("context does not match model kind");
  switch (kind) {
    case ModelKind::linear:
      specs_ = {{"alpha_per_s", 1e-3, 1e3, 0.1, 100.0, true}, {"beta_per_s", 1e-3, 1e3, 0.1, 100.0, true}};
      break;
    case ModelKind::nonlinear:
      specs_ = {{"leak_in_area_units", 0.0, 20.0, 0.0, 3.0, false},
                {"leak_out_area_units", 0.0, 20.0, 0.0, 3.0, false},
                {"gain_area_units_per_V", 0.1, 1000.0, 1.0, 100.0, true},
                {"center_in_V", 0.0, 12.0, 0.0, 12.0, false},
                {"center_out_V", 0.0, 12.0, 0.0, 12.0, false},
                {"volume_weight", 0.0, 5.0, 0.0, 2.0, false}};
      break;
    case ModelKind::parametric:
      specs_ = {{"c1_V", 0.0, 12.0, 0.0, 12.0, false},
                {"c2_Pa_per_V", -1e7, 1e7, -1e6, 1e6, false},
                {"c3_Pa_per_V3", -1e6, 1e6, -1e5, 1e5, false},
                {"c4_Pa_s_per_m3", -1e10, 1e10, -1e9, 1e9, false},
                {"c5_per_m3", -1e5, 1e5, -1e4, 1e4, false},
                {"c6_per_m3", 0.0, 1e5, 0.0, 1e4, false},
                {"c7", 0.0, 10.0, 0.0, 2.0, false},
                {"c8_per_s", 0.0, 100.0, 0.0, 10.0, false},
                {"c9_per_s", 0.0, 100.0, 0.0, 20.0, false},
                {"c_b_Pa", -1e6, 1e6, -1e5, 1e5, false},
                {"c_s", -2.0, 2.0, 0.0, 2.0, false},
                {"c_gamma", 0.2, 4.0, 0.5, 3.0, false}};
      break;
  }
}

ModelParams ParameterSpace::decode(std::span<const double> z) const {
  if (z.size() != specs_.size()) throw std::invalid_argument("parameter vector has wrong length");
  std::vector<double> v(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) v[i] = specs_[i].from_unit(z[i]);
  switch (kind_) {
    case ModelKind::linear:
      return dynamics::LinearParams{v[0], v[1]};
    case ModelKind::nonlinear: {
      auto p = std::get<dynamics::NonlinearParams>(context_);
      p.valve = {v[0], v[1], v[2], v[3], v[4]};
      p.volume_weight = v[5];
      return p;
    }
    case ModelKind::parametric: {
      auto p = std::get<dynamics::ParametricParams>(context_);
      for (std::size_t i = 0; i < 9; ++i) p.c[i] = v[i];
      p.c_b = v[9];
      p.c_s = v[10];
      p.c_gamma = v[11];
      return p;
    }
  }
  return context_;
}

std::vector<double> ParameterSpace::values(const ModelParams& params) const {
  if (dynamics::kind_of(params) != kind_) throw std::invalid_argument("parameters do not match model kind");
  if (const auto* l = std::get_if<dynamics::LinearParams>(&params)) return {l->alpha, l->beta};
  if (const auto* n = std::get_if<dynamics::NonlinearParams>(&params)) {
    const auto& v = n->valve;
    return {v.leak_in, v.leak_out, v.gain, v.center_in, v.center_out, n->volume_weight};
  }
  const auto& p = std::get<dynamics::ParametricParams>(params);
  std::vector<double> out(p.c.begin(), p.c.end());
  out.insert(out.end(), {p.c_b, p.c_s, p.c_gamma});
  return out;
}

std::vector<double> ParameterSpace::encode(const ModelParams& params) const {
  auto v = values(params);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = specs_[i].to_unit(v[i]);
  return v;
}

nlohmann::json to_json(const ParameterSpace& space) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& s : space.specs()) {
    doc.push_back({{"name", s.name},
                   {"lower", s.lower},
                   {"upper", s.upper},
                   {"init_lower", s.init_lower},
                   {"init_upper", s.init_upper},
                   {"scale", s.log_scale ? "log" : "linear"}});
  }
  return doc;
}

FitError::FitError(const std::string& what, nlohmann::json diagnostics)
    : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}

std::uint64_t restart_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(splitmix64(seed) ^ (0xD1B54A32D192ED03ULL * (static_cast<std::uint64_t>(index) + 1)));
}

ModelParams context_for(ModelKind kind, const FitOptions& options) {
  switch (kind) {
    case ModelKind::linear:
      return dynamics::LinearParams{};
    case ModelKind::nonlinear:
      return options.nonlinear_context;
    case ModelKind::parametric:
      return options.parametric_context;
  }
  return dynamics::LinearParams{};
}

namespace {

/// Training data of one chamber with precomputed rate targets.
struct RateProblem {
  std::size_t chamber = 0;
  std::vector<double> p;
  std::vector<dynamics::ChamberInput> inputs;
  std::vector<double> pdot;
  double mean = 0.0;
  double scale = 1.0;
  double ss_tot = 0.0;

  RateProblem(const Dataset& data, std::size_t ch) : chamber(ch), p(data.pressure(ch)), inputs(data.inputs(ch)) {
    pdot = central_difference(p, data.dt);
    for (double v : pdot) mean += v;
    mean /= static_cast<double>(pdot.size());
    for (double v : pdot) ss_tot += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss_tot / static_cast<double>(pdot.size()));
    scale = sd > 0.0 ? 1.0 / sd : 1.0;
  }

  // Parametric fits get one extra residual per sample that keeps the rate
  // factor r above a small floor, so the optimizer stays among valid
  // parameterizations instead of converging into ones that are rejected.
  static constexpr double kRateFloor = 0.01;         // 1/s
  static constexpr double kRateFloorWeight = 1000.0;  // s

  std::size_t residual_count(ModelKind kind) const {
    return kind == ModelKind::parametric ? 2 * p.size() : p.size();
  }

  void residuals(const ModelParams& params, std::span<double> r) const {
    const std::size_t n = p.size();
    if (r.size() == n) {
      for (std::size_t k = 0; k < n; ++k) {
        const double model = dynamics::pressure_rate(params, p[k], inputs[k], chamber);
        r[k] = std::isfinite(model) ? (model - pdot[k]) * scale : 1e6;
      }
      return;
    }
    const auto& pp = std::get<dynamics::ParametricParams>(params);
    for (std::size_t k = 0; k < n; ++k) {
      const auto v = dynamics::chamber_volume(chamber, inputs[k].joint, pp.geometry);
      const double rate = dynamics::parametric_rate(inputs[k].u, v.volume, v.rate, pp);
      const double model = (dynamics::parametric_target(inputs[k].u, v.rate, pp) - p[k]) * rate;
      r[k] = std::isfinite(model) ? (model - pdot[k]) * scale : 1e6;
      r[n + k] = std::isfinite(rate) ? kRateFloorWeight * std::max(0.0, kRateFloor - rate) : 1e6;
    }
  }

  double r_squared(const ModelParams& params) const {
    double ss_res = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double e = dynamics::pressure_rate(params, p[k], inputs[k], chamber) - pdot[k];
      ss_res += e * e;
    }
    if (!std::isfinite(ss_res)) return -std::numeric_limits<double>::infinity();
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
  }

  bool rate_positive(const dynamics::ParametricParams& params) const {
    for (const auto& in : inputs) {
      const auto v = dynamics::chamber_volume(chamber, in.joint, params.geometry);
      const double r = dynamics::parametric_rate(in.u, v.volume, v.rate, params);
      if (!(r > 0.0)) return false;
    }
    return true;
  }
};

}  // namespace

FitResult fit(ModelKind kind, const Dataset& train, std::size_t chamber, const FitOptions& options) {
  if (chamber >= kChambers) throw std::out_of_range("chamber index out of range");
  if (train.size() < 3) throw DataError("training set needs at least 3 samples");
  if (!(train.dt > 0.0)) throw DataError("training set has no time step");
  if (options.n_restarts == 0) throw std::invalid_argument("at least one restart is required");
  const auto started = std::chrono::steady_clock::now();

  const ParameterSpace space(kind, context_for(kind, options));
  const RateProblem problem(train, chamber);
  const std::size_t n = space.size();
  const Box box{std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)};

  const ResidualFn residual_fn = [&](std::span<const double> z, std::span<double> r) {
    problem.residuals(space.decode(z), r);
  };
  const std::size_t m = problem.residual_count(kind);
  const CostFn cost_fn = [&](std::span<const double> z) {
    std::vector<double> r(m);
    problem.residuals(space.decode(z), r);
    double c = 0.0;
    for (double v : r) c += v * v;
    return 0.5 * c;
  };

  const auto run_restart = [&](std::size_t index) {
    RestartOutcome out;
    out.index = index;
    out.seed = restart_seed(options.seed, index);
    std::mt19937_64 rng(out.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto draw = [&] {
      std::vector<double> z(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = space.specs()[i];
        const double lo = s.to_unit(s.init_lower);
        const double hi = s.to_unit(s.init_upper);
        z[i] = lo + (hi - lo) * unit(rng);
      }
      return z;
    };

    std::vector<double> z0 = draw();
    if (kind == ModelKind::parametric) {
      std::size_t draws = 1;
      while (!problem.rate_positive(std::get<dynamics::ParametricParams>(space.decode(z0)))) {
        if (draws++ >= options.max_init_draws) {
          out.valid_start = false;
          out.termination = "no_valid_start";
          out.cost = std::numeric_limits<double>::infinity();
          out.r_squared_pdot = -std::numeric_limits<double>::infinity();
          out.params = space.decode(z0);
          return out;
        }
        z0 = draw();
      }
    }

    auto res = minimize_least_squares(residual_fn, m, z0, box, options.lm);
    if (kind == ModelKind::parametric && options.nelder_mead_fallback && !res.converged()) {
      auto nm = minimize_nelder_mead(cost_fn, res.x, box, options.nelder_mead);
      nm.evaluations += res.evaluations;
      if (nm.cost <= res.cost || !std::isfinite(res.cost)) res = std::move(nm);
    }
    out.params = space.decode(res.x);
    out.cost = finite_or_inf(res.cost);
    out.evaluations = res.evaluations;
    out.termination = std::string(to_string(res.termination));
    out.r_squared_pdot = problem.r_squared(out.params);
    out.converged = res.converged() && std::isfinite(out.cost) && std::isfinite(out.r_squared_pdot);
    if (kind == ModelKind::parametric && out.converged) {
      out.converged = problem.rate_positive(std::get<dynamics::ParametricParams>(out.params));
    }
    return out;
  };

  std::vector<RestartOutcome> outcomes(options.n_restarts);
  const unsigned workers = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(options.n_restarts)));
  if (workers == 1) {
    for (std::size_t i = 0; i < options.n_restarts; ++i) outcomes[i] = run_restart(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < options.n_restarts; i = next++) outcomes[i] = run_restart(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  FitResult result;
  result.model_kind = kind;
  result.chamber = chamber;
  result.n_restarts = options.n_restarts;
  std::optional<std::size_t> best;
  for (const auto& o : outcomes) {
    if (!o.converged) continue;
    ++result.n_converged;
    if (!best || o.r_squared_pdot > outcomes[*best].r_squared_pdot) best = o.index;
  }
  result.restarts = std::move(outcomes);
  if (!best) {
    nlohmann::json diag = {{"model_kind", std::string(dynamics::to_string(kind))},
                           {"chamber", chamber},
                           {"n_restarts", options.n_restarts},
                           {"restarts", nlohmann::json::array()}};
    for (const auto& o : result.restarts) {
      diag["restarts"].push_back({{"index", o.index},
                                  {"termination", o.termination},
                                  {"cost", number_or_null(o.cost)},
                                  {"r_squared_pdot", number_or_null(o.r_squared_pdot)}});
    }
    throw FitError("no restart of the " + std::string(dynamics::to_string(kind)) + " fit converged for chamber " +
                       std::to_string(chamber),
                   std::move(diag));
  }

  const auto& chosen = result.restarts[*best];
  result.params = chosen.params;
  result.r_squared = chosen.r_squared_pdot;
  result.best_restart_index = chosen.index;
  result.best_restart_seed = chosen.seed;
  try {
    const auto predicted = predict_open_loop(result.params, train, chamber);
    result.iae = metrics(predicted, problem.p, train.dt).iae;
  } catch (const dynamics::DivergenceError&) {
    result.iae = std::numeric_limits<double>::infinity();
  }
  result.fit_wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

nlohmann::json to_json(const FitResult& r, bool include_timing) {
  nlohmann::json doc = {{"model_kind", std::string(dynamics::to_string(r.model_kind))},
                        {"chamber", r.chamber},
                        {"params", dynamics::to_json(r.params)},
                        {"r_squared_pdot_train", number_or_null(r.r_squared)},
                        {"iae_train_Pa_s", number_or_null(r.iae)},
                        {"n_restarts", r.n_restarts},
                        {"n_converged", r.n_converged},
                        {"best_restart_index", r.best_restart_index},
                        {"best_restart_seed", r.best_restart_seed},
                        {"restarts", nlohmann::json::array()}};
  for (const auto& o : r.restarts) {
    doc["restarts"].push_back({{"index", o.index},
                               {"seed", o.seed},
                               {"converged", o.converged},
                               {"termination", o.termination},
                               {"cost", number_or_null(o.cost)},
                               {"r_squared_pdot", number_or_null(o.r_squared_pdot)},
                               {"evaluations", o.evaluations}});
  }
  if (include_timing) doc["fit_wall_time_s"] = r.fit_wall_time;
  return doc;
}

double measure_eval_time(const ModelParams& params, const Dataset& data, std::size_t chamber, std::size_t evaluations) {
  if (data.empty()) throw DataError("eval timing needs a nonempty dataset");
  if (evaluations == 0) return 0.0;
  const auto p = data.pressure(chamber);
  const auto in = data.inputs(chamber);
  volatile double sink = 0.0;
  double acc = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t e = 0, k = 0; e < evaluations; ++e) {
    acc += dynamics::pressure_rate(params, p[k], in[k], chamber);
    if (++k == p.size()) k = 0;
  }
  const auto stop = std::chrono::steady_clock::now();
  sink = acc;
  (void)sink;
  return std::chrono::duration<double>(stop - start).count() / static_cast<double>(evaluations);
}

const ComparisonCell& ComparisonReport::cell(ModelKind model, std::size_t chamber) const {
  for (const auto& c : cells) {
    if (c.model == model && c.chamber == chamber) return c;
  }
  throw std::out_of_range("no such comparison cell");
}

ComparisonReport compare_models(const Dataset& train, const Dataset& validation, const CompareOptions& options) {
  if (validation.size() < 2) throw DataError("validation set needs at least 2 samples");
  ComparisonReport report;
  report.models = options.models;
  for (const auto kind : options.models) {
    double eval_sum = 0.0;
    double wall = 0.0;
    for (std::size_t ch = 0; ch < kChambers; ++ch) {
      ComparisonCell cell;
      cell.model = kind;
      cell.chamber = ch;
      ModelParams timed = context_for(kind, options.fit);
      try {
        const auto fitted = fit(kind, train, ch, options.fit);
        wall += fitted.fit_wall_time;
        cell.params = fitted.params;
        cell.train_r_squared_pdot = fitted.r_squared;
        cell.n_restarts = fitted.n_restarts;
        cell.n_converged = fitted.n_converged;
        timed = fitted.params;
        cell.predicted = predict_open_loop(fitted.params, validation, ch, options.initial_window);
        cell.validation = metrics(cell.predicted, validation.pressure(ch), validation.dt);
        cell.ok = true;
      } catch (const FitError& e) {
        cell.error = e.what();
        cell.n_restarts = options.fit.n_restarts;
      } catch (const dynamics::DivergenceError& e) {
        cell.error = e.what();
      }
      eval_sum += measure_eval_time(timed, validation, ch, options.eval_samples);
      report.cells.push_back(std::move(cell));
    }
    report.eval_time_s.push_back(eval_sum / static_cast<double>(kChambers));
    report.fit_wall_time_s.push_back(wall);
  }
  return report;
}

nlohmann::json to_json(const ComparisonReport& report, bool include_timing) {
  nlohmann::json doc = {{"models", nlohmann::json::array()}, {"cells", nlohmann::json::array()}};
  for (std::size_t m = 0; m < report.models.size(); ++m) {
    nlohmann::json entry = {{"model_kind", std::string(dynamics::to_string(report.models[m]))}};
    if (include_timing) {
      entry["eval_time_ms"] = report.eval_time_s[m] * 1e3;
      entry["fit_wall_time_s"] = report.fit_wall_time_s[m];
    }
    doc["models"].push_back(entry);
  }
  for (const auto& c : report.cells) {
    nlohmann::json cell = {{"model_kind", std::string(dynamics::to_string(c.model))},
                           {"chamber", c.chamber},
                           {"ok", c.ok},
                           {"n_restarts", c.n_restarts},
                           {"n_converged", c.n_converged}};
    if (c.ok) {
      cell["r_squared"] = number_or_null(c.validation.r_squared);
      cell["r_squared_pdot"] = number_or_null(c.validation.r_squared_pdot);
      cell["iae_Pa_s"] = number_or_null(c.validation.iae);
      cell["sum_abs_error_GPa"] = number_or_null(c.validation.sum_abs_error_gpa);
      cell["train_r_squared_pdot"] = number_or_null(c.train_r_squared_pdot);
    } else {
      cell["error"] = c.error;
    }
    if (c.params) cell["params"] = dynamics::to_json(*c.params);
    doc["cells"].push_back(std::move(cell));
  }
  return doc;
}

void write_comparison_csv(std::ostream& out, const ComparisonReport& report, bool include_timing) {
  out << "model";
  for (std::size_t ch = 0; ch < kChambers; ++ch) out << ",iae" << ch << "_Pa_s";
  for (std::size_t ch = 0; ch < kChambers; ++ch) out << ",r2_" << ch;
  for (std::size_t ch = 0; ch < kChambers; ++ch) out << ",sum_abs" << ch << "_GPa";
  if (include_timing) out << ",eval_time_ms";
  out << '\n';
  char buf[64];
  for (std::size_t m = 0; m < report.models.size(); ++m) {
    out << dynamics::to_string(report.models[m]);
    const auto field = [&](auto value_of, const char* fmt) {
      for (std::size_t ch = 0; ch < kChambers; ++ch) {
        const auto& c = report.cell(report.models[m], ch);
        out << ',';
        if (c.ok) {
          std::snprintf(buf, sizeof buf, fmt, value_of(c));
          out << buf;
        }
      }
    };
    field([](const ComparisonCell& c) { return c.validation.iae; }, "%.3f");
    field([](const ComparisonCell& c) { return c.validation.r_squared; }, "%.6f");
    field([](const ComparisonCell& c) { return c.validation.sum_abs_error_gpa; }, "%.6f");
    if (include_timing) {
      std::snprintf(buf, sizeof buf, "%.6f", report.eval_time_s[m] * 1e3);
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace pneudrive::sysid
