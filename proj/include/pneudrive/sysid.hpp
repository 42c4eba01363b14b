#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pneudrive/controller.hpp"
#include "pneudrive/dynamics.hpp"
#include "pneudrive/optimizer.hpp"

namespace pneudrive::sysid {

using control::PressureArray;
using dynamics::kChambers;
using dynamics::ModelKind;
using dynamics::ModelParams;

/// Malformed or inconsistent dataset. `row()` is the 1-based file line when known.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what, std::optional<std::size_t> row = std::nullopt);
  std::optional<std::size_t> row() const { return row_; }

 private:
  std::optional<std::size_t> row_;
};

/// Four chambers on a shared uniform grid. Pressures are absolute Pa.
struct Dataset {
  double dt = 0.0;
  std::vector<double> t;
  std::vector<PressureArray> p;
  std::vector<PressureArray> p_cmd;
  std::vector<PressureArray> u;
  std::vector<dynamics::JointState> joint;

  std::size_t size() const { return t.size(); }
  bool empty() const { return t.empty(); }
  double sample_rate() const { return dt > 0.0 ? 1.0 / dt : 0.0; }

  std::vector<double> pressure(std::size_t chamber) const;
  std::vector<dynamics::ChamberInput> inputs(std::size_t chamber) const;
};

/// Parses the tracking-log CSV schema; gauge kPa columns become absolute Pa.
Dataset load_dataset(std::istream& in);
Dataset load_dataset_file(const std::string& path);
void write_dataset_csv(std::ostream& out, const Dataset& data);

Dataset dataset_from_log(const control::TrackingLog& log, double dt);
control::TrackingLog dataset_to_log(const Dataset& data);

/// Rows [0, n_train) and [n_train, size).
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, std::size_t n_train);

/// Adds N(0, (fraction * p)^2) to every pressure sample.
Dataset with_measurement_noise(const Dataset& data, double fraction, std::uint64_t seed);

/// 3-point central differences, one-sided at the ends.
std::vector<double> central_difference(std::span<const double> x, double dt);

struct GenerateOptions {
  double duration = 220.0;  // s
  double lo_kpa = 50.0;     // gauge
  double hi_kpa = 300.0;
  std::uint64_t seed = 0;
  double noise_fraction = 0.0;
};

/// Synthetic dataset from the device model under random level commands.
/// Devices whose chambers are all linear are integrated open loop with the
/// command interpolated between samples; anything else runs closed loop.
Dataset generate_dataset(const control::DeviceConfig& device, const GenerateOptions& options);

struct Metrics {
  double r_squared = 0.0;       // on pressure
  double r_squared_pdot = 0.0;  // on central-difference rates
  double iae = 0.0;             // Pa s
  double sum_abs_error_gpa = 0.0;
};

double r_squared(std::span<const double> predicted, std::span<const double> measured);
Metrics metrics(std::span<const double> predicted, std::span<const double> measured, double dt);

/// Initial pressure whose open-loop prediction best matches the first `window`
/// measured samples in the least-squares sense.
double estimate_initial_pressure(const ModelParams& params, const Dataset& data, std::size_t chamber,
                                 std::size_t window);

/// Open-loop prediction driven only by the recorded inputs. With
/// `initial_window` <= 1 it starts from the first measured pressure, otherwise
/// from estimate_initial_pressure over that many samples.
std::vector<double> predict_open_loop(const ModelParams& params, const Dataset& data, std::size_t chamber,
                                      std::size_t initial_window = 1);

/// Fitted parameter with bounds and initial-draw range, in natural units.
struct ParamSpec {
  std::string name;
  double lower = 0.0;
  double upper = 1.0;
  double init_lower = 0.0;
  double init_upper = 1.0;
  bool log_scale = false;

  double to_unit(double value) const;
  double from_unit(double z) const;
};

/// Maps between normalized coordinates in [0, 1]^n and model parameters.
/// Quantities that are not fitted come from `context`.
class ParameterSpace {
 public:
  ParameterSpace(ModelKind kind, ModelParams context);

  ModelKind kind() const { return kind_; }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }

  ModelParams decode(std::span<const double> z) const;
  std::vector<double> encode(const ModelParams& params) const;
  std::vector<double> values(const ModelParams& params) const;

 private:
  ModelKind kind_;
  ModelParams context_;
  std::vector<ParamSpec> specs_;
};

nlohmann::json to_json(const ParameterSpace& space);

class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, nlohmann::json diagnostics);
  const nlohmann::json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::json diagnostics_;
};

struct FitOptions {
  std::size_t n_restarts = 20;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  LmOptions lm;
  NelderMeadOptions nelder_mead;
  bool nelder_mead_fallback = true;  // parametric model only
  std::size_t max_init_draws = 1000;
  dynamics::NonlinearParams nonlinear_context;
  dynamics::ParametricParams parametric_context;
};

struct RestartOutcome {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  bool converged = false;
  bool valid_start = true;
  std::string termination;
  double cost = 0.0;
  double r_squared_pdot = 0.0;
  std::size_t evaluations = 0;
  ModelParams params;
};

struct FitResult {
  ModelKind model_kind = ModelKind::linear;
  std::size_t chamber = 0;
  ModelParams params;
  double r_squared = 0.0;  // training rate R^2 of the selected restart
  double iae = 0.0;        // open-loop training IAE, Pa s
  std::size_t n_restarts = 0;
  std::size_t n_converged = 0;
  std::size_t best_restart_index = 0;
  std::uint64_t best_restart_seed = 0;
  double fit_wall_time = 0.0;  // s
  std::vector<RestartOutcome> restarts;
};

nlohmann::json to_json(const FitResult& result, bool include_timing = false);

/// Seed of restart `index`; depends only on (seed, index).
std::uint64_t restart_seed(std::uint64_t seed, std::size_t index);

ModelParams context_for(ModelKind kind, const FitOptions& options);

/// Multi-start bounded least squares on rate residuals of one chamber.
/// Throws FitError when no restart converges.
FitResult fit(ModelKind kind, const Dataset& train, std::size_t chamber, const FitOptions& options = {});

/// Mean wall time of one pressure_rate call over `evaluations` calls.
double measure_eval_time(const ModelParams& params, const Dataset& data, std::size_t chamber,
                         std::size_t evaluations = 100000);

struct ComparisonCell {
  ModelKind model = ModelKind::linear;
  std::size_t chamber = 0;
  bool ok = false;
  std::string error;
  Metrics validation;
  std::vector<double> predicted;  // open-loop validation trajectory, Pa
  double train_r_squared_pdot = 0.0;
  std::size_t n_restarts = 0;
  std::size_t n_converged = 0;
  std::optional<ModelParams> params;
};

struct ComparisonReport {
  std::vector<ModelKind> models;
  std::vector<ComparisonCell> cells;  // model-major
  std::vector<double> eval_time_s;    // per model, mean over chambers
  std::vector<double> fit_wall_time_s;

  const ComparisonCell& cell(ModelKind model, std::size_t chamber) const;
};

struct CompareOptions {
  std::vector<ModelKind> models{ModelKind::linear, ModelKind::nonlinear, ModelKind::parametric};
  FitOptions fit;
  std::size_t eval_samples = 100000;
  std::size_t initial_window = 50;  // samples used to estimate the initial pressure
};

ComparisonReport compare_models(const Dataset& train, const Dataset& validation, const CompareOptions& options = {});

nlohmann::json to_json(const ComparisonReport& report, bool include_timing = false);
/// One row per model: IAE per chamber (Pa s), then eval time when requested.
void write_comparison_csv(std::ostream& out, const ComparisonReport& report, bool include_timing = false);

}  // namespace pneudrive::sysid
