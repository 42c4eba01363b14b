#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pneudrive::dynamics {

inline constexpr double kAtmosphericPa = 101325.0;
inline constexpr std::size_t kChambers = 4;

class GeometryError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when a flow is evaluated with the downstream pressure above upstream.
class OrientationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, double value);
  std::size_t step() const { return step_; }
  double value() const { return value_; }

 private:
  std::size_t step_;
  double value_;
};

struct GasConstants {
  double gamma = 1.4;
  double r_gas = 287.05;  // J/(kg K)
  double temperature = 293.15;  // K
};

/// Cylindrical continuum joint: chamber lengths h +/- r*u and h +/- r*v.
struct JointGeometry {
  double neutral_length = 0.10;   // h, m
  double offset_radius = 0.05;    // r, m
  double chamber_radius = 0.02;   // delta, m
};

struct JointState {
  std::array<double, 2> q{};      // bending angles [u, v], rad
  std::array<double, 2> q_dot{};  // rad/s
};

struct LinearParams {
  double alpha = 1.0;  // 1/s
  double beta = 1.0;   // 1/s
};

/// Smoothed V-shaped proportional valve. Areas are in scaled units; see
/// NonlinearParams::area_unit for the physical scale.
struct ValveParams {
  double leak_in = 0.3;
  double leak_out = 0.3;
  double gain = 15.0;         // area units per volt
  double center_in = 6.25;    // V
  double center_out = 5.75;   // V
};

struct FlowConstants {
  double a = 1.0;
  double b = 0.528;  // critical pressure ratio
  double exponent = 0.5;
};

struct NonlinearParams {
  ValveParams valve;
  double volume_weight = 1.0;  // w
  double discharge = 1.0;      // C_d
  double area_unit = 1e-8;     // m^2 per scaled area unit
  double p_src = kAtmosphericPa + 689480.0;
  double p_atm = kAtmosphericPa;
  GasConstants gas;
  FlowConstants flow;
  JointGeometry geometry;
};

struct ParametricParams {
  std::array<double, 9> c{};  // c1..c9 stored at c[0]..c[8]
  double c_b = 0.0;
  double c_s = 1.0;
  double c_gamma = 1.0;
  // Fixed context, not fitted.
  double p_atm = kAtmosphericPa;
  double p_src = kAtmosphericPa + 689480.0;
  JointGeometry geometry;
};

using ModelParams = std::variant<LinearParams, NonlinearParams, ParametricParams>;

enum class ModelKind { linear, nonlinear, parametric };

ModelKind kind_of(const ModelParams& params);
std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

/// (sqrt(x^2 + 1) + x) / 2
double smax(double x);

struct OrificeAreas {
  double in = 0.0;
  double out = 0.0;
};

OrificeAreas orifice_areas(double u_volts, const ValveParams& valve);

double psi_max(double gamma);

/// ISO 6358 flow function. Requires p_up >= p_down > 0.
double flow_function(double p_up, double p_down, const FlowConstants& flow, const GasConstants& gas);

/// Mass flow through an orifice of `area` scaled units (kg/s).
double mass_flow(double area, double p_up, double p_down, const NonlinearParams& params);

struct ChamberVolume {
  double volume = 0.0;  // m^3
  double rate = 0.0;    // m^3/s
};

std::array<double, kChambers> chamber_lengths(const std::array<double, 2>& q, const JointGeometry& geom);
/// d l_i / d q for chamber i.
std::array<double, 2> length_gradient(std::size_t chamber, const JointGeometry& geom);
ChamberVolume chamber_volume(std::size_t chamber, const JointState& state, const JointGeometry& geom);

double pdot_linear(double p, double p_cmd, const LinearParams& params);

struct RateEvaluation {
  double pdot = 0.0;
  bool out_of_envelope = false;  // p outside [p_atm, p_src]
};

/// Pressure rate of the first-principles model. Outside [p_atm, p_src] the
/// affected orifice flow reverses direction and the result is flagged.
RateEvaluation evaluate_nonlinear(double p, double u_volts, const JointState& state, std::size_t chamber,
                                  const NonlinearParams& params);
double pdot_nonlinear(double p, double u_volts, const JointState& state, std::size_t chamber,
                      const NonlinearParams& params);

/// Steady-state saturation: smooth clamp of x to [p_atm, p_src].
double parametric_saturation(double x, const ParametricParams& params);
/// Rate gate: c8 + c9 * |u_hat|^c_gamma.
double parametric_gate(double u_hat, double c_gamma, double c9, double c8);
/// Rate r of the parametric model; must stay positive for a valid parameterization.
double parametric_rate(double u_volts, double volume, double volume_rate, const ParametricParams& params);
/// Pressure s the parametric model relaxes toward; pdot = (s - p) * r.
double parametric_target(double u_volts, double volume_rate, const ParametricParams& params);
double pdot_parametric(double p, double u_volts, double volume, double volume_rate,
                       const ParametricParams& params);

/// Everything a model may read besides the pressure itself.
struct ChamberInput {
  double p_cmd = 0.0;  // Pa absolute
  double u = 0.0;      // V
  JointState joint;
};

/// Model-agnostic pressure rate (Pa/s).
double pressure_rate(const ModelParams& params, double p, const ChamberInput& input, std::size_t chamber);

/// Reference pressure used for the divergence bound (10x of it).
double reference_pressure(const ModelParams& params);

/// One RK4 step from `from` to `to` (dt apart). u is held at from.u; p_cmd and
/// the joint state are linearly interpolated across the step.
double rk4_step(const ModelParams& params, std::size_t chamber, double p, const ChamberInput& from,
                const ChamberInput& to, double dt);

/// Fixed-step RK4 over a sampled input trajectory. Output has the same length
/// as `inputs`; out[0] = p0.
std::vector<double> integrate(const ModelParams& params, std::size_t chamber, double p0,
                              std::span<const ChamberInput> inputs, double dt);

}  // namespace pneudrive::dynamics
