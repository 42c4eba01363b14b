#include "pneudrive/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace pneudrive::dynamics {

DivergenceError::DivergenceError(std::size_t step, double value)
    : std::runtime_error("integration diverged at step " + std::to_string(step) + " (p = " +
                         std::to_string(value) + " Pa)"),
      step_(step),
      value_(value) {}

ModelKind kind_of(const ModelParams& params) {
  return static_cast<ModelKind>(params.index());
}

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::linear:
      return "linear";
    case ModelKind::nonlinear:
      return "nonlinear";
    case ModelKind::parametric:
      return "parametric";
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "linear") return ModelKind::linear;
  if (name == "nonlinear") return ModelKind::nonlinear;
  if (name == "parametric") return ModelKind::parametric;
  throw std::invalid_argument("unknown model kind '" + std::string(name) + "'");
}

double smax(double x) { return (std::sqrt(x * x + 1.0) + x) / 2.0; }

OrificeAreas orifice_areas(double u_volts, const ValveParams& valve) {
  return {valve.leak_in + smax(valve.gain * (u_volts - valve.center_in) - valve.leak_in),
          valve.leak_out + smax(valve.gain * (valve.center_out - u_volts) - valve.leak_out)};
}

double psi_max(double gamma) {
  return std::pow(2.0 / (gamma + 1.0), 1.0 / (gamma - 1.0)) * std::sqrt(gamma / (gamma + 1.0));
}

double flow_function(double p_up, double p_down, const FlowConstants& flow, const GasConstants& gas) {
  if (!(p_down > 0.0) || p_down > p_up) {
    throw OrientationError("flow function needs p_up >= p_down > 0 (p_up = " + std::to_string(p_up) +
                           ", p_down = " + std::to_string(p_down) + ")");
  }
  const double ratio = p_down / p_up;
  const double psi = psi_max(gas.gamma);
  if (ratio <= flow.b) return psi;
  const double bracket = 1.0 - (ratio - flow.b) / (flow.a - flow.b);
  if (bracket <= 0.0) return 0.0;
  return psi * std::pow(bracket, flow.exponent);
}

double mass_flow(double area, double p_up, double p_down, const NonlinearParams& params) {
  const double psi = flow_function(p_up, p_down, params.flow, params.gas);
  return area * params.area_unit * params.discharge * psi * p_up *
         std::sqrt(2.0 / (params.gas.r_gas * params.gas.temperature));
}

std::array<double, kChambers> chamber_lengths(const std::array<double, 2>& q, const JointGeometry& geom) {
  const double h = geom.neutral_length;
  const double r = geom.offset_radius;
  return {h + r * q[0], h - r * q[0], h + r * q[1], h - r * q[1]};
}

std::array<double, 2> length_gradient(std::size_t chamber, const JointGeometry& geom) {
  const double r = geom.offset_radius;
  switch (chamber) {
    case 0:
      return {r, 0.0};
    case 1:
      return {-r, 0.0};
    case 2:
      return {0.0, r};
    case 3:
      return {0.0, -r};
    default:
      throw std::out_of_range("chamber index " + std::to_string(chamber) + " out of range");
  }
}

ChamberVolume chamber_volume(std::size_t chamber, const JointState& state, const JointGeometry& geom) {
  if (chamber >= kChambers) throw std::out_of_range("chamber index out of range");
  const double length = chamber_lengths(state.q, geom)[chamber];
  if (!(length > 0.0)) {
    throw GeometryError("chamber " + std::to_string(chamber) + " length " + std::to_string(length) +
                        " m is not positive");
  }
  const double area = std::numbers::pi * geom.chamber_radius * geom.chamber_radius;
  const auto grad = length_gradient(chamber, geom);
  return {area * length, area * (grad[0] * state.q_dot[0] + grad[1] * state.q_dot[1])};
}

double pdot_linear(double p, double p_cmd, const LinearParams& params) {
  return -params.alpha * p + params.beta * p_cmd;
}

RateEvaluation evaluate_nonlinear(double p, double u_volts, const JointState& state, std::size_t chamber,
                                  const NonlinearParams& params) {
  const auto vol = chamber_volume(chamber, state, params.geometry);
  const auto areas = orifice_areas(u_volts, params.valve);

  RateEvaluation out;
  double m_in = 0.0;
  if (p <= params.p_src) {
    m_in = mass_flow(areas.in, params.p_src, p, params);
  } else {
    m_in = -mass_flow(areas.in, p, params.p_src, params);
    out.out_of_envelope = true;
  }
  double m_out = 0.0;
  if (p >= params.p_atm) {
    m_out = mass_flow(areas.out, p, params.p_atm, params);
  } else {
    m_out = -mass_flow(areas.out, params.p_atm, p, params);
    out.out_of_envelope = true;
  }

  const double gamma = params.gas.gamma;
  const double rt = params.gas.r_gas * params.gas.temperature;
  out.pdot = gamma * rt / vol.volume * (m_in - m_out) -
             gamma * params.volume_weight * vol.rate / vol.volume * p;
  return out;
}

double pdot_nonlinear(double p, double u_volts, const JointState& state, std::size_t chamber,
                      const NonlinearParams& params) {
  return evaluate_nonlinear(p, u_volts, state, chamber, params).pdot;
}

double parametric_saturation(double x, const ParametricParams& params) {
  const double lo = params.p_atm;
  const double hi = params.p_src;
  const double eps = 1e-3 * (hi - lo);
  const auto soft_ramp = [eps](double y) { return (std::sqrt(y * y + eps * eps) + y) / 2.0; };
  return lo + soft_ramp(x - lo) - soft_ramp(x - hi);
}

double parametric_gate(double u_hat, double c_gamma, double c9, double c8) {
  return c8 + c9 * std::pow(std::abs(u_hat), c_gamma);
}

double parametric_rate(double u_volts, double volume, double volume_rate, const ParametricParams& params) {
  const auto& c = params.c;
  const double u_hat = u_volts - c[0];
  const double k_bar = parametric_gate(u_hat, params.c_gamma, c[8], c[7]);
  return (c[6] * k_bar + c[4] * volume_rate) / (1.0 + c[5] * volume);
}

double parametric_target(double u_volts, double volume_rate, const ParametricParams& params) {
  const auto& c = params.c;
  const double u_hat = u_volts - c[0];
  const double g_bar = parametric_saturation(c[1] * u_hat + c[2] * u_hat * u_hat * u_hat, params);
  return params.c_b + params.c_s * g_bar + c[3] * volume_rate;
}

double pdot_parametric(double p, double u_volts, double volume, double volume_rate,
                       const ParametricParams& params) {
  return (parametric_target(u_volts, volume_rate, params) - p) *
         parametric_rate(u_volts, volume, volume_rate, params);
}

double pressure_rate(const ModelParams& params, double p, const ChamberInput& input, std::size_t chamber) {
  switch (params.index()) {
    case 0:
      return pdot_linear(p, input.p_cmd, std::get<LinearParams>(params));
    case 1:
      return pdot_nonlinear(p, input.u, input.joint, chamber, std::get<NonlinearParams>(params));
    default: {
      const auto& pp = std::get<ParametricParams>(params);
      const auto vol = chamber_volume(chamber, input.joint, pp.geometry);
      return pdot_parametric(p, input.u, vol.volume, vol.rate, pp);
    }
  }
}

double reference_pressure(const ModelParams& params) {
  if (const auto* nl = std::get_if<NonlinearParams>(&params)) return nl->p_src;
  if (const auto* pp = std::get_if<ParametricParams>(&params)) return pp->p_src;
  return 0.0;
}

namespace {

ChamberInput interpolate(const ChamberInput& a, const ChamberInput& b, double theta) {
  ChamberInput out;
  out.u = a.u;
  out.p_cmd = a.p_cmd + theta * (b.p_cmd - a.p_cmd);
  for (std::size_t j = 0; j < 2; ++j) {
    out.joint.q[j] = a.joint.q[j] + theta * (b.joint.q[j] - a.joint.q[j]);
    out.joint.q_dot[j] = a.joint.q_dot[j] + theta * (b.joint.q_dot[j] - a.joint.q_dot[j]);
  }
  return out;
}

}  // namespace

double rk4_step(const ModelParams& params, std::size_t chamber, double p, const ChamberInput& from,
                const ChamberInput& to, double dt) {
  const ChamberInput mid = interpolate(from, to, 0.5);
  const ChamberInput end = interpolate(from, to, 1.0);
  const double k1 = pressure_rate(params, p, from, chamber);
  const double k2 = pressure_rate(params, p + 0.5 * dt * k1, mid, chamber);
  const double k3 = pressure_rate(params, p + 0.5 * dt * k2, mid, chamber);
  const double k4 = pressure_rate(params, p + dt * k3, end, chamber);
  return p + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

std::vector<double> integrate(const ModelParams& params, std::size_t chamber, double p0,
                              std::span<const ChamberInput> inputs, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("integration step must be positive");
  std::vector<double> out;
  if (inputs.empty()) return out;
  out.reserve(inputs.size());

  double bound = reference_pressure(params);
  if (const auto* lin = std::get_if<LinearParams>(&params)) {
    double cmd = 0.0;
    for (const auto& in : inputs) cmd = std::max(cmd, std::abs(in.p_cmd));
    const double gain = lin->alpha > 0.0 ? std::max(1.0, std::abs(lin->beta / lin->alpha)) : 1.0;
    bound = std::max(std::abs(p0), cmd * gain);
  }
  const double limit = 10.0 * bound;

  double p = p0;
  out.push_back(p);
  for (std::size_t k = 0; k + 1 < inputs.size(); ++k) {
    p = rk4_step(params, chamber, p, inputs[k], inputs[k + 1], dt);
    if (!std::isfinite(p) || std::abs(p) > limit) throw DivergenceError(k + 1, p);
    out.push_back(p);
  }
  return out;
}

}  // namespace pneudrive::dynamics
