#include "pneudrive/params_json.hpp"

#include <string>

namespace pneudrive::dynamics {

using nlohmann::json;

namespace {

void read(const json& doc, const char* key, double& out) {
  if (auto it = doc.find(key); it != doc.end()) out = it->get<double>();
}

}  // namespace

json to_json(const JointGeometry& geom) {
  return {{"neutral_length_m", geom.neutral_length},
          {"offset_radius_m", geom.offset_radius},
          {"chamber_radius_m", geom.chamber_radius}};
}

JointGeometry geometry_from_json(const json& doc, JointGeometry geom) {
  read(doc, "neutral_length_m", geom.neutral_length);
  read(doc, "offset_radius_m", geom.offset_radius);
  read(doc, "chamber_radius_m", geom.chamber_radius);
  return geom;
}

json to_json(const ModelParams& params) {
  json doc;
  doc["model_kind"] = std::string(to_string(kind_of(params)));
  if (const auto* lin = std::get_if<LinearParams>(&params)) {
    doc["alpha_per_s"] = lin->alpha;
    doc["beta_per_s"] = lin->beta;
  } else if (const auto* nl = std::get_if<NonlinearParams>(&params)) {
    doc["leak_in_area_units"] = nl->valve.leak_in;
    doc["leak_out_area_units"] = nl->valve.leak_out;
    doc["gain_area_units_per_V"] = nl->valve.gain;
    doc["center_in_V"] = nl->valve.center_in;
    doc["center_out_V"] = nl->valve.center_out;
    doc["volume_weight"] = nl->volume_weight;
    doc["discharge_coefficient"] = nl->discharge;
    doc["area_unit_m2"] = nl->area_unit;
    doc["p_src_Pa"] = nl->p_src;
    doc["p_atm_Pa"] = nl->p_atm;
    doc["gamma"] = nl->gas.gamma;
    doc["r_gas_J_per_kg_K"] = nl->gas.r_gas;
    doc["temperature_K"] = nl->gas.temperature;
    doc["flow_a"] = nl->flow.a;
    doc["flow_b"] = nl->flow.b;
    doc["flow_exponent"] = nl->flow.exponent;
    doc["geometry"] = to_json(nl->geometry);
  } else {
    const auto& pp = std::get<ParametricParams>(params);
    doc["c1_V"] = pp.c[0];
    doc["c2_Pa_per_V"] = pp.c[1];
    doc["c3_Pa_per_V3"] = pp.c[2];
    doc["c4_Pa_s_per_m3"] = pp.c[3];
    doc["c5_per_m3"] = pp.c[4];
    doc["c6_per_m3"] = pp.c[5];
    doc["c7"] = pp.c[6];
    doc["c8_per_s"] = pp.c[7];
    doc["c9_per_s"] = pp.c[8];
    doc["c_b_Pa"] = pp.c_b;
    doc["c_s"] = pp.c_s;
    doc["c_gamma"] = pp.c_gamma;
    doc["p_src_Pa"] = pp.p_src;
    doc["p_atm_Pa"] = pp.p_atm;
    doc["geometry"] = to_json(pp.geometry);
  }
  return doc;
}

ModelParams model_params_from_json(const json& doc) {
  const auto kind = parse_model_kind(doc.at("model_kind").get<std::string>());
  switch (kind) {
    case ModelKind::linear: {
      LinearParams lin;
      read(doc, "alpha_per_s", lin.alpha);
      read(doc, "beta_per_s", lin.beta);
      return lin;
    }
    case ModelKind::nonlinear: {
      NonlinearParams nl;
      read(doc, "leak_in_area_units", nl.valve.leak_in);
      read(doc, "leak_out_area_units", nl.valve.leak_out);
      read(doc, "gain_area_units_per_V", nl.valve.gain);
      read(doc, "center_in_V", nl.valve.center_in);
      read(doc, "center_out_V", nl.valve.center_out);
      read(doc, "volume_weight", nl.volume_weight);
      read(doc, "discharge_coefficient", nl.discharge);
      read(doc, "area_unit_m2", nl.area_unit);
      read(doc, "p_src_Pa", nl.p_src);
      read(doc, "p_atm_Pa", nl.p_atm);
      read(doc, "gamma", nl.gas.gamma);
      read(doc, "r_gas_J_per_kg_K", nl.gas.r_gas);
      read(doc, "temperature_K", nl.gas.temperature);
      read(doc, "flow_a", nl.flow.a);
      read(doc, "flow_b", nl.flow.b);
      read(doc, "flow_exponent", nl.flow.exponent);
      if (doc.contains("geometry")) nl.geometry = geometry_from_json(doc["geometry"]);
      return nl;
    }
    case ModelKind::parametric: {
      ParametricParams pp;
      read(doc, "c1_V", pp.c[0]);
      read(doc, "c2_Pa_per_V", pp.c[1]);
      read(doc, "c3_Pa_per_V3", pp.c[2]);
      read(doc, "c4_Pa_s_per_m3", pp.c[3]);
      read(doc, "c5_per_m3", pp.c[4]);
      read(doc, "c6_per_m3", pp.c[5]);
      read(doc, "c7", pp.c[6]);
      read(doc, "c8_per_s", pp.c[7]);
      read(doc, "c9_per_s", pp.c[8]);
      read(doc, "c_b_Pa", pp.c_b);
      read(doc, "c_s", pp.c_s);
      read(doc, "c_gamma", pp.c_gamma);
      read(doc, "p_src_Pa", pp.p_src);
      read(doc, "p_atm_Pa", pp.p_atm);
      if (doc.contains("geometry")) pp.geometry = geometry_from_json(doc["geometry"]);
      return pp;
    }
  }
  throw std::invalid_argument("unreachable model kind");
}

}  // namespace pneudrive::dynamics
