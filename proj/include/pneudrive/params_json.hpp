#pragma once

#include <nlohmann/json.hpp>

#include "pneudrive/dynamics.hpp"

namespace pneudrive::dynamics {

/// Tagged JSON document: {"model_kind": "...", <unit-suffixed fields>}.
nlohmann::json to_json(const ModelParams& params);

/// Missing fields keep the defaults of the corresponding struct.
ModelParams model_params_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const JointGeometry& geom);
JointGeometry geometry_from_json(const nlohmann::json& doc, JointGeometry fallback = {});

}  // namespace pneudrive::dynamics
