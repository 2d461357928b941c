#pragma once

#include "json.hpp"
#include "uvmb/model.hpp"
#include "uvmb/train.hpp"

namespace uvmb {

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Throws ConfigError naming the first unknown key.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                         const std::string& where);

}  // namespace uvmb
