#include "uvmb/config_json.hpp"

#include "uvmb/errors.hpp"

namespace uvmb {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

json model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["in_channels"] = cfg.in_channels;
    j["num_classes"] = cfg.num_classes;
    j["stage_channels"] = cfg.stage_channels;
    j["state_size"] = cfg.state_size;
    j["dcn_groups"] = cfg.dcn_groups;
    j["dcn_points"] = cfg.dcn_points;
    j["blocks_per_stage"] = cfg.blocks_per_stage;
    j["position_mode"] = position_mode_name(cfg.position_mode);
    j["block_set"] = block_set_name(cfg.block_set);
    j["selective"] = cfg.selective;
    j["per_direction_params"] = cfg.per_direction_params;
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"in_channels", "num_classes", "stage_channels", "state_size",
                         "dcn_groups", "dcn_points", "blocks_per_stage", "position_mode",
                         "block_set", "selective", "per_direction_params"},
                        "model config");
    ModelConfig cfg;
    try {
        if (j.contains("in_channels")) cfg.in_channels = j["in_channels"].get<int>();
        if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<int>();
        if (j.contains("stage_channels")) {
            const auto v = j["stage_channels"].get<std::vector<int>>();
            if (v.size() != 4) throw ConfigError("model config: stage_channels needs 4 entries");
            std::copy(v.begin(), v.end(), cfg.stage_channels.begin());
        }
        if (j.contains("state_size")) cfg.state_size = j["state_size"].get<int>();
        if (j.contains("dcn_groups")) cfg.dcn_groups = j["dcn_groups"].get<int>();
        if (j.contains("dcn_points")) cfg.dcn_points = j["dcn_points"].get<int>();
        if (j.contains("blocks_per_stage"))
            cfg.blocks_per_stage = j["blocks_per_stage"].get<int>();
        if (j.contains("position_mode"))
            cfg.position_mode = position_mode_from_name(j["position_mode"].get<std::string>());
        if (j.contains("block_set"))
            cfg.block_set = block_set_from_name(j["block_set"].get<std::string>());
        if (j.contains("selective")) cfg.selective = j["selective"].get<bool>();
        if (j.contains("per_direction_params"))
            cfg.per_direction_params = j["per_direction_params"].get<bool>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["base_lr"] = cfg.base_lr;
    j["min_lr"] = cfg.min_lr;
    j["warmup_epochs"] = cfg.warmup_epochs;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["loss"] = loss_kind_name(cfg.loss);
    j["weight_decay"] = cfg.weight_decay;
    j["augment"] = cfg.augment;
    j["holdout"] = cfg.holdout;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"base_lr", "min_lr", "warmup_epochs", "epochs", "batch_size", "loss",
                         "weight_decay", "augment", "holdout", "seed", "threads"},
                        "train config");
    TrainConfig cfg;
    try {
        if (j.contains("base_lr")) cfg.base_lr = j["base_lr"].get<double>();
        if (j.contains("min_lr")) cfg.min_lr = j["min_lr"].get<double>();
        if (j.contains("warmup_epochs")) cfg.warmup_epochs = j["warmup_epochs"].get<int>();
        if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
        if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
        if (j.contains("loss")) cfg.loss = loss_kind_from_name(j["loss"].get<std::string>());
        if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("augment")) cfg.augment = j["augment"].get<bool>();
        if (j.contains("holdout")) cfg.holdout = j["holdout"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
        if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace uvmb
