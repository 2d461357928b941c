#include "uvmb/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "uvmb/config_json.hpp"
#include "uvmb/errors.hpp"

namespace uvmb {

namespace {

std::string json_path(const std::string& prefix_or_json) {
    if (prefix_or_json.size() > 5 &&
        prefix_or_json.substr(prefix_or_json.size() - 5) == ".json")
        return prefix_or_json;
    return prefix_or_json + ".json";
}

std::string bin_path(const std::string& prefix_or_json) {
    const std::string j = json_path(prefix_or_json);
    return j.substr(0, j.size() - 5) + ".bin";
}

nlohmann::json read_manifest(const std::string& prefix_or_json) {
    std::ifstream in(json_path(prefix_or_json));
    if (!in) throw CheckpointError("cannot open checkpoint manifest: " + json_path(prefix_or_json));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    if (!j.contains("magic") || j["magic"] != kCheckpointMagic)
        throw CheckpointError("checkpoint manifest magic mismatch");
    if (!j.contains("version") || j["version"].get<int>() != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version");
    return j;
}

}  // namespace

void save_checkpoint(const std::string& prefix, const SegModel<float>& model) {
    const auto params = model.params();
    nlohmann::json manifest;
    manifest["magic"] = kCheckpointMagic;
    manifest["version"] = kCheckpointVersion;
    manifest["model"] = model_config_to_json(model.cfg);
    nlohmann::json tensors = nlohmann::json::array();

    std::ofstream blob(bin_path(prefix), std::ios::binary);
    if (!blob) throw CheckpointError("cannot open checkpoint blob for writing: " + bin_path(prefix));
    blob.write(kCheckpointMagic, 5);
    uint64_t offset = 5;
    for (const auto& [name, var] : params) {
        const Tensor<float>& t = var.value();
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["dtype"] = "f32";
        e["offset"] = offset;
        tensors.push_back(std::move(e));
        blob.write(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.numel())));
        offset += sizeof(float) * static_cast<uint64_t>(t.numel());
    }
    if (!blob) throw CheckpointError("failed writing checkpoint blob");
    blob.close();
    manifest["tensors"] = std::move(tensors);
    std::ofstream jf(json_path(prefix));
    if (!jf) throw CheckpointError("cannot open checkpoint manifest for writing");
    jf << manifest.dump(2) << "\n";
}

ModelConfig load_checkpoint_config(const std::string& prefix_or_json) {
    const nlohmann::json j = read_manifest(prefix_or_json);
    if (!j.contains("model")) throw CheckpointError("checkpoint manifest missing model config");
    return model_config_from_json(j["model"]);
}

SegModel<float> load_checkpoint(const std::string& prefix_or_json) {
    const nlohmann::json manifest = read_manifest(prefix_or_json);
    SegModel<float> model(model_config_from_json(manifest.at("model")), 0);

    std::ifstream blob(bin_path(prefix_or_json), std::ios::binary);
    if (!blob) throw CheckpointError("cannot open checkpoint blob: " + bin_path(prefix_or_json));
    char magic[5];
    blob.read(magic, 5);
    if (!blob || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw CheckpointError("checkpoint blob magic mismatch");

    auto params = model.params();
    std::unordered_map<std::string, Var<float>*> by_name;
    for (auto& [name, var] : params) by_name[name] = &var;
    size_t loaded = 0;
    for (const auto& e : manifest.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointError("checkpoint tensor not in model: " + name);
        if (e.at("dtype").get<std::string>() != "f32")
            throw CheckpointError("unsupported tensor dtype for " + name);
        Tensor<float>& dst = it->second->value_mut();
        const Shape shape = e.at("shape").get<Shape>();
        if (shape != dst.shape())
            throw CheckpointError("checkpoint shape mismatch for " + name + ": manifest " +
                                  shape_str(shape) + " vs model " + shape_str(dst.shape()));
        blob.seekg(static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
        blob.read(reinterpret_cast<char*>(dst.data()),
                  static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(dst.numel())));
        if (!blob) throw CheckpointError("truncated checkpoint blob at tensor " + name);
        ++loaded;
    }
    if (loaded != params.size())
        throw CheckpointError("checkpoint tensor count mismatch: manifest has " +
                              std::to_string(loaded) + ", model needs " +
                              std::to_string(params.size()));
    return model;
}

}  // namespace uvmb
