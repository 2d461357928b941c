#include "uvmb/model.hpp"

#include "uvmb/errors.hpp"

namespace uvmb {

void ModelConfig::validate() const {
    if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (state_size < 1) throw ConfigError("model: state_size must be >= 1");
    if (blocks_per_stage < 1) throw ConfigError("model: blocks_per_stage must be >= 1");
    if (dcn_groups < 1) throw ConfigError("model: dcn_groups must be >= 1");
    if (stem_channels() < 1) throw ConfigError("model: stage_channels[0] too small for the stem");
    for (int c : stage_channels) {
        if (c < dcn_groups) throw ConfigError("model: stage channels must be >= dcn_groups");
        if (c % dcn_groups != 0)
            throw ConfigError("model: stage channels must be divisible by dcn_groups");
    }
    if (per_direction_params && !selective)
        throw ConfigError("model: per_direction_params requires selective parameterization");
}

const char* position_mode_name(PositionMode m) {
    switch (m) {
        case PositionMode::serial: return "serial";
        case PositionMode::parallel: return "parallel";
        case PositionMode::reverse: return "reverse";
    }
    return "?";
}

PositionMode position_mode_from_name(const std::string& s) {
    if (s == "serial") return PositionMode::serial;
    if (s == "parallel") return PositionMode::parallel;
    if (s == "reverse") return PositionMode::reverse;
    throw ConfigError("unknown position mode '" + s + "' (serial|parallel|reverse)");
}

const char* block_set_name(BlockSet s) {
    switch (s) {
        case BlockSet::both: return "both";
        case BlockSet::sade_only: return "sade_only";
        case BlockSet::mssm_only: return "mssm_only";
    }
    return "?";
}

BlockSet block_set_from_name(const std::string& s) {
    if (s == "both") return BlockSet::both;
    if (s == "sade_only") return BlockSet::sade_only;
    if (s == "mssm_only") return BlockSet::mssm_only;
    throw ConfigError("unknown block set '" + s + "' (both|sade_only|mssm_only)");
}

template <typename T>
SegModel<T>::SegModel(const ModelConfig& cfg_, uint64_t seed) : cfg(cfg_) {
    cfg.validate();
    Rng rng(seed);
    const int c0 = cfg.stem_channels();
    stem = nn::Stem<T>(cfg.in_channels, c0, rng);
    int64_t cin = c0;
    for (int i = 0; i < 4; ++i) {
        stages.emplace_back(cin, cfg.stage_channels[static_cast<size_t>(i)], cfg.state_size,
                            cfg.dcn_groups, cfg.dcn_points, cfg.blocks_per_stage,
                            cfg.position_mode, cfg.block_set, cfg.selective,
                            cfg.per_direction_params, rng);
        cin = cfg.stage_channels[static_cast<size_t>(i)];
    }
    const auto& C = cfg.stage_channels;
    up_levels.emplace_back(C[3], C[2], C[2], rng);
    up_levels.emplace_back(C[2], C[1], C[1], rng);
    up_levels.emplace_back(C[1], C[0], C[0], rng);
    up_levels.emplace_back(C[0], 0, c0, rng);
    classifier = nn::Conv2d<T>(c0, cfg.num_classes, 1, 1, 0, 1, rng);
}

template <typename T>
typename SegModel<T>::Output SegModel<T>::forward_features(Tape<T>& tape,
                                                           const Var<T>& image) const {
    const Tensor<T>& iv = image.value();
    if (iv.dim() != 4 || iv.size(1) != cfg.in_channels)
        throw ShapeError("model: image must be [B," + std::to_string(cfg.in_channels) + ",H,W]");
    const int64_t H = iv.size(2), W = iv.size(3);
    if (H % 32 != 0 || W % 32 != 0)
        throw ConfigError("model: input spatial dims must be divisible by 32, got " +
                          shape_str(iv.shape()));
    Output out;
    Var<T> x = stem.forward(tape, image);
    for (const auto& st : stages) {
        x = st.forward(tape, x);
        out.stage_features.push_back(x);
    }
    Var<T> d = out.stage_features[3];
    d = up_levels[0].forward(tape, d, out.stage_features[2]);
    d = up_levels[1].forward(tape, d, out.stage_features[1]);
    d = up_levels[2].forward(tape, d, out.stage_features[0]);
    d = up_levels[3].forward(tape, d, Var<T>());
    d = ops::bilinear_resize(tape, d, H, W);
    out.logits = classifier.forward(tape, d);
    return out;
}

template <typename T>
Var<T> SegModel<T>::forward(Tape<T>& tape, const Var<T>& image) const {
    return forward_features(tape, image).logits;
}

template <typename T>
nn::NamedParams<T> SegModel<T>::params() const {
    nn::NamedParams<T> out;
    stem.collect("stem", out);
    for (size_t i = 0; i < stages.size(); ++i)
        stages[i].collect("stage" + std::to_string(i + 1), out);
    for (size_t i = 0; i < up_levels.size(); ++i)
        up_levels[i].collect("decoder.up" + std::to_string(i), out);
    classifier.collect("decoder.classifier", out);
    return out;
}

namespace {

int64_t conv_macs(int64_t oh, int64_t ow, int64_t co, int64_t cig, int64_t k) {
    return oh * ow * co * cig * k * k;
}

int64_t ffn_macs(int64_t L, int64_t c) {
    return L * c * 4 * c      // expand
           + L * 4 * c * 9    // depthwise 3x3
           + L * 4 * c * c;   // project
}

int64_t sade_macs(int64_t L, int64_t c, int64_t G, int64_t K) {
    const int64_t cg = c / G;
    return L * 3 * G * K * c * 9             // offset head conv
           + L * G * (K * cg * 5 + cg * cg)  // sampling + modulate, then projection
           + ffn_macs(L, c);
}

int64_t mssm_macs(int64_t L, int64_t c, int64_t N) {
    return L * c * c              // delta projection
           + 2 * L * c * N        // B and C projections
           + 2 * L * c * c        // gate + out projections
           + 2 * L * c * N        // discretization
           + 8 * 3 * L * c * N    // eight directional recurrences
           + ffn_macs(L, c);
}

}  // namespace

CostReport count_params_flops(const ModelConfig& cfg, int H, int W) {
    cfg.validate();
    CostReport rep;
    SegModel<float> model(cfg, 0);
    for (const auto& [name, var] : model.params()) {
        (void)name;
        rep.params += var.value().numel();
    }

    const int64_t c0 = cfg.stem_channels();
    int64_t h = H / 2, w = W / 2;
    rep.macs += conv_macs(h, w, c0, cfg.in_channels, 7);
    rep.macs += 3 * conv_macs(h, w, c0, c0, 3);
    int64_t cin = c0;
    for (int i = 0; i < 4; ++i) {
        const int64_t c = cfg.stage_channels[static_cast<size_t>(i)];
        h /= 2;
        w /= 2;
        const int64_t L = h * w;
        rep.macs += conv_macs(h, w, c, cin, 3);  // patch embedding
        for (int p = 0; p < cfg.blocks_per_stage; ++p) {
            if (cfg.block_set != BlockSet::mssm_only)
                rep.macs += sade_macs(L, c, cfg.dcn_groups, cfg.dcn_points);
            if (cfg.block_set != BlockSet::sade_only) rep.macs += mssm_macs(L, c, cfg.state_size);
        }
        rep.macs += L * c * c;  // patch merging
        cin = c;
    }
    const auto& C = cfg.stage_channels;
    const int64_t outs[4] = {C[2], C[1], C[0], c0};
    const int64_t skips[4] = {C[2], C[1], C[0], 0};
    int64_t dc = C[3];
    for (int i = 0; i < 4; ++i) {
        rep.macs += h * w * dc * outs[i] * 4;  // transposed conv, k=2
        h *= 2;
        w *= 2;
        rep.macs += conv_macs(h, w, outs[i], outs[i] + skips[i], 3);
        rep.macs += conv_macs(h, w, outs[i], outs[i], 3);
        dc = outs[i];
    }
    rep.macs += static_cast<int64_t>(H) * W * cfg.num_classes * c0;  // classifier after resize
    return rep;
}

template struct SegModel<float>;
template struct SegModel<double>;

}  // namespace uvmb
