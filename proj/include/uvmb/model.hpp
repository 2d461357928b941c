#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uvmb/nn.hpp"

namespace uvmb {

struct ModelConfig {
    int in_channels = 3;
    int num_classes = 2;
    std::array<int, 4> stage_channels{32, 64, 128, 256};
    int state_size = 8;
    int dcn_groups = 4;
    int dcn_points = 9;
    int blocks_per_stage = 2;
    PositionMode position_mode = PositionMode::serial;
    BlockSet block_set = BlockSet::both;
    bool selective = true;
    bool per_direction_params = false;

    int stem_channels() const { return stage_channels[0] / 2; }
    void validate() const;
};

const char* position_mode_name(PositionMode m);
PositionMode position_mode_from_name(const std::string& s);
const char* block_set_name(BlockSet s);
BlockSet block_set_from_name(const std::string& s);

// Encoder-decoder segmentation network: stem (1/2 resolution), four stages
// producing features at 1/4 .. 1/32 resolution, and a decoder that upsamples
// back with skip connections and a final bilinear resize to the input size.
template <typename T>
struct SegModel {
    ModelConfig cfg;
    nn::Stem<T> stem;
    std::vector<nn::DssaStage<T>> stages;
    std::vector<nn::UpLevel<T>> up_levels;
    nn::Conv2d<T> classifier;

    SegModel(const ModelConfig& cfg, uint64_t seed);

    struct Output {
        std::vector<Var<T>> stage_features;  // 4 entries
        Var<T> logits;                       // [B,num_classes,H,W]
    };

    // Input must be [B,in_channels,H,W] with H, W divisible by 32.
    Output forward_features(Tape<T>& tape, const Var<T>& image) const;
    Var<T> forward(Tape<T>& tape, const Var<T>& image) const;

    // Deterministic (name, parameter) list; order is the registration order.
    nn::NamedParams<T> params() const;
};

struct CostReport {
    int64_t params = 0;
    int64_t macs = 0;
    int64_t flops() const { return 2 * macs; }
};

// Exact parameter count (by construction) plus a multiply-accumulate count
// at the given input size. MACs cover convolutions, linear projections, the
// deformable aggregation and the directional scans; normalizations,
// activations and resizes are not counted.
CostReport count_params_flops(const ModelConfig& cfg, int H, int W);

}  // namespace uvmb
