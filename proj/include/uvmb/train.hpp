#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uvmb/data.hpp"
#include "uvmb/metrics.hpp"
#include "uvmb/model.hpp"

namespace uvmb {

enum class LossKind { cross_entropy, dice };

const char* loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& s);

struct TrainConfig {
    double base_lr = 1e-3;
    double min_lr = 1e-6;
    int warmup_epochs = 10;
    int epochs = 100;
    int batch_size = 4;
    LossKind loss = LossKind::dice;
    double weight_decay = 0.01;
    bool augment = true;
    double holdout = 0.2;  // validation fraction; 0 validates on the training split
    uint64_t seed = 42;
    int threads = 0;

    void validate() const;
};

// Linear ramp 0 -> base_lr over [0, warmup], then cosine decay to min_lr at
// total_steps. Endpoints are exact: lr(warmup_steps) == base_lr and
// lr(step >= total_steps) == min_lr.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
                   double min_lr = 1e-6);

// One decoupled-weight-decay update for a single tensor. Decay is applied to
// the parameter before the moment update; moments are bias-corrected.
template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v,
                int64_t step_count, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double weight_decay = 0.01);

template <typename T>
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    int64_t step_count = 0;
    std::vector<Tensor<T>> m, v;

    void init(const nn::NamedParams<T>& params);
    void step(nn::NamedParams<T>& params, double lr);
    void zero_grad(nn::NamedParams<T>& params);
};

struct EpochStats {
    int epoch = 0;
    double loss = 0, iou = 0, acc = 0, oa = 0, lr = 0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_iou = 0;
    std::string checkpoint_prefix;  // "<out_dir>/best"
};

// Loss of a forward pass; probs path for dice is softmax foreground.
template <typename T>
Var<T> segmentation_loss(Tape<T>& tape, const Var<T>& logits, const Tensor<T>& mask,
                         LossKind kind);

// Argmax prediction (foreground = class 1) of a trained model on one image.
Tensor<float> predict_mask(const SegModel<float>& model, const Tensor<float>& image);

// Micro-averaged confusion over a dataset.
Confusion evaluate_model(const SegModel<float>& model, const std::vector<SegSample>& data);

// Epoch loop: shuffle, (optionally) augment, forward, loss, backward, AdamW
// with the warmup+cosine schedule; per-epoch metrics on the held-out split;
// keeps the best-IoU checkpoint under <out_dir>/best.{json,bin} and writes
// <out_dir>/history.csv. Throws NumericError when the loss turns non-finite.
TrainResult train_loop(const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const std::vector<SegSample>& data, const std::string& out_dir);

std::string history_csv(const std::vector<EpochStats>& history);

}  // namespace uvmb
