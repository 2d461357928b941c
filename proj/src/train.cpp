#include "uvmb/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "uvmb/checkpoint.hpp"
#include "uvmb/errors.hpp"
#include "uvmb/parallel.hpp"

namespace fs = std::filesystem;

namespace uvmb {

const char* loss_kind_name(LossKind k) {
    return k == LossKind::cross_entropy ? "ce" : "dice";
}

LossKind loss_kind_from_name(const std::string& s) {
    if (s == "ce" || s == "cross_entropy") return LossKind::cross_entropy;
    if (s == "dice") return LossKind::dice;
    throw ConfigError("unknown loss '" + s + "' (ce|dice)");
}

void TrainConfig::validate() const {
    if (!(min_lr > 0) || !(min_lr <= base_lr))
        throw ConfigError("train: need 0 < min_lr <= base_lr");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
        throw ConfigError("train: need 0 <= warmup_epochs < epochs");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (holdout < 0 || holdout >= 1) throw ConfigError("train: holdout must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
                   double min_lr) {
    if (warmup_steps >= total_steps) throw ConfigError("lr_schedule: warmup must end before total");
    if (step < 0) step = 0;
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step == warmup_steps) return base_lr;   // exact endpoint
    if (step >= total_steps) return min_lr;     // exact endpoint
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v,
                int64_t step_count, double lr, double beta1, double beta2, double eps,
                double weight_decay) {
    check_same_shape(param, grad, "adamw_step");
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T om1 = static_cast<T>(1.0 - beta1), om2 = static_cast<T>(1.0 - beta2);
    // bias corrections folded into per-step scalar factors
    const T mscale = static_cast<T>(lr / (1.0 - std::pow(beta1, static_cast<double>(step_count))));
    const T vscale =
        static_cast<T>(1.0 / std::sqrt(1.0 - std::pow(beta2, static_cast<double>(step_count))));
    const T epsT = static_cast<T>(eps);
    const T decay = static_cast<T>(1.0 - lr * weight_decay);
    T* __restrict p = param.data();
    const T* __restrict g = grad.data();
    T* __restrict md = m.data();
    T* __restrict vd = v.data();
    for (int64_t i = 0; i < param.numel(); ++i) {
        p[i] *= decay;
        md[i] = b1 * md[i] + om1 * g[i];
        vd[i] = b2 * vd[i] + om2 * g[i] * g[i];
        p[i] -= mscale * md[i] / (std::sqrt(vd[i]) * vscale + epsT);
    }
}

template <typename T>
void AdamW<T>::init(const nn::NamedParams<T>& params) {
    m.clear();
    v.clear();
    step_count = 0;
    for (const auto& [name, var] : params) {
        (void)name;
        m.emplace_back(var.value().shape());
        v.emplace_back(var.value().shape());
    }
}

template <typename T>
void AdamW<T>::step(nn::NamedParams<T>& params, double lr) {
    ++step_count;
    for (size_t i = 0; i < params.size(); ++i)
        adamw_step(params[i].second.value_mut(), params[i].second.grad(), m[i], v[i], step_count,
                   lr, beta1, beta2, eps, weight_decay);
}

template <typename T>
void AdamW<T>::zero_grad(nn::NamedParams<T>& params) {
    for (auto& [name, var] : params) {
        (void)name;
        var.zero_grad();
    }
}

template <typename T>
Var<T> segmentation_loss(Tape<T>& tape, const Var<T>& logits, const Tensor<T>& mask,
                         LossKind kind) {
    if (kind == LossKind::cross_entropy) return ops::cross_entropy_loss(tape, logits, mask);
    Var<T> probs = ops::softmax_channel(tape, logits);
    Var<T> fg = ops::select_channel(tape, probs, 1);
    return ops::dice_loss(tape, fg, mask);
}

Tensor<float> predict_mask(const SegModel<float>& model, const Tensor<float>& image) {
    Tape<float> tape(false);
    Var<float> img = Var<float>::leaf(
        image.reshaped({1, image.size(0), image.size(1), image.size(2)}), false);
    const Tensor<float>& logits = model.forward(tape, img).value();
    const int64_t K = logits.size(1), H = logits.size(2), W = logits.size(3);
    Tensor<float> out({H, W});
    for (int64_t t = 0; t < H * W; ++t) {
        if (K == 1) {
            out[t] = logits[t] > 0 ? 1.0f : 0.0f;
        } else {
            int64_t best = 0;
            for (int64_t k = 1; k < K; ++k)
                if (logits[k * H * W + t] > logits[best * H * W + t]) best = k;
            out[t] = best == 1 ? 1.0f : 0.0f;
        }
    }
    return out;
}

Confusion evaluate_model(const SegModel<float>& model, const std::vector<SegSample>& data) {
    Confusion conf;
    for (const SegSample& s : data) conf.add(predict_mask(model, s.image), s.mask);
    return conf;
}

std::string history_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,loss,iou,acc,oa,lr\n";
    char line[256];
    for (const EpochStats& e : history) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.loss, e.iou,
                      e.acc, e.oa, e.lr);
        out += line;
    }
    return out;
}

TrainResult train_loop(const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const std::vector<SegSample>& data, const std::string& out_dir) {
    mcfg.validate();
    tcfg.validate();
    if (data.empty()) throw ConfigError("train: empty dataset");
    if (mcfg.num_classes != 2) throw ConfigError("train: binary task needs num_classes == 2");
    set_num_threads(tcfg.threads);
    fs::create_directories(out_dir);

    const int64_t H = data[0].image.size(1), W = data[0].image.size(2);
    for (const SegSample& s : data)
        if (s.image.size(1) != H || s.image.size(2) != W)
            throw ConfigError("train: all samples must share one image size");
    const bool square = H == W;

    SegModel<float> model(mcfg, tcfg.seed);
    auto params = model.params();
    AdamW<float> opt;
    opt.weight_decay = tcfg.weight_decay;
    opt.init(params);

    const int n = static_cast<int>(data.size());
    const int nval = tcfg.holdout > 0
                         ? std::max(1, static_cast<int>(std::lround(n * tcfg.holdout)))
                         : 0;
    const int ntrain = n - nval;
    if (ntrain < 1) throw ConfigError("train: holdout leaves no training samples");
    std::vector<SegSample> val(data.end() - nval, data.end());
    if (nval == 0) val = data;  // metrics on the training split

    const int64_t steps_per_epoch = (ntrain + tcfg.batch_size - 1) / tcfg.batch_size;
    const int64_t total_steps = steps_per_epoch * tcfg.epochs;
    const int64_t warmup_steps = steps_per_epoch * tcfg.warmup_epochs;

    Rng rng(tcfg.seed ^ 0xDA7A5EEDULL);
    std::vector<int> order(static_cast<size_t>(ntrain));
    for (int i = 0; i < ntrain; ++i) order[static_cast<size_t>(i)] = i;

    TrainResult result;
    result.checkpoint_prefix = out_dir + "/best";
    result.best_iou = -1.0;
    int64_t gstep = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0;
        double last_lr = 0;
        int64_t nbatches = 0;
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            const int lo = static_cast<int>(s) * tcfg.batch_size;
            const int hi = std::min(ntrain, lo + tcfg.batch_size);
            const int bs = hi - lo;
            Tensor<float> images({bs, 3, H, W});
            Tensor<float> masks({bs, H, W});
            for (int bi = 0; bi < bs; ++bi) {
                const SegSample& base = data[static_cast<size_t>(order[static_cast<size_t>(lo + bi)])];
                SegSample s2 = tcfg.augment ? augment(base, rng) : base;
                // Rectangular batches need matching dims: undo the axis swap of
                // 90/270-degree rotations with one extra quarter turn (net 180).
                if (!square && s2.mask.size(0) != H) s2 = rot90(s2);
                std::copy(s2.image.data(), s2.image.data() + s2.image.numel(),
                          images.data() + static_cast<int64_t>(bi) * 3 * H * W);
                std::copy(s2.mask.data(), s2.mask.data() + s2.mask.numel(),
                          masks.data() + static_cast<int64_t>(bi) * H * W);
            }
            Tape<float> tape(true);
            Var<float> img = Var<float>::leaf(std::move(images), false);
            Var<float> logits = model.forward(tape, img);
            Var<float> loss = segmentation_loss(tape, logits, masks, tcfg.loss);
            const float lv = loss.value().item();
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(gstep));
            tape.backward(loss);
            last_lr = lr_schedule(gstep, total_steps, warmup_steps, tcfg.base_lr, tcfg.min_lr);
            opt.step(params, last_lr);
            opt.zero_grad(params);
            tape.clear();
            epoch_loss += lv;
            ++gstep;
            ++nbatches;
        }
        const Confusion conf = evaluate_model(model, val);
        const SegMetrics m = conf.metrics();
        EpochStats st;
        st.epoch = epoch;
        st.loss = epoch_loss / static_cast<double>(nbatches);
        st.iou = m.iou;
        st.acc = m.acc;
        st.oa = m.oa;
        st.lr = last_lr;
        result.history.push_back(st);
        if (m.iou >= result.best_iou) {
            result.best_iou = m.iou;
            save_checkpoint(result.checkpoint_prefix, model);
        }
    }
    std::ofstream hist(out_dir + "/history.csv", std::ios::binary);
    if (!hist) throw IoError("cannot write history CSV in " + out_dir);
    hist << history_csv(result.history);
    return result;
}

template void adamw_step(Tensor<float>&, const Tensor<float>&, Tensor<float>&, Tensor<float>&,
                         int64_t, double, double, double, double, double);
template void adamw_step(Tensor<double>&, const Tensor<double>&, Tensor<double>&, Tensor<double>&,
                         int64_t, double, double, double, double, double);
template struct AdamW<float>;
template struct AdamW<double>;
template Var<float> segmentation_loss(Tape<float>&, const Var<float>&, const Tensor<float>&,
                                      LossKind);
template Var<double> segmentation_loss(Tape<double>&, const Var<double>&, const Tensor<double>&,
                                       LossKind);

}  // namespace uvmb
