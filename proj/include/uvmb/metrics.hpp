#pragma once

#include <cstdint>

#include "uvmb/tensor.hpp"

namespace uvmb {

struct SegMetrics {
    double iou = 0, acc = 0, oa = 0;
};

// Pixel confusion counts for the binary foreground task. Conventions for
// degenerate cases: IoU of two empty masks is 1; ACC (foreground recall)
// with an empty ground truth is 1.
struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    template <typename T>
    void add(const Tensor<T>& pred, const Tensor<T>& gt) {
        check_same_shape(pred, gt, "confusion");
        for (int64_t i = 0; i < pred.numel(); ++i) {
            const bool p = pred[i] > T(0.5), g = gt[i] > T(0.5);
            tp += p && g;
            fp += p && !g;
            fn += !p && g;
            tn += !p && !g;
        }
    }

    int64_t total() const { return tp + fp + fn + tn; }
    SegMetrics metrics() const;
};

// Per-pair metrics over the foreground class:
//   IoU = TP/(TP+FP+FN), ACC = TP/(TP+FN) (foreground recall),
//   OA = (TP+TN)/total.
template <typename T>
SegMetrics seg_metrics(const Tensor<T>& pred_mask, const Tensor<T>& gt_mask);

}  // namespace uvmb
