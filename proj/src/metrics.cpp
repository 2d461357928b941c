#include "uvmb/metrics.hpp"

namespace uvmb {

SegMetrics Confusion::metrics() const {
    SegMetrics m;
    m.iou = (tp + fp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn) : 1.0;
    m.acc = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 1.0;
    m.oa = total() > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 1.0;
    return m;
}

template <typename T>
SegMetrics seg_metrics(const Tensor<T>& pred_mask, const Tensor<T>& gt_mask) {
    Confusion c;
    c.add(pred_mask, gt_mask);
    return c.metrics();
}

template SegMetrics seg_metrics(const Tensor<float>&, const Tensor<float>&);
template SegMetrics seg_metrics(const Tensor<double>&, const Tensor<double>&);

}  // namespace uvmb
