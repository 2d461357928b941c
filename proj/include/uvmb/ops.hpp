#pragma once

#include <vector>

#include "uvmb/autodiff.hpp"
#include "uvmb/tensor.hpp"

namespace uvmb::ops {

// ---- elementwise / structural -------------------------------------------

// Same-shape addition, or b broadcast when it is a single element.
template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
// Elementwise quotient; same-shape or scalar divisor.
template <typename T>
Var<T> div(Tape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T c);
template <typename T>
Var<T> add_const(Tape<T>& tape, const Var<T>& x, T c);

template <typename T>
Var<T> sum_all(Tape<T>& tape, const Var<T>& x);  // -> shape {1}
template <typename T>
Var<T> mean_all(Tape<T>& tape, const Var<T>& x);

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape);
template <typename T>
Var<T> permute_axes(Tape<T>& tape, const Var<T>& x, const std::vector<int>& dims);

// Concatenate along axis 1 of rank-4 tensors [B,C,H,W].
template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
// Slice channels [from, to) of a rank-4 tensor.
template <typename T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, int64_t from, int64_t to);
// Drop axis 1 after slicing a single channel: [B,K,H,W] -> [B,H,W].
template <typename T>
Var<T> select_channel(Tape<T>& tape, const Var<T>& x, int64_t k);

// Broadcast a vector [D] to [B,L,D].
template <typename T>
Var<T> expand_rows(Tape<T>& tape, const Var<T>& v, int64_t batch, int64_t len);

// y = -exp(x), elementwise. Used to keep state-transition rates strictly negative.
template <typename T>
Var<T> neg_exp(Tape<T>& tape, const Var<T>& x);

// ---- dense layers ---------------------------------------------------------

// y[..., Cout] = x[..., Cin] . w[Cin, Cout] + b[Cout]; b may be undefined.
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b);

// Cross-correlation with zero padding. x[B,Ci,H,W], w[Co,Ci/g,kh,kw], b[Co]
// (optional). Output H' = floor((H + 2p - kh)/stride) + 1.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int padding, int groups);

// Adjoint of conv2d for matching geometry. x[B,P,H,W], w[P,Q,kh,kw], b[Q]
// (optional). Output spatial size (H-1)*stride - 2*padding + kh.
template <typename T>
Var<T> conv_transpose2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        int stride, int padding);

// Normalize over the last axis, then affine gamma/beta.
template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

enum class Act { silu, gelu, softplus };

template <typename T>
Var<T> activation(Tape<T>& tape, const Var<T>& x, Act kind);

// ---- sampling / resizing --------------------------------------------------

// map[C,H,W], points[P,2] as (row, col) real coordinates. Zero-padding
// convention: neighbors outside the map contribute zero, so coordinates
// strictly outside [-1,H]x[-1,W] produce zeros. Differentiable in both the
// map and the coordinates.
template <typename T>
Var<T> bilinear_sample(Tape<T>& tape, const Var<T>& map, const Var<T>& points);

// Half-pixel-center mapping with clamped corner indices, so constant images
// stay constant and out==in is the identity.
template <typename T>
Var<T> bilinear_resize(Tape<T>& tape, const Var<T>& x, int64_t out_h, int64_t out_w);

// ---- classification heads ---------------------------------------------------

// Softmax over axis 1 of [B,K,H,W].
template <typename T>
Var<T> softmax_channel(Tape<T>& tape, const Var<T>& x);

// Mean over pixels of -log softmax at the true class. logits [B,2,H,W],
// mask [B,H,W] with values in {0,1}.
template <typename T>
Var<T> cross_entropy_loss(Tape<T>& tape, const Var<T>& logits, const Tensor<T>& mask);

// 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps) with eps=1, per batch item, then
// meaned. probs [B,H,W] foreground probabilities, mask [B,H,W] binary.
template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& probs, const Tensor<T>& mask);

// ---- raw helpers (no tape) --------------------------------------------------

template <typename T>
T softplus_scalar(T x);
template <typename T>
T sigmoid_scalar(T x);

}  // namespace uvmb::ops
