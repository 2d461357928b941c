#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uvmb/autodiff.hpp"
#include "uvmb/ops.hpp"
#include "uvmb/rng.hpp"

namespace uvmb {

// Arrangement of the two mixers inside a stage pair.
enum class PositionMode { serial, parallel, reverse };
// Which mixers a stage pair contains (ablation variants).
enum class BlockSet { both, sade_only, mssm_only };

namespace nn {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

// tokens [B,L,C] <-> grid [B,C,H,W]
template <typename T>
Var<T> to_grid(Tape<T>& tape, const Var<T>& tokens, int H, int W);
template <typename T>
Var<T> to_tokens(Tape<T>& tape, const Var<T>& grid);

template <typename T>
struct Linear {
    Var<T> w, b;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool bias = true);
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const { return ops::linear(tape, x, w, b); }
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <typename T>
struct Conv2d {
    Var<T> w, b;
    int stride = 1, pad = 0, groups = 1;

    Conv2d() = default;
    Conv2d(int64_t cin, int64_t cout, int k, int stride, int pad, int groups, Rng& rng,
           bool bias = true);
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
        return ops::conv2d(tape, x, w, b, stride, pad, groups);
    }
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <typename T>
struct ConvT2d {
    Var<T> w, b;
    int stride = 1, pad = 0;

    ConvT2d() = default;
    ConvT2d(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng, bool bias = true);
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
        return ops::conv_transpose2d(tape, x, w, b, stride, pad);
    }
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <typename T>
struct LayerNorm {
    Var<T> gamma, beta;
    T eps = static_cast<T>(1e-5);

    LayerNorm() = default;
    explicit LayerNorm(int64_t dim);
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const {
        return ops::layer_norm(tape, x, gamma, beta, eps);
    }
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// Feed-forward with a depthwise 3x3 convolution in the hidden layer:
// expand (x4) -> grid -> depthwise conv -> gelu -> project back.
template <typename T>
struct MixFfn {
    Linear<T> expand, proj;
    Conv2d<T> dw;

    MixFfn() = default;
    MixFfn(int64_t dim, int ratio, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& tokens, int H, int W) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// Directional-scan state-space mixer. Selective mode derives the timescale
// and the input/output projections from each token; LTI mode uses learned
// constants. Per-direction mode gives each of the 8 scan directions its own
// selective projections.
template <typename T>
struct SsmMixer {
    int64_t dim = 0, state = 0;
    bool selective = true;
    bool per_direction = false;

    Var<T> a_log;  // [D,N]; rates are -exp(a_log)
    Linear<T> delta_proj, b_proj, c_proj;
    std::vector<Linear<T>> dir_delta, dir_b, dir_c;
    Var<T> lti_delta_raw, lti_b, lti_c;
    Linear<T> gate_proj, out_proj;

    SsmMixer() = default;
    SsmMixer(int64_t dim, int64_t state, bool selective, bool per_direction, Rng& rng);

    struct TokenParams {
        Var<T> delta;  // [B,L,D], strictly positive
        Var<T> Bm;     // [B,L,N]
        Var<T> Cm;     // [B,L,N]
    };
    // Token-dependent timescale and projections (softplus keeps delta > 0);
    // in LTI mode the learned constants are broadcast instead.
    TokenParams token_params(Tape<T>& tape, const Var<T>& tokens) const;

    Var<T> forward(Tape<T>& tape, const Var<T>& tokens, int H, int W) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// Deformable-aggregation mixer. The offset head is a 3x3 convolution
// producing 2*G*K offset channels followed by G*K modulation channels; its
// weights start at zero with modulation biases at one, so a fresh layer is a
// plain (unshifted, unit-modulated) aggregation.
template <typename T>
struct DeformMixer {
    int groups = 1, points = 9;
    Conv2d<T> offset_head;
    Var<T> wg;  // [G,Cg,Cg]

    DeformMixer() = default;
    DeformMixer(int64_t dim, int G, int K, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& tokens, int H, int W) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// Pre-norm residual block: x -> x + mixer(norm(x)) -> u + ffn(norm(u)).
template <typename T>
struct SadeBlock {
    LayerNorm<T> norm_in, norm_ffn;
    DeformMixer<T> mixer;
    MixFfn<T> ffn;

    SadeBlock() = default;
    SadeBlock(int64_t dim, int G, int K, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& tokens, int H, int W) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <typename T>
struct MssmBlock {
    LayerNorm<T> norm_in, norm_ffn;
    SsmMixer<T> mixer;
    MixFfn<T> ffn;

    MssmBlock() = default;
    MssmBlock(int64_t dim, int64_t state, bool selective, bool per_direction, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& tokens, int H, int W) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// One deformable + scan pair, wired serial / reverse / parallel. Parallel
// mode shares the deformable block's entry norm between both mixer branches
// and sums the branches; its remaining parameters match the serial layout so
// all three modes are parameter-compatible.
template <typename T>
struct DssaPair {
    PositionMode mode = PositionMode::serial;
    BlockSet set = BlockSet::both;
    std::optional<SadeBlock<T>> sade;
    std::optional<MssmBlock<T>> mssm;

    DssaPair() = default;
    DssaPair(int64_t dim, int64_t state, int G, int K, PositionMode mode, BlockSet set,
             bool selective, bool per_direction, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& tokens, int H, int W) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// conv -> channel layer norm -> gelu, applied on the grid.
template <typename T>
Var<T> conv_norm_gelu(Tape<T>& tape, const Conv2d<T>& conv, const LayerNorm<T>& norm,
                      const Var<T>& x);

// Initial feature extractor: 7x7 stride-2 convolution then three 3x3
// stride-1 convolutions, each with norm + gelu. Net spatial factor 1/2.
template <typename T>
struct Stem {
    Conv2d<T> c0;  // 7x7 s2 p3
    Conv2d<T> c1, c2, c3;
    LayerNorm<T> n0, n1, n2, n3;

    Stem() = default;
    Stem(int64_t in_ch, int64_t out_ch, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& image) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// Stage: overlapping patch embedding (3x3 stride 2) -> stacked pairs ->
// patch merging (1x1 channel mixer).
template <typename T>
struct DssaStage {
    Conv2d<T> embed, merge;
    std::vector<DssaPair<T>> pairs;

    DssaStage() = default;
    DssaStage(int64_t cin, int64_t cout, int64_t state, int G, int K, int npairs,
              PositionMode mode, BlockSet set, bool selective, bool per_direction, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// One decoder level: x2 transposed-conv upsample, optional skip concat,
// two 3x3 convs with norm + gelu.
template <typename T>
struct UpLevel {
    ConvT2d<T> up;
    Conv2d<T> c1, c2;
    LayerNorm<T> n1, n2;
    int64_t skip_ch = 0;

    UpLevel() = default;
    UpLevel(int64_t cin, int64_t skip_ch, int64_t cout, Rng& rng);
    Var<T> forward(Tape<T>& tape, const Var<T>& x, const Var<T>& skip) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

}  // namespace nn
}  // namespace uvmb
