#include "uvmb/deform.hpp"

#include <cmath>

#include "uvmb/errors.hpp"
#include "uvmb/parallel.hpp"

namespace uvmb::deform {

std::vector<std::pair<int, int>> sampling_grid(int K) {
    int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(K))));
    if (side * side != K || side % 2 == 0)
        throw ShapeError("sampling_grid: K must be an odd square (1, 9, 25, ...)");
    const int h = (side - 1) / 2;
    std::vector<std::pair<int, int>> grid;
    grid.reserve(static_cast<size_t>(K));
    for (int r = -h; r <= h; ++r)
        for (int c = -h; c <= h; ++c) grid.emplace_back(r, c);
    return grid;
}

namespace {

template <typename T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

// Bilinear tap with zero padding: fills the 4 corner indices/weights and the
// corner values for Cg contiguous channel planes starting at `base`.
struct Taps {
    int64_t idx[4];   // plane-relative pixel index, -1 when outside
    double w[4];      // bilinear weights
    double fr, fc;    // fractional parts
};

inline Taps make_taps(double r, double c, int64_t H, int64_t W) {
    Taps t;
    const int64_t r0 = static_cast<int64_t>(std::floor(r));
    const int64_t c0 = static_cast<int64_t>(std::floor(c));
    t.fr = r - static_cast<double>(r0);
    t.fc = c - static_cast<double>(c0);
    const int64_t rr[4] = {r0, r0, r0 + 1, r0 + 1};
    const int64_t cc[4] = {c0, c0 + 1, c0, c0 + 1};
    t.w[0] = (1.0 - t.fr) * (1.0 - t.fc);
    t.w[1] = (1.0 - t.fr) * t.fc;
    t.w[2] = t.fr * (1.0 - t.fc);
    t.w[3] = t.fr * t.fc;
    for (int i = 0; i < 4; ++i)
        t.idx[i] = (rr[i] >= 0 && rr[i] < H && cc[i] >= 0 && cc[i] < W) ? rr[i] * W + cc[i] : -1;
    return t;
}

}  // namespace

template <typename T>
Var<T> dcn_aggregate(Tape<T>& tape, const Var<T>& x, const Var<T>& offsets,
                     const Var<T>& modulation, const Var<T>& wg, int G, int K) {
    const Tensor<T>&xv = x.value(), &ov = offsets.value(), &mv = modulation.value(),
          &wv = wg.value();
    if (xv.dim() != 4) throw ShapeError("dcn_aggregate: x must be [B,C,H,W]");
    const int64_t B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    if (G < 1 || C % G != 0) throw ShapeError("dcn_aggregate: channels not divisible by groups");
    const int64_t Cg = C / G;
    const int64_t GK = static_cast<int64_t>(G) * K;
    if (ov.dim() != 4 || ov.size(0) != B || ov.size(1) != 2 * GK || ov.size(2) != H ||
        ov.size(3) != W)
        throw ShapeError("dcn_aggregate: offsets must be [B,2GK,H,W]");
    if (mv.dim() != 4 || mv.size(0) != B || mv.size(1) != GK || mv.size(2) != H ||
        mv.size(3) != W)
        throw ShapeError("dcn_aggregate: modulation must be [B,GK,H,W]");
    if (wv.dim() != 3 || wv.size(0) != G || wv.size(1) != Cg || wv.size(2) != Cg)
        throw ShapeError("dcn_aggregate: wg must be [G,Cg,Cg]");
    const auto grid = sampling_grid(K);
    const int64_t HW = H * W;

    Tensor<T> out({B, C, H, W});
    Tensor<T> pre({B, C, H, W});  // modulated k-sums before the group projection
    parallel_for(B * H, [&](int64_t bh) {
        const int64_t b = bh / H, r0 = bh % H;
        std::vector<T> acc(static_cast<size_t>(Cg));
        for (int64_t c0 = 0; c0 < W; ++c0)
            for (int64_t g = 0; g < G; ++g) {
                std::fill(acc.begin(), acc.end(), T(0));
                const T* xg = xv.data() + (b * C + g * Cg) * HW;
                for (int64_t k = 0; k < K; ++k) {
                    const int64_t och = (g * K + k) * 2;
                    const double dr =
                        static_cast<double>(ov[((b * 2 * GK + och) * H + r0) * W + c0]);
                    const double dc =
                        static_cast<double>(ov[((b * 2 * GK + och + 1) * H + r0) * W + c0]);
                    const T m = mv[((b * GK + g * K + k) * H + r0) * W + c0];
                    const Taps t =
                        make_taps(static_cast<double>(r0) + grid[static_cast<size_t>(k)].first + dr,
                                  static_cast<double>(c0) + grid[static_cast<size_t>(k)].second + dc,
                                  H, W);
                    for (int64_t ci = 0; ci < Cg; ++ci) {
                        double v = 0;
                        for (int i = 0; i < 4; ++i)
                            if (t.idx[i] >= 0)
                                v += t.w[i] * static_cast<double>(xg[ci * HW + t.idx[i]]);
                        acc[static_cast<size_t>(ci)] += m * static_cast<T>(v);
                    }
                }
                const T* wgr = wv.data() + g * Cg * Cg;
                for (int64_t co = 0; co < Cg; ++co) {
                    T s = 0;
                    for (int64_t ci = 0; ci < Cg; ++ci)
                        s += wgr[co * Cg + ci] * acc[static_cast<size_t>(ci)];
                    out[((b * C + g * Cg + co) * H + r0) * W + c0] = s;
                    pre[((b * C + g * Cg + co) * H + r0) * W + c0] = acc[static_cast<size_t>(co)];
                }
            }
    });

    const bool req = x.requires_grad() || offsets.requires_grad() || modulation.requires_grad() ||
                     wg.requires_grad();
    auto node = make_node(std::move(out), req);
    if (tape.recording() && req) {
        tape.record([xn = x.node(), on_off = offsets.node(), mn = modulation.node(),
                     wn = wg.node(), on = node, pre = std::move(pre), grid, B, C, H, W, G, Cg, K,
                     GK, HW]() {
            if (!on->has_grad()) return;
            const Tensor<T>& gy = on->grad;
            const Tensor<T>&xv = xn->value, &ov = on_off->value, &mv = mn->value, &wv = wn->value;
            T* xg = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
            T* og = on_off->requires_grad ? on_off->ensure_grad().data() : nullptr;
            T* mg = mn->requires_grad ? mn->ensure_grad().data() : nullptr;
            // wg partials per batch item, reduced sequentially below.
            Tensor<T> wg_part({B, G, Cg, Cg});
            parallel_for(B, [&](int64_t b) {
                std::vector<T> gacc(static_cast<size_t>(Cg));
                std::vector<double> vk(static_cast<size_t>(Cg));
                T* wpart = wg_part.data() + b * G * Cg * Cg;
                for (int64_t r0 = 0; r0 < H; ++r0)
                    for (int64_t c0 = 0; c0 < W; ++c0)
                        for (int64_t g = 0; g < G; ++g) {
                            const T* wgr = wv.data() + g * Cg * Cg;
                            // gacc = wg^T . gy_g ; dwg += gy_g (x) pre
                            std::fill(gacc.begin(), gacc.end(), T(0));
                            for (int64_t co = 0; co < Cg; ++co) {
                                const T gv = gy[((b * C + g * Cg + co) * H + r0) * W + c0];
                                if (gv == T(0)) continue;
                                for (int64_t ci = 0; ci < Cg; ++ci) {
                                    gacc[static_cast<size_t>(ci)] += wgr[co * Cg + ci] * gv;
                                    wpart[(g * Cg + co) * Cg + ci] +=
                                        gv * pre[((b * C + g * Cg + ci) * H + r0) * W + c0];
                                }
                            }
                            const T* xgrp = xv.data() + (b * C + g * Cg) * HW;
                            T* xggrp = xg ? xg + (b * C + g * Cg) * HW : nullptr;
                            for (int64_t k = 0; k < K; ++k) {
                                const int64_t och = (g * K + k) * 2;
                                const double dr = static_cast<double>(
                                    ov[((b * 2 * GK + och) * H + r0) * W + c0]);
                                const double dc = static_cast<double>(
                                    ov[((b * 2 * GK + och + 1) * H + r0) * W + c0]);
                                const T m = mv[((b * GK + g * K + k) * H + r0) * W + c0];
                                const Taps t = make_taps(
                                    static_cast<double>(r0) + grid[static_cast<size_t>(k)].first +
                                        dr,
                                    static_cast<double>(c0) + grid[static_cast<size_t>(k)].second +
                                        dc,
                                    H, W);
                                double gm_acc = 0, gr_acc = 0, gc_acc = 0;
                                for (int64_t ci = 0; ci < Cg; ++ci) {
                                    double corner[4] = {0, 0, 0, 0};
                                    for (int i = 0; i < 4; ++i)
                                        if (t.idx[i] >= 0)
                                            corner[i] =
                                                static_cast<double>(xgrp[ci * HW + t.idx[i]]);
                                    const double v = t.w[0] * corner[0] + t.w[1] * corner[1] +
                                                     t.w[2] * corner[2] + t.w[3] * corner[3];
                                    vk[static_cast<size_t>(ci)] = v;
                                    const double ga =
                                        static_cast<double>(gacc[static_cast<size_t>(ci)]);
                                    gm_acc += ga * v;
                                    const double gam = ga * static_cast<double>(m);
                                    gr_acc += gam * ((1.0 - t.fc) * (corner[2] - corner[0]) +
                                                     t.fc * (corner[3] - corner[1]));
                                    gc_acc += gam * ((1.0 - t.fr) * (corner[1] - corner[0]) +
                                                     t.fr * (corner[3] - corner[2]));
                                    if (xggrp) {
                                        for (int i = 0; i < 4; ++i)
                                            if (t.idx[i] >= 0)
                                                xggrp[ci * HW + t.idx[i]] +=
                                                    static_cast<T>(gam * t.w[i]);
                                    }
                                }
                                if (mg)
                                    mg[((b * GK + g * K + k) * H + r0) * W + c0] +=
                                        static_cast<T>(gm_acc);
                                if (og) {
                                    og[((b * 2 * GK + och) * H + r0) * W + c0] +=
                                        static_cast<T>(gr_acc);
                                    og[((b * 2 * GK + och + 1) * H + r0) * W + c0] +=
                                        static_cast<T>(gc_acc);
                                }
                            }
                        }
            });
            if (wn->requires_grad) {
                T* wgd = wn->ensure_grad().data();
                for (int64_t b = 0; b < B; ++b) {
                    const T* wpart = wg_part.data() + b * G * Cg * Cg;
                    for (int64_t i = 0; i < G * Cg * Cg; ++i) wgd[i] += wpart[i];
                }
            }
        });
    }
    return Var<T>(node);
}

template Var<float> dcn_aggregate(Tape<float>&, const Var<float>&, const Var<float>&,
                                  const Var<float>&, const Var<float>&, int, int);
template Var<double> dcn_aggregate(Tape<double>&, const Var<double>&, const Var<double>&,
                                   const Var<double>&, const Var<double>&, int, int);

}  // namespace uvmb::deform
