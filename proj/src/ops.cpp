#include "uvmb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "uvmb/parallel.hpp"

namespace uvmb::ops {

namespace {

template <typename T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
bool any_grad(std::initializer_list<const Var<T>*> vars) {
    for (const Var<T>* v : vars)
        if (v->defined() && v->requires_grad()) return true;
    return false;
}

// ---- small GEMM kernels, parallel over output rows ----

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* __restrict A, const T* __restrict B, T* __restrict C, int64_t M, int64_t K,
             int64_t N, bool accumulate, bool parallel) {
    auto row = [&](int64_t m) {
        T* __restrict c = C + m * N;
        if (!accumulate) std::fill(c, c + N, T(0));
        const T* a = A + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* __restrict b = B + k * N;
            for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
        }
    };
    if (parallel)
        parallel_for(M, row);
    else
        for (int64_t m = 0; m < M; ++m) row(m);
}

// C[M,N] (+)= A[M,K] * B[N,K]^T. The dot products run over 8 independent
// accumulator lanes so the loop vectorizes without FP reassociation.
template <typename T>
void gemm_nt(const T* __restrict A, const T* __restrict B, T* __restrict C, int64_t M, int64_t K,
             int64_t N, bool accumulate, bool parallel = true) {
    auto row = [&](int64_t m) {
        const T* a = A + m * K;
        T* __restrict c = C + m * N;
        for (int64_t n = 0; n < N; ++n) {
            const T* __restrict b = B + n * K;
            T lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            int64_t k = 0;
            for (; k + 8 <= K; k += 8)
                for (int j = 0; j < 8; ++j) lanes[j] += a[k + j] * b[k + j];
            T acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
                    ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
            for (; k < K; ++k) acc += a[k] * b[k];
            if (accumulate)
                c[n] += acc;
            else
                c[n] = acc;
        }
    };
    if (parallel)
        parallel_for(M, row);
    else
        for (int64_t m = 0; m < M; ++m) row(m);
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* __restrict A, const T* __restrict B, T* __restrict C, int64_t M, int64_t K,
             int64_t N, bool accumulate, bool parallel = true) {
    auto row = [&](int64_t m) {
        T* __restrict c = C + m * N;
        if (!accumulate) std::fill(c, c + N, T(0));
        for (int64_t k = 0; k < K; ++k) {
            const T av = A[k * M + m];
            const T* __restrict b = B + k * N;
            for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
        }
    };
    if (parallel)
        parallel_for(M, row);
    else
        for (int64_t m = 0; m < M; ++m) row(m);
}

}  // namespace

// ---- elementwise / structural -----------------------------------------------

template <typename T>
static void check_broadcastable(const Var<T>& a, const Var<T>& b, const char* what) {
    if (b.value().numel() != 1) check_same_shape(a.value(), b.value(), what);
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    check_broadcastable(a, b, "add");
    const bool bscalar = b.value().numel() == 1;
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bscalar ? bd[0] : bd[i];
    auto node = make_node(std::move(out), any_grad<T>({&a, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([an = a.node(), bn = b.node(), on = node, bscalar]() {
            if (!on->has_grad()) return;
            const Tensor<T>& g = on->grad;
            if (an->requires_grad) an->accumulate(g);
            if (bn->requires_grad) {
                if (bscalar) {
                    T s = 0;
                    for (int64_t i = 0; i < g.numel(); ++i) s += g[i];
                    bn->ensure_grad()[0] += s;
                } else {
                    bn->accumulate(g);
                }
            }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    check_broadcastable(a, b, "sub");
    const bool bscalar = b.value().numel() == 1;
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bscalar ? bd[0] : bd[i];
    auto node = make_node(std::move(out), any_grad<T>({&a, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([an = a.node(), bn = b.node(), on = node, bscalar]() {
            if (!on->has_grad()) return;
            const Tensor<T>& g = on->grad;
            if (an->requires_grad) an->accumulate(g);
            if (bn->requires_grad) {
                Tensor<T>& bg = bn->ensure_grad();
                if (bscalar) {
                    T s = 0;
                    for (int64_t i = 0; i < g.numel(); ++i) s += g[i];
                    bg[0] -= s;
                } else {
                    for (int64_t i = 0; i < g.numel(); ++i) bg[i] -= g[i];
                }
            }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    check_broadcastable(a, b, "mul");
    const bool bscalar = b.value().numel() == 1;
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bscalar ? bd[0] : bd[i];
    auto node = make_node(std::move(out), any_grad<T>({&a, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([an = a.node(), bn = b.node(), on = node, bscalar]() {
            if (!on->has_grad()) return;
            const Tensor<T>& g = on->grad;
            const Tensor<T>& av = an->value;
            const Tensor<T>& bv = bn->value;
            if (an->requires_grad) {
                Tensor<T>& ag = an->ensure_grad();
                for (int64_t i = 0; i < g.numel(); ++i) ag[i] += g[i] * (bscalar ? bv[0] : bv[i]);
            }
            if (bn->requires_grad) {
                Tensor<T>& bg = bn->ensure_grad();
                if (bscalar) {
                    T s = 0;
                    for (int64_t i = 0; i < g.numel(); ++i) s += g[i] * av[i];
                    bg[0] += s;
                } else {
                    for (int64_t i = 0; i < g.numel(); ++i) bg[i] += g[i] * av[i];
                }
            }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> div(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    check_broadcastable(a, b, "div");
    const bool bscalar = b.value().numel() == 1;
    Tensor<T> out = a.value();
    const T* bd = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= bscalar ? bd[0] : bd[i];
    auto node = make_node(std::move(out), any_grad<T>({&a, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([an = a.node(), bn = b.node(), on = node, bscalar]() {
            if (!on->has_grad()) return;
            const Tensor<T>& g = on->grad;
            const Tensor<T>& av = an->value;
            const Tensor<T>& bv = bn->value;
            if (an->requires_grad) {
                Tensor<T>& ag = an->ensure_grad();
                for (int64_t i = 0; i < g.numel(); ++i) ag[i] += g[i] / (bscalar ? bv[0] : bv[i]);
            }
            if (bn->requires_grad) {
                Tensor<T>& bg = bn->ensure_grad();
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const T d = bscalar ? bv[0] : bv[i];
                    const T contrib = -g[i] * av[i] / (d * d);
                    bg[bscalar ? 0 : i] += contrib;
                }
            }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T c) {
    Tensor<T> out = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node, c]() {
            if (!on->has_grad()) return;
            Tensor<T>& xg = xn->ensure_grad();
            const Tensor<T>& g = on->grad;
            for (int64_t i = 0; i < g.numel(); ++i) xg[i] += c * g[i];
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> add_const(Tape<T>& tape, const Var<T>& x, T c) {
    Tensor<T> out = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node]() {
            if (on->has_grad()) xn->accumulate(on->grad);
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> sum_all(Tape<T>& tape, const Var<T>& x) {
    T s = 0;
    for (int64_t i = 0; i < x.value().numel(); ++i) s += x.value()[i];
    auto node = make_node(Tensor<T>::scalar(s), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node]() {
            if (!on->has_grad()) return;
            const T g = on->grad[0];
            Tensor<T>& xg = xn->ensure_grad();
            for (int64_t i = 0; i < xg.numel(); ++i) xg[i] += g;
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> mean_all(Tape<T>& tape, const Var<T>& x) {
    return scale(tape, sum_all(tape, x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape) {
    auto node = make_node(x.value().reshaped(shape), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node]() {
            if (on->has_grad()) xn->accumulate(on->grad.reshaped(xn->value.shape()));
        });
    }
    return Var<T>(node);
}

namespace {

// Copy src into dst laid out with axes permuted by `dims` (dst axis i = src
// axis dims[i]). Fast paths cover the two layout changes the model uses.
template <typename T>
void permute_copy(const Tensor<T>& src, Tensor<T>& dst, const std::vector<int>& dims) {
    const int nd = src.dim();
    if (nd == 4 && dims == std::vector<int>{0, 2, 3, 1}) {  // BCHW -> BHWC
        const int64_t B = src.size(0), C = src.size(1), HW = src.size(2) * src.size(3);
        const T* s = src.data();
        T* d = dst.data();
        parallel_for(B * C, [&](int64_t bc) {
            const int64_t b = bc / C, c = bc % C;
            const T* sp = s + (b * C + c) * HW;
            T* dp = d + b * HW * C + c;
            for (int64_t t = 0; t < HW; ++t) dp[t * C] = sp[t];
        });
        return;
    }
    if (nd == 4 && dims == std::vector<int>{0, 3, 1, 2}) {  // BHWC -> BCHW
        const int64_t B = src.size(0), HW = src.size(1) * src.size(2), C = src.size(3);
        const T* s = src.data();
        T* d = dst.data();
        parallel_for(B * C, [&](int64_t bc) {
            const int64_t b = bc / C, c = bc % C;
            const T* sp = s + b * HW * C + c;
            T* dp = d + (b * C + c) * HW;
            for (int64_t t = 0; t < HW; ++t) dp[t] = sp[t * C];
        });
        return;
    }
    // generic path
    std::vector<int64_t> sstride(nd, 1), dshape(nd);
    for (int i = nd - 2; i >= 0; --i) sstride[i] = sstride[i + 1] * src.size(i + 1);
    std::vector<int64_t> stride_for_dst(nd);
    for (int i = 0; i < nd; ++i) stride_for_dst[i] = sstride[dims[i]];
    const T* s = src.data();
    T* d = dst.data();
    const int64_t n = src.numel();
    std::vector<int64_t> dsizes(nd);
    for (int i = 0; i < nd; ++i) dsizes[i] = src.size(dims[i]);
    parallel_for(n, [&](int64_t di) {
        int64_t rem = di, soff = 0;
        for (int i = nd - 1; i >= 0; --i) {
            const int64_t k = rem % dsizes[i];
            rem /= dsizes[i];
            soff += k * stride_for_dst[i];
        }
        d[di] = s[soff];
    });
}

}  // namespace

template <typename T>
Var<T> permute_axes(Tape<T>& tape, const Var<T>& x, const std::vector<int>& dims) {
    const int nd = x.value().dim();
    if (static_cast<int>(dims.size()) != nd) throw ShapeError("permute_axes: rank mismatch");
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = x.value().size(dims[i]);
    Tensor<T> out(out_shape);
    permute_copy(x.value(), out, dims);
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        std::vector<int> inv(dims.size());
        for (int i = 0; i < nd; ++i) inv[static_cast<size_t>(dims[i])] = i;
        tape.record([xn = x.node(), on = node, inv]() {
            if (!on->has_grad()) return;
            Tensor<T> gx(xn->value.shape());
            permute_copy(on->grad, gx, inv);
            xn->accumulate(gx);
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&av = a.value(), &bv = b.value();
    if (av.dim() != 4 || bv.dim() != 4 || av.size(0) != bv.size(0) || av.size(2) != bv.size(2) ||
        av.size(3) != bv.size(3))
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(av.shape()) + " / " +
                         shape_str(bv.shape()));
    const int64_t B = av.size(0), Ca = av.size(1), Cb = bv.size(1), HW = av.size(2) * av.size(3);
    Tensor<T> out({B, Ca + Cb, av.size(2), av.size(3)});
    for (int64_t bi = 0; bi < B; ++bi) {
        std::memcpy(out.data() + bi * (Ca + Cb) * HW, av.data() + bi * Ca * HW,
                    sizeof(T) * static_cast<size_t>(Ca * HW));
        std::memcpy(out.data() + (bi * (Ca + Cb) + Ca) * HW, bv.data() + bi * Cb * HW,
                    sizeof(T) * static_cast<size_t>(Cb * HW));
    }
    auto node = make_node(std::move(out), any_grad<T>({&a, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([an = a.node(), bn = b.node(), on = node, B, Ca, Cb, HW]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            if (an->requires_grad) {
                T* ag = an->ensure_grad().data();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t i = 0; i < Ca * HW; ++i)
                        ag[bi * Ca * HW + i] += g[bi * (Ca + Cb) * HW + i];
            }
            if (bn->requires_grad) {
                T* bg = bn->ensure_grad().data();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t i = 0; i < Cb * HW; ++i)
                        bg[bi * Cb * HW + i] += g[(bi * (Ca + Cb) + Ca) * HW + i];
            }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, int64_t from, int64_t to) {
    const Tensor<T>& xv = x.value();
    if (xv.dim() != 4 || from < 0 || to > xv.size(1) || from >= to)
        throw ShapeError("slice_channels: bad range");
    const int64_t B = xv.size(0), C = xv.size(1), HW = xv.size(2) * xv.size(3), Cs = to - from;
    Tensor<T> out({B, Cs, xv.size(2), xv.size(3)});
    for (int64_t bi = 0; bi < B; ++bi)
        std::memcpy(out.data() + bi * Cs * HW, xv.data() + (bi * C + from) * HW,
                    sizeof(T) * static_cast<size_t>(Cs * HW));
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node, B, C, HW, Cs, from]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            T* xg = xn->ensure_grad().data();
            for (int64_t bi = 0; bi < B; ++bi)
                for (int64_t i = 0; i < Cs * HW; ++i)
                    xg[(bi * C + from) * HW + i] += g[bi * Cs * HW + i];
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> select_channel(Tape<T>& tape, const Var<T>& x, int64_t k) {
    Var<T> s = slice_channels(tape, x, k, k + 1);
    return reshape(tape, s, {x.value().size(0), x.value().size(2), x.value().size(3)});
}

template <typename T>
Var<T> expand_rows(Tape<T>& tape, const Var<T>& v, int64_t batch, int64_t len) {
    const int64_t D = v.value().numel();
    Tensor<T> out({batch, len, D});
    for (int64_t r = 0; r < batch * len; ++r)
        std::memcpy(out.data() + r * D, v.value().data(), sizeof(T) * static_cast<size_t>(D));
    auto node = make_node(std::move(out), v.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([vn = v.node(), on = node, batch, len, D]() {
            if (!on->has_grad()) return;
            T* vg = vn->ensure_grad().data();
            const T* g = on->grad.data();
            for (int64_t r = 0; r < batch * len; ++r)
                for (int64_t d = 0; d < D; ++d) vg[d] += g[r * D + d];
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> neg_exp(Tape<T>& tape, const Var<T>& x) {
    Tensor<T> out = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = -std::exp(out[i]);
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node]() {
            if (!on->has_grad()) return;
            Tensor<T>& xg = xn->ensure_grad();
            for (int64_t i = 0; i < xg.numel(); ++i) xg[i] += on->grad[i] * on->value[i];
        });
    }
    return Var<T>(node);
}

// ---- linear -----------------------------------------------------------------

template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Tensor<T>&xv = x.value(), &wv = w.value();
    if (wv.dim() != 2) throw ShapeError("linear: weight must be rank 2");
    const int64_t Cin = wv.size(0), Cout = wv.size(1);
    if (xv.size(-1) != Cin)
        throw ShapeError("linear: input inner dim " + std::to_string(xv.size(-1)) +
                         " != " + std::to_string(Cin));
    if (b.defined() && b.value().numel() != Cout) throw ShapeError("linear: bias size mismatch");
    const int64_t R = xv.numel() / Cin;
    Shape out_shape = xv.shape();
    out_shape.back() = Cout;
    Tensor<T> out(out_shape);
    gemm_nn(xv.data(), wv.data(), out.data(), R, Cin, Cout, false, true);
    if (b.defined()) {
        const T* bd = b.value().data();
        parallel_for(R, [&](int64_t r) {
            T* o = out.data() + r * Cout;
            for (int64_t c = 0; c < Cout; ++c) o[c] += bd[c];
        });
    }
    auto node = make_node(std::move(out), any_grad<T>({&x, &w, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), wn = w.node(), bn = b.node(), on = node, R, Cin, Cout]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            if (xn->requires_grad)
                gemm_nt(g, wn->value.data(), xn->ensure_grad().data(), R, Cout, Cin, true);
            if (wn->requires_grad)
                gemm_tn(xn->value.data(), g, wn->ensure_grad().data(), Cin, R, Cout, true);
            if (bn && bn->requires_grad) {
                T* bg = bn->ensure_grad().data();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < Cout; ++c) bg[c] += g[r * Cout + c];
            }
        });
    }
    return Var<T>(node);
}

// ---- conv2d -------------------------------------------------------------------

namespace {

struct ConvGeom {
    int64_t B, Ci, H, W, Co, kh, kw, OH, OW, Cig, Cog;
    int stride, pad, groups;
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, int groups) {
    if (x.dim() != 4 || w.dim() != 4) throw ShapeError("conv2d: x and w must be rank 4");
    ConvGeom geo;
    geo.B = x.size(0);
    geo.Ci = x.size(1);
    geo.H = x.size(2);
    geo.W = x.size(3);
    geo.Co = w.size(0);
    geo.kh = w.size(2);
    geo.kw = w.size(3);
    geo.stride = stride;
    geo.pad = pad;
    geo.groups = groups;
    if (groups < 1 || geo.Ci % groups != 0 || geo.Co % groups != 0)
        throw ShapeError("conv2d: channels not divisible by groups");
    geo.Cig = geo.Ci / groups;
    geo.Cog = geo.Co / groups;
    if (w.size(1) != geo.Cig) throw ShapeError("conv2d: weight channel dim mismatch");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    geo.OH = (geo.H + 2 * pad - geo.kh) / stride + 1;
    geo.OW = (geo.W + 2 * pad - geo.kw) / stride + 1;
    if (geo.kh > geo.H + 2 * pad || geo.kw > geo.W + 2 * pad || geo.OH < 1 || geo.OW < 1)
        throw ShapeError("conv2d: kernel larger than padded input");
    return geo;
}

// First output index whose input coordinate i = o*stride - pad + k is >= 0.
inline int64_t out_lo(int64_t k, int64_t pad, int64_t stride) {
    const int64_t num = pad - k;
    return num <= 0 ? 0 : (num + stride - 1) / stride;
}
// One past the last output index with i < extent.
inline int64_t out_hi(int64_t k, int64_t pad, int64_t stride, int64_t extent, int64_t out) {
    const int64_t num = extent - 1 + pad - k;
    if (num < 0) return 0;
    return std::min(out, num / stride + 1);
}

// cols[(ci*kh+u)*kw+v][oh*OW+ow] = plane x[ci][oh*s-p+u][ow*s-p+v], zero outside.
template <typename T>
void im2col(const T* __restrict x, const ConvGeom& g, T* __restrict cols, bool parallel) {
    const int64_t rows = g.Cig * g.kh * g.kw;
    auto fill_row = [&](int64_t row) {
        const int64_t ci = row / (g.kh * g.kw);
        const int64_t u = (row / g.kw) % g.kh;
        const int64_t v = row % g.kw;
        const T* plane = x + ci * g.H * g.W;
        T* dst = cols + row * g.OH * g.OW;
        const int64_t owlo = out_lo(v, g.pad, g.stride);
        const int64_t owhi = out_hi(v, g.pad, g.stride, g.W, g.OW);
        for (int64_t oh = 0; oh < g.OH; ++oh) {
            const int64_t ih = oh * g.stride - g.pad + u;
            T* __restrict d = dst + oh * g.OW;
            if (ih < 0 || ih >= g.H) {
                std::fill(d, d + g.OW, T(0));
                continue;
            }
            const T* __restrict src = plane + ih * g.W - g.pad + v;
            std::fill(d, d + owlo, T(0));
            if (g.stride == 1) {
                std::memcpy(d + owlo, src + owlo, sizeof(T) * static_cast<size_t>(owhi - owlo));
            } else {
                for (int64_t ow = owlo; ow < owhi; ++ow) d[ow] = src[ow * g.stride];
            }
            std::fill(d + owhi, d + g.OW, T(0));
        }
    };
    if (parallel)
        parallel_for(rows, fill_row);
    else
        for (int64_t r = 0; r < rows; ++r) fill_row(r);
}

// Scatter-form accumulation of dcols back into dx (adjoint of im2col); the
// (u,v) passes overlap in dx but run sequentially per channel.
template <typename T>
void col2im_accum(const T* __restrict cols, const ConvGeom& g, T* __restrict dx, bool parallel) {
    auto fill = [&](int64_t ci) {
        T* plane = dx + ci * g.H * g.W;
        for (int64_t u = 0; u < g.kh; ++u) {
            const int64_t ohlo = out_lo(u, g.pad, g.stride);
            const int64_t ohhi = out_hi(u, g.pad, g.stride, g.H, g.OH);
            for (int64_t v = 0; v < g.kw; ++v) {
                const int64_t owlo = out_lo(v, g.pad, g.stride);
                const int64_t owhi = out_hi(v, g.pad, g.stride, g.W, g.OW);
                const T* src = cols + ((ci * g.kh + u) * g.kw + v) * g.OH * g.OW;
                for (int64_t oh = ohlo; oh < ohhi; ++oh) {
                    const int64_t ih = oh * g.stride - g.pad + u;
                    T* __restrict drow = plane + ih * g.W - g.pad + v;
                    const T* __restrict srow = src + oh * g.OW;
                    if (g.stride == 1) {
                        for (int64_t ow = owlo; ow < owhi; ++ow) drow[ow] += srow[ow];
                    } else {
                        for (int64_t ow = owlo; ow < owhi; ++ow)
                            drow[ow * g.stride] += srow[ow];
                    }
                }
            }
        }
    };
    if (parallel)
        parallel_for(g.Cig, fill);
    else
        for (int64_t ci = 0; ci < g.Cig; ++ci) fill(ci);
}

}  // namespace

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int padding, int groups) {
    const ConvGeom g = conv_geometry(x.value(), w.value(), stride, padding, groups);
    if (b.defined() && b.value().numel() != g.Co) throw ShapeError("conv2d: bias size mismatch");
    Tensor<T> out({g.B, g.Co, g.OH, g.OW});
    const int64_t ckk = g.Cig * g.kh * g.kw;
    const int64_t tasks = g.B * g.groups;
    // Many independent (image, group) tasks: parallelize across them with a
    // serial GEMM inside. Few tasks: run them serially with a row-parallel GEMM.
    const bool task_parallel = tasks >= 2 * num_threads() || g.Cog < 4;
    auto run_task = [&](int64_t t) {
        const int64_t bi = t / g.groups, grp = t % g.groups;
        std::vector<T> cols(static_cast<size_t>(ckk * g.OH * g.OW));
        im2col(x.value().data() + (bi * g.Ci + grp * g.Cig) * g.H * g.W, g, cols.data(),
               !task_parallel);
        gemm_nn(w.value().data() + grp * g.Cog * ckk, cols.data(),
                out.data() + (bi * g.Co + grp * g.Cog) * g.OH * g.OW, g.Cog, ckk, g.OH * g.OW,
                false, !task_parallel);
    };
    if (task_parallel)
        parallel_for(tasks, run_task);
    else
        for (int64_t t = 0; t < tasks; ++t) run_task(t);
    if (b.defined()) {
        const T* bd = b.value().data();
        parallel_for(g.B * g.Co, [&](int64_t bc) {
            T* o = out.data() + bc * g.OH * g.OW;
            const T bv = bd[bc % g.Co];
            for (int64_t i = 0; i < g.OH * g.OW; ++i) o[i] += bv;
        });
    }
    auto node = make_node(std::move(out), any_grad<T>({&x, &w, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), wn = w.node(), bn = b.node(), on = node, g, ckk]() {
            if (!on->has_grad()) return;
            const T* gy = on->grad.data();
            const int64_t ohw = g.OH * g.OW;
            const bool want_w = wn->requires_grad;
            const bool want_x = xn->requires_grad;
            // One parallel region over (image, group) tasks. dx slices are
            // disjoint per task; dW accumulates into per-image partials that
            // are reduced sequentially, keeping results thread-count
            // independent.
            Tensor<T> wg_part;
            if (want_w) wg_part = Tensor<T>({g.B, g.Co * ckk});
            T* xg = want_x ? xn->ensure_grad().data() : nullptr;
            if (want_w || want_x) {
                parallel_for(g.B * g.groups, [&](int64_t task) {
                    const int64_t bi = task / g.groups, grp = task % g.groups;
                    std::vector<T> buf(static_cast<size_t>(ckk * ohw));
                    if (want_w) {
                        im2col(xn->value.data() + (bi * g.Ci + grp * g.Cig) * g.H * g.W, g,
                               buf.data(), false);
                        gemm_nt(gy + (bi * g.Co + grp * g.Cog) * ohw, buf.data(),
                                wg_part.data() + bi * g.Co * ckk + grp * g.Cog * ckk, g.Cog, ohw,
                                ckk, false, /*parallel=*/false);
                    }
                    if (want_x) {
                        gemm_tn(wn->value.data() + grp * g.Cog * ckk,
                                gy + (bi * g.Co + grp * g.Cog) * ohw, buf.data(), ckk, g.Cog,
                                ohw, false, /*parallel=*/false);
                        col2im_accum(buf.data(), g, xg + (bi * g.Ci + grp * g.Cig) * g.H * g.W,
                                     false);
                    }
                });
            }
            if (want_w) {
                T* wg = wn->ensure_grad().data();
                for (int64_t bi = 0; bi < g.B; ++bi) {
                    const T* part = wg_part.data() + bi * g.Co * ckk;
                    for (int64_t i = 0; i < g.Co * ckk; ++i) wg[i] += part[i];
                }
            }
            if (bn && bn->requires_grad) {
                T* bg = bn->ensure_grad().data();
                for (int64_t bi = 0; bi < g.B; ++bi)
                    for (int64_t co = 0; co < g.Co; ++co) {
                        T s = 0;
                        const T* gp = gy + (bi * g.Co + co) * ohw;
                        for (int64_t i = 0; i < ohw; ++i) s += gp[i];
                        bg[co] += s;
                    }
            }
        });
    }
    return Var<T>(node);
}

// ---- conv_transpose2d ----------------------------------------------------------

template <typename T>
Var<T> conv_transpose2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        int stride, int padding) {
    const Tensor<T>&xv = x.value(), &wv = w.value();
    if (xv.dim() != 4 || wv.dim() != 4) throw ShapeError("conv_transpose2d: rank 4 required");
    if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
    const int64_t B = xv.size(0), P = xv.size(1), H = xv.size(2), W = xv.size(3);
    if (wv.size(0) != P) throw ShapeError("conv_transpose2d: weight in-channel mismatch");
    const int64_t Q = wv.size(1), kh = wv.size(2), kw = wv.size(3);
    const int64_t OH = (H - 1) * stride - 2 * padding + kh;
    const int64_t OW = (W - 1) * stride - 2 * padding + kw;
    if (OH < 1 || OW < 1) throw ShapeError("conv_transpose2d: empty output");
    if (b.defined() && b.value().numel() != Q)
        throw ShapeError("conv_transpose2d: bias size mismatch");
    Tensor<T> out({B, Q, OH, OW});
    const T* xd = xv.data();
    const T* wd = wv.data();
    const T* bd = b.defined() ? b.value().data() : nullptr;
    // Scatter form: each input pixel spreads x*w onto the output; every
    // (b,q) output plane is owned by one task.
    parallel_for(B * Q, [&](int64_t bq) {
        const int64_t bi = bq / Q, q = bq % Q;
        T* o = out.data() + bq * OH * OW;
        std::fill(o, o + OH * OW, bd ? bd[q] : T(0));
        for (int64_t p = 0; p < P; ++p) {
            const T* xplane = xd + ((bi * P + p) * H) * W;
            const T* wrow = wd + (p * Q + q) * kh * kw;
            for (int64_t ih = 0; ih < H; ++ih) {
                const int64_t oh0 = ih * stride - padding;
                for (int64_t u = 0; u < kh; ++u) {
                    const int64_t oh = oh0 + u;
                    if (oh < 0 || oh >= OH) continue;
                    for (int64_t v = 0; v < kw; ++v) {
                        const T wv_ = wrow[u * kw + v];
                        T* __restrict orow = o + oh * OW - padding + v;
                        const T* __restrict xrow = xplane + ih * W;
                        const int64_t iwlo = out_lo(v, padding, stride);
                        const int64_t iwhi = out_hi(v, padding, stride, OW, W);
                        if (stride == 1) {
                            for (int64_t iw = iwlo; iw < iwhi; ++iw) orow[iw] += xrow[iw] * wv_;
                        } else {
                            for (int64_t iw = iwlo; iw < iwhi; ++iw)
                                orow[iw * stride] += xrow[iw] * wv_;
                        }
                    }
                }
            }
        }
    });
    auto node = make_node(std::move(out), any_grad<T>({&x, &w, &b}));
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), wn = w.node(), bn = b.node(), on = node, B, P, Q, H, W, kh,
                     kw, OH, OW, stride, padding]() {
            if (!on->has_grad()) return;
            const T* gy = on->grad.data();
            if (bn && bn->requires_grad) {
                T* bg = bn->ensure_grad().data();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t q = 0; q < Q; ++q) {
                        T s = 0;
                        const T* gp = gy + (bi * Q + q) * OH * OW;
                        for (int64_t i = 0; i < OH * OW; ++i) s += gp[i];
                        bg[q] += s;
                    }
            }
            if (xn->requires_grad) {
                // dx = cross-correlation of gy with w
                T* xg = xn->ensure_grad().data();
                const T* wd = wn->value.data();
                parallel_for(B * P, [&](int64_t bp) {
                    const int64_t bi = bp / P, p = bp % P;
                    T* dst = xg + bp * H * W;
                    for (int64_t ih = 0; ih < H; ++ih)
                        for (int64_t iw = 0; iw < W; ++iw) {
                            T acc = 0;
                            for (int64_t u = 0; u < kh; ++u) {
                                const int64_t oh = ih * stride - padding + u;
                                if (oh < 0 || oh >= OH) continue;
                                for (int64_t v = 0; v < kw; ++v) {
                                    const int64_t ow = iw * stride - padding + v;
                                    if (ow < 0 || ow >= OW) continue;
                                    for (int64_t q = 0; q < Q; ++q)
                                        acc += gy[((bi * Q + q) * OH + oh) * OW + ow] *
                                               wd[((p * Q + q) * kh + u) * kw + v];
                                }
                            }
                            dst[ih * W + iw] += acc;
                        }
                });
            }
            if (wn->requires_grad) {
                T* wg = wn->ensure_grad().data();
                const T* xd = xn->value.data();
                parallel_for(P * Q, [&](int64_t pq) {
                    const int64_t p = pq / Q, q = pq % Q;
                    for (int64_t u = 0; u < kh; ++u)
                        for (int64_t v = 0; v < kw; ++v) {
                            T acc = 0;
                            for (int64_t bi = 0; bi < B; ++bi)
                                for (int64_t ih = 0; ih < H; ++ih) {
                                    const int64_t oh = ih * stride - padding + u;
                                    if (oh < 0 || oh >= OH) continue;
                                    for (int64_t iw = 0; iw < W; ++iw) {
                                        const int64_t ow = iw * stride - padding + v;
                                        if (ow < 0 || ow >= OW) continue;
                                        acc += xd[((bi * P + p) * H + ih) * W + iw] *
                                               gy[((bi * Q + q) * OH + oh) * OW + ow];
                                    }
                                }
                            wg[(pq * kh + u) * kw + v] += acc;
                        }
                });
            }
        });
    }
    return Var<T>(node);
}

// ---- layer_norm -----------------------------------------------------------------

template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps) {
    const Tensor<T>& xv = x.value();
    const int64_t C = xv.size(-1);
    if (C == 0 || xv.dim() == 0) throw ShapeError("layer_norm: empty channel axis");
    if (gamma.value().numel() != C || beta.value().numel() != C)
        throw ShapeError("layer_norm: gamma/beta size mismatch");
    if (eps <= 0) throw ShapeError("layer_norm: eps must be positive");
    const int64_t R = xv.numel() / C;
    Tensor<T> out(xv.shape());
    Tensor<T> mean({R}), invstd({R});
    const T* gd = gamma.value().data();
    const T* bd = beta.value().data();
    parallel_for(R, [&](int64_t r) {
        const T* xr = xv.data() + r * C;
        T m = 0;
        for (int64_t c = 0; c < C; ++c) m += xr[c];
        m /= static_cast<T>(C);
        T v = 0;
        for (int64_t c = 0; c < C; ++c) {
            const T d = xr[c] - m;
            v += d * d;
        }
        v /= static_cast<T>(C);
        const T is = T(1) / std::sqrt(v + eps);
        mean[r] = m;
        invstd[r] = is;
        T* o = out.data() + r * C;
        for (int64_t c = 0; c < C; ++c) o[c] = (xr[c] - m) * is * gd[c] + bd[c];
    });
    auto node = make_node(std::move(out), any_grad<T>({&x, &gamma, &beta}));
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = node,
                     mean = std::move(mean), invstd = std::move(invstd), R, C]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            const T* xd = xn->value.data();
            const T* gd = gn->value.data();
            if (gn->requires_grad || bn->requires_grad) {
                T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
                T* bg = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                for (int64_t r = 0; r < R; ++r) {
                    const T* xr = xd + r * C;
                    const T* gr = g + r * C;
                    for (int64_t c = 0; c < C; ++c) {
                        const T xh = (xr[c] - mean[r]) * invstd[r];
                        if (gg) gg[c] += gr[c] * xh;
                        if (bg) bg[c] += gr[c];
                    }
                }
            }
            if (xn->requires_grad) {
                T* xg = xn->ensure_grad().data();
                parallel_for(R, [&](int64_t r) {
                    const T* xr = xd + r * C;
                    const T* gr = g + r * C;
                    T sum_h = 0, sum_hx = 0;
                    for (int64_t c = 0; c < C; ++c) {
                        const T h = gr[c] * gd[c];
                        const T xh = (xr[c] - mean[r]) * invstd[r];
                        sum_h += h;
                        sum_hx += h * xh;
                    }
                    sum_h /= static_cast<T>(C);
                    sum_hx /= static_cast<T>(C);
                    T* xgr = xg + r * C;
                    for (int64_t c = 0; c < C; ++c) {
                        const T h = gr[c] * gd[c];
                        const T xh = (xr[c] - mean[r]) * invstd[r];
                        xgr[c] += (h - sum_h - xh * sum_hx) * invstd[r];
                    }
                });
            }
        });
    }
    return Var<T>(node);
}

// ---- activations ------------------------------------------------------------------

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
    // Overflow-safe: for large x the result is x itself plus a vanishing term.
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

template <typename T>
void act_forward(Act kind, const T* x, T* y, int64_t n) {
    switch (kind) {
        case Act::silu:
            for (int64_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid_scalar(x[i]);
            break;
        case Act::gelu:
            for (int64_t i = 0; i < n; ++i)
                y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * static_cast<T>(kInvSqrt2)));
            break;
        case Act::softplus:
            for (int64_t i = 0; i < n; ++i) y[i] = softplus_scalar(x[i]);
            break;
    }
}

template <typename T>
T act_deriv(Act kind, T x) {
    switch (kind) {
        case Act::silu: {
            const T s = sigmoid_scalar(x);
            return s * (T(1) + x * (T(1) - s));
        }
        case Act::gelu: {
            const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
            const T pdf = static_cast<T>(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
            return cdf + x * pdf;
        }
        case Act::softplus:
            return sigmoid_scalar(x);
    }
    return T(0);
}
}  // namespace

template <typename T>
Var<T> activation(Tape<T>& tape, const Var<T>& x, Act kind) {
    Tensor<T> out(x.value().shape());
    const int64_t n = out.numel();
    const int64_t chunk = 4096;
    const int64_t nchunks = (n + chunk - 1) / chunk;
    parallel_for(nchunks, [&](int64_t c) {
        const int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
        act_forward(kind, x.value().data() + lo, out.data() + lo, hi - lo);
    });
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node, kind, n, chunk, nchunks]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            const T* xd = xn->value.data();
            T* xg = xn->ensure_grad().data();
            parallel_for(nchunks, [&](int64_t c) {
                const int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
                for (int64_t i = lo; i < hi; ++i) xg[i] += g[i] * act_deriv(kind, xd[i]);
            });
        });
    }
    return Var<T>(node);
}

// ---- bilinear sampling ----------------------------------------------------------

template <typename T>
Var<T> bilinear_sample(Tape<T>& tape, const Var<T>& map, const Var<T>& points) {
    const Tensor<T>&mv = map.value(), &pv = points.value();
    if (mv.dim() != 3) throw ShapeError("bilinear_sample: map must be [C,H,W]");
    if (pv.dim() != 2 || pv.size(1) != 2) throw ShapeError("bilinear_sample: points must be [P,2]");
    const int64_t C = mv.size(0), H = mv.size(1), W = mv.size(2), P = pv.size(0);
    Tensor<T> out({C, P});
    const T* md = mv.data();
    auto corner = [&](int64_t c, int64_t r, int64_t col) -> T {
        if (r < 0 || r >= H || col < 0 || col >= W) return T(0);
        return md[(c * H + r) * W + col];
    };
    for (int64_t p = 0; p < P; ++p) {
        const T r = pv[p * 2], col = pv[p * 2 + 1];
        const int64_t r0 = static_cast<int64_t>(std::floor(static_cast<double>(r)));
        const int64_t c0 = static_cast<int64_t>(std::floor(static_cast<double>(col)));
        const T fr = r - static_cast<T>(r0), fc = col - static_cast<T>(c0);
        for (int64_t c = 0; c < C; ++c) {
            const T v00 = corner(c, r0, c0), v01 = corner(c, r0, c0 + 1);
            const T v10 = corner(c, r0 + 1, c0), v11 = corner(c, r0 + 1, c0 + 1);
            out[c * P + p] = (T(1) - fr) * ((T(1) - fc) * v00 + fc * v01) +
                             fr * ((T(1) - fc) * v10 + fc * v11);
        }
    }
    auto node = make_node(std::move(out), any_grad<T>({&map, &points}));
    if (tape.recording() && node->requires_grad) {
        tape.record([mn = map.node(), pn = points.node(), on = node, C, H, W, P]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            const T* md = mn->value.data();
            const T* pd = pn->value.data();
            T* mg = mn->requires_grad ? mn->ensure_grad().data() : nullptr;
            T* pg = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
            for (int64_t p = 0; p < P; ++p) {
                const T r = pd[p * 2], col = pd[p * 2 + 1];
                const int64_t r0 = static_cast<int64_t>(std::floor(static_cast<double>(r)));
                const int64_t c0 = static_cast<int64_t>(std::floor(static_cast<double>(col)));
                const T fr = r - static_cast<T>(r0), fc = col - static_cast<T>(c0);
                T dr = 0, dc = 0;
                for (int64_t c = 0; c < C; ++c) {
                    const T gv = g[c * P + p];
                    T vals[4] = {T(0), T(0), T(0), T(0)};
                    const int64_t rr[4] = {r0, r0, r0 + 1, r0 + 1};
                    const int64_t cc[4] = {c0, c0 + 1, c0, c0 + 1};
                    const T ws[4] = {(T(1) - fr) * (T(1) - fc), (T(1) - fr) * fc,
                                     fr * (T(1) - fc), fr * fc};
                    for (int k = 0; k < 4; ++k) {
                        const bool in = rr[k] >= 0 && rr[k] < H && cc[k] >= 0 && cc[k] < W;
                        if (!in) continue;
                        const int64_t idx = (c * H + rr[k]) * W + cc[k];
                        vals[k] = md[idx];
                        if (mg) mg[idx] += gv * ws[k];
                    }
                    dr += gv * ((T(1) - fc) * (vals[2] - vals[0]) + fc * (vals[3] - vals[1]));
                    dc += gv * ((T(1) - fr) * (vals[1] - vals[0]) + fr * (vals[3] - vals[2]));
                }
                if (pg) {
                    pg[p * 2] += dr;
                    pg[p * 2 + 1] += dc;
                }
            }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> bilinear_resize(Tape<T>& tape, const Var<T>& x, int64_t out_h, int64_t out_w) {
    const Tensor<T>& xv = x.value();
    if (xv.dim() != 4) throw ShapeError("bilinear_resize: input must be [B,C,H,W]");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
    const int64_t B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    // Half-pixel-center source coordinates; corner indices clamped to the image.
    struct Axis {
        std::vector<int64_t> lo, hi;
        std::vector<T> w;  // weight of hi
    };
    auto make_axis = [](int64_t in, int64_t out) {
        Axis a;
        a.lo.resize(static_cast<size_t>(out));
        a.hi.resize(static_cast<size_t>(out));
        a.w.resize(static_cast<size_t>(out));
        for (int64_t o = 0; o < out; ++o) {
            const double src =
                (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) -
                0.5;
            double f = std::floor(src);
            int64_t i0 = static_cast<int64_t>(f);
            T frac = static_cast<T>(src - f);
            int64_t lo = std::clamp<int64_t>(i0, 0, in - 1);
            int64_t hi = std::clamp<int64_t>(i0 + 1, 0, in - 1);
            a.lo[static_cast<size_t>(o)] = lo;
            a.hi[static_cast<size_t>(o)] = hi;
            a.w[static_cast<size_t>(o)] = frac;
        }
        return a;
    };
    const Axis ra = make_axis(H, out_h), ca = make_axis(W, out_w);
    Tensor<T> out({B, C, out_h, out_w});
    const T* xd = xv.data();
    parallel_for(B * C, [&](int64_t bc) {
        const T* plane = xd + bc * H * W;
        T* o = out.data() + bc * out_h * out_w;
        for (int64_t oh = 0; oh < out_h; ++oh) {
            const int64_t rlo = ra.lo[static_cast<size_t>(oh)], rhi = ra.hi[static_cast<size_t>(oh)];
            const T fr = ra.w[static_cast<size_t>(oh)];
            for (int64_t ow = 0; ow < out_w; ++ow) {
                const int64_t clo = ca.lo[static_cast<size_t>(ow)],
                              chi = ca.hi[static_cast<size_t>(ow)];
                const T fc = ca.w[static_cast<size_t>(ow)];
                const T v00 = plane[rlo * W + clo], v01 = plane[rlo * W + chi];
                const T v10 = plane[rhi * W + clo], v11 = plane[rhi * W + chi];
                o[oh * out_w + ow] = (T(1) - fr) * ((T(1) - fc) * v00 + fc * v01) +
                                     fr * ((T(1) - fc) * v10 + fc * v11);
            }
        }
    });
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node, ra, ca, B, C, H, W, out_h, out_w]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            T* xg = xn->ensure_grad().data();
            parallel_for(B * C, [&](int64_t bc) {
                T* plane = xg + bc * H * W;
                const T* gp = g + bc * out_h * out_w;
                for (int64_t oh = 0; oh < out_h; ++oh) {
                    const int64_t rlo = ra.lo[static_cast<size_t>(oh)],
                                  rhi = ra.hi[static_cast<size_t>(oh)];
                    const T fr = ra.w[static_cast<size_t>(oh)];
                    for (int64_t ow = 0; ow < out_w; ++ow) {
                        const int64_t clo = ca.lo[static_cast<size_t>(ow)],
                                      chi = ca.hi[static_cast<size_t>(ow)];
                        const T fc = ca.w[static_cast<size_t>(ow)];
                        const T gv = gp[oh * out_w + ow];
                        plane[rlo * W + clo] += gv * (T(1) - fr) * (T(1) - fc);
                        plane[rlo * W + chi] += gv * (T(1) - fr) * fc;
                        plane[rhi * W + clo] += gv * fr * (T(1) - fc);
                        plane[rhi * W + chi] += gv * fr * fc;
                    }
                }
            });
        });
    }
    return Var<T>(node);
}

// ---- classification heads --------------------------------------------------------

template <typename T>
Var<T> softmax_channel(Tape<T>& tape, const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.dim() != 4) throw ShapeError("softmax_channel: input must be [B,K,H,W]");
    const int64_t B = xv.size(0), K = xv.size(1), HW = xv.size(2) * xv.size(3);
    Tensor<T> out(xv.shape());
    const T* xd = xv.data();
    parallel_for(B, [&](int64_t b) {
        for (int64_t t = 0; t < HW; ++t) {
            T m = xd[(b * K) * HW + t];
            for (int64_t k = 1; k < K; ++k) m = std::max(m, xd[(b * K + k) * HW + t]);
            T z = 0;
            for (int64_t k = 0; k < K; ++k) {
                const T e = std::exp(xd[(b * K + k) * HW + t] - m);
                out[(b * K + k) * HW + t] = e;
                z += e;
            }
            for (int64_t k = 0; k < K; ++k) out[(b * K + k) * HW + t] /= z;
        }
    });
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node, B, K, HW]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            const T* p = on->value.data();
            T* xg = xn->ensure_grad().data();
            parallel_for(B, [&](int64_t b) {
                for (int64_t t = 0; t < HW; ++t) {
                    T dot = 0;
                    for (int64_t k = 0; k < K; ++k)
                        dot += g[(b * K + k) * HW + t] * p[(b * K + k) * HW + t];
                    for (int64_t k = 0; k < K; ++k) {
                        const int64_t i = (b * K + k) * HW + t;
                        xg[i] += p[i] * (g[i] - dot);
                    }
                }
            });
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> cross_entropy_loss(Tape<T>& tape, const Var<T>& logits, const Tensor<T>& mask) {
    const Tensor<T>& lv = logits.value();
    if (lv.dim() != 4 || lv.size(1) != 2)
        throw ShapeError("cross_entropy_loss: logits must be [B,2,H,W]");
    const int64_t B = lv.size(0), HW = lv.size(2) * lv.size(3);
    if (mask.numel() != B * HW) throw ShapeError("cross_entropy_loss: mask size mismatch");
    const T* ld = lv.data();
    const T* md = mask.data();
    double total = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < HW; ++t) {
            const T l0 = ld[(b * 2) * HW + t], l1 = ld[(b * 2 + 1) * HW + t];
            const T m = std::max(l0, l1);
            const T lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
            const T ltrue = md[b * HW + t] > T(0.5) ? l1 : l0;
            total += static_cast<double>(lse - ltrue);
        }
    const T loss = static_cast<T>(total / static_cast<double>(B * HW));
    auto node = make_node(Tensor<T>::scalar(loss), logits.requires_grad());
    if (tape.recording() && node->requires_grad) {
        Tensor<T> mcopy = mask;
        tape.record([ln = logits.node(), on = node, mcopy = std::move(mcopy), B, HW]() {
            if (!on->has_grad()) return;
            const T gl = on->grad[0] / static_cast<T>(B * HW);
            const T* ld = ln->value.data();
            const T* md = mcopy.data();
            T* lg = ln->ensure_grad().data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < HW; ++t) {
                    const int64_t i0 = (b * 2) * HW + t, i1 = (b * 2 + 1) * HW + t;
                    const T l0 = ld[i0], l1 = ld[i1];
                    const T m = std::max(l0, l1);
                    const T e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
                    const T p1 = e1 / (e0 + e1);
                    const bool fg = md[b * HW + t] > T(0.5);
                    lg[i0] += gl * ((T(1) - p1) - (fg ? T(0) : T(1)));
                    lg[i1] += gl * (p1 - (fg ? T(1) : T(0)));
                }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& probs, const Tensor<T>& mask) {
    const Tensor<T>& pv = probs.value();
    if (pv.dim() != 3) throw ShapeError("dice_loss: probs must be [B,H,W]");
    const int64_t B = pv.size(0), HW = pv.size(1) * pv.size(2);
    if (mask.numel() != pv.numel()) throw ShapeError("dice_loss: mask size mismatch");
    const T eps = T(1);
    std::vector<T> inter(static_cast<size_t>(B)), sums(static_cast<size_t>(B));
    double total = 0;
    for (int64_t b = 0; b < B; ++b) {
        double i = 0, sp = 0, sg = 0;
        const T* p = pv.data() + b * HW;
        const T* g = mask.data() + b * HW;
        for (int64_t t = 0; t < HW; ++t) {
            i += static_cast<double>(p[t]) * static_cast<double>(g[t]);
            sp += static_cast<double>(p[t]);
            sg += static_cast<double>(g[t]);
        }
        inter[static_cast<size_t>(b)] = static_cast<T>(i);
        sums[static_cast<size_t>(b)] = static_cast<T>(sp + sg);
        total += 1.0 - (2.0 * i + static_cast<double>(eps)) /
                           (sp + sg + static_cast<double>(eps));
    }
    const T loss = static_cast<T>(total / static_cast<double>(B));
    auto node = make_node(Tensor<T>::scalar(loss), probs.requires_grad());
    if (tape.recording() && node->requires_grad) {
        Tensor<T> mcopy = mask;
        tape.record([pn = probs.node(), on = node, mcopy = std::move(mcopy),
                     inter = std::move(inter), sums = std::move(sums), B, HW, eps]() {
            if (!on->has_grad()) return;
            const T gl = on->grad[0] / static_cast<T>(B);
            T* pg = pn->ensure_grad().data();
            const T* md = mcopy.data();
            for (int64_t b = 0; b < B; ++b) {
                const T denom = sums[static_cast<size_t>(b)] + eps;
                const T num = T(2) * inter[static_cast<size_t>(b)] + eps;
                for (int64_t t = 0; t < HW; ++t) {
                    const T gv = md[b * HW + t];
                    pg[b * HW + t] += gl * (num / (denom * denom) - T(2) * gv / denom);
                }
            }
        });
    }
    return Var<T>(node);
}

// ---- explicit instantiations -------------------------------------------------------

#define UVMB_INSTANTIATE_OPS(T)                                                                  \
    template Var<T> add(Tape<T>&, const Var<T>&, const Var<T>&);                                 \
    template Var<T> sub(Tape<T>&, const Var<T>&, const Var<T>&);                                 \
    template Var<T> mul(Tape<T>&, const Var<T>&, const Var<T>&);                                 \
    template Var<T> div(Tape<T>&, const Var<T>&, const Var<T>&);                                 \
    template Var<T> scale(Tape<T>&, const Var<T>&, T);                                           \
    template Var<T> add_const(Tape<T>&, const Var<T>&, T);                                       \
    template Var<T> sum_all(Tape<T>&, const Var<T>&);                                            \
    template Var<T> mean_all(Tape<T>&, const Var<T>&);                                           \
    template Var<T> reshape(Tape<T>&, const Var<T>&, Shape);                                     \
    template Var<T> permute_axes(Tape<T>&, const Var<T>&, const std::vector<int>&);              \
    template Var<T> concat_channels(Tape<T>&, const Var<T>&, const Var<T>&);                     \
    template Var<T> slice_channels(Tape<T>&, const Var<T>&, int64_t, int64_t);                   \
    template Var<T> select_channel(Tape<T>&, const Var<T>&, int64_t);                            \
    template Var<T> expand_rows(Tape<T>&, const Var<T>&, int64_t, int64_t);                      \
    template Var<T> neg_exp(Tape<T>&, const Var<T>&);                                            \
    template Var<T> linear(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);               \
    template Var<T> conv2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, int, int,     \
                           int);                                                                 \
    template Var<T> conv_transpose2d(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,     \
                                     int, int);                                                  \
    template Var<T> layer_norm(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, T);        \
    template Var<T> activation(Tape<T>&, const Var<T>&, Act);                                    \
    template Var<T> bilinear_sample(Tape<T>&, const Var<T>&, const Var<T>&);                     \
    template Var<T> bilinear_resize(Tape<T>&, const Var<T>&, int64_t, int64_t);                  \
    template Var<T> softmax_channel(Tape<T>&, const Var<T>&);                                    \
    template Var<T> cross_entropy_loss(Tape<T>&, const Var<T>&, const Tensor<T>&);               \
    template Var<T> dice_loss(Tape<T>&, const Var<T>&, const Tensor<T>&);                        \
    template T softplus_scalar(T);                                                               \
    template T sigmoid_scalar(T);

UVMB_INSTANTIATE_OPS(float)
UVMB_INSTANTIATE_OPS(double)

}  // namespace uvmb::ops
