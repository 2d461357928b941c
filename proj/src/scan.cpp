#include "uvmb/scan.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "uvmb/errors.hpp"
#include "uvmb/parallel.hpp"
#include "uvmb/ssm.hpp"

namespace uvmb::scan {

const char* direction_name(Direction d) {
    switch (d) {
        case Direction::horizontal: return "horizontal";
        case Direction::vertical: return "vertical";
        case Direction::diagonal: return "diagonal";
        case Direction::antidiagonal: return "antidiagonal";
    }
    return "?";
}

ScanOrder scan_order(Direction dir, bool backward, int H, int W) {
    if (H < 1 || W < 1) throw ShapeError("scan_order: H, W must be >= 1");
    ScanOrder o;
    o.direction = dir;
    o.backward = backward;
    o.H = H;
    o.W = W;
    const int64_t L = static_cast<int64_t>(H) * W;
    o.perm.resize(static_cast<size_t>(L));
    switch (dir) {
        case Direction::horizontal:
            std::iota(o.perm.begin(), o.perm.end(), 0);
            break;
        case Direction::vertical: {
            int64_t k = 0;
            for (int c = 0; c < W; ++c)
                for (int r = 0; r < H; ++r) o.perm[static_cast<size_t>(k++)] = int64_t(r) * W + c;
            break;
        }
        case Direction::antidiagonal: {
            int64_t k = 0;
            for (int s = 0; s <= H + W - 2; ++s)
                for (int r = std::max(0, s - W + 1); r <= std::min(H - 1, s); ++r)
                    o.perm[static_cast<size_t>(k++)] = int64_t(r) * W + (s - r);
            break;
        }
        case Direction::diagonal: {
            // key = r - c + W - 1 ascending, ties by ascending r
            int64_t k = 0;
            for (int key = 0; key <= H + W - 2; ++key)
                for (int r = std::max(0, key - W + 1); r <= std::min(H - 1, key); ++r) {
                    const int c = r - key + W - 1;
                    o.perm[static_cast<size_t>(k++)] = int64_t(r) * W + c;
                }
            break;
        }
    }
    if (backward) std::reverse(o.perm.begin(), o.perm.end());
    return o;
}

std::vector<ScanOrder> all_scan_orders(int H, int W) {
    std::vector<ScanOrder> v;
    v.reserve(8);
    for (Direction d : {Direction::horizontal, Direction::vertical, Direction::diagonal,
                        Direction::antidiagonal}) {
        v.push_back(scan_order(d, false, H, W));
        v.push_back(scan_order(d, true, H, W));
    }
    return v;
}

namespace {

template <typename T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

}  // namespace

template <typename T>
Var<T> permute_tokens(Tape<T>& tape, const Var<T>& x, const ScanOrder& order, bool inverse) {
    const Tensor<T>& xv = x.value();
    const bool batched = xv.dim() == 3;
    if (!batched && xv.dim() != 2) throw ShapeError("permute_tokens: x must be [L,D] or [B,L,D]");
    const int64_t B = batched ? xv.size(0) : 1;
    const int64_t L = xv.size(batched ? 1 : 0);
    const int64_t D = xv.size(batched ? 2 : 1);
    if (L != static_cast<int64_t>(order.perm.size()))
        throw ShapeError("permute_tokens: token count " + std::to_string(L) +
                         " != order length " + std::to_string(order.perm.size()));
    Tensor<T> out(xv.shape());
    const auto& perm = order.perm;
    for (int64_t b = 0; b < B; ++b) {
        const T* src = xv.data() + b * L * D;
        T* dst = out.data() + b * L * D;
        for (int64_t k = 0; k < L; ++k) {
            const int64_t from = inverse ? k : perm[static_cast<size_t>(k)];
            const int64_t to = inverse ? perm[static_cast<size_t>(k)] : k;
            std::memcpy(dst + to * D, src + from * D, sizeof(T) * static_cast<size_t>(D));
        }
    }
    auto node = make_node(std::move(out), x.requires_grad());
    if (tape.recording() && node->requires_grad) {
        tape.record([xn = x.node(), on = node, perm, inverse, B, L, D]() {
            if (!on->has_grad()) return;
            const T* g = on->grad.data();
            T* xg = xn->ensure_grad().data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t k = 0; k < L; ++k) {
                    const int64_t from = inverse ? k : perm[static_cast<size_t>(k)];
                    const int64_t to = inverse ? perm[static_cast<size_t>(k)] : k;
                    const T* gs = g + (b * L + to) * D;
                    T* gd = xg + (b * L + from) * D;
                    for (int64_t d = 0; d < D; ++d) gd[d] += gs[d];
                }
        });
    }
    return Var<T>(node);
}

template <typename T>
Var<T> multi_scan_aggregate(Tape<T>& tape, const Var<T>& A, const Var<T>& delta,
                            const Var<T>& Bm, const Var<T>& Cm, const Var<T>& x, int H, int W,
                            uint8_t dir_mask, bool mean) {
    const Tensor<T>&Av = A.value(), &dv = delta.value(), &Bv = Bm.value(), &Cv = Cm.value(),
          &xv = x.value();
    if (Av.dim() != 2 || dv.dim() != 3 || Bv.dim() != 3 || Cv.dim() != 3 || xv.dim() != 3)
        throw ShapeError("multi_scan_aggregate: expected A[D,N] and batched token tensors");
    const int64_t D = Av.size(0), N = Av.size(1);
    const int64_t B = xv.size(0), L = xv.size(1);
    if (L != static_cast<int64_t>(H) * W)
        throw ShapeError("multi_scan_aggregate: token count does not match grid");
    if (xv.size(2) != D || dv.size(0) != B || dv.size(1) != L || dv.size(2) != D ||
        Bv.size(0) != B || Bv.size(1) != L || Bv.size(2) != N || Cv.size(0) != B ||
        Cv.size(1) != L || Cv.size(2) != N)
        throw ShapeError("multi_scan_aggregate: inconsistent shapes");
    if (dir_mask == 0) throw ShapeError("multi_scan_aggregate: empty direction set");
    for (int64_t i = 0; i < dv.numel(); ++i)
        if (!(dv[i] > T(0)))
            throw NumericError("multi_scan_aggregate: delta must be positive");

    std::vector<ScanOrder> orders;
    {
        auto all = all_scan_orders(H, W);
        for (int i = 0; i < 8; ++i)
            if (dir_mask & (1u << i)) orders.push_back(std::move(all[static_cast<size_t>(i)]));
    }
    const int ndirs = static_cast<int>(orders.size());
    const T outer = mean ? T(1) / static_cast<T>(ndirs) : T(1);

    // Discretize once; each direction only changes the visiting order.
    Tensor<T> Abar({B, L, D, N}), Bbar({B, L, D, N});
    parallel_for(B * L, [&](int64_t bl) {
        const T* dt_row = dv.data() + bl * D;
        const T* b_row = Bv.data() + bl * N;
        T* a_out = Abar.data() + bl * D * N;
        T* b_out = Bbar.data() + bl * D * N;
        for (int64_t d = 0; d < D; ++d) {
            const T dt = dt_row[d];
            for (int64_t n = 0; n < N; ++n) {
                const T z = dt * Av[d * N + n];
                a_out[d * N + n] = std::exp(z);
                b_out[d * N + n] = ssm::phi(z) * dt * b_row[n];
            }
        }
    });

    Tensor<T> y({B, L, D});
    // Saved hidden states per (direction, batch item) for the reverse pass.
    Tensor<T> hall({static_cast<int64_t>(ndirs), B, L, D, N});
    parallel_for(B, [&](int64_t b) {
        std::vector<T> h(static_cast<size_t>(D * N));
        T* yb = y.data() + b * L * D;
        for (int di = 0; di < ndirs; ++di) {
            const auto& perm = orders[static_cast<size_t>(di)].perm;
            std::fill(h.begin(), h.end(), T(0));
            T* hsave = hall.data() + (static_cast<int64_t>(di) * B + b) * L * D * N;
            for (int64_t k = 0; k < L; ++k) {
                const int64_t t = perm[static_cast<size_t>(k)];
                const T* Al = Abar.data() + (b * L + t) * D * N;
                const T* Bl = Bbar.data() + (b * L + t) * D * N;
                const T* Cl = Cv.data() + (b * L + t) * N;
                const T* xl = xv.data() + (b * L + t) * D;
                T* hk = hsave + k * D * N;
                for (int64_t d = 0; d < D; ++d) {
                    T* hd = h.data() + d * N;
                    const T xval = xl[d];
                    T acc = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        hd[n] = Al[d * N + n] * hd[n] + Bl[d * N + n] * xval;
                        acc += Cl[n] * hd[n];
                    }
                    yb[t * D + d] += outer * acc;
                    std::memcpy(hk + d * N, hd, sizeof(T) * static_cast<size_t>(N));
                }
            }
        }
    });

    const bool req = A.requires_grad() || delta.requires_grad() || Bm.requires_grad() ||
                     Cm.requires_grad() || x.requires_grad();
    auto node = make_node(std::move(y), req);
    if (tape.recording() && req) {
        tape.record([An = A.node(), dn = delta.node(), Bn = Bm.node(), Cn = Cm.node(),
                     xn = x.node(), on = node, orders = std::move(orders),
                     Abar = std::move(Abar), Bbar = std::move(Bbar), hall = std::move(hall), B, L,
                     D, N, outer]() {
            if (!on->has_grad()) return;
            const int ndirs = static_cast<int>(orders.size());
            const Tensor<T>& gy = on->grad;
            const Tensor<T>&Av = An->value, &dv = dn->value, &Bv = Bn->value, &Cv = Cn->value,
                  &xv = xn->value;
            Tensor<T> gAbar({B, L, D, N}), gBbar({B, L, D, N});
            T* dg = dn->requires_grad ? dn->ensure_grad().data() : nullptr;
            T* Bg = Bn->requires_grad ? Bn->ensure_grad().data() : nullptr;
            T* Cg = Cn->requires_grad ? Cn->ensure_grad().data() : nullptr;
            T* xg = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
            // Per-batch partials of gA, reduced sequentially afterwards.
            Tensor<T> gA_part({B, D, N});
            parallel_for(B, [&](int64_t b) {
                std::vector<T> gh(static_cast<size_t>(D * N));
                for (int di = 0; di < ndirs; ++di) {
                    const auto& perm = orders[static_cast<size_t>(di)].perm;
                    std::fill(gh.begin(), gh.end(), T(0));
                    const T* hsave = hall.data() + (static_cast<int64_t>(di) * B + b) * L * D * N;
                    for (int64_t k = L - 1; k >= 0; --k) {
                        const int64_t t = perm[static_cast<size_t>(k)];
                        const T* Al = Abar.data() + (b * L + t) * D * N;
                        const T* Bl = Bbar.data() + (b * L + t) * D * N;
                        const T* Cl = Cv.data() + (b * L + t) * N;
                        const T* hk = hsave + k * D * N;
                        const T* hprev = k > 0 ? hsave + (k - 1) * D * N : nullptr;
                        for (int64_t d = 0; d < D; ++d) {
                            const T g = outer * gy[(b * L + t) * D + d];
                            T* ghd = gh.data() + d * N;
                            T gx_acc = 0;
                            for (int64_t n = 0; n < N; ++n) {
                                const int64_t i = ((b * L + t) * D + d) * N + n;
                                ghd[n] += Cl[n] * g;
                                if (Cg) Cg[(b * L + t) * N + n] += g * hk[d * N + n];
                                gAbar[i] += ghd[n] * (hprev ? hprev[d * N + n] : T(0));
                                gBbar[i] += ghd[n] * xv[(b * L + t) * D + d];
                                gx_acc += ghd[n] * Bl[d * N + n];
                                ghd[n] *= Al[d * N + n];
                            }
                            if (xg) xg[(b * L + t) * D + d] += gx_acc;
                        }
                    }
                }
                // Chain through the shared discretization for this batch item.
                // exp(z) is read back from the saved Abar instead of recomputing.
                T* gap = gA_part.data() + b * D * N;
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t d = 0; d < D; ++d) {
                        const T dt = dv[(b * L + l) * D + d];
                        for (int64_t n = 0; n < N; ++n) {
                            const int64_t i = ((b * L + l) * D + d) * N + n;
                            const T a = Av[d * N + n];
                            const T z = dt * a;
                            const T ez = Abar[i];
                            const T bval = Bv[(b * L + l) * N + n];
                            const T ph = ssm::phi(z);
                            const T php = ssm::phi_prime(z);
                            const T gA = gAbar[i], gB = gBbar[i];
                            gap[d * N + n] += gA * ez * dt + gB * php * dt * dt * bval;
                            if (dg)
                                dg[(b * L + l) * D + d] +=
                                    gA * ez * a + gB * (php * a * dt + ph) * bval;
                            if (Bg) Bg[(b * L + l) * N + n] += gB * ph * dt;
                        }
                    }
            });
            if (An->requires_grad) {
                T* Ag = An->ensure_grad().data();
                for (int64_t b = 0; b < B; ++b) {
                    const T* gap = gA_part.data() + b * D * N;
                    for (int64_t i = 0; i < D * N; ++i) Ag[i] += gap[i];
                }
            }
        });
    }
    return Var<T>(node);
}

#define UVMB_INSTANTIATE_SCAN(T)                                                               \
    template Var<T> permute_tokens(Tape<T>&, const Var<T>&, const ScanOrder&, bool);           \
    template Var<T> multi_scan_aggregate(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                         const Var<T>&, const Var<T>&, int, int, uint8_t, bool);

UVMB_INSTANTIATE_SCAN(float)
UVMB_INSTANTIATE_SCAN(double)

}  // namespace uvmb::scan
