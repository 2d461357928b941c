#include "uvmb/ssm.hpp"

#include <cmath>
#include <cstring>

#include "uvmb/errors.hpp"

namespace uvmb::ssm {

namespace {
constexpr double kTaylorCut = 1e-4;

template <typename T>
std::shared_ptr<Node<T>> make_node(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}
}  // namespace

template <typename T>
T phi(T z) {
    if (std::abs(static_cast<double>(z)) < kTaylorCut)
        return T(1) + z / T(2) + z * z / T(6) + z * z * z / T(24);
    return (std::exp(z) - T(1)) / z;
}

template <typename T>
T phi_prime(T z) {
    // The closed form (e^z (z-1) + 1) / z^2 cancels catastrophically for
    // small |z| (absolute error ~ eps/z^2), so the series window is wider
    // than phi's.
    if (std::abs(static_cast<double>(z)) < 1e-3)
        return T(0.5) + z / T(3) + z * z / T(8) + z * z * z / T(30) +
               z * z * z * z / T(144);
    return (std::exp(z) * (z - T(1)) + T(1)) / (z * z);
}

template <typename T>
std::pair<Var<T>, Var<T>> zoh_discretize(Tape<T>& tape, const Var<T>& A, const Var<T>& delta,
                                         const Var<T>& B) {
    const Tensor<T>&Av = A.value(), &dv = delta.value(), &Bv = B.value();
    if (Av.dim() != 2 || dv.dim() != 2 || Bv.dim() != 2)
        throw ShapeError("zoh_discretize: A[D,N], delta[L,D], B[L,N] required");
    const int64_t D = Av.size(0), N = Av.size(1), L = dv.size(0);
    if (dv.size(1) != D || Bv.size(0) != L || Bv.size(1) != N)
        throw ShapeError("zoh_discretize: inconsistent shapes");
    for (int64_t i = 0; i < dv.numel(); ++i)
        if (!(dv[i] > T(0))) throw NumericError("zoh_discretize: delta must be positive");

    Tensor<T> Abar({L, D, N}), Bbar({L, D, N});
    for (int64_t l = 0; l < L; ++l)
        for (int64_t d = 0; d < D; ++d) {
            const T dt = dv[l * D + d];
            for (int64_t n = 0; n < N; ++n) {
                const T z = dt * Av[d * N + n];
                Abar[(l * D + d) * N + n] = std::exp(z);
                Bbar[(l * D + d) * N + n] = phi(z) * dt * Bv[l * N + n];
            }
        }
    const bool req = A.requires_grad() || delta.requires_grad() || B.requires_grad();
    auto an = make_node(std::move(Abar), req);
    auto bn = make_node(std::move(Bbar), req);
    if (tape.recording() && req) {
        tape.record([An = A.node(), dn = delta.node(), Bn = B.node(), an, bn, L, D, N]() {
            const bool ga = an->has_grad(), gb = bn->has_grad();
            if (!ga && !gb) return;
            const Tensor<T>&Av = An->value, &dv = dn->value, &Bv = Bn->value;
            T* Ag = An->requires_grad ? An->ensure_grad().data() : nullptr;
            T* dg = dn->requires_grad ? dn->ensure_grad().data() : nullptr;
            T* Bg = Bn->requires_grad ? Bn->ensure_grad().data() : nullptr;
            for (int64_t l = 0; l < L; ++l)
                for (int64_t d = 0; d < D; ++d) {
                    const T dt = dv[l * D + d];
                    for (int64_t n = 0; n < N; ++n) {
                        const int64_t i = (l * D + d) * N + n;
                        const T a = Av[d * N + n];
                        const T b = Bv[l * N + n];
                        const T z = dt * a;
                        const T ez = std::exp(z);
                        const T gA = ga ? an->grad[i] : T(0);
                        const T gB = gb ? bn->grad[i] : T(0);
                        // Abar = e^z; Bbar = phi(z) * dt * b, z = dt * a.
                        if (Ag) Ag[d * N + n] += gA * ez * dt + gB * phi_prime(z) * dt * dt * b;
                        if (dg)
                            dg[l * D + d] +=
                                gA * ez * a + gB * (phi_prime(z) * a * dt + phi(z)) * b;
                        if (Bg) Bg[l * N + n] += gB * phi(z) * dt;
                    }
                }
        });
    }
    return {Var<T>(an), Var<T>(bn)};
}

template <typename T>
Var<T> ssm_scan(Tape<T>& tape, const Var<T>& Abar, const Var<T>& Bbar, const Var<T>& C,
                const Var<T>& x) {
    const Tensor<T>&Av = Abar.value(), &Bv = Bbar.value(), &Cv = C.value(), &xv = x.value();
    if (Av.dim() != 3) throw ShapeError("ssm_scan: Abar must be [L,D,N]");
    const int64_t L = Av.size(0), D = Av.size(1), N = Av.size(2);
    if (!Bv.same_shape(Av)) throw ShapeError("ssm_scan: Bbar shape mismatch");
    if (Cv.dim() != 2 || Cv.size(0) != L || Cv.size(1) != N)
        throw ShapeError("ssm_scan: C must be [L,N]");
    if (xv.dim() != 2 || xv.size(0) != L || xv.size(1) != D)
        throw ShapeError("ssm_scan: x must be [L,D]");

    Tensor<T> y({L, D});
    Tensor<T> hall({L, D, N});  // saved states for the reverse-time pass
    std::vector<T> h(static_cast<size_t>(D * N), T(0));
    for (int64_t l = 0; l < L; ++l) {
        const T* Al = Av.data() + l * D * N;
        const T* Bl = Bv.data() + l * D * N;
        const T* Cl = Cv.data() + l * N;
        for (int64_t d = 0; d < D; ++d) {
            T* hd = h.data() + d * N;
            const T xv_ld = xv[l * D + d];
            T acc = 0;
            for (int64_t n = 0; n < N; ++n) {
                hd[n] = Al[d * N + n] * hd[n] + Bl[d * N + n] * xv_ld;
                acc += Cl[n] * hd[n];
            }
            y[l * D + d] = acc;
        }
        std::memcpy(hall.data() + l * D * N, h.data(), sizeof(T) * static_cast<size_t>(D * N));
    }
    const bool req = Abar.requires_grad() || Bbar.requires_grad() || C.requires_grad() ||
                     x.requires_grad();
    auto node = make_node(std::move(y), req);
    if (tape.recording() && req) {
        tape.record([An = Abar.node(), Bn = Bbar.node(), Cn = C.node(), xn = x.node(), on = node,
                     hall = std::move(hall), L, D, N]() {
            if (!on->has_grad()) return;
            const Tensor<T>& gy = on->grad;
            const Tensor<T>&Av = An->value, &Bv = Bn->value, &Cv = Cn->value, &xv = xn->value;
            T* Ag = An->requires_grad ? An->ensure_grad().data() : nullptr;
            T* Bg = Bn->requires_grad ? Bn->ensure_grad().data() : nullptr;
            T* Cg = Cn->requires_grad ? Cn->ensure_grad().data() : nullptr;
            T* xg = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
            std::vector<T> gh(static_cast<size_t>(D * N), T(0));
            for (int64_t l = L - 1; l >= 0; --l) {
                const T* Al = Av.data() + l * D * N;
                const T* Bl = Bv.data() + l * D * N;
                const T* Cl = Cv.data() + l * N;
                const T* hl = hall.data() + l * D * N;
                const T* hprev = l > 0 ? hall.data() + (l - 1) * D * N : nullptr;
                for (int64_t d = 0; d < D; ++d) {
                    const T g = gy[l * D + d];
                    T* ghd = gh.data() + d * N;
                    T gx_acc = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        const int64_t i = (l * D + d) * N + n;
                        ghd[n] += Cl[n] * g;
                        if (Cg) Cg[l * N + n] += g * hl[d * N + n];
                        if (Ag) Ag[i] += ghd[n] * (hprev ? hprev[d * N + n] : T(0));
                        if (Bg) Bg[i] += ghd[n] * xv[l * D + d];
                        gx_acc += ghd[n] * Bl[d * N + n];
                        ghd[n] *= Al[d * N + n];  // propagate to step l-1
                    }
                    if (xg) xg[l * D + d] += gx_acc;
                }
            }
        });
    }
    return Var<T>(node);
}

namespace {

// One RK4 step of h' = A h + B x(t) for dense A (row-major N x N).
void rk4_step(const std::vector<double>& A, const std::vector<double>& B, int N,
              const std::function<double(double)>& x_of_t, double t, double dt,
              std::vector<double>& h, std::vector<double>& k1, std::vector<double>& k2,
              std::vector<double>& k3, std::vector<double>& k4, std::vector<double>& tmp) {
    auto deriv = [&](const std::vector<double>& hv, double tt, std::vector<double>& out) {
        const double xv = x_of_t(tt);
        for (int i = 0; i < N; ++i) {
            double s = B[static_cast<size_t>(i)] * xv;
            for (int j = 0; j < N; ++j)
                s += A[static_cast<size_t>(i * N + j)] * hv[static_cast<size_t>(j)];
            out[static_cast<size_t>(i)] = s;
        }
    };
    deriv(h, t, k1);
    for (int i = 0; i < N; ++i) tmp[i] = h[i] + 0.5 * dt * k1[i];
    deriv(tmp, t + 0.5 * dt, k2);
    for (int i = 0; i < N; ++i) tmp[i] = h[i] + 0.5 * dt * k2[i];
    deriv(tmp, t + 0.5 * dt, k3);
    for (int i = 0; i < N; ++i) tmp[i] = h[i] + dt * k3[i];
    deriv(tmp, t + dt, k4);
    for (int i = 0; i < N; ++i) h[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

}  // namespace

void ode_advance_dense(const std::vector<double>& A, const std::vector<double>& B, int N,
                       double x_const, double dt_total, double dt_step, std::vector<double>& h) {
    std::vector<double> k1(h), k2(h), k3(h), k4(h), tmp(h);
    const auto x_fn = [x_const](double) { return x_const; };
    const int64_t steps = static_cast<int64_t>(std::ceil(dt_total / dt_step - 1e-12));
    double t = 0.0;
    for (int64_t s = 0; s < steps; ++s) {
        const double step = std::min(dt_step, dt_total - t);
        rk4_step(A, B, N, x_fn, t, step, h, k1, k2, k3, k4, tmp);
        t += step;
    }
}

double ode_reference_dense(const std::vector<double>& A, const std::vector<double>& B,
                           const std::vector<double>& C, int N,
                           const std::function<double(double)>& x_of_t, double t_end, double dt) {
    std::vector<double> h(static_cast<size_t>(N), 0.0);
    std::vector<double> k1(h), k2(h), k3(h), k4(h), tmp(h);
    const int64_t steps = static_cast<int64_t>(std::ceil(t_end / dt - 1e-12));
    double t = 0.0;
    for (int64_t s = 0; s < steps; ++s) {
        const double step = std::min(dt, t_end - t);
        rk4_step(A, B, N, x_of_t, t, step, h, k1, k2, k3, k4, tmp);
        t += step;
    }
    double y = 0.0;
    for (int i = 0; i < N; ++i) y += C[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
    return y;
}

double ode_reference(double A, double B, double C, const std::function<double(double)>& x_of_t,
                     double t_end, double dt) {
    return ode_reference_dense({A}, {B}, {C}, 1, x_of_t, t_end, dt);
}

#define UVMB_INSTANTIATE_SSM(T)                                                              \
    template T phi(T);                                                                       \
    template T phi_prime(T);                                                                 \
    template std::pair<Var<T>, Var<T>> zoh_discretize(Tape<T>&, const Var<T>&, const Var<T>&, \
                                                      const Var<T>&);                        \
    template Var<T> ssm_scan(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,          \
                             const Var<T>&);

UVMB_INSTANTIATE_SSM(float)
UVMB_INSTANTIATE_SSM(double)

}  // namespace uvmb::ssm
