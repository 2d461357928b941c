#include "uvmb/verify.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "uvmb/deform.hpp"
#include "uvmb/gradcheck.hpp"
#include "uvmb/rng.hpp"
#include "uvmb/scan.hpp"
#include "uvmb/ssm.hpp"

namespace uvmb {

namespace {

using D = double;
using VecVar = std::vector<Var<D>>;
using Closure = std::function<Var<D>(Tape<D>&, VecVar&)>;

constexpr int kSeeds = 10;

// Runs the closure-building fixture for kSeeds seeds and aggregates.
PropertyResult grad_property(const std::string& name,
                             const std::function<std::vector<Tensor<D>>(Rng&)>& make_inputs,
                             const Closure& closure, double tol = 1e-4) {
    PropertyResult res;
    res.name = name;
    res.pass = true;
    double worst = 0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(static_cast<uint64_t>(seed) * 1337 + 17);
        GradCheckOptions opt;
        opt.seed = static_cast<uint64_t>(seed);
        opt.tol = tol;
        const GradCheckReport rep = grad_check<D>(closure, make_inputs(rng), opt);
        worst = std::max(worst, rep.max_rel_err);
        if (!rep.pass) {
            res.pass = false;
            if (res.detail.empty())
                res.detail = "seed " + std::to_string(seed) + ": " + rep.detail;
        }
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max_rel_err %.3g", worst);
    res.detail = std::string(buf) + (res.detail.empty() ? "" : "; " + res.detail);
    return res;
}

// Fractional offsets bounded away from integer crossings so central
// differences do not straddle the bilinear kink.
void fill_safe_frac(Tensor<D>& t, Rng& rng, double mag) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double ip = std::floor(rng.uniform(-mag, mag));
        t[i] = ip + rng.uniform(0.1, 0.9);
    }
}

Tensor<D> rand_t(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<D> t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

PropertyResult simple(const std::string& name, bool pass, const std::string& detail = "") {
    return PropertyResult{name, pass, detail};
}

// Direct-loop grouped cross-correlation, independent of the library path.
Tensor<D> direct_group_conv(const Tensor<D>& x, const Tensor<D>& w, int stride, int pad,
                            int groups) {
    const int64_t B = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t Co = w.size(0), kh = w.size(2), kw = w.size(3);
    const int64_t Cig = Ci / groups, Cog = Co / groups;
    const int64_t OH = (H + 2 * pad - kh) / stride + 1, OW = (W + 2 * pad - kw) / stride + 1;
    Tensor<D> y({B, Co, OH, OW});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co) {
            const int64_t g = co / Cog;
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = 0;
                    for (int64_t ci = 0; ci < Cig; ++ci)
                        for (int64_t u = 0; u < kh; ++u)
                            for (int64_t v = 0; v < kw; ++v) {
                                const int64_t ih = oh * stride - pad + u;
                                const int64_t iw = ow * stride - pad + v;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at({b, g * Cig + ci, ih, iw}) * w.at({co, ci, u, v});
                            }
                    y.at({b, co, oh, ow}) = acc;
                }
        }
    return y;
}

double max_abs_diff(const Tensor<D>& a, const Tensor<D>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace

std::vector<PropertyResult> verify_grad(bool inject_backward_bug) {
    std::vector<PropertyResult> out;

    out.push_back(grad_property(
        "grad/linear",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {3, 4}), rand_t(rng, {4, 5}),
                                          rand_t(rng, {5})};
        },
        [](Tape<D>& t, VecVar& v) { return ops::linear(t, v[0], v[1], v[2]); }));

    out.push_back(grad_property(
        "grad/conv2d",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {1, 2, 5, 5}), rand_t(rng, {3, 2, 3, 3}),
                                          rand_t(rng, {3})};
        },
        [](Tape<D>& t, VecVar& v) { return ops::conv2d(t, v[0], v[1], v[2], 2, 1, 1); }));

    out.push_back(grad_property(
        "grad/conv2d_grouped",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {2, 4, 4, 4}), rand_t(rng, {4, 2, 3, 3}),
                                          rand_t(rng, {4})};
        },
        [](Tape<D>& t, VecVar& v) { return ops::conv2d(t, v[0], v[1], v[2], 1, 1, 2); }));

    out.push_back(grad_property(
        "grad/conv_transpose2d",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {1, 3, 3, 3}), rand_t(rng, {3, 2, 2, 2}),
                                          rand_t(rng, {2})};
        },
        [](Tape<D>& t, VecVar& v) { return ops::conv_transpose2d(t, v[0], v[1], v[2], 2, 0); }));

    out.push_back(grad_property(
        "grad/layer_norm",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {2, 3, 5}), rand_t(rng, {5}, 0.5, 1.5),
                                          rand_t(rng, {5})};
        },
        [](Tape<D>& t, VecVar& v) {
            return ops::layer_norm(t, v[0], v[1], v[2], 1e-5);
        }));

    for (auto [kind, nm] : {std::pair{ops::Act::silu, "silu"}, {ops::Act::gelu, "gelu"},
                            {ops::Act::softplus, "softplus"}}) {
        out.push_back(grad_property(
            std::string("grad/") + nm,
            [](Rng& rng) { return std::vector<Tensor<D>>{rand_t(rng, {3, 7}, -3.0, 3.0)}; },
            [kind](Tape<D>& t, VecVar& v) { return ops::activation(t, v[0], kind); }));
    }

    out.push_back(grad_property(
        "grad/bilinear_sample",
        [](Rng& rng) {
            Tensor<D> pts({6, 2});
            fill_safe_frac(pts, rng, 4.0);
            return std::vector<Tensor<D>>{rand_t(rng, {2, 4, 4}), pts};
        },
        [](Tape<D>& t, VecVar& v) { return ops::bilinear_sample(t, v[0], v[1]); }));

    out.push_back(grad_property(
        "grad/bilinear_resize",
        [](Rng& rng) { return std::vector<Tensor<D>>{rand_t(rng, {1, 2, 3, 5})}; },
        [](Tape<D>& t, VecVar& v) { return ops::bilinear_resize(t, v[0], 4, 7); }));

    out.push_back(grad_property(
        "grad/zoh_discretize",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {2, 3}, -2.0, -0.1),
                                          rand_t(rng, {4, 2}, 0.05, 1.5), rand_t(rng, {4, 3})};
        },
        [](Tape<D>& t, VecVar& v) {
            auto [abar, bbar] = ssm::zoh_discretize(t, v[0], v[1], v[2]);
            return ops::add(t, ops::sum_all(t, abar), ops::sum_all(t, bbar));
        }));

    out.push_back(grad_property(
        "grad/ssm_scan",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {5, 2, 3}, 0.05, 0.95),
                                          rand_t(rng, {5, 2, 3}), rand_t(rng, {5, 3}),
                                          rand_t(rng, {5, 2})};
        },
        [](Tape<D>& t, VecVar& v) { return ssm::ssm_scan(t, v[0], v[1], v[2], v[3]); }));

    out.push_back(grad_property(
        "grad/ssm_scan_through_zoh",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {2, 3}, -2.0, -0.1),
                                          rand_t(rng, {5, 2}, 0.05, 1.5), rand_t(rng, {5, 3}),
                                          rand_t(rng, {5, 3}), rand_t(rng, {5, 2})};
        },
        [](Tape<D>& t, VecVar& v) {
            auto [abar, bbar] = ssm::zoh_discretize(t, v[0], v[1], v[2]);
            return ssm::ssm_scan(t, abar, bbar, v[3], v[4]);
        }));

    out.push_back(grad_property(
        "grad/multi_scan_aggregate",
        [](Rng& rng) {
            return std::vector<Tensor<D>>{rand_t(rng, {2, 2}, -2.0, -0.1),
                                          rand_t(rng, {1, 9, 2}, 0.05, 1.5),
                                          rand_t(rng, {1, 9, 2}), rand_t(rng, {1, 9, 2}),
                                          rand_t(rng, {1, 9, 2})};
        },
        [](Tape<D>& t, VecVar& v) {
            return scan::multi_scan_aggregate(t, v[0], v[1], v[2], v[3], v[4], 3, 3);
        }));

    out.push_back(grad_property(
        "grad/dcn_aggregate",
        [](Rng& rng) {
            Tensor<D> off({1, 36, 4, 4});
            fill_safe_frac(off, rng, 1.0);
            return std::vector<Tensor<D>>{rand_t(rng, {1, 4, 4, 4}), off,
                                          rand_t(rng, {1, 18, 4, 4}, 0.2, 1.2),
                                          rand_t(rng, {2, 2, 2})};
        },
        [](Tape<D>& t, VecVar& v) {
            return deform::dcn_aggregate(t, v[0], v[1], v[2], v[3], 2, 9);
        }));

    // The ground-truth mask is data, not a differentiable input; the fixtures
    // build it deterministically inside the closure.
    const auto fixed_mask = [](Shape s) {
        Tensor<D> mask(std::move(s));
        Rng mrng(0xBEEF);
        for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = mrng.coin() ? 1.0 : 0.0;
        return mask;
    };
    out.push_back(grad_property(
        "grad/cross_entropy_loss",
        [](Rng& rng) { return std::vector<Tensor<D>>{rand_t(rng, {2, 2, 3, 3}, -2.0, 2.0)}; },
        [fixed_mask](Tape<D>& t, VecVar& v) {
            return ops::cross_entropy_loss(t, v[0], fixed_mask({2, 3, 3}));
        }));

    out.push_back(grad_property(
        "grad/dice_loss",
        [](Rng& rng) { return std::vector<Tensor<D>>{rand_t(rng, {2, 3, 3}, 0.05, 0.95)}; },
        [fixed_mask](Tape<D>& t, VecVar& v) {
            return ops::dice_loss(t, v[0], fixed_mask({2, 3, 3}));
        }));

    out.push_back(grad_property(
        "grad/softmax_channel",
        [](Rng& rng) { return std::vector<Tensor<D>>{rand_t(rng, {1, 3, 2, 2}, -2.0, 2.0)}; },
        [](Tape<D>& t, VecVar& v) { return ops::softmax_channel(t, v[0]); }));

    if (inject_backward_bug) {
        // silu with a doubled backward; the checker must flag it with a
        // relative error near 0.5.
        PropertyResult res;
        res.name = "grad/injected_scaled_backward";
        Tensor<D> x({6}, {2.5, 3.0, -2.0, 1.5, 0.7, 4.0});
        const Closure bad = [](Tape<D>& t, VecVar& v) {
            const Var<D>& in = v[0];
            Tensor<D> out = in.value();
            for (int64_t i = 0; i < out.numel(); ++i) out[i] *= ops::sigmoid_scalar(out[i]);
            auto node = std::make_shared<Node<D>>();
            node->value = std::move(out);
            node->requires_grad = in.requires_grad();
            if (t.recording() && node->requires_grad) {
                t.record([xn = in.node(), on = node]() {
                    if (!on->has_grad()) return;
                    Tensor<D>& xg = xn->ensure_grad();
                    for (int64_t i = 0; i < xg.numel(); ++i) {
                        const D s = ops::sigmoid_scalar(xn->value[i]);
                        const D d = s * (1.0 + xn->value[i] * (1.0 - s));
                        xg[i] += 2.0 * d * on->grad[i];  // deliberately doubled
                    }
                });
            }
            return Var<D>(node);
        };
        GradCheckOptions opt;
        opt.seed = 7;
        const GradCheckReport rep = grad_check<D>(bad, {x}, opt);
        const bool detected = !rep.pass && rep.max_rel_err > 0.4 && rep.max_rel_err <= 0.51;
        // The property "passes" only when the bug goes undetected.
        res.pass = !detected;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "max_rel_err %.3g", rep.max_rel_err);
        res.detail = buf;
        out.push_back(res);
    }
    return out;
}

std::vector<PropertyResult> verify_scan() {
    std::vector<PropertyResult> out;

    {  // bijections + reversal for every grid up to 16x16
        bool bij = true, rev = true;
        std::string where;
        for (int H = 1; H <= 16 && bij && rev; ++H)
            for (int W = 1; W <= 16 && bij && rev; ++W) {
                for (auto dir : {scan::Direction::horizontal, scan::Direction::vertical,
                                 scan::Direction::diagonal, scan::Direction::antidiagonal}) {
                    const auto fwd = scan::scan_order(dir, false, H, W);
                    const auto bwd = scan::scan_order(dir, true, H, W);
                    std::vector<char> seen(static_cast<size_t>(H) * W, 0);
                    for (int64_t p : fwd.perm) {
                        if (p < 0 || p >= static_cast<int64_t>(seen.size()) ||
                            seen[static_cast<size_t>(p)]) {
                            bij = false;
                            break;
                        }
                        seen[static_cast<size_t>(p)] = 1;
                    }
                    for (size_t k = 0; k < fwd.perm.size(); ++k)
                        if (bwd.perm[k] != fwd.perm[fwd.perm.size() - 1 - k]) {
                            rev = false;
                            break;
                        }
                    if (!bij || !rev) {
                        where = std::string(scan::direction_name(dir)) + " " +
                                std::to_string(H) + "x" + std::to_string(W);
                        break;
                    }
                }
            }
        out.push_back(simple("scan/bijection_all_sizes_le_16", bij, where));
        out.push_back(simple("scan/backward_is_reversed_forward", rev, where));
    }

    {  // permute round trip, bit exact
        bool pass = true;
        Rng rng(404);
        for (auto [H, W] : {std::pair{3, 5}, {4, 4}, {1, 7}}) {
            Tensor<D> x({static_cast<int64_t>(H) * W, 3});
            rng.fill_uniform(x, -1.0, 1.0);
            for (const auto& o : scan::all_scan_orders(H, W)) {
                Tape<D> t(false);
                Var<D> xa = Var<D>::leaf(x, false);
                Var<D> fw = scan::permute_tokens(t, xa, o, false);
                Var<D> rt = scan::permute_tokens(t, fw, o, true);
                for (int64_t i = 0; i < x.numel(); ++i)
                    if (rt.value()[i] != x[i]) pass = false;
            }
        }
        out.push_back(simple("scan/permute_roundtrip_bitexact", pass));
    }

    {  // summation order consistency across direction orderings
        Rng rng(99);
        const int H = 4, W = 4;
        const int64_t L = H * W, Dd = 3, N = 2, B = 1;
        Tensor<D> A = rand_t(rng, {Dd, N}, -1.5, -0.1);
        Tensor<D> delta = rand_t(rng, {B, L, Dd}, 0.05, 0.9);
        Tensor<D> Bm = rand_t(rng, {B, L, N});
        Tensor<D> Cm = rand_t(rng, {B, L, N});
        Tensor<D> x = rand_t(rng, {B, L, Dd});
        Tape<D> t(false);
        auto leaf = [&](const Tensor<D>& v) { return Var<D>::leaf(v, false); };
        Tensor<D> full = scan::multi_scan_aggregate(t, leaf(A), leaf(delta), leaf(Bm), leaf(Cm),
                                                    leaf(x), H, W)
                             .value();
        // Accumulate single directions in a few shuffled orders.
        double worst = 0;
        for (uint64_t shuf = 0; shuf < 3; ++shuf) {
            std::vector<int> dirs{0, 1, 2, 3, 4, 5, 6, 7};
            Rng r2(shuf + 1);
            r2.shuffle(dirs);
            Tensor<D> acc({B, L, Dd});
            for (int di : dirs) {
                Tensor<D> one = scan::multi_scan_aggregate(t, leaf(A), leaf(delta), leaf(Bm),
                                                           leaf(Cm), leaf(x), H, W,
                                                           static_cast<uint8_t>(1u << di), false)
                                    .value();
                for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += one[i];
            }
            for (int64_t i = 0; i < acc.numel(); ++i)
                worst = std::max(worst, std::abs(acc[i] / 8.0 - full[i]));
        }
        out.push_back(simple("scan/aggregation_order_consistent", worst < 1e-6,
                             "max diff " + std::to_string(worst)));
    }

    {  // fused aggregate == permute -> zoh+scan -> inverse permute composition
        Rng rng(7);
        const int H = 3, W = 4;
        const int64_t L = H * W, Dd = 2, N = 3;
        Tensor<D> A = rand_t(rng, {Dd, N}, -1.5, -0.1);
        Tensor<D> delta = rand_t(rng, {1, L, Dd}, 0.05, 0.9);
        Tensor<D> Bm = rand_t(rng, {1, L, N});
        Tensor<D> Cm = rand_t(rng, {1, L, N});
        Tensor<D> x = rand_t(rng, {1, L, Dd});
        Tape<D> t(false);
        auto leaf = [&](const Tensor<D>& v) { return Var<D>::leaf(v, false); };
        Tensor<D> fused = scan::multi_scan_aggregate(t, leaf(A), leaf(delta), leaf(Bm), leaf(Cm),
                                                     leaf(x), H, W)
                              .value();
        Tensor<D> ref({1, L, Dd});
        for (const auto& o : scan::all_scan_orders(H, W)) {
            Var<D> dp = scan::permute_tokens(t, leaf(delta.reshaped({L, Dd})), o, false);
            Var<D> bp = scan::permute_tokens(t, leaf(Bm.reshaped({L, N})), o, false);
            Var<D> cp = scan::permute_tokens(t, leaf(Cm.reshaped({L, N})), o, false);
            Var<D> xp = scan::permute_tokens(t, leaf(x.reshaped({L, Dd})), o, false);
            auto [abar, bbar] = ssm::zoh_discretize(t, leaf(A), dp, bp);
            Var<D> y = ssm::ssm_scan(t, abar, bbar, cp, xp);
            Var<D> yi = scan::permute_tokens(t, y, o, true);
            for (int64_t i = 0; i < L * Dd; ++i) ref[i] += yi.value()[i] / 8.0;
        }
        const double diff = max_abs_diff(fused, ref);
        out.push_back(simple("scan/fused_matches_composition", diff < 1e-9,
                             "max diff " + std::to_string(diff)));
    }

    return out;
}

std::vector<PropertyResult> verify_zoh() {
    std::vector<PropertyResult> out;

    {  // recurrence vs ODE integration, 50 draws
        double worst = 0;
        bool pass = true;
        for (int draw = 0; draw < 50; ++draw) {
            Rng rng(static_cast<uint64_t>(draw) + 1000);
            const int N = static_cast<int>(rng.randint(1, 4));
            const int64_t L = rng.randint(1, 64);
            std::vector<double> Adiag(static_cast<size_t>(N)), Bv(static_cast<size_t>(N)),
                Cv(static_cast<size_t>(N));
            for (int i = 0; i < N; ++i) {
                Adiag[static_cast<size_t>(i)] = rng.uniform(-2.0, -0.05);
                Bv[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
                Cv[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
            }
            // D = 1 channel; per-step timescales and inputs.
            Tensor<D> A({1, N});
            for (int i = 0; i < N; ++i) A[i] = Adiag[static_cast<size_t>(i)];
            Tensor<D> delta({L, 1}), x({L, 1}), Bm({L, N}), Cm({L, N});
            for (int64_t k = 0; k < L; ++k) {
                delta[k] = rng.uniform(0.01, 0.2);
                x[k] = rng.uniform(-1.0, 1.0);
                for (int i = 0; i < N; ++i) {
                    Bm.at({k, i}) = Bv[static_cast<size_t>(i)];
                    Cm.at({k, i}) = Cv[static_cast<size_t>(i)];
                }
            }
            Tape<D> t(false);
            auto leaf = [&](const Tensor<D>& v) { return Var<D>::leaf(v, false); };
            auto [abar, bbar] = ssm::zoh_discretize(t, leaf(A), leaf(delta), leaf(Bm));
            Tensor<D> y = ssm::ssm_scan(t, abar, bbar, leaf(Cm), leaf(x)).value();

            // Dense-diagonal oracle integrated interval by interval.
            std::vector<double> Adense(static_cast<size_t>(N) * N, 0.0);
            for (int i = 0; i < N; ++i)
                Adense[static_cast<size_t>(i * N + i)] = Adiag[static_cast<size_t>(i)];
            std::vector<double> h(static_cast<size_t>(N), 0.0);
            double t_total = 0;
            for (int64_t k = 0; k < L; ++k) t_total += delta[k];
            const double dt = 1e-4 * std::max(t_total, 1e-6);
            for (int64_t k = 0; k < L; ++k) {
                ssm::ode_advance_dense(Adense, Bv, N, x[k], delta[k], dt, h);
                double yk = 0;
                for (int i = 0; i < N; ++i) yk += Cv[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
                worst = std::max(worst, std::abs(yk - y[k]));
            }
        }
        pass = worst < 1e-6;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "max abs diff %.3g over 50 draws", worst);
        out.push_back(simple("zoh/recurrence_matches_ode", pass, buf));
    }

    {  // strict impulse-response decay per state lane
        bool pass = true;
        for (int draw = 0; draw < 50 && pass; ++draw) {
            Rng rng(static_cast<uint64_t>(draw) + 31);
            const double a = rng.uniform(-3.0, -0.02);
            const double dt = rng.uniform(0.005, 1.5);
            double b = rng.uniform(0.1, 1.5) * (rng.coin() ? 1 : -1);
            double c = rng.uniform(0.1, 1.5) * (rng.coin() ? 1 : -1);
            const int64_t L = 24;
            Tensor<D> A({1, 1}), delta({L, 1}), x({L, 1}), Bm({L, 1}), Cm({L, 1});
            A[0] = a;
            for (int64_t k = 0; k < L; ++k) {
                delta[k] = dt;
                Bm[k] = b;
                Cm[k] = c;
                x[k] = k == 0 ? 1.0 : 0.0;
            }
            Tape<D> t(false);
            auto leaf = [&](const Tensor<D>& v) { return Var<D>::leaf(v, false); };
            auto [abar, bbar] = ssm::zoh_discretize(t, leaf(A), leaf(delta), leaf(Bm));
            Tensor<D> y = ssm::ssm_scan(t, abar, bbar, leaf(Cm), leaf(x)).value();
            for (int64_t k = 1; k < L; ++k)
                if (!(std::abs(y[k]) < std::abs(y[k - 1]))) pass = false;
        }
        out.push_back(simple("zoh/impulse_response_strictly_decays", pass));
    }

    {  // Taylor branch continuity across both series windows
        double worst = 0;
        for (double z0 : {1e-4, -1e-4}) {
            const double lo = z0 * (1.0 - 1e-9), hi = z0 * (1.0 + 1e-9);
            worst = std::max(worst, std::abs(ssm::phi(lo) - ssm::phi(hi)));
        }
        for (double z0 : {1e-3, -1e-3}) {
            const double lo = z0 * (1.0 - 1e-9), hi = z0 * (1.0 + 1e-9);
            worst = std::max(worst, std::abs(ssm::phi_prime(lo) - ssm::phi_prime(hi)));
        }
        char buf[48];
        std::snprintf(buf, sizeof(buf), "max jump %.3g", worst);
        out.push_back(simple("zoh/taylor_branch_continuous", worst < 1e-9, buf));
    }

    {  // discrete factor in (0,1) for A<0, delta>0
        bool pass = true;
        Rng rng(8);
        Tensor<D> A = rand_t(rng, {3, 4}, -4.0, -1e-3);
        Tensor<D> delta = rand_t(rng, {6, 3}, 1e-4, 2.0);
        Tensor<D> Bm = rand_t(rng, {6, 4});
        Tape<D> t(false);
        auto [abar, bbar] =
            ssm::zoh_discretize(t, Var<D>::leaf(A, false), Var<D>::leaf(delta, false),
                                Var<D>::leaf(Bm, false));
        (void)bbar;
        for (int64_t i = 0; i < abar.value().numel(); ++i)
            if (!(abar.value()[i] > 0.0 && abar.value()[i] < 1.0)) pass = false;
        out.push_back(simple("zoh/discrete_factor_in_unit_interval", pass));
    }

    return out;
}

std::vector<PropertyResult> verify_deform() {
    std::vector<PropertyResult> out;
    Rng rng(2024);
    const int64_t B = 1, C = 4, H = 5, W = 5;
    const int G = 2, K = 9;
    const int64_t Cg = C / G, GK = static_cast<int64_t>(G) * K;
    Tensor<D> x = rand_t(rng, {B, C, H, W});
    Tensor<D> zero_off({B, 2 * GK, H, W});
    Tensor<D> unit_mod = Tensor<D>::ones({B, GK, H, W});
    Tensor<D> wg = rand_t(rng, {G, Cg, Cg});
    Tape<D> t(false);
    auto leaf = [&](const Tensor<D>& v) { return Var<D>::leaf(v, false); };

    {  // zero offsets + unit modulation + summing projection == grouped conv
       // with all-ones kernels (direct-loop oracle)
        Tensor<D> ones_wg = Tensor<D>::ones({G, Cg, Cg});
        Tensor<D> y = deform::dcn_aggregate(t, leaf(x), leaf(zero_off), leaf(unit_mod),
                                            leaf(ones_wg), G, K)
                          .value();
        Tensor<D> ones_w = Tensor<D>::ones({C, Cg, 3, 3});
        Tensor<D> ref = direct_group_conv(x, ones_w, 1, 1, G);
        const double diff = max_abs_diff(y, ref);
        out.push_back(simple("deform/reduces_to_grouped_conv", diff < 1e-6,
                             "max abs diff " + std::to_string(diff)));
    }

    {  // same reduction with an arbitrary projection applied after the k-sum
        Tensor<D> y = deform::dcn_aggregate(t, leaf(x), leaf(zero_off), leaf(unit_mod), leaf(wg),
                                            G, K)
                          .value();
        Tensor<D> diag_w({C, Cg, 3, 3});
        for (int64_t co = 0; co < C; ++co)
            for (int64_t u = 0; u < 3; ++u)
                for (int64_t v = 0; v < 3; ++v) diag_w.at({co, co % Cg, u, v}) = 1.0;
        Tensor<D> ksum = direct_group_conv(x, diag_w, 1, 1, G);
        Tensor<D> ref({B, C, H, W});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t g = 0; g < G; ++g)
                for (int64_t co = 0; co < Cg; ++co)
                    for (int64_t p = 0; p < H * W; ++p) {
                        double acc = 0;
                        for (int64_t ci = 0; ci < Cg; ++ci)
                            acc += wg.at({g, co, ci}) * ksum[((b * C + g * Cg + ci) * H * W) + p];
                        ref[((b * C + g * Cg + co) * H * W) + p] = acc;
                    }
        const double diff = max_abs_diff(y, ref);
        out.push_back(simple("deform/projection_after_ksum", diff < 1e-6,
                             "max abs diff " + std::to_string(diff)));
    }

    {  // exact linearity in the modulation (no normalization)
        Tensor<D> off({B, 2 * GK, H, W});
        fill_safe_frac(off, rng, 1.0);
        Tensor<D> mod = rand_t(rng, {B, GK, H, W}, 0.2, 1.4);
        Tensor<D> mod2 = mod;
        for (int64_t i = 0; i < mod2.numel(); ++i) mod2[i] *= 2.0;
        Tensor<D> y1 =
            deform::dcn_aggregate(t, leaf(x), leaf(off), leaf(mod), leaf(wg), G, K).value();
        Tensor<D> y2 =
            deform::dcn_aggregate(t, leaf(x), leaf(off), leaf(mod2), leaf(wg), G, K).value();
        bool exact = true;
        for (int64_t i = 0; i < y1.numel(); ++i)
            if (y2[i] != 2.0 * y1[i]) exact = false;
        out.push_back(simple("deform/output_linear_in_modulation", exact));
    }

    {  // zero modulation -> zero output
        Tensor<D> zmod({B, GK, H, W});
        Tensor<D> off({B, 2 * GK, H, W});
        fill_safe_frac(off, rng, 1.0);
        Tensor<D> y =
            deform::dcn_aggregate(t, leaf(x), leaf(off), leaf(zmod), leaf(wg), G, K).value();
        out.push_back(simple("deform/zero_modulation_zero_output", y.abs_max() == 0.0));
    }

    {  // samples far outside the image contribute nothing
        Tensor<D> far_off = Tensor<D>::full({B, 2 * GK, H, W}, 50.0);
        Tensor<D> y = deform::dcn_aggregate(t, leaf(x), leaf(far_off), leaf(unit_mod), leaf(wg),
                                            G, K)
                          .value();
        out.push_back(simple("deform/out_of_image_contributes_zero", y.abs_max() == 0.0));
    }

    return out;
}

std::vector<PropertyResult> verify_all() {
    std::vector<PropertyResult> out;
    for (const auto& v : {verify_grad(false), verify_scan(), verify_zoh(), verify_deform()})
        out.insert(out.end(), v.begin(), v.end());
    return out;
}

ModelGradCheckReport model_grad_check(const ModelConfig& cfg, int H, int W, uint64_t seed,
                                      int64_t samples_per_tensor, double eps, double tol) {
    SegModel<double> model(cfg, seed);
    Rng rng(seed ^ 0xabcdULL);
    Tensor<double> image({1, cfg.in_channels, H, W});
    rng.fill_uniform(image, 0.0, 1.0);
    Tensor<double> proj;  // fixed random projection of the logits

    auto loss_of = [&](bool record, nn::NamedParams<double>* params_out) {
        Tape<double> tape(record);
        Var<double> img = Var<double>::leaf(image, false);
        Var<double> logits = model.forward(tape, img);
        if (proj.numel() == 0) {
            proj = Tensor<double>(logits.value().shape());
            Rng r2(seed ^ 0x77ULL);
            r2.fill_uniform(proj, -1.0, 1.0);
        }
        Var<double> loss = ops::sum_all(tape, ops::mul(tape, logits, Var<double>::leaf(proj, false)));
        if (record) {
            tape.backward(loss);
            if (params_out) *params_out = model.params();
        }
        return loss.value().item();
    };

    nn::NamedParams<double> params;
    loss_of(true, &params);

    ModelGradCheckReport rep;
    rep.max_rel_err = 0;
    for (auto& [name, var] : params) {
        (void)name;
        Tensor<double>& t = var.value_mut();
        const Tensor<double>& g = var.grad();
        const int64_t n = t.numel();
        std::vector<int64_t> coords;
        if (samples_per_tensor < 0 || samples_per_tensor >= n) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + samples_per_tensor);
        }
        for (int64_t c : coords) {
            const double orig = t[c];
            t[c] = orig + eps;
            const double fp = loss_of(false, nullptr);
            t[c] = orig - eps;
            const double fm = loss_of(false, nullptr);
            t[c] = orig;
            const double numeric = (fp - fm) / (2 * eps);
            const double rel = std::abs(g[c] - numeric) /
                               std::max({1.0, std::abs(g[c]), std::abs(numeric)});
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

bool report_properties(const std::vector<PropertyResult>& results) {
    bool all = true;
    for (const PropertyResult& r : results) {
        std::printf("[%s] %s%s%s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.empty() ? "" : " — ", r.detail.c_str());
        all = all && r.pass;
    }
    return all;
}

}  // namespace uvmb
