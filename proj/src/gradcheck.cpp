#include "uvmb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "uvmb/ops.hpp"
#include "uvmb/rng.hpp"

namespace uvmb {

namespace {

template <typename T>
T project(const Tensor<T>& out, const Tensor<T>& r) {
    T s = 0;
    for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * r[i];
    return s;
}

}  // namespace

template <typename T>
GradCheckReport grad_check(
    const std::function<Var<T>(Tape<T>&, std::vector<Var<T>>&)>& op_closure,
    const std::vector<Tensor<T>>& inputs, GradCheckOptions opt) {
    GradCheckReport rep;
    std::vector<Tensor<T>> work = inputs;

    // Probe the output shape, then fix the scalarizing projection.
    Tape<T> notape(false);
    std::vector<Var<T>> probe;
    for (auto& t : work) probe.push_back(Var<T>::leaf(t, false));
    Var<T> out0 = op_closure(notape, probe);
    if (!out0.value().all_finite()) {
        rep.detail = "non-finite forward output";
        return rep;
    }
    Rng rng(opt.seed ^ 0x5eedULL);
    Tensor<T> r(out0.value().shape());
    rng.fill_uniform(r, T(-1), T(1));

    // Analytic pass: loss = sum(output * r), gradients via tape replay.
    Tape<T> tape(true);
    std::vector<Var<T>> vars;
    for (auto& t : work) vars.push_back(Var<T>::leaf(t, true));
    Var<T> out = op_closure(tape, vars);
    Var<T> rleaf = Var<T>::leaf(r, false);
    Var<T> loss = ops::sum_all(tape, ops::mul(tape, out, rleaf));
    tape.backward(loss);

    // Numeric pass over (sampled) coordinates of every input.
    double max_rel = 0.0;
    std::ostringstream detail;
    bool finite_ok = true;
    for (size_t vi = 0; vi < work.size(); ++vi) {
        Tensor<T>& t = work[vi];
        const int64_t n = t.numel();
        std::vector<int64_t> coords;
        if (opt.max_checks_per_input < 0 || opt.max_checks_per_input >= n) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + opt.max_checks_per_input);
        }
        const Tensor<T>& analytic = vars[vi].grad();
        for (int64_t c : coords) {
            const T orig = t[c];
            t[c] = orig + static_cast<T>(opt.eps);
            std::vector<Var<T>> vp;
            for (auto& w : work) vp.push_back(Var<T>::leaf(w, false));
            const T fp = project(op_closure(notape, vp).value(), r);
            t[c] = orig - static_cast<T>(opt.eps);
            std::vector<Var<T>> vm;
            for (auto& w : work) vm.push_back(Var<T>::leaf(w, false));
            const T fm = project(op_closure(notape, vm).value(), r);
            t[c] = orig;
            const double numeric =
                (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * opt.eps);
            const double a = static_cast<double>(analytic[c]);
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                finite_ok = false;
                detail << "non-finite gradient at input " << vi << " coord " << c << "; ";
                continue;
            }
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > max_rel) {
                max_rel = rel;
                if (rel > opt.tol)
                    detail << "input " << vi << " coord " << c << ": analytic " << a
                           << " numeric " << numeric << " rel " << rel << "; ";
            }
        }
    }
    rep.max_rel_err = max_rel;
    rep.pass = finite_ok && max_rel <= opt.tol;
    rep.detail = detail.str();
    return rep;
}

template GradCheckReport grad_check<double>(
    const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>&,
    const std::vector<Tensor<double>>&, GradCheckOptions);
template GradCheckReport grad_check<float>(
    const std::function<Var<float>(Tape<float>&, std::vector<Var<float>>&)>&,
    const std::vector<Tensor<float>>&, GradCheckOptions);

}  // namespace uvmb
