#include "doctest.h"

#include <cmath>

#include "uvmb/ops.hpp"
#include "test_util.hpp"

using namespace uvmb;
using tu::expect_grad_ok;
using tu::leaf;
using tu::max_abs_diff;
using tu::randt;

namespace {
using D = double;

// Direct six-nested-loop cross-correlation, the conv oracle for this file.
Tensor<D> conv_oracle(const Tensor<D>& x, const Tensor<D>& w, const Tensor<D>& b, int stride,
                      int pad) {
    const int64_t B = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t Co = w.size(0), kh = w.size(2), kw = w.size(3);
    const int64_t OH = (H + 2 * pad - kh) / stride + 1, OW = (W + 2 * pad - kw) / stride + 1;
    Tensor<D> y({B, Co, OH, OW});
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    D acc = b.numel() ? b[co] : 0.0;
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t u = 0; u < kh; ++u)
                            for (int64_t v = 0; v < kw; ++v) {
                                const int64_t ih = oh * stride - pad + u;
                                const int64_t iw = ow * stride - pad + v;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at({bi, ci, ih, iw}) * w.at({co, ci, u, v});
                            }
                    y.at({bi, co, oh, ow}) = acc;
                }
    return y;
}

D dot(const Tensor<D>& a, const Tensor<D>& b) {
    D s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor<D>({2, 3}, {1.0, 2.0}), ShapeError);
    CHECK_THROWS_AS(Tensor<D>({2, 0}), ShapeError);
    Tensor<D> t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.all_finite());
}

TEST_CASE("linear matches hand results") {
    Tape<D> tape(false);
    SUBCASE("identity weight") {
        Tensor<D> x({1, 2}, {1, 2});
        Tensor<D> w({2, 2}, {1, 0, 0, 1});
        Tensor<D> b({2});
        auto y = ops::linear(tape, leaf(x), leaf(w), leaf(b));
        CHECK(y.value()[0] == 1.0);
        CHECK(y.value()[1] == 2.0);
    }
    SUBCASE("zero input broadcasts the bias") {
        Tensor<D> x({3, 2});
        Tensor<D> w({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
        Tensor<D> b({4}, {9, 8, 7, 6});
        auto y = ops::linear(tape, leaf(x), leaf(w), leaf(b));
        for (int64_t r = 0; r < 3; ++r)
            for (int64_t c = 0; c < 4; ++c) CHECK(y.value().at({r, c}) == b[c]);
    }
    SUBCASE("hand matrix multiply checked against a brute-force loop") {
        Tensor<D> x({1, 2}, {1, 2});
        Tensor<D> w({2, 2}, {1, 0, 1, 1});
        Tensor<D> b({2}, {1, 1});
        D expect[2];
        for (int j = 0; j < 2; ++j) {
            expect[j] = b[j];
            for (int i = 0; i < 2; ++i) expect[j] += x[i] * w.at({i, j});
        }
        CHECK(expect[0] == 4.0);
        CHECK(expect[1] == 3.0);
        auto y = ops::linear(tape, leaf(x), leaf(w), leaf(b));
        CHECK(y.value()[0] == expect[0]);
        CHECK(y.value()[1] == expect[1]);
    }
    SUBCASE("shape mismatch") {
        Tensor<D> x({1, 3});
        Tensor<D> w({2, 2});
        CHECK_THROWS_AS(ops::linear(tape, leaf(x), leaf(w), Var<D>()), ShapeError);
    }
    SUBCASE("gradients") {
        Rng rng(5);
        expect_grad_ok(
            [](Tape<D>& t, std::vector<Var<D>>& v) { return ops::linear(t, v[0], v[1], v[2]); },
            {randt(rng, {3, 4}), randt(rng, {4, 2}), randt(rng, {2})});
    }
}

TEST_CASE("conv2d against the direct-loop oracle") {
    Tape<D> tape(false);
    SUBCASE("1x1 unit kernel is the identity") {
        Rng rng(1);
        Tensor<D> x = randt(rng, {1, 1, 3, 4});
        Tensor<D> w({1, 1, 1, 1}, {1.0});
        auto y = ops::conv2d(tape, leaf(x), leaf(w), Var<D>(), 1, 0, 1);
        CHECK(max_abs_diff(y.value(), x.reshaped({1, 1, 3, 4})) == 0.0);
    }
    SUBCASE("all-ones 3x3 kernel on a constant image gives 9c inside") {
        const D c = 0.7;
        Tensor<D> x = Tensor<D>::full({1, 1, 5, 5}, c);
        Tensor<D> w = Tensor<D>::ones({1, 1, 3, 3});
        auto y = ops::conv2d(tape, leaf(x), leaf(w), Var<D>(), 1, 1, 1);
        CHECK(y.value().at({0, 0, 2, 2}) == doctest::Approx(9 * c));
    }
    SUBCASE("random instance matches the oracle") {
        Rng rng(2);
        Tensor<D> x = randt(rng, {1, 2, 5, 5});
        Tensor<D> w = randt(rng, {3, 2, 3, 3});
        Tensor<D> b = randt(rng, {3});
        for (int stride : {1, 2})
            for (int pad : {0, 1}) {
                if (5 + 2 * pad < 3) continue;
                auto y = ops::conv2d(tape, leaf(x), leaf(w), leaf(b), stride, pad, 1);
                CHECK(max_abs_diff(y.value(), conv_oracle(x, w, b, stride, pad)) < 1e-6);
            }
    }
    SUBCASE("kernel larger than padded input") {
        Tensor<D> x({1, 1, 2, 2});
        Tensor<D> w({1, 1, 5, 5});
        CHECK_THROWS_AS(ops::conv2d(tape, leaf(x), leaf(w), Var<D>(), 1, 0, 1), ShapeError);
    }
    SUBCASE("channels must divide groups") {
        Tensor<D> x({1, 3, 4, 4});
        Tensor<D> w({2, 1, 3, 3});
        CHECK_THROWS_AS(ops::conv2d(tape, leaf(x), leaf(w), Var<D>(), 1, 1, 2), ShapeError);
    }
}

TEST_CASE("conv_transpose2d") {
    Tape<D> tape(false);
    SUBCASE("single pixel spreads through a 2x2 kernel") {
        Tensor<D> x({1, 1, 1, 1}, {1.0});
        Tensor<D> w = Tensor<D>::ones({1, 1, 2, 2});
        auto y = ops::conv_transpose2d(tape, leaf(x), leaf(w), Var<D>(), 2, 0);
        CHECK(y.value().shape() == Shape{1, 1, 2, 2});
        for (int64_t i = 0; i < 4; ++i) CHECK(y.value()[i] == 1.0);
    }
    SUBCASE("zero input leaves only the bias") {
        Tensor<D> x({1, 2, 3, 3});
        Tensor<D> w({2, 3, 2, 2});
        Tensor<D> b({3}, {1, 2, 3});
        auto y = ops::conv_transpose2d(tape, leaf(x), leaf(w), leaf(b), 2, 0);
        for (int64_t q = 0; q < 3; ++q)
            for (int64_t i = 0; i < 6 * 6; ++i) CHECK(y.value()[q * 36 + i] == b[q]);
    }
    SUBCASE("adjoint identity with conv2d under shared weights") {
        // <conv2d(x), y> == <x, conv_transpose2d(y)> over random instances
        Rng rng(3);
        for (int trial = 0; trial < 5; ++trial) {
            const int stride = trial % 2 + 1, pad = trial % 2;
            Tensor<D> x = randt(rng, {1, 2, 4, 4});
            Tensor<D> w = randt(rng, {3, 2, 3, 3});
            auto cx = ops::conv2d(tape, leaf(x), leaf(w), Var<D>(), stride, pad, 1);
            Tensor<D> y = randt(rng, cx.value().shape());
            auto ty = ops::conv_transpose2d(tape, leaf(y), leaf(w), Var<D>(), stride, pad);
            REQUIRE(ty.value().same_shape(x));
            CHECK(std::abs(dot(cx.value(), y) - dot(x, ty.value())) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm") {
    Tape<D> tape(false);
    SUBCASE("constant channel vector maps to zeros") {
        Tensor<D> x = Tensor<D>::full({2, 4}, 3.25);
        auto y = ops::layer_norm(tape, leaf(x), leaf(Tensor<D>::ones({4})),
                                 leaf(Tensor<D>({4})), 1e-5);
        CHECK(y.value().abs_max() == 0.0);
    }
    SUBCASE("zero gamma broadcasts beta") {
        Rng rng(4);
        Tensor<D> x = randt(rng, {3, 4});
        Tensor<D> beta({4}, {1, 2, 3, 4});
        auto y = ops::layer_norm(tape, leaf(x), leaf(Tensor<D>({4})), leaf(beta), 1e-5);
        for (int64_t r = 0; r < 3; ++r)
            for (int64_t c = 0; c < 4; ++c) CHECK(y.value().at({r, c}) == beta[c]);
    }
    SUBCASE("two-point row normalizes to +-1") {
        // mean 2, biased variance 1 -> (x - mean)/sqrt(var) = [-1, 1]
        Tensor<D> x({1, 2}, {1, 3});
        auto y = ops::layer_norm(tape, leaf(x), leaf(Tensor<D>::ones({2})),
                                 leaf(Tensor<D>({2})), 1e-12);
        CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-6));
        CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("gamma size mismatch") {
        Tensor<D> x({2, 4});
        CHECK_THROWS_AS(ops::layer_norm(tape, leaf(x), leaf(Tensor<D>::ones({3})),
                                        leaf(Tensor<D>({3})), 1e-5),
                        ShapeError);
    }
}

TEST_CASE("activations") {
    Tape<D> tape(false);
    Tensor<D> zero({1});
    CHECK(ops::activation(tape, leaf(zero), ops::Act::silu).value()[0] == 0.0);
    CHECK(ops::activation(tape, leaf(zero), ops::Act::gelu).value()[0] == 0.0);
    CHECK(ops::activation(tape, leaf(zero), ops::Act::softplus).value()[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor<D> big({1}, {30.0});
    CHECK(std::abs(ops::activation(tape, leaf(big), ops::Act::softplus).value()[0] - 30.0) <
          1e-9);

    Tensor<D> one({1}, {1.0});
    CHECK(ops::activation(tape, leaf(one), ops::Act::silu).value()[0] ==
          doctest::Approx(0.7310585786300049).epsilon(1e-12));

    SUBCASE("finite on large-magnitude inputs") {
        Tensor<D> x({4}, {1e3, -1e3, 999.0, -999.0});
        for (auto kind : {ops::Act::silu, ops::Act::gelu, ops::Act::softplus})
            CHECK(ops::activation(tape, leaf(x), kind).value().all_finite());
    }
}

TEST_CASE("bilinear_sample") {
    Tape<D> tape(false);
    Tensor<D> map({1, 2, 2}, {0, 1, 2, 3});
    SUBCASE("integer coordinates reproduce pixels exactly") {
        Tensor<D> pts({4, 2}, {0, 0, 0, 1, 1, 0, 1, 1});
        auto y = ops::bilinear_sample(tape, leaf(map), leaf(pts));
        CHECK(y.value()[0] == 0.0);
        CHECK(y.value()[1] == 1.0);
        CHECK(y.value()[2] == 2.0);
        CHECK(y.value()[3] == 3.0);
    }
    SUBCASE("center point averages the four corners") {
        Tensor<D> pts({1, 2}, {0.5, 0.5});
        auto y = ops::bilinear_sample(tape, leaf(map), leaf(pts));
        CHECK(y.value()[0] == doctest::Approx(1.5));
    }
    SUBCASE("far outside contributes zero") {
        Tensor<D> pts({1, 2}, {-5.0, -5.0});
        auto y = ops::bilinear_sample(tape, leaf(map), leaf(pts));
        CHECK(y.value()[0] == 0.0);
    }
}

TEST_CASE("bilinear_resize") {
    Tape<D> tape(false);
    SUBCASE("same size is the identity") {
        Rng rng(6);
        Tensor<D> x = randt(rng, {1, 2, 3, 5});
        auto y = ops::bilinear_resize(tape, leaf(x), 3, 5);
        CHECK(max_abs_diff(y.value(), x) < 1e-7);
    }
    SUBCASE("constants stay constant at any size") {
        Tensor<D> x = Tensor<D>::full({1, 1, 4, 4}, 2.5);
        for (auto [oh, ow] : {std::pair{7, 3}, {2, 9}, {1, 1}}) {
            auto y = ops::bilinear_resize(tape, leaf(x), oh, ow);
            CHECK(max_abs_diff(y.value(), Tensor<D>::full({1, 1, oh, ow}, 2.5)) < 1e-12);
        }
    }
    SUBCASE("2x2 downsampled to 1x1 is the mean") {
        Tensor<D> x({1, 1, 2, 2}, {0, 1, 2, 3});
        auto y = ops::bilinear_resize(tape, leaf(x), 1, 1);
        CHECK(y.value()[0] == doctest::Approx(1.5));
    }
}

TEST_CASE("grad_check behaviour") {
    SUBCASE("detects a deliberately doubled backward") {
        Tensor<D> x({5}, {2.5, 3.0, -2.0, 1.5, 4.0});
        auto bad = [](Tape<D>& t, std::vector<Var<D>>& v) {
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
                        xg[i] += 2.0 * s * (1.0 + xn->value[i] * (1.0 - s)) * on->grad[i];
                    }
                });
            }
            return Var<D>(node);
        };
        GradCheckOptions opt;
        opt.seed = 11;
        const GradCheckReport rep = grad_check<D>(bad, {x}, opt);
        CHECK_FALSE(rep.pass);
        CHECK(rep.max_rel_err > 0.4);
        CHECK(rep.max_rel_err <= 0.51);
    }
    SUBCASE("silu passes") {
        Rng rng(12);
        expect_grad_ok(
            [](Tape<D>& t, std::vector<Var<D>>& v) {
                return ops::activation(t, v[0], ops::Act::silu);
            },
            {randt(rng, {3, 4}, -2.0, 2.0)});
    }
}

TEST_CASE("structural ops") {
    Tape<D> tape(false);
    Rng rng(13);
    SUBCASE("permute axes round trip") {
        Tensor<D> x = randt(rng, {2, 3, 4, 5});
        Tape<D> t(false);
        auto p = ops::permute_axes(t, leaf(x), {0, 2, 3, 1});
        CHECK(p.value().shape() == Shape{2, 4, 5, 3});
        auto back = ops::permute_axes(t, p, {0, 3, 1, 2});
        CHECK(max_abs_diff(back.value(), x) == 0.0);
    }
    SUBCASE("concat/slice channels") {
        Tensor<D> a = randt(rng, {2, 3, 2, 2}), b = randt(rng, {2, 1, 2, 2});
        auto cat = ops::concat_channels(tape, leaf(a), leaf(b));
        CHECK(cat.value().shape() == Shape{2, 4, 2, 2});
        auto sa = ops::slice_channels(tape, cat, 0, 3);
        auto sb = ops::slice_channels(tape, cat, 3, 4);
        CHECK(max_abs_diff(sa.value(), a) == 0.0);
        CHECK(max_abs_diff(sb.value(), b) == 0.0);
    }
    SUBCASE("structural gradients") {
        expect_grad_ok(
            [](Tape<D>& t, std::vector<Var<D>>& v) {
                auto cat = ops::concat_channels(t, v[0], v[1]);
                auto p = ops::permute_axes(t, cat, {0, 2, 3, 1});
                return ops::reshape(t, p, {static_cast<int64_t>(p.value().numel())});
            },
            {randt(rng, {1, 2, 2, 3}), randt(rng, {1, 1, 2, 3})});
        expect_grad_ok(
            [](Tape<D>& t, std::vector<Var<D>>& v) { return ops::expand_rows(t, v[0], 2, 3); },
            {randt(rng, {4})});
    }
}
