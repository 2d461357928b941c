#include "doctest.h"

#include <cmath>

#include "uvmb/deform.hpp"
#include "uvmb/nn.hpp"
#include "uvmb/ops.hpp"
#include "uvmb/verify.hpp"
#include "test_util.hpp"

using namespace uvmb;
using tu::expect_grad_ok;
using tu::leaf;
using tu::randt;

namespace {
using D = double;
}

TEST_CASE("sampling grid") {
    const auto g1 = deform::sampling_grid(1);
    REQUIRE(g1.size() == 1);
    CHECK(g1[0] == std::pair<int, int>{0, 0});
    const auto g9 = deform::sampling_grid(9);
    REQUIRE(g9.size() == 9);
    CHECK(g9[0] == std::pair<int, int>{-1, -1});
    CHECK(g9[4] == std::pair<int, int>{0, 0});
    CHECK(g9[8] == std::pair<int, int>{1, 1});
    CHECK_THROWS_AS(deform::sampling_grid(4), ShapeError);
}

TEST_CASE("deformable aggregation properties") {
    for (const auto& r : verify_deform()) {
        INFO(r.name << " " << r.detail);
        CHECK(r.pass);
    }
}

TEST_CASE("single-point aggregation equals a bilinear sample") {
    // G=1, K=1, offset (0.5, 0.5) from p0=(0,0) on [[0,1],[2,3]] -> 1.5
    Tape<D> tape(false);
    Tensor<D> x({1, 1, 2, 2}, {0, 1, 2, 3});
    Tensor<D> off = Tensor<D>::full({1, 2, 2, 2}, 0.5);
    Tensor<D> mod = Tensor<D>::ones({1, 1, 2, 2});
    Tensor<D> wg = Tensor<D>::ones({1, 1, 1});
    auto y = deform::dcn_aggregate(tape, leaf(x), leaf(off), leaf(mod), leaf(wg), 1, 1);
    CHECK(y.value().at({0, 0, 0, 0}) == doctest::Approx(1.5));
    // oracle: the same location through bilinear_sample directly
    Tensor<D> pts({1, 2}, {0.5, 0.5});
    auto s = ops::bilinear_sample(tape, leaf(x.reshaped({1, 2, 2})), leaf(pts));
    CHECK(y.value().at({0, 0, 0, 0}) == doctest::Approx(s.value()[0]));
}

TEST_CASE("group mismatch is rejected") {
    Tape<D> tape(false);
    Tensor<D> x({1, 3, 2, 2});
    Tensor<D> off({1, 2 * 2 * 9, 2, 2});
    Tensor<D> mod({1, 2 * 9, 2, 2});
    Tensor<D> wg({2, 1, 1});
    CHECK_THROWS_AS(deform::dcn_aggregate(tape, leaf(x), leaf(off), leaf(mod), leaf(wg), 2, 9),
                    ShapeError);
}

TEST_CASE("offset head starts as a plain aggregation") {
    Rng rng(6);
    nn::DeformMixer<D> mixer(8, 2, 9, rng);
    Tensor<D> tokens = randt(rng, {1, 16, 8});
    Tape<D> tape(false);
    auto grid = nn::to_grid(tape, leaf(tokens), 4, 4);
    auto om = mixer.offset_head.forward(tape, grid);
    const int64_t gk = 2 * 9;
    auto off = ops::slice_channels(tape, om, 0, 2 * gk);
    auto mod = ops::slice_channels(tape, om, 2 * gk, 3 * gk);
    CHECK(off.value().abs_max() == 0.0);
    for (int64_t i = 0; i < mod.value().numel(); ++i) CHECK(mod.value()[i] == 1.0);
    SUBCASE("offset and modulation channel counts follow G*K") {
        CHECK(om.value().size(1) == 3 * gk);
        CHECK(off.value().size(1) == 2 * 2 * 9);  // 72 for G=4,K=9 scales the same way
        CHECK(mod.value().size(1) == 2 * 9);
    }
}

TEST_CASE("dcn gradcheck (spot)") {
    Rng rng(14);
    Tensor<D> off({1, 2 * 1 * 9, 3, 3});
    for (int64_t i = 0; i < off.numel(); ++i)
        off[i] = std::floor(rng.uniform(-1.0, 1.0)) + rng.uniform(0.1, 0.9);
    expect_grad_ok(
        [](Tape<D>& t, std::vector<Var<D>>& v) {
            return deform::dcn_aggregate(t, v[0], v[1], v[2], v[3], 1, 9);
        },
        {randt(rng, {1, 2, 3, 3}), off, randt(rng, {1, 9, 3, 3}, 0.2, 1.2),
         randt(rng, {1, 2, 2})},
        5);
}
