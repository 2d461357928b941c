#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "uvmb/nn.hpp"
#include "uvmb/scan.hpp"
#include "uvmb/ssm.hpp"
#include "uvmb/verify.hpp"
#include "test_util.hpp"

using namespace uvmb;
using tu::leaf;
using tu::max_abs_diff;
using tu::randt;

namespace {
using D = double;

// Brute-force order builder: sort grid cells by (key, row).
std::vector<int64_t> sort_order(int H, int W, const std::function<int(int, int)>& key) {
    std::vector<std::pair<std::pair<int, int>, int64_t>> cells;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) cells.push_back({{key(r, c), r}, int64_t(r) * W + c});
    std::stable_sort(cells.begin(), cells.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<int64_t> perm;
    for (const auto& cell : cells) perm.push_back(cell.second);
    return perm;
}

}  // namespace

TEST_CASE("scan order conventions") {
    SUBCASE("2x2 row-major and column-major") {
        CHECK(scan::scan_order(scan::Direction::horizontal, false, 2, 2).perm ==
              std::vector<int64_t>{0, 1, 2, 3});
        CHECK(scan::scan_order(scan::Direction::vertical, false, 2, 2).perm ==
              std::vector<int64_t>{0, 2, 1, 3});
    }
    SUBCASE("3x3 antidiagonal matches the (r+c, r) sort oracle") {
        const auto oracle = sort_order(3, 3, [](int r, int c) { return r + c; });
        CHECK(oracle == std::vector<int64_t>{0, 1, 3, 2, 4, 6, 5, 7, 8});
        CHECK(scan::scan_order(scan::Direction::antidiagonal, false, 3, 3).perm == oracle);
    }
    SUBCASE("diagonal matches the (r-c+W-1, r) sort oracle on random sizes") {
        for (auto [H, W] : {std::pair{3, 3}, {2, 5}, {7, 4}}) {
            const auto oracle =
                sort_order(H, W, [W = W](int r, int c) { return r - c + W - 1; });
            CHECK(scan::scan_order(scan::Direction::diagonal, false, H, W).perm == oracle);
        }
    }
}

TEST_CASE("scan property suite") {
    for (const auto& r : verify_scan()) {
        INFO(r.name << " " << r.detail);
        CHECK(r.pass);
    }
}

TEST_CASE("permute_tokens") {
    Tape<D> tape(false);
    SUBCASE("row-major order is the identity") {
        tu::Rng rng(3);
        Tensor<D> x = randt(rng, {6, 2});
        const auto o = scan::scan_order(scan::Direction::horizontal, false, 2, 3);
        auto y = scan::permute_tokens(tape, leaf(x), o, false);
        CHECK(max_abs_diff(y.value(), x) == 0.0);
    }
    SUBCASE("column-major gather on a 2x2 grid") {
        Tensor<D> x({4, 1}, {10, 11, 12, 13});  // a b c d
        const auto o = scan::scan_order(scan::Direction::vertical, false, 2, 2);
        auto y = scan::permute_tokens(tape, leaf(x), o, false);
        CHECK(y.value()[0] == 10);  // a
        CHECK(y.value()[1] == 12);  // c
        CHECK(y.value()[2] == 11);  // b
        CHECK(y.value()[3] == 13);  // d
    }
    SUBCASE("length mismatch") {
        Tensor<D> x({5, 1});
        const auto o = scan::scan_order(scan::Direction::horizontal, false, 2, 3);
        CHECK_THROWS_AS(scan::permute_tokens(tape, leaf(x), o, false), ShapeError);
    }
}

TEST_CASE("multi_scan_aggregate behaviour") {
    Tape<D> tape(false);
    tu::Rng rng(9);
    SUBCASE("single-token grid equals one scan step") {
        const int64_t Dd = 3, N = 2;
        Tensor<D> A = randt(rng, {Dd, N}, -2.0, -0.1);
        Tensor<D> delta = randt(rng, {1, 1, Dd}, 0.05, 1.0);
        Tensor<D> Bm = randt(rng, {1, 1, N});
        Tensor<D> Cm = randt(rng, {1, 1, N});
        Tensor<D> x = randt(rng, {1, 1, Dd});
        auto y = scan::multi_scan_aggregate(tape, leaf(A), leaf(delta), leaf(Bm), leaf(Cm),
                                            leaf(x), 1, 1);
        auto [abar, bbar] = ssm::zoh_discretize(tape, leaf(A), leaf(delta.reshaped({1, Dd})),
                                                leaf(Bm.reshaped({1, N})));
        auto y1 = ssm::ssm_scan(tape, abar, bbar, leaf(Cm.reshaped({1, N})),
                                leaf(x.reshaped({1, Dd})));
        CHECK(max_abs_diff(y.value().reshaped({1, Dd}), y1.value()) < 1e-12);
    }
    SUBCASE("zero input maps to zero") {
        Tensor<D> A = randt(rng, {2, 2}, -1.0, -0.1);
        Tensor<D> delta = randt(rng, {1, 12, 2}, 0.05, 1.0);
        Tensor<D> Bm = randt(rng, {1, 12, 2});
        Tensor<D> Cm = randt(rng, {1, 12, 2});
        Tensor<D> x({1, 12, 2});
        auto y = scan::multi_scan_aggregate(tape, leaf(A), leaf(delta), leaf(Bm), leaf(Cm),
                                            leaf(x), 3, 4);
        CHECK(y.value().abs_max() == 0.0);
    }
    SUBCASE("aggregate of a rotated input is the rotated aggregate (shared LTI params)") {
        // The direction set is closed under 180-degree rotation (the full
        // reversal of every order), so the aggregate commutes with it.
        const int H = 3, W = 3;
        const int64_t L = H * W, Dd = 2, N = 2;
        Tensor<D> A = randt(rng, {Dd, N}, -1.5, -0.1);
        Tensor<D> x = randt(rng, {1, L, Dd});
        Tensor<D> delta0 = randt(rng, {1, 1, Dd}, 0.05, 0.8);
        Tensor<D> B0 = randt(rng, {1, 1, N});
        Tensor<D> C0 = randt(rng, {1, 1, N});
        Tensor<D> delta({1, L, Dd}), Bm({1, L, N}), Cm({1, L, N});
        for (int64_t l = 0; l < L; ++l) {
            for (int64_t d = 0; d < Dd; ++d) delta.at({0, l, d}) = delta0.at({0, 0, d});
            for (int64_t n = 0; n < N; ++n) {
                Bm.at({0, l, n}) = B0.at({0, 0, n});
                Cm.at({0, l, n}) = C0.at({0, 0, n});
            }
        }
        auto rot180 = [&](const Tensor<D>& t) {
            Tensor<D> o(t.shape());
            const int64_t Dch = t.size(2);
            for (int64_t l = 0; l < L; ++l)
                for (int64_t d = 0; d < Dch; ++d) o.at({0, L - 1 - l, d}) = t.at({0, l, d});
            return o;
        };
        auto y = scan::multi_scan_aggregate(tape, leaf(A), leaf(delta), leaf(Bm), leaf(Cm),
                                            leaf(x), H, W)
                     .value();
        auto y_rot = scan::multi_scan_aggregate(tape, leaf(A), leaf(delta), leaf(Bm), leaf(Cm),
                                                leaf(rot180(x)), H, W)
                         .value();
        CHECK(max_abs_diff(rot180(y), y_rot) < 1e-5);
    }
}

TEST_CASE("per-direction parameterization is wired and trains the same shapes") {
    tu::Rng rng(31);
    nn::SsmMixer<D> shared(4, 2, true, false, rng);
    tu::Rng rng2(31);
    nn::SsmMixer<D> perdir(4, 2, true, true, rng2);
    Tensor<D> tokens = randt(rng, {1, 9, 4});
    Tape<D> tape(false);
    auto ys = shared.forward(tape, leaf(tokens), 3, 3);
    auto yp = perdir.forward(tape, leaf(tokens), 3, 3);
    CHECK(ys.value().same_shape(yp.value()));
    nn::NamedParams<D> ps, pp;
    shared.collect("m", ps);
    perdir.collect("m", pp);
    CHECK(pp.size() > ps.size());  // eight projection sets instead of one
}
