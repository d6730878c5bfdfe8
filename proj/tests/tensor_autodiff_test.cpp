#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ftlab/autodiff.hpp"
#include "ftlab/tensor.hpp"

#include "ftlab/gradcheck.hpp"

using namespace ftlab;

namespace {

template <typename Real>
Tensor<Real> t2(std::vector<Real> v, std::size_t r, std::size_t c) {
    return Tensor<Real>::from({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("tensor shape and data agree") {
    CHECK_THROWS_AS(Tensor<float>::from({2, 3}, {1, 2, 3}), DimensionError);
    auto t = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
    CHECK(t.numel() == 4);
    CHECK(t.at(1, 0) == 3.0f);
}

TEST_CASE("debug verification flags non-finite values") {
    debug_checks() = true;
    auto a = t2<float>({1, 2, 3, 4}, 2, 2);
    auto b = t2<float>({1e30f, 1e30f, 1e30f, 1e30f}, 2, 2);
    auto big = scale(b, 1e30f);  // overflows to inf before the matmul
    CHECK_THROWS_AS(matmul(a, big), FiniteError);
    debug_checks() = false;
}

TEST_CASE("matmul identity and hand-computed product") {
    auto identity = t2<double>({1, 0, 0, 1}, 2, 2);
    auto b = t2<double>({3, 4, 5, 6}, 2, 2);
    auto ib = matmul(identity, b);
    CHECK(ib.at(0, 0) == 3.0);
    CHECK(ib.at(0, 1) == 4.0);
    CHECK(ib.at(1, 0) == 5.0);
    CHECK(ib.at(1, 1) == 6.0);

    auto a = t2<double>({1, 2, 3, 4}, 2, 2);
    auto c = t2<double>({5, 6, 7, 8}, 2, 2);
    auto ac = matmul(a, c);
    CHECK(ac.at(0, 0) == 19.0);
    CHECK(ac.at(0, 1) == 22.0);
    CHECK(ac.at(1, 0) == 43.0);
    CHECK(ac.at(1, 1) == 50.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({2, 3});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("cross_entropy_masked examples") {
    SUBCASE("near-perfect prediction") {
        // +20 on the target logit
        auto logits = t2<float>({20, 0, 0, 0, 0, 20, 0, 0}, 2, 4);
        auto loss = cross_entropy_masked(logits, {0, 1}, {true, true});
        CHECK(loss.item() < 1e-6f);
    }
    SUBCASE("uniform logits give ln V") {
        auto logits = Tensor<double>::zeros({3, 4});
        auto loss = cross_entropy_masked(logits, {2, 0, 3}, {true, true, true});
        CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    }
    SUBCASE("all-false mask is an error") {
        auto logits = Tensor<float>::zeros({2, 4});
        CHECK_THROWS_AS(cross_entropy_masked(logits, {0, 1}, {false, false}), Error);
    }
    SUBCASE("target out of range") {
        auto logits = Tensor<float>::zeros({1, 4});
        CHECK_THROWS_AS(cross_entropy_masked(logits, {4}, {true}), IndexError);
    }
    SUBCASE("invariant to adding a row constant") {
        Rng rng(7);
        auto logits = Tensor<float>::randn({3, 6}, rng, 2.0f);
        auto shifted = logits.clone();
        for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t c = 0; c < 6; ++c) shifted.at(r, c) += 11.5f + static_cast<float>(r);
        }
        std::vector<std::uint32_t> targets{1, 5, 2};
        std::vector<bool> mask{true, false, true};
        const float a = cross_entropy_masked(logits, targets, mask).item();
        const float b = cross_entropy_masked(shifted, targets, mask).item();
        CHECK(std::abs(a - b) < 1e-5f);
    }
}

TEST_CASE("kl_divergence_rows examples") {
    SUBCASE("identical logits give exactly zero") {
        Rng rng(3);
        auto logits = Tensor<float>::randn({4, 8}, rng, 3.0f);
        auto kl = kl_divergence_rows(logits, logits, {true, true, true, true});
        CHECK(kl.item() == 0.0f);
    }
    SUBCASE("hand-computed two-symbol case") {
        // p over logits (ln 3, 0) -> (0.75, 0.25); q uniform
        auto p = t2<double>({std::log(3.0), 0.0}, 1, 2);
        auto q = t2<double>({0.0, 0.0}, 1, 2);
        auto kl = kl_divergence_rows(p, q, {true});
        const double expected = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
        CHECK(kl.item() == doctest::Approx(expected).epsilon(1e-12));
        CHECK(kl.item() == doctest::Approx(0.13081).epsilon(1e-4));
    }
    SUBCASE("nonnegative on random pairs") {
        Rng rng(11);
        for (int i = 0; i < 50; ++i) {
            auto p = Tensor<float>::randn({3, 7}, rng, 2.5f);
            auto q = Tensor<float>::randn({3, 7}, rng, 2.5f);
            auto kl = kl_divergence_rows(p, q, {true, true, true});
            CHECK(kl.item() >= -1e-6f);
        }
    }
    SUBCASE("shape mismatch") {
        auto p = Tensor<float>::zeros({2, 4});
        auto q = Tensor<float>::zeros({2, 5});
        CHECK_THROWS_AS(kl_divergence_rows(p, q, {true, true}), DimensionError);
    }
}

TEST_CASE("layer_norm examples") {
    auto gain1 = Tensor<double>::full({2}, 1.0);
    auto bias0 = Tensor<double>::zeros({2});
    SUBCASE("constant row maps to zero under epsilon stabilization") {
        auto x = t2<double>({5, 5}, 1, 2);
        auto y = layer_norm(x, gain1, bias0);
        CHECK(y.at(0, 0) == 0.0);
        CHECK(y.at(0, 1) == 0.0);
    }
    SUBCASE("row (1,3) normalizes to (-1,1)") {
        auto x = t2<double>({1, 3}, 1, 2);
        auto y = layer_norm(x, gain1, bias0, 1e-12);
        CHECK(y.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
        CHECK(y.at(0, 1) == doctest::Approx(1.0).epsilon(1e-5));
    }
    SUBCASE("zero gain leaves only the bias") {
        Rng rng(5);
        auto x = Tensor<double>::randn({3, 2}, rng, 1.0);
        auto gain0 = Tensor<double>::zeros({2});
        auto bias = t2<double>({0.5, -2.0}, 1, 2);
        auto biasv = Tensor<double>::from({2}, {0.5, -2.0});
        auto y = layer_norm(x, gain0, biasv);
        for (std::size_t r = 0; r < 3; ++r) {
            CHECK(y.at(r, 0) == 0.5);
            CHECK(y.at(r, 1) == -2.0);
        }
    }
}

TEST_CASE("backward populates and accumulates gradients") {
    SUBCASE("sum gives ones") {
        auto x = Tensor<float>::from({3}, {1, 2, 3}).set_requires_grad(true);
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto loss = sum(x);
        backward(loss);
        CHECK(x.grad() == std::vector<float>{1, 1, 1});
        backward(loss);  // repeated call accumulates
        CHECK(x.grad() == std::vector<float>{2, 2, 2});
    }
    SUBCASE("non-scalar loss is a shape error") {
        auto x = Tensor<float>::from({2}, {1, 2}).set_requires_grad(true);
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto y = scale(x, 2.0f);
        CHECK_THROWS_AS(backward(y), DimensionError);
    }
    SUBCASE("backward on a detached tensor is an error") {
        auto x = Tensor<float>::scalar(4.0f).set_requires_grad(true);
        CHECK_THROWS_AS(backward(x), Error);
        Tape<float>::NoGrad ng;
        auto y = sum(x);
        CHECK_THROWS_AS(backward(y), Error);
    }
    SUBCASE("backward is bitwise deterministic") {
        Rng rng(21);
        auto a = Tensor<float>::randn({6, 6}, rng, 1.0f);
        auto b = Tensor<float>::randn({6, 6}, rng, 1.0f);
        std::vector<float> grads[2];
        for (int run = 0; run < 2; ++run) {
            auto x = a.clone().set_requires_grad(true);
            Tape<float> tape;
            Tape<float>::Scope scope(tape);
            auto loss = sum_squares(matmul(x, b));
            backward(loss);
            grads[run] = x.grad();
        }
        CHECK(std::memcmp(grads[0].data(), grads[1].data(), grads[0].size() * sizeof(float)) == 0);
    }
}

TEST_CASE("gradients only reach requires_grad leaves") {
    auto x = Tensor<float>::from({2}, {1, 2}).set_requires_grad(true);
    auto frozen = Tensor<float>::from({2}, {3, 4});
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = sum(mul(x, frozen));
    backward(loss);
    CHECK(x.grad() == std::vector<float>{3, 4});
    CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("finite_difference_check on the quadratic is tight") {
    Rng rng(9);
    auto x = Tensor<double>::randn({4}, rng, 1.0);
    const double err = finite_difference_check<double>(
        [](const Tensor<double>& t) { return scale(sum_squares(t), 0.5); }, x, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("finite_difference_check flags a non-deterministic function") {
    auto x = Tensor<double>::from({2}, {1, 2});
    int calls = 0;
    CHECK_THROWS_AS(finite_difference_check<double>(
                        [&calls](const Tensor<double>& t) {
                            ++calls;
                            return scale(sum(t), 1.0 + 0.5 * calls);
                        },
                        x, 1e-5),
                    DeterminismError);
}

TEST_CASE("finite differences across the op battery (spot check)") {
    for (const auto& r : ftlab::gradcheck::run_battery<double>(3, 1e-5, 42)) {
        INFO(r.op);
        CHECK(r.max_error <= 1e-6);
    }
    for (const auto& r : ftlab::gradcheck::run_battery<float>(3, 1e-2f, 43)) {
        INFO(r.op);
        CHECK(r.max_error <= 1e-3);
    }
}
