#pragma once

// Finite-difference battery behind the grad-check verification surface:
// every
// differentiable op is wrapped into a scalar objective and its analytic
// gradient is compared against central differences on random small inputs.
//
// The metric is the max relative error over elements, so each instance is
// conditioned to keep true gradient elements bounded away from zero: at
// 32 bits an element whose gradient vanishes cannot be measured against
// rounding noise. Conditioning means bounded-magnitude weights, opposed
// logits and minimum-offset quadratics; inputs remain randomized.

#include <functional>
#include <string>
#include <vector>

#include "ftlab/autodiff.hpp"
#include "ftlab/regularizers.hpp"
#include "ftlab/rng.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab::gradcheck {

template <typename Real>
struct OpCheck {
    std::string name;
    // runs one random instance, returns the max relative error
    std::function<double(ftlab::Rng&, Real)> run;
};

/// Scalarize a tensor with fixed weights so every element of the gradient
/// carries signal.
template <typename Real>
ftlab::Tensor<Real> weighted_sum(const ftlab::Tensor<Real>& t, const ftlab::Tensor<Real>& w) {
    return ftlab::sum(ftlab::mul(t, w));
}

template <typename Real>
ftlab::Tensor<Real> rand_tensor(std::vector<std::size_t> shape, ftlab::Rng& rng, Real stddev = 1) {
    return ftlab::Tensor<Real>::randn(std::move(shape), rng, stddev);
}

/// Random signs, magnitudes in [0.5, 1.5].
template <typename Real>
ftlab::Tensor<Real> bounded_tensor(std::vector<std::size_t> shape, ftlab::Rng& rng) {
    auto t = ftlab::Tensor<Real>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        const Real sign = rng.next_bool(0.5) ? Real(1) : Real(-1);
        t.data()[i] = sign * (Real(0.5) + static_cast<Real>(rng.next_double()));
    }
    return t;
}

/// Magnitudes in [0.3, 1.3], all positive.
template <typename Real>
ftlab::Tensor<Real> positive_tensor(std::vector<std::size_t> shape, ftlab::Rng& rng) {
    auto t = ftlab::Tensor<Real>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = Real(0.3) + static_cast<Real>(rng.next_double());
    }
    return t;
}

/// Keeps elements away from the relu kink so central differences stay valid.
template <typename Real>
void avoid_kink(ftlab::Tensor<Real>& t, Real margin) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (std::abs(t.data()[i]) < margin) {
            t.data()[i] += t.data()[i] < 0 ? -margin : margin;
        }
    }
}

template <typename Real>
std::vector<OpCheck<Real>> op_battery() {
    using ftlab::Rng;
    using ftlab::Tensor;
    namespace f = ftlab;
    std::vector<OpCheck<Real>> ops;

    ops.push_back({"matmul_lhs", [](Rng& rng, Real eps) {
        auto b = positive_tensor<Real>({4, 3}, rng);
        auto w = positive_tensor<Real>({3, 3}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::matmul(x, b), w); },
            rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"matmul_rhs", [](Rng& rng, Real eps) {
        auto a = positive_tensor<Real>({3, 4}, rng);
        auto w = positive_tensor<Real>({3, 3}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::matmul(a, x), w); },
            rand_tensor<Real>({4, 3}, rng), eps);
    }});
    ops.push_back({"matmul_nt", [](Rng& rng, Real eps) {
        auto b = positive_tensor<Real>({5, 4}, rng);
        auto w = positive_tensor<Real>({3, 5}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::matmul_nt(x, b), w); },
            rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"add", [](Rng& rng, Real eps) {
        auto b = rand_tensor<Real>({3, 4}, rng);
        auto w = bounded_tensor<Real>({3, 4}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::add(x, b), w); },
            rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"sub", [](Rng& rng, Real eps) {
        auto b = rand_tensor<Real>({3, 4}, rng);
        auto w = bounded_tensor<Real>({3, 4}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::sub(b, x), w); },
            rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"mul", [](Rng& rng, Real eps) {
        auto b = bounded_tensor<Real>({3, 4}, rng);
        auto w = bounded_tensor<Real>({3, 4}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::mul(x, b), w); },
            rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"scale", [](Rng& rng, Real eps) {
        auto w = bounded_tensor<Real>({3, 4}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return weighted_sum(f::scale(x, Real(1.7)), w); },
            rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"relu", [](Rng& rng, Real eps) {
        auto x = rand_tensor<Real>({3, 4}, rng);
        avoid_kink(x, Real(16) * eps);
        auto w = bounded_tensor<Real>({3, 4}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& t) { return weighted_sum(f::relu(t), w); }, x, eps);
    }});
    ops.push_back({"add_row", [](Rng& rng, Real eps) {
        auto x = rand_tensor<Real>({3, 4}, rng);
        auto w = positive_tensor<Real>({3, 4}, rng);  // bias grad is a column sum
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& bias) { return weighted_sum(f::add_row(x, bias), w); },
            rand_tensor<Real>({4}, rng), eps);
    }});
    ops.push_back({"embedding_rows", [](Rng& rng, Real eps) {
        std::vector<std::uint32_t> ids{1, 0, 3, 1};
        auto w = positive_tensor<Real>({4, 3}, rng);  // id 1 gathers twice
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& table) {
                return weighted_sum(f::embedding_rows(table, ids), w);
            },
            rand_tensor<Real>({5, 3}, rng), eps);
    }});
    ops.push_back({"slice_concat_cols", [](Rng& rng, Real eps) {
        auto w = bounded_tensor<Real>({3, 6}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) {
                std::vector<Tensor<Real>> parts{f::slice_cols(x, 3, 6), f::slice_cols(x, 0, 3)};
                return weighted_sum(f::concat_cols(parts), w);
            },
            rand_tensor<Real>({3, 6}, rng), eps);
    }});
    ops.push_back({"causal_softmax", [](Rng& rng, Real eps) {
        // equal-magnitude alternating weights on the last row: each gradient
        // element is then +-2w * (opposite-parity mass), bounded below once
        // the scores are kept tight. Other rows' gradients are exactly zero,
        // which the metric handles exactly.
        auto w = Tensor<Real>::zeros({4, 4});
        for (std::size_t c = 0; c < 4; ++c) w.at(3, c) = (c % 2 == 0) ? Real(1.3) : Real(-1.3);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& s) {
                return weighted_sum(f::causal_softmax(s, Real(1)), w);
            },
            rand_tensor<Real>({4, 4}, rng, Real(0.3)), eps);
    }});
    ops.push_back({"layer_norm_x", [](Rng& rng, Real eps) {
        // gain pattern orthogonal to the row pattern and to the constant:
        // the projected gradient stays near gain/std, bounded away from zero
        auto gain = Tensor<Real>::zeros({4});
        const Real gain_pattern[4] = {2, 2, -2, -2};
        for (std::size_t c = 0; c < 4; ++c) gain.at(c) = gain_pattern[c];
        auto bias = rand_tensor<Real>({4}, rng);
        auto w = Tensor<Real>::full({2, 4}, Real(1));
        auto x = Tensor<Real>::zeros({2, 4});
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t c = 0; c < 4; ++c) {
                const Real base = (c % 2 == 0) ? Real(1.5) : Real(-1.5);
                x.at(r, c) = base + Real(0.1) * static_cast<Real>(rng.next_gaussian());
            }
        }
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& probe) {
                return weighted_sum(f::layer_norm(probe, gain, bias), w);
            },
            x, eps);
    }});
    ops.push_back({"layer_norm_gain_bias", [](Rng& rng, Real eps) {
        // alternating rows give normalized values near +-1, so the gain
        // gradient is a same-sign column sum
        auto x = Tensor<Real>::zeros({3, 4});
        for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t c = 0; c < 4; ++c) {
                const Real base = (c % 2 == 0) ? Real(1.5) : Real(-1.5);
                x.at(r, c) = base + Real(0.2) * static_cast<Real>(rng.next_gaussian());
            }
        }
        auto bias = rand_tensor<Real>({4}, rng);
        auto w = positive_tensor<Real>({3, 4}, rng);
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& gain) {
                return weighted_sum(f::layer_norm(x, gain, bias), w);
            },
            bounded_tensor<Real>({4}, rng), eps);
    }});
    ops.push_back({"cross_entropy_masked", [](Rng& rng, Real eps) {
        std::vector<std::uint32_t> targets{2, 0, 1};
        std::vector<bool> mask{true, false, true};
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& logits) {
                return f::cross_entropy_masked(logits, targets, mask);
            },
            rand_tensor<Real>({3, 3}, rng, Real(0.8)), eps);
    }});

    // Opposed two-symbol logits keep every probability gap (and so every
    // gradient element) bounded away from zero.
    auto opposed_logits = [](Rng& rng, Real sign) {
        auto t = Tensor<Real>::zeros({3, 2});
        for (std::size_t r = 0; r < 3; ++r) {
            t.at(r, 0) = sign * Real(1.2) + Real(0.3) * static_cast<Real>(rng.next_gaussian());
            t.at(r, 1) = -sign * Real(1.2) + Real(0.3) * static_cast<Real>(rng.next_gaussian());
        }
        return t;
    };
    ops.push_back({"kl_divergence_p", [opposed_logits](Rng& rng, Real eps) {
        auto q = opposed_logits(rng, Real(-1));
        std::vector<bool> mask{true, false, true};
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& p) { return f::kl_divergence_rows(p, q, mask); },
            opposed_logits(rng, Real(1)), eps);
    }});
    ops.push_back({"kl_divergence_q", [opposed_logits](Rng& rng, Real eps) {
        auto p = opposed_logits(rng, Real(1));
        std::vector<bool> mask{true, true, true};
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& q) { return f::kl_divergence_rows(p, q, mask); },
            opposed_logits(rng, Real(-1)), eps);
    }});
    ops.push_back({"sum", [](Rng& rng, Real eps) {
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return f::sum(x); }, rand_tensor<Real>({3, 4}, rng), eps);
    }});
    ops.push_back({"sum_squares", [](Rng& rng, Real eps) {
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& x) { return f::sum_squares(x); },
            bounded_tensor<Real>({3, 4}, rng), eps);
    }});

    // offsets with a minimum magnitude keep the quadratic's gradient
    // elements measurable
    auto offset_from = [](const Tensor<Real>& x, Rng& rng) {
        auto base = x.clone();
        for (std::size_t i = 0; i < base.numel(); ++i) {
            const Real sign = rng.next_bool(0.5) ? Real(1) : Real(-1);
            base.data()[i] += sign * (Real(0.5) + Real(0.5) * static_cast<Real>(rng.next_double()));
        }
        return base;
    };
    ops.push_back({"ldifs_distance", [offset_from](Rng& rng, Real eps) {
        auto x = rand_tensor<Real>({3, 8}, rng);
        std::map<std::size_t, Tensor<Real>> base;
        {
            auto shifted = offset_from(x, rng);
            base.emplace(0, f::slice_cols(shifted, 0, 4));
            base.emplace(2, f::slice_cols(shifted, 4, 8));
        }
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& probe) {
                std::map<std::size_t, Tensor<Real>> adapted;
                adapted.emplace(0, f::slice_cols(probe, 0, 4));
                adapted.emplace(2, f::slice_cols(probe, 4, 8));
                return f::ldifs_distance(adapted, base, true);
            },
            x, eps);
    }});
    ops.push_back({"composed_loss", [offset_from](Rng& rng, Real eps) {
        // ce + 0.1*kl + 1.0*ldifs over a shared logits input. Confident
        // logits keep ce small and the ldifs offsets dominate the gradient,
        // so no element sits near zero.
        std::vector<std::uint32_t> targets{1, 2, 0};
        std::vector<bool> mask{true, true, true};
        auto logits = rand_tensor<Real>({3, 3}, rng, Real(0.3));
        for (std::size_t r = 0; r < 3; ++r) logits.at(r, targets[r]) += Real(4);
        auto q = logits.clone();
        for (std::size_t i = 0; i < q.numel(); ++i) {
            q.data()[i] += Real(0.2) * static_cast<Real>(rng.next_gaussian());
        }
        auto ref = offset_from(logits, rng);
        ftlab::RegConfig cfg;
        cfg.lambda_kl = 0.1;
        cfg.lambda_ldifs = 1.0;
        return f::finite_difference_check<Real>(
            [&](const Tensor<Real>& probe) {
                auto ce = f::cross_entropy_masked(probe, targets, mask);
                auto kl = f::kl_divergence_rows(probe, q, mask);
                std::map<std::size_t, Tensor<Real>> adapted, base;
                adapted.emplace(0, probe);
                base.emplace(0, ref);
                auto ldifs = f::ldifs_distance(adapted, base, true);
                return f::composed_loss(ce, &kl, &ldifs, cfg);
            },
            logits, eps);
    }});
    return ops;
}

struct BatteryResult {
    std::string op;
    double max_error;
};

template <typename Real>
std::vector<BatteryResult> run_battery(int instances, Real eps, std::uint64_t seed) {
    std::vector<BatteryResult> results;
    for (auto& check : op_battery<Real>()) {
        ftlab::Rng rng(ftlab::derive_seed(seed, ftlab::fnv1a(check.name.data(), check.name.size())));
        double worst = 0;
        for (int i = 0; i < instances; ++i) worst = std::max(worst, check.run(rng, eps));
        results.push_back({check.name, worst});
    }
    return results;
}

}  // namespace ftlab::gradcheck
