#pragma once

// Reverse-mode automatic differentiation over Tensor. Ops record onto the
// thread-local active tape; backward replays the recorded nodes once, in
// reverse topological (= recording) order. Leaf gradients accumulate across
// backward calls; the caller resets them between optimizer steps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ftlab/errors.hpp"
#include "ftlab/tensor.hpp"
#include "ftlab/threading.hpp"

namespace ftlab {

namespace detail {

// kernels below this many multiply-adds are not worth a pool dispatch
inline constexpr std::size_t kParallelMacThreshold = 128 * 1024;

// out[m,n] (+)= a[m,k] * b[k,n]
template <typename Real>
void mm_nn(const Real* a, const Real* b, Real* out, std::size_t m, std::size_t k, std::size_t n) {
    auto rows = [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const Real* arow = a + i * k;
            Real* orow = out + i * n;
            for (std::size_t l = 0; l < k; ++l) {
                const Real av = arow[l];
                if (av == Real(0)) continue;
                const Real* brow = b + l * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    };
    if (m * k * n >= kParallelMacThreshold) {
        WorkerPool::instance().for_blocks(m, rows);
    } else {
        rows(0, m);
    }
}

// out[m,n] (+)= a[m,k] * b[n,k]^T
template <typename Real>
void mm_nt(const Real* a, const Real* b, Real* out, std::size_t m, std::size_t k, std::size_t n) {
    auto rows = [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const Real* arow = a + i * k;
            Real* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const Real* brow = b + j * k;
                Real acc = 0;
                for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
                orow[j] += acc;
            }
        }
    };
    if (m * k * n >= kParallelMacThreshold) {
        WorkerPool::instance().for_blocks(m, rows);
    } else {
        rows(0, m);
    }
}

// out[k,n] (+)= a[m,k]^T * b[m,n]. Parallel lanes own disjoint out-row
// blocks; the i-accumulation order per element matches the serial loop.
template <typename Real>
void mm_tn(const Real* a, const Real* b, Real* out, std::size_t m, std::size_t k, std::size_t n) {
    auto out_rows = [=](std::size_t l0, std::size_t l1) {
        for (std::size_t i = 0; i < m; ++i) {
            const Real* arow = a + i * k;
            const Real* brow = b + i * n;
            for (std::size_t l = l0; l < l1; ++l) {
                const Real av = arow[l];
                if (av == Real(0)) continue;
                Real* orow = out + l * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    };
    if (m * k * n >= kParallelMacThreshold) {
        WorkerPool::instance().for_blocks(k, out_rows);
    } else {
        out_rows(0, k);
    }
}

}  // namespace detail

template <typename Real>
class TapeCore {
public:
    struct Node {
        TensorData<Real>* output;
        std::vector<TensorData<Real>*> inputs;
        std::function<void()> backward;
        // handles keep inputs/outputs alive for the lifetime of the tape
        std::vector<std::shared_ptr<TensorData<Real>>> retained;
    };

    std::vector<Node> nodes;

    void backward_from(TensorData<Real>* loss, Real seed) {
        // locate the node that produced the loss
        std::size_t loss_index = nodes.size();
        for (std::size_t i = nodes.size(); i-- > 0;) {
            if (nodes[i].output == loss) {
                loss_index = i;
                break;
            }
        }
        if (loss_index == nodes.size()) {
            throw Error("backward: tensor was not produced on this record");
        }

        // mark the nodes the loss actually depends on
        std::unordered_set<TensorData<Real>*> needed;
        needed.insert(loss);
        std::vector<char> active(loss_index + 1, 0);
        for (std::size_t i = loss_index + 1; i-- > 0;) {
            if (!needed.count(nodes[i].output)) continue;
            active[i] = 1;
            for (auto* in : nodes[i].inputs) needed.insert(in);
        }

        // intermediates restart from zero each pass; leaves accumulate
        for (std::size_t i = 0; i <= loss_index; ++i) {
            if (active[i]) nodes[i].output->grad.assign(nodes[i].output->data.size(), Real(0));
        }
        loss->grad[0] = seed;

        for (std::size_t i = loss_index + 1; i-- > 0;) {
            if (active[i]) nodes[i].backward();
        }
    }
};

/// A ComputationRecord: ops executed while a Tape is in scope are recorded
/// for one reverse pass. Confined to a single logical thread.
template <typename Real>
class Tape {
public:
    Tape() : core_(std::make_shared<TapeCore<Real>>()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return core_->nodes.size(); }
    void clear() { core_->nodes.clear(); }
    const std::shared_ptr<TapeCore<Real>>& core() const { return core_; }

    /// RAII scope making this tape the thread's active record.
    class Scope {
    public:
        explicit Scope(Tape& t) : previous_(current_core()) { current_core() = t.core_; }
        ~Scope() { current_core() = previous_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        std::shared_ptr<TapeCore<Real>> previous_;
    };

    /// RAII scope suppressing recording (reference-model forward passes).
    class NoGrad {
    public:
        NoGrad() : previous_(current_core()) { current_core() = nullptr; }
        ~NoGrad() { current_core() = previous_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

    private:
        std::shared_ptr<TapeCore<Real>> previous_;
    };

    static std::shared_ptr<TapeCore<Real>>& current_core() {
        thread_local std::shared_ptr<TapeCore<Real>> core;
        return core;
    }

private:
    std::shared_ptr<TapeCore<Real>> core_;
};

namespace detail {

template <typename Real>
bool tracking(std::initializer_list<const Tensor<Real>*> inputs) {
    if (!Tape<Real>::current_core()) return false;
    for (const auto* t : inputs) {
        if ((*t).requires_grad()) return true;
    }
    return false;
}

template <typename Real>
void record(std::initializer_list<Tensor<Real>> inputs, Tensor<Real>& output,
            std::function<void()> backward) {
    auto core = Tape<Real>::current_core();
    typename TapeCore<Real>::Node node;
    node.output = output.raw();
    for (const auto& in : inputs) {
        node.inputs.push_back(in.raw());
        node.retained.push_back(in.handle());
    }
    node.retained.push_back(output.handle());
    node.backward = std::move(backward);
    core->nodes.push_back(std::move(node));
    output.raw()->producer = core;
    output.set_requires_grad(true);
}

template <typename Real>
void add_into(TensorData<Real>* dst, const std::vector<Real>& src) {
    if (!dst->requires_grad && dst->producer.expired()) return;
    dst->ensure_grad();
    for (std::size_t i = 0; i < src.size(); ++i) dst->grad[i] += src[i];
}

}  // namespace detail

/// Populate grad on every requires_grad tensor reachable from `loss`.
/// Repeated calls without zero_grad accumulate leaf gradients. `seed` is
/// the incoming gradient of the loss itself (1 for a plain backward).
template <typename Real>
void backward(const Tensor<Real>& loss, Real seed = Real(1)) {
    if (loss.numel() != 1) {
        throw DimensionError("backward requires a scalar loss, got shape " +
                             shape_to_string(loss.shape()));
    }
    auto core = loss.raw()->producer.lock();
    if (!core) {
        throw Error("backward on a detached tensor: no active computation record produced it");
    }
    core->backward_from(loss.raw(), seed);
}

// ---------------------------------------------------------------------------
// differentiable operations
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) +
                             " and " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    auto out = Tensor<Real>::zeros({m, n});
    detail::mm_nn(a.data(), b.data(), out.data(), m, k, n);
    out.check_finite("matmul");
    if (detail::tracking<Real>({&a, &b})) {
        auto ad = a.raw();
        auto bd = b.raw();
        auto od = out.raw();
        detail::record<Real>({a, b}, out, [ad, bd, od, m, k, n] {
            if (ad->requires_grad || !ad->producer.expired()) {
                ad->ensure_grad();
                detail::mm_nt(od->grad.data(), bd->data.data(), ad->grad.data(), m, n, k);
            }
            if (bd->requires_grad || !bd->producer.expired()) {
                bd->ensure_grad();
                detail::mm_tn(ad->data.data(), od->grad.data(), bd->grad.data(), m, k, n);
            }
        });
    }
    return out;
}

/// a[m,k] times b[n,k] transposed -> [m,n]. Weights live as [out,in], so
/// this is the projection kernel used by every linear layer.
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: incompatible shapes " + shape_to_string(a.shape()) +
                             " and " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    auto out = Tensor<Real>::zeros({m, n});
    detail::mm_nt(a.data(), b.data(), out.data(), m, k, n);
    out.check_finite("matmul_nt");
    if (detail::tracking<Real>({&a, &b})) {
        auto ad = a.raw();
        auto bd = b.raw();
        auto od = out.raw();
        detail::record<Real>({a, b}, out, [ad, bd, od, m, k, n] {
            if (ad->requires_grad || !ad->producer.expired()) {
                ad->ensure_grad();
                detail::mm_nn(od->grad.data(), bd->data.data(), ad->grad.data(), m, n, k);
            }
            if (bd->requires_grad || !bd->producer.expired()) {
                bd->ensure_grad();
                detail::mm_tn(od->grad.data(), ad->data.data(), bd->grad.data(), m, n, k);
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!same_shape(a, b)) {
        throw DimensionError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    auto out = Tensor<Real>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracking<Real>({&a, &b})) {
        auto ad = a.raw();
        auto bd = b.raw();
        auto od = out.raw();
        detail::record<Real>({a, b}, out, [ad, bd, od] {
            detail::add_into(ad, od->grad);
            detail::add_into(bd, od->grad);
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!same_shape(a, b)) {
        throw DimensionError("sub: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    auto out = Tensor<Real>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::tracking<Real>({&a, &b})) {
        auto ad = a.raw();
        auto bd = b.raw();
        auto od = out.raw();
        detail::record<Real>({a, b}, out, [ad, bd, od] {
            detail::add_into(ad, od->grad);
            if (bd->requires_grad || !bd->producer.expired()) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!same_shape(a, b)) {
        throw DimensionError("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    auto out = Tensor<Real>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracking<Real>({&a, &b})) {
        auto ad = a.raw();
        auto bd = b.raw();
        auto od = out.raw();
        detail::record<Real>({a, b}, out, [ad, bd, od] {
            if (ad->requires_grad || !ad->producer.expired()) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    ad->grad[i] += od->grad[i] * bd->data[i];
            }
            if (bd->requires_grad || !bd->producer.expired()) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    bd->grad[i] += od->grad[i] * ad->data[i];
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    auto out = Tensor<Real>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::tracking<Real>({&a})) {
        auto ad = a.raw();
        auto od = out.raw();
        detail::record<Real>({a}, out, [ad, od, c] {
            if (ad->requires_grad || !ad->producer.expired()) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * c;
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    auto out = Tensor<Real>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] > Real(0) ? a.data()[i] : Real(0);
    if (detail::tracking<Real>({&a})) {
        auto ad = a.raw();
        auto od = out.raw();
        detail::record<Real>({a}, out, [ad, od] {
            if (ad->requires_grad || !ad->producer.expired()) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    if (ad->data[i] > Real(0)) ad->grad[i] += od->grad[i];
            }
        });
    }
    return out;
}

/// x[T,d] + row-broadcast bias[d].
template <typename Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& bias) {
    if (x.rank() != 2 || bias.numel() != x.cols()) {
        throw DimensionError("add_row: bias " + shape_to_string(bias.shape()) +
                             " does not broadcast over " + shape_to_string(x.shape()));
    }
    const std::size_t t = x.rows(), d = x.cols();
    auto out = Tensor<Real>::zeros({t, d});
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < d; ++c) out.data()[r * d + c] = x.data()[r * d + c] + bias.data()[c];
    if (detail::tracking<Real>({&x, &bias})) {
        auto xd = x.raw();
        auto bd = bias.raw();
        auto od = out.raw();
        detail::record<Real>({x, bias}, out, [xd, bd, od, t, d] {
            detail::add_into(xd, od->grad);
            if (bd->requires_grad || !bd->producer.expired()) {
                bd->ensure_grad();
                for (std::size_t r = 0; r < t; ++r)
                    for (std::size_t c = 0; c < d; ++c) bd->grad[c] += od->grad[r * d + c];
            }
        });
    }
    return out;
}

/// Gathers rows of `table` by id; backward scatter-adds.
template <typename Real>
Tensor<Real> embedding_rows(const Tensor<Real>& table, const std::vector<std::uint32_t>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding_rows: table must be 2-D");
    const std::size_t v = table.rows(), d = table.cols();
    for (auto id : ids) {
        if (id >= v) {
            throw IndexError("embedding_rows: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
    }
    auto out = Tensor<Real>::zeros({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.data() + ids[r] * d, d, out.data() + r * d);
    if (detail::tracking<Real>({&table})) {
        auto td = table.raw();
        auto od = out.raw();
        auto ids_copy = ids;
        detail::record<Real>({table}, out, [td, od, ids_copy, d] {
            if (td->requires_grad || !td->producer.expired()) {
                td->ensure_grad();
                for (std::size_t r = 0; r < ids_copy.size(); ++r)
                    for (std::size_t c = 0; c < d; ++c)
                        td->grad[ids_copy[r] * d + c] += od->grad[r * d + c];
            }
        });
    }
    return out;
}

/// Columns [c0, c1) of x.
template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c1 > x.cols() || c0 >= c1) {
        throw DimensionError("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") for " + shape_to_string(x.shape()));
    }
    const std::size_t t = x.rows(), d = x.cols(), w = c1 - c0;
    auto out = Tensor<Real>::zeros({t, w});
    for (std::size_t r = 0; r < t; ++r)
        std::copy_n(x.data() + r * d + c0, w, out.data() + r * w);
    if (detail::tracking<Real>({&x})) {
        auto xd = x.raw();
        auto od = out.raw();
        detail::record<Real>({x}, out, [xd, od, t, d, w, c0] {
            if (xd->requires_grad || !xd->producer.expired()) {
                xd->ensure_grad();
                for (std::size_t r = 0; r < t; ++r)
                    for (std::size_t c = 0; c < w; ++c)
                        xd->grad[r * d + c0 + c] += od->grad[r * w + c];
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: empty input");
    const std::size_t t = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != t) throw DimensionError("concat_cols: row mismatch");
        total += p.cols();
    }
    auto out = Tensor<Real>::zeros({t, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t r = 0; r < t; ++r)
            std::copy_n(p.data() + r * p.cols(), p.cols(), out.data() + r * total + off);
        off += p.cols();
    }
    bool track = false;
    if (Tape<Real>::current_core()) {
        for (const auto& p : parts) track = track || p.requires_grad();
    }
    if (track) {
        auto core = Tape<Real>::current_core();
        typename TapeCore<Real>::Node node;
        node.output = out.raw();
        for (const auto& p : parts) {
            node.inputs.push_back(p.raw());
            node.retained.push_back(p.handle());
        }
        node.retained.push_back(out.handle());
        auto od = out.raw();
        auto parts_copy = parts;
        node.backward = [parts_copy, od, t, total] {
            std::size_t off2 = 0;
            for (const auto& p : parts_copy) {
                auto* pd = p.raw();
                const std::size_t w = p.cols();
                if (pd->requires_grad || !pd->producer.expired()) {
                    pd->ensure_grad();
                    for (std::size_t r = 0; r < t; ++r)
                        for (std::size_t c = 0; c < w; ++c)
                            pd->grad[r * w + c] += od->grad[r * total + off2 + c];
                }
                off2 += w;
            }
        };
        core->nodes.push_back(std::move(node));
        out.raw()->producer = core;
        out.set_requires_grad(true);
    }
    return out;
}

/// Row-wise softmax of scale*scores with a causal mask: position t only
/// sees columns <= t; masked-out entries are exactly zero.
template <typename Real>
Tensor<Real> causal_softmax(const Tensor<Real>& scores, Real scale_factor) {
    if (scores.rank() != 2 || scores.rows() != scores.cols()) {
        throw DimensionError("causal_softmax: expected square scores, got " +
                             shape_to_string(scores.shape()));
    }
    const std::size_t t = scores.rows();
    auto out = Tensor<Real>::zeros({t, t});
    for (std::size_t r = 0; r < t; ++r) {
        const Real* srow = scores.data() + r * t;
        Real* orow = out.data() + r * t;
        Real mx = srow[0] * scale_factor;
        for (std::size_t c = 1; c <= r; ++c) mx = std::max(mx, srow[c] * scale_factor);
        Real denom = 0;
        for (std::size_t c = 0; c <= r; ++c) {
            orow[c] = std::exp(srow[c] * scale_factor - mx);
            denom += orow[c];
        }
        for (std::size_t c = 0; c <= r; ++c) orow[c] /= denom;
    }
    out.check_finite("causal_softmax");
    if (detail::tracking<Real>({&scores})) {
        auto sd = scores.raw();
        auto od = out.raw();
        detail::record<Real>({scores}, out, [sd, od, t, scale_factor] {
            if (!(sd->requires_grad || !sd->producer.expired())) return;
            sd->ensure_grad();
            for (std::size_t r = 0; r < t; ++r) {
                const Real* prow = od->data.data() + r * t;
                const Real* grow = od->grad.data() + r * t;
                Real dot = 0;
                for (std::size_t c = 0; c <= r; ++c) dot += grow[c] * prow[c];
                for (std::size_t c = 0; c <= r; ++c)
                    sd->grad[r * t + c] += scale_factor * prow[c] * (grow[c] - dot);
            }
        });
    }
    return out;
}

/// Per-row normalization to zero mean / unit variance (epsilon-stabilized),
/// then elementwise gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5)) {
    if (x.rank() != 2 || gain.numel() != x.cols() || bias.numel() != x.cols()) {
        throw DimensionError("layer_norm: gain/bias must match row width of " +
                             shape_to_string(x.shape()));
    }
    const std::size_t t = x.rows(), d = x.cols();
    auto out = Tensor<Real>::zeros({t, d});
    std::vector<Real> inv_std(t), xhat(t * d);
    for (std::size_t r = 0; r < t; ++r) {
        const Real* row = x.data() + r * d;
        Real mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += row[c];
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (std::size_t c = 0; c < d; ++c) {
            Real diff = row[c] - mean;
            var += diff * diff;
        }
        var /= static_cast<Real>(d);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < d; ++c) {
            const Real xh = (row[c] - mean) * is;
            xhat[r * d + c] = xh;
            out.data()[r * d + c] = xh * gain.data()[c] + bias.data()[c];
        }
    }
    out.check_finite("layer_norm");
    if (detail::tracking<Real>({&x, &gain, &bias})) {
        auto xd = x.raw();
        auto gd = gain.raw();
        auto bd = bias.raw();
        auto od = out.raw();
        detail::record<Real>({x, gain, bias}, out,
                             [xd, gd, bd, od, t, d, inv_std = std::move(inv_std),
                              xhat = std::move(xhat)] {
            const bool want_x = xd->requires_grad || !xd->producer.expired();
            const bool want_g = gd->requires_grad || !gd->producer.expired();
            const bool want_b = bd->requires_grad || !bd->producer.expired();
            if (want_x) xd->ensure_grad();
            if (want_g) gd->ensure_grad();
            if (want_b) bd->ensure_grad();
            for (std::size_t r = 0; r < t; ++r) {
                const Real* grow = od->grad.data() + r * d;
                const Real* xh = xhat.data() + r * d;
                if (want_g || want_b) {
                    for (std::size_t c = 0; c < d; ++c) {
                        if (want_g) gd->grad[c] += grow[c] * xh[c];
                        if (want_b) bd->grad[c] += grow[c];
                    }
                }
                if (want_x) {
                    Real sum_gg = 0, sum_ggx = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const Real gg = grow[c] * gd->data[c];
                        sum_gg += gg;
                        sum_ggx += gg * xh[c];
                    }
                    const Real inv_d = Real(1) / static_cast<Real>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        const Real gg = grow[c] * gd->data[c];
                        xd->grad[r * d + c] +=
                            inv_std[r] * (gg - inv_d * sum_gg - xh[c] * inv_d * sum_ggx);
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {

template <typename Real>
void row_log_softmax(const Real* row, std::size_t v, Real* out) {
    Real mx = row[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    Real denom = 0;
    for (std::size_t c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
    const Real lse = mx + std::log(denom);
    for (std::size_t c = 0; c < v; ++c) out[c] = row[c] - lse;
}

inline std::size_t count_mask(const std::vector<bool>& mask) {
    std::size_t n = 0;
    for (bool b : mask) n += b ? 1 : 0;
    return n;
}

}  // namespace detail

/// Mean over masked rows of -log softmax(logits)[target].
template <typename Real>
Tensor<Real> cross_entropy_masked(const Tensor<Real>& logits, const std::vector<std::uint32_t>& targets,
                                  const std::vector<bool>& mask) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy_masked: logits must be [T,V]");
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t || mask.size() != t) {
        throw DimensionError("cross_entropy_masked: targets/mask length must equal row count " +
                             std::to_string(t));
    }
    const std::size_t m = detail::count_mask(mask);
    if (m == 0) throw Error("cross_entropy_masked: mask selects no positions");
    std::vector<Real> logp(v);
    // soft targets are not needed; keep per-row probabilities for backward
    std::vector<Real> probs(t * v, Real(0));
    Real total = 0;
    for (std::size_t r = 0; r < t; ++r) {
        if (!mask[r]) continue;
        if (targets[r] >= v) {
            throw IndexError("cross_entropy_masked: target " + std::to_string(targets[r]) +
                             " out of range [0, " + std::to_string(v) + ")");
        }
        detail::row_log_softmax(logits.data() + r * v, v, logp.data());
        total -= logp[targets[r]];
        for (std::size_t c = 0; c < v; ++c) probs[r * v + c] = std::exp(logp[c]);
    }
    auto out = Tensor<Real>::scalar(total / static_cast<Real>(m));
    out.check_finite("cross_entropy_masked");
    if (detail::tracking<Real>({&logits})) {
        auto ld = logits.raw();
        auto od = out.raw();
        auto targets_copy = targets;
        auto mask_copy = mask;
        detail::record<Real>({logits}, out,
                             [ld, od, t, v, m, targets_copy, mask_copy, probs = std::move(probs)] {
            if (!(ld->requires_grad || !ld->producer.expired())) return;
            ld->ensure_grad();
            const Real g = od->grad[0] / static_cast<Real>(m);
            for (std::size_t r = 0; r < t; ++r) {
                if (!mask_copy[r]) continue;
                for (std::size_t c = 0; c < v; ++c) ld->grad[r * v + c] += g * probs[r * v + c];
                ld->grad[r * v + targets_copy[r]] -= g;
            }
        });
    }
    return out;
}

/// Mean over masked rows of KL(softmax(p_row) || softmax(q_row)), taking
/// raw logits of both models; log-softmax is fused to avoid underflow.
template <typename Real>
Tensor<Real> kl_divergence_rows(const Tensor<Real>& logits_p, const Tensor<Real>& logits_q,
                                const std::vector<bool>& mask) {
    if (!same_shape(logits_p, logits_q) || logits_p.rank() != 2) {
        throw DimensionError("kl_divergence_rows: shape mismatch " +
                             shape_to_string(logits_p.shape()) + " vs " +
                             shape_to_string(logits_q.shape()));
    }
    const std::size_t t = logits_p.rows(), v = logits_p.cols();
    if (mask.size() != t) throw DimensionError("kl_divergence_rows: mask length mismatch");
    const std::size_t m = detail::count_mask(mask);
    if (m == 0) throw Error("kl_divergence_rows: mask selects no positions");

    std::vector<Real> logp(v), logq(v);
    std::vector<Real> p_all(t * v, Real(0)), q_all(t * v, Real(0)), ratio_all(t * v, Real(0));
    std::vector<Real> row_kl(t, Real(0));
    Real total = 0;
    for (std::size_t r = 0; r < t; ++r) {
        if (!mask[r]) continue;
        detail::row_log_softmax(logits_p.data() + r * v, v, logp.data());
        detail::row_log_softmax(logits_q.data() + r * v, v, logq.data());
        Real kl = 0;
        for (std::size_t c = 0; c < v; ++c) {
            const Real p = std::exp(logp[c]);
            const Real ratio = logp[c] - logq[c];
            p_all[r * v + c] = p;
            q_all[r * v + c] = std::exp(logq[c]);
            ratio_all[r * v + c] = ratio;
            kl += p * ratio;
        }
        row_kl[r] = kl;
        total += kl;
    }
    auto out = Tensor<Real>::scalar(total / static_cast<Real>(m));
    out.check_finite("kl_divergence_rows");
    if (detail::tracking<Real>({&logits_p, &logits_q})) {
        auto pd = logits_p.raw();
        auto qd = logits_q.raw();
        auto od = out.raw();
        auto mask_copy = mask;
        detail::record<Real>({logits_p, logits_q}, out,
                             [pd, qd, od, t, v, m, mask_copy, p_all = std::move(p_all),
                              q_all = std::move(q_all), ratio_all = std::move(ratio_all),
                              row_kl = std::move(row_kl)] {
            const Real g = od->grad[0] / static_cast<Real>(m);
            const bool want_p = pd->requires_grad || !pd->producer.expired();
            const bool want_q = qd->requires_grad || !qd->producer.expired();
            if (want_p) pd->ensure_grad();
            if (want_q) qd->ensure_grad();
            for (std::size_t r = 0; r < t; ++r) {
                if (!mask_copy[r]) continue;
                for (std::size_t c = 0; c < v; ++c) {
                    const std::size_t i = r * v + c;
                    if (want_p) pd->grad[i] += g * p_all[i] * (ratio_all[i] - row_kl[r]);
                    if (want_q) qd->grad[i] += g * (q_all[i] - p_all[i]);
                }
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real total = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) total += x.data()[i];
    auto out = Tensor<Real>::scalar(total);
    if (detail::tracking<Real>({&x})) {
        auto xd = x.raw();
        auto od = out.raw();
        detail::record<Real>({x}, out, [xd, od] {
            if (xd->requires_grad || !xd->producer.expired()) {
                xd->ensure_grad();
                for (auto& gv : xd->grad) gv += od->grad[0];
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> sum_squares(const Tensor<Real>& x) {
    Real total = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) total += x.data()[i] * x.data()[i];
    auto out = Tensor<Real>::scalar(total);
    if (detail::tracking<Real>({&x})) {
        auto xd = x.raw();
        auto od = out.raw();
        detail::record<Real>({x}, out, [xd, od] {
            if (xd->requires_grad || !xd->producer.expired()) {
                xd->ensure_grad();
                for (std::size_t i = 0; i < xd->data.size(); ++i)
                    xd->grad[i] += Real(2) * xd->data[i] * od->grad[0];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient verification oracle
// ---------------------------------------------------------------------------

/// Compares the analytic gradient of a scalar-valued f against central
/// differences, element by element. Returns the max relative error with
/// denominator max(|analytic|, |numeric|, 1e-8). Throws DeterminismError
/// if two evaluations of f at the same point differ.
template <typename Real>
double finite_difference_check(const std::function<Tensor<Real>(const Tensor<Real>&)>& f,
                               Tensor<Real> x, Real eps) {
    auto probe = x.clone();
    probe.set_requires_grad(true);

    Tape<Real> tape;
    Tensor<Real> y;
    {
        typename Tape<Real>::Scope scope(tape);
        y = f(probe);
    }
    if (y.numel() != 1) throw DimensionError("finite_difference_check: f must be scalar-valued");

    Real y_repeat;
    {
        typename Tape<Real>::NoGrad ng;
        y_repeat = f(probe).item();
    }
    if (std::memcmp(&y_repeat, &y.data()[0], sizeof(Real)) != 0) {
        throw DeterminismError("finite_difference_check: f is not deterministic");
    }

    backward(y);
    const std::vector<Real> analytic =
        probe.has_grad() ? probe.grad() : std::vector<Real>(probe.numel(), Real(0));

    double max_rel = 0;
    typename Tape<Real>::NoGrad ng;
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        const Real saved = probe.data()[i];
        probe.data()[i] = saved + eps;
        const double fp = static_cast<double>(f(probe).item());
        probe.data()[i] = saved - eps;
        const double fm = static_cast<double>(f(probe).item());
        probe.data()[i] = saved;
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
    return max_rel;
}

}  // namespace ftlab
