#pragma once

// The four mitigation methods: KL penalty toward the adapter-disabled
// reference, LDIFS feature-space distance, SafeLoRA projection, and the
// composite loss. The interleaving mitigation itself lives in data.hpp; its
// fraction is configured here.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ftlab/autodiff.hpp"
#include "ftlab/errors.hpp"
#include "ftlab/lora.hpp"
#include "ftlab/model.hpp"
#include "ftlab/tarc.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

struct RegConfig {
    double lambda_kl = 0.1;
    double lambda_ldifs = 1.0;
    double safelora_tau = 0.3;
    double interleave_fraction = 0.05;
    int ldifs_tap_stride = 5;
    /// Divide the LDIFS squared distance by the element count so the
    /// coefficient is batch-shape-invariant; the raw sum is available for
    /// fidelity runs.
    bool ldifs_mean_normalized = true;

    void validate() const {
        if (lambda_kl < 0) throw ConfigError("reg config: lambda_kl must be >= 0");
        if (lambda_ldifs < 0) throw ConfigError("reg config: lambda_ldifs must be >= 0");
        if (safelora_tau < -1.0 || safelora_tau > 1.0) {
            throw ConfigError("reg config: tau must be in [-1, 1]");
        }
        if (interleave_fraction < 0.0 || interleave_fraction > 1.0) {
            throw ConfigError("reg config: interleave_fraction must be in [0, 1]");
        }
        if (ldifs_tap_stride < 1) throw ConfigError("reg config: ldifs_tap_stride must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"lambda_kl", lambda_kl},
                              {"lambda_ldifs", lambda_ldifs},
                              {"tau", safelora_tau},
                              {"interleave_percentage", interleave_fraction},
                              {"ldifs_tap_stride", ldifs_tap_stride},
                              {"ldifs_mean_normalized", ldifs_mean_normalized}};
    }

    static RegConfig from_json(const nlohmann::json& j) {
        RegConfig cfg;
        cfg.lambda_kl = j.value("lambda_kl", cfg.lambda_kl);
        cfg.lambda_ldifs = j.value("lambda_ldifs", cfg.lambda_ldifs);
        cfg.safelora_tau = j.value("tau", cfg.safelora_tau);
        cfg.interleave_fraction = j.value("interleave_percentage", cfg.interleave_fraction);
        cfg.ldifs_tap_stride = j.value("ldifs_tap_stride", cfg.ldifs_tap_stride);
        cfg.ldifs_mean_normalized = j.value("ldifs_mean_normalized", cfg.ldifs_mean_normalized);
        cfg.validate();
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// alignment vector (SafeLoRA)
// ---------------------------------------------------------------------------

/// Per-target-tensor difference between an aligned and an unaligned
/// checkpoint, with provenance of both.
template <typename Real>
struct AlignmentVector {
    std::vector<std::pair<std::string, Tensor<Real>>> tensors;
    std::string aligned_provenance;
    std::string unaligned_provenance;

    const Tensor<Real>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }
};

template <typename Real>
AlignmentVector<Real> compute_alignment_vector(const TransformerModel<Real>& aligned,
                                               const TransformerModel<Real>& unaligned,
                                               const std::vector<std::string>& target_names,
                                               const std::string& aligned_provenance = "aligned",
                                               const std::string& unaligned_provenance = "unaligned") {
    if (aligned.params.size() != unaligned.params.size()) {
        throw StructuralError("alignment vector: registries differ in size (" +
                              std::to_string(aligned.params.size()) + " vs " +
                              std::to_string(unaligned.params.size()) + ")");
    }
    for (std::size_t i = 0; i < aligned.params.size(); ++i) {
        const auto& [an, at] = aligned.params[i];
        const auto& [un, ut] = unaligned.params[i];
        if (an != un || !same_shape(at, ut)) {
            throw StructuralError("alignment vector: registries first differ at tensor '" + an +
                                  "'");
        }
    }
    AlignmentVector<Real> av;
    av.aligned_provenance = aligned_provenance;
    av.unaligned_provenance = unaligned_provenance;
    for (const auto& name : target_names) {
        if (!aligned.has_param(name)) {
            throw StructuralError("alignment vector: no parameter named '" + name + "'");
        }
        const auto& a = aligned.param(name);
        const auto& u = unaligned.param(name);
        auto v = Tensor<Real>::zeros(a.shape());
        for (std::size_t i = 0; i < v.numel(); ++i) v.data()[i] = a.data()[i] - u.data()[i];
        av.tensors.emplace_back(name, std::move(v));
    }
    return av;
}

template <typename Real>
void save_alignment_vector(const AlignmentVector<Real>& av, const std::string& path) {
    TarcArchive<Real> archive;
    for (const auto& [name, t] : av.tensors) archive.tensors.push_back({name, t});
    archive.config = nlohmann::json{{"kind", "alignment_vector"},
                                    {"aligned", av.aligned_provenance},
                                    {"unaligned", av.unaligned_provenance}};
    save_tarc(archive, path);
}

template <typename Real>
AlignmentVector<Real> load_alignment_vector(const std::string& path) {
    auto archive = load_tarc<Real>(path);
    if (archive.config.value("kind", "") != "alignment_vector") {
        throw FormatError("'" + path + "' is not an alignment vector archive");
    }
    AlignmentVector<Real> av;
    av.aligned_provenance = archive.config.value("aligned", "");
    av.unaligned_provenance = archive.config.value("unaligned", "");
    for (auto& entry : archive.tensors) av.tensors.emplace_back(entry.name, entry.tensor);
    return av;
}

// ---------------------------------------------------------------------------
// SafeLoRA projection
// ---------------------------------------------------------------------------

template <typename Real>
double frobenius_norm(const Tensor<Real>& t) {
    double acc = 0;
    for (std::size_t i = 0; i < t.numel(); ++i) {
        const double v = static_cast<double>(t.data()[i]);
        acc += v * v;
    }
    return std::sqrt(acc);
}

template <typename Real>
double frobenius_inner(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!same_shape(a, b)) throw DimensionError("frobenius_inner: shape mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        acc += static_cast<double>(a.data()[i]) * static_cast<double>(b.data()[i]);
    }
    return acc;
}

/// C = V V^T / ||V||_F. Symmetric and positive semidefinite, but not an
/// orthogonal projector: the denominator is the plain Frobenius norm, so
/// C*C != C in general.
template <typename Real>
Tensor<Real> safelora_projection_matrix(const Tensor<Real>& v) {
    if (v.rank() != 2) throw DimensionError("safelora_projection_matrix: V must be 2-D");
    const double norm = frobenius_norm(v);
    if (norm == 0.0) {
        throw DegenerateTensorError("safelora_projection_matrix: V has zero Frobenius norm");
    }
    const std::size_t d_out = v.rows();
    auto c = Tensor<Real>::zeros({d_out, d_out});
    detail::mm_nt(v.data(), v.data(), c.data(), d_out, v.cols(), d_out);
    const Real inv = static_cast<Real>(1.0 / norm);
    for (std::size_t i = 0; i < c.numel(); ++i) c.data()[i] *= inv;
    return c;
}

struct SafeLoraEntry {
    std::string name;
    std::optional<double> similarity;
    bool replaced = false;
    std::string skipped_reason;  // empty when the similarity was defined
};

struct SafeLoraReport {
    double tau = 0.0;
    std::vector<SafeLoraEntry> entries;

    std::size_t replaced_count() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.replaced ? 1 : 0;
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& e : entries) {
            nlohmann::json row{{"name", e.name}, {"replaced", e.replaced}};
            if (e.similarity) {
                row["similarity"] = *e.similarity;
            }
            if (!e.skipped_reason.empty()) row["skipped_reason"] = e.skipped_reason;
            rows.push_back(std::move(row));
        }
        return nlohmann::json{{"tau", tau}, {"tensors", rows}};
    }
};

/// Post-training projection: for each adapter target with delta W and
/// projection C from the alignment vector, replace the effective delta with
/// C*W iff the Frobenius cosine between W and C*W falls below tau. The
/// replacement is stored by applying C to the up factor. Targets with an
/// undefined similarity (zero V, W or C*W) are skipped and flagged.
template <typename Real>
SafeLoraReport safelora_apply(LoraAdapter<Real>& adapter, const AlignmentVector<Real>& av,
                              double tau) {
    SafeLoraReport report;
    report.tau = tau;
    auto deltas = extract_delta_tensors(adapter);
    for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
        auto& target = adapter.targets[i];
        const auto& w = deltas[i].second;
        SafeLoraEntry entry;
        entry.name = target.param_name;

        const auto* v = av.find(target.param_name);
        if (!v) {
            throw StructuralError("safelora_apply: alignment vector has no tensor for '" +
                                  target.param_name + "'");
        }
        if (frobenius_norm(*v) == 0.0) {
            entry.skipped_reason = "alignment tensor has zero norm";
            std::cerr << "[ftlab] warning: safelora skipped '" << target.param_name
                      << "': alignment tensor has zero norm\n";
            report.entries.push_back(std::move(entry));
            continue;
        }
        const auto c = safelora_projection_matrix(*v);

        const double w_norm = frobenius_norm(w);
        if (w_norm == 0.0) {
            entry.skipped_reason = "delta has zero norm; similarity undefined";
            report.entries.push_back(std::move(entry));
            continue;
        }
        auto cw = Tensor<Real>::zeros(w.shape());
        detail::mm_nn(c.data(), w.data(), cw.data(), c.rows(), c.cols(), w.cols());
        const double cw_norm = frobenius_norm(cw);
        if (cw_norm == 0.0) {
            entry.skipped_reason = "projected delta has zero norm; similarity undefined";
            report.entries.push_back(std::move(entry));
            continue;
        }
        const double similarity = frobenius_inner(w, cw) / (w_norm * cw_norm);
        entry.similarity = similarity;
        if (similarity < tau) {
            auto new_up = Tensor<Real>::zeros(target.up.shape());
            detail::mm_nn(c.data(), target.up.data(), new_up.data(), c.rows(), c.cols(),
                          target.up.cols());
            target.up = std::move(new_up);
            entry.replaced = true;
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

// ---------------------------------------------------------------------------
// in-training penalties
// ---------------------------------------------------------------------------

/// KL between the adapter-enabled and adapter-disabled next-token
/// distributions on the same batch. Differentiable w.r.t. the adapter only:
/// the reference forward runs without recording.
template <typename Real>
Tensor<Real> kl_penalty(const TransformerModel<Real>& model, const LoraAdapter<Real>& adapter,
                        const std::vector<std::uint32_t>& tokens, const std::vector<bool>& mask) {
    auto adapted = forward(model, tokens, &adapter);
    Tensor<Real> base_logits;
    {
        typename Tape<Real>::NoGrad no_grad;
        base_logits = forward<Real>(model, tokens, nullptr).logits;
    }
    return kl_divergence_rows(adapted.logits, base_logits, mask);
}

template <typename Real>
std::set<std::size_t> ldifs_tap_layers(std::uint32_t n_layers, int stride) {
    if (stride < 1) throw ConfigError("ldifs: tap stride must be >= 1");
    std::set<std::size_t> taps;
    for (std::uint32_t l = 0; l < n_layers; l += static_cast<std::uint32_t>(stride)) taps.insert(l);
    taps.insert(n_layers - 1);
    return taps;
}

/// Squared l2 distance between the two tap stacks over all token positions,
/// divided by the total element count when mean-normalized.
template <typename Real>
Tensor<Real> ldifs_distance(const std::map<std::size_t, Tensor<Real>>& adapted_taps,
                            const std::map<std::size_t, Tensor<Real>>& base_taps,
                            bool mean_normalized) {
    if (adapted_taps.empty() || adapted_taps.size() != base_taps.size()) {
        throw DimensionError("ldifs_distance: tap sets differ");
    }
    Tensor<Real> total;
    std::size_t element_count = 0;
    bool first = true;
    for (const auto& [layer, a] : adapted_taps) {
        auto it = base_taps.find(layer);
        if (it == base_taps.end()) {
            throw DimensionError("ldifs_distance: base trace missing tap for layer " +
                                 std::to_string(layer));
        }
        auto part = sum_squares(sub(a, it->second));
        element_count += a.numel();
        total = first ? part : add(total, part);
        first = false;
    }
    if (!mean_normalized) return total;
    return scale(total, Real(1) / static_cast<Real>(element_count));
}

/// LDIFS penalty between adapter-enabled and adapter-disabled forwards,
/// tapping every `tap_stride`-th layer plus the last one.
template <typename Real>
Tensor<Real> ldifs_penalty(const TransformerModel<Real>& model, const LoraAdapter<Real>& adapter,
                           const std::vector<std::uint32_t>& tokens, int tap_stride,
                           bool mean_normalized = true) {
    const auto taps = ldifs_tap_layers<Real>(model.config.n_layers, tap_stride);
    auto adapted = forward(model, tokens, &adapter, taps);
    std::map<std::size_t, Tensor<Real>> base_taps;
    {
        typename Tape<Real>::NoGrad no_grad;
        base_taps = forward<Real>(model, tokens, nullptr, taps).residual_taps;
    }
    return ldifs_distance(adapted.residual_taps, base_taps, mean_normalized);
}

/// ce + lambda_kl*kl + lambda_ldifs*ldifs. Terms with a zero coefficient
/// must simply not be passed; with both coefficients zero the result is the
/// ce tensor itself, bit for bit.
template <typename Real>
Tensor<Real> composed_loss(const Tensor<Real>& ce, const Tensor<Real>* kl, const Tensor<Real>* ldifs,
                           const RegConfig& cfg) {
    if (cfg.lambda_kl < 0 || cfg.lambda_ldifs < 0) {
        throw ConfigError("composed_loss: negative lambda");
    }
    Tensor<Real> total = ce;
    if (cfg.lambda_kl > 0) {
        if (!kl) throw ConfigError("composed_loss: lambda_kl > 0 but no kl term supplied");
        total = add(total, scale(*kl, static_cast<Real>(cfg.lambda_kl)));
    }
    if (cfg.lambda_ldifs > 0) {
        if (!ldifs) throw ConfigError("composed_loss: lambda_ldifs > 0 but no ldifs term supplied");
        total = add(total, scale(*ldifs, static_cast<Real>(cfg.lambda_ldifs)));
    }
    return total;
}

}  // namespace ftlab
