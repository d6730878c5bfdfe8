#pragma once

// Tiny decoder-only transformer: pre-norm blocks, learned absolute
// positions, untied output head. Exposes logits plus post-block residual
// taps, and a bit-exact TARC checkpoint.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ftlab/autodiff.hpp"
#include "ftlab/errors.hpp"
#include "ftlab/lora.hpp"
#include "ftlab/rng.hpp"
#include "ftlab/tarc.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

struct ModelConfig {
    std::uint32_t vocab_size = 261;
    std::uint32_t context_length = 128;
    std::uint32_t n_layers = 8;
    std::uint32_t n_heads = 4;
    std::uint32_t d_model = 128;
    std::uint32_t d_ff = 512;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab_size == 0) throw ConfigError("model config: vocab_size must be positive");
        if (context_length < 2) throw ConfigError("model config: context_length must be >= 2");
        if (n_layers == 0) throw ConfigError("model config: n_layers must be positive");
        if (n_heads == 0) throw ConfigError("model config: n_heads must be positive");
        if (d_model == 0) throw ConfigError("model config: d_model must be positive");
        if (d_ff == 0) throw ConfigError("model config: d_ff must be positive");
        if (d_model % n_heads != 0) {
            throw ConfigError("model config: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"vocab_size", vocab_size}, {"context_length", context_length},
                              {"n_layers", n_layers},     {"n_heads", n_heads},
                              {"d_model", d_model},       {"d_ff", d_ff},
                              {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig cfg;
        cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
        cfg.context_length = j.value("context_length", cfg.context_length);
        cfg.n_layers = j.value("n_layers", cfg.n_layers);
        cfg.n_heads = j.value("n_heads", cfg.n_heads);
        cfg.d_model = j.value("d_model", cfg.d_model);
        cfg.d_ff = j.value("d_ff", cfg.d_ff);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.validate();
        return cfg;
    }
};

template <typename Real>
struct TransformerModel {
    ModelConfig config;
    // insertion order is the registry order: stable across save/load
    std::vector<std::pair<std::string, Tensor<Real>>> params;
    std::unordered_map<std::string, std::size_t> index;
    std::vector<std::uint64_t> merged_adapter_fingerprints;

    void add_param(const std::string& name, Tensor<Real> t) {
        if (index.count(name)) throw StructuralError("duplicate parameter name '" + name + "'");
        index.emplace(name, params.size());
        params.emplace_back(name, std::move(t));
    }

    Tensor<Real>& param(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw StructuralError("unknown parameter '" + name + "'");
        return params[it->second].second;
    }

    const Tensor<Real>& param(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw StructuralError("unknown parameter '" + name + "'");
        return params[it->second].second;
    }

    bool has_param(const std::string& name) const { return index.count(name) != 0; }

    std::vector<Tensor<Real>> parameters() const {
        std::vector<Tensor<Real>> out;
        out.reserve(params.size());
        for (const auto& [name, t] : params) out.push_back(t);
        return out;
    }

    void set_requires_grad(bool flag) {
        for (auto& [name, t] : params) t.set_requires_grad(flag);
    }

    TransformerModel clone() const {
        TransformerModel copy;
        copy.config = config;
        for (const auto& [name, t] : params) copy.add_param(name, t.clone());
        return copy;
    }
};

template <typename Real>
struct ForwardTrace {
    Tensor<Real> logits;                         // [T, vocab]
    std::map<std::size_t, Tensor<Real>> residual_taps;  // layer -> [T, d_model]
};

template <typename Real>
TransformerModel<Real> init_model(const ModelConfig& config) {
    config.validate();
    TransformerModel<Real> model;
    model.config = config;
    Rng rng(config.seed);

    // fan-in scaled normal init; residual-output projections additionally
    // shrunk with depth so the stream's variance stays level
    const Real resid_shrink = Real(1) / static_cast<Real>(std::sqrt(2.0 * config.n_layers));
    const Real std_emb = Real(0.08);

    auto normal = [&rng](std::vector<std::size_t> shape, Real stddev) {
        return Tensor<Real>::randn(std::move(shape), rng, stddev);
    };
    auto fan_in_std = [](std::size_t d_in) {
        return static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d_in)));
    };

    model.add_param("tok_embeddings.weight", normal({config.vocab_size, config.d_model}, std_emb));
    model.add_param("pos_embeddings.weight",
                    normal({config.context_length, config.d_model}, std_emb));
    for (std::uint32_t i = 0; i < config.n_layers; ++i) {
        const std::string prefix = "layers." + std::to_string(i) + ".";
        model.add_param(prefix + "attn_norm.gain", Tensor<Real>::full({config.d_model}, Real(1)));
        model.add_param(prefix + "attn_norm.bias", Tensor<Real>::zeros({config.d_model}));
        for (const char* proj : {"q_proj", "k_proj", "v_proj"}) {
            model.add_param(prefix + "attn." + proj + ".weight",
                            normal({config.d_model, config.d_model}, fan_in_std(config.d_model)));
            model.add_param(prefix + "attn." + proj + ".bias",
                            Tensor<Real>::zeros({config.d_model}));
        }
        model.add_param(prefix + "attn.o_proj.weight",
                        normal({config.d_model, config.d_model},
                               fan_in_std(config.d_model) * resid_shrink));
        model.add_param(prefix + "attn.o_proj.bias", Tensor<Real>::zeros({config.d_model}));
        model.add_param(prefix + "mlp_norm.gain", Tensor<Real>::full({config.d_model}, Real(1)));
        model.add_param(prefix + "mlp_norm.bias", Tensor<Real>::zeros({config.d_model}));
        model.add_param(prefix + "mlp.up_proj.weight",
                        normal({config.d_ff, config.d_model}, fan_in_std(config.d_model)));
        model.add_param(prefix + "mlp.up_proj.bias", Tensor<Real>::zeros({config.d_ff}));
        model.add_param(prefix + "mlp.down_proj.weight",
                        normal({config.d_model, config.d_ff},
                               fan_in_std(config.d_ff) * resid_shrink));
        model.add_param(prefix + "mlp.down_proj.bias", Tensor<Real>::zeros({config.d_model}));
    }
    model.add_param("final_norm.gain", Tensor<Real>::full({config.d_model}, Real(1)));
    model.add_param("final_norm.bias", Tensor<Real>::zeros({config.d_model}));
    model.add_param("lm_head.weight",
                    normal({config.vocab_size, config.d_model}, fan_in_std(config.d_model)));
    return model;
}

template <typename Real>
std::size_t count_params(const TransformerModel<Real>& model) {
    std::size_t total = 0;
    for (const auto& [name, t] : model.params) total += t.numel();
    return total;
}

namespace detail {

/// Linear projection with an optional LoRA branch on the weight.
template <typename Real>
Tensor<Real> linear_adapted(const Tensor<Real>& x, const TransformerModel<Real>& model,
                            const std::string& weight_name, const std::string& bias_name,
                            const LoraAdapter<Real>* adapter) {
    auto y = matmul_nt(x, model.param(weight_name));
    if (!bias_name.empty()) y = add_row(y, model.param(bias_name));
    if (adapter && adapter->enabled) {
        if (const auto* target = adapter->find(weight_name)) {
            auto h = matmul_nt(x, target->down);
            if (adapter->config.dropout > 0.0 && adapter->train_rng) {
                // inverted dropout on the low-rank activations
                auto mask = Tensor<Real>::zeros(h.shape());
                const Real keep = Real(1) - static_cast<Real>(adapter->config.dropout);
                for (std::size_t i = 0; i < mask.numel(); ++i) {
                    mask.data()[i] =
                        adapter->train_rng->next_double() < adapter->config.dropout ? Real(0)
                                                                                    : Real(1) / keep;
                }
                h = mul(h, mask);
            }
            auto delta = matmul_nt(h, target->up);
            y = add(y, scale(delta, adapter->scaling));
        }
    }
    return y;
}

}  // namespace detail

/// Causal decoder forward. Taps capture the residual stream after each
/// requested block (post MLP residual add). A disabled or absent adapter
/// leaves the computation bit-identical to the base model.
template <typename Real>
ForwardTrace<Real> forward(const TransformerModel<Real>& model,
                           const std::vector<std::uint32_t>& tokens,
                           const LoraAdapter<Real>* adapter = nullptr,
                           const std::set<std::size_t>& tap_layers = {}) {
    const auto& cfg = model.config;
    if (tokens.empty()) throw SizeError("forward: empty token sequence");
    if (tokens.size() > cfg.context_length) {
        throw SizeError("forward: sequence length " + std::to_string(tokens.size()) +
                        " exceeds context_length " + std::to_string(cfg.context_length));
    }
    for (std::size_t layer : tap_layers) {
        if (layer >= cfg.n_layers) {
            throw IndexError("forward: tap layer " + std::to_string(layer) + " out of range [0, " +
                             std::to_string(cfg.n_layers) + ")");
        }
    }
    const std::size_t t = tokens.size();
    const std::size_t head_dim = cfg.d_model / cfg.n_heads;
    const Real att_scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(head_dim)));

    std::vector<std::uint32_t> positions(t);
    for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<std::uint32_t>(i);

    ForwardTrace<Real> trace;
    auto x = add(embedding_rows(model.param("tok_embeddings.weight"), tokens),
                 embedding_rows(model.param("pos_embeddings.weight"), positions));

    for (std::uint32_t layer = 0; layer < cfg.n_layers; ++layer) {
        const std::string prefix = "layers." + std::to_string(layer) + ".";
        auto h = layer_norm(x, model.param(prefix + "attn_norm.gain"),
                            model.param(prefix + "attn_norm.bias"));
        auto q = detail::linear_adapted(h, model, prefix + "attn.q_proj.weight",
                                        prefix + "attn.q_proj.bias", adapter);
        auto k = detail::linear_adapted(h, model, prefix + "attn.k_proj.weight",
                                        prefix + "attn.k_proj.bias", adapter);
        auto v = detail::linear_adapted(h, model, prefix + "attn.v_proj.weight",
                                        prefix + "attn.v_proj.bias", adapter);
        std::vector<Tensor<Real>> head_outputs;
        head_outputs.reserve(cfg.n_heads);
        for (std::uint32_t head = 0; head < cfg.n_heads; ++head) {
            const std::size_t c0 = head * head_dim, c1 = c0 + head_dim;
            auto qh = slice_cols(q, c0, c1);
            auto kh = slice_cols(k, c0, c1);
            auto vh = slice_cols(v, c0, c1);
            auto probs = causal_softmax(matmul_nt(qh, kh), att_scale);
            head_outputs.push_back(matmul(probs, vh));
        }
        auto att = detail::linear_adapted(concat_cols(head_outputs), model,
                                          prefix + "attn.o_proj.weight", prefix + "attn.o_proj.bias",
                                          adapter);
        x = add(x, att);

        auto h2 = layer_norm(x, model.param(prefix + "mlp_norm.gain"),
                             model.param(prefix + "mlp_norm.bias"));
        auto up = relu(detail::linear_adapted(h2, model, prefix + "mlp.up_proj.weight",
                                              prefix + "mlp.up_proj.bias", adapter));
        auto down = detail::linear_adapted(up, model, prefix + "mlp.down_proj.weight",
                                           prefix + "mlp.down_proj.bias", adapter);
        x = add(x, down);

        if (tap_layers.count(layer)) trace.residual_taps.emplace(layer, x);
    }

    auto final_h = layer_norm(x, model.param("final_norm.gain"), model.param("final_norm.bias"));
    trace.logits = matmul_nt(final_h, model.param("lm_head.weight"));
    return trace;
}

// ---------------------------------------------------------------------------
// adapter attachment and merging
// ---------------------------------------------------------------------------

/// Creates an enabled adapter over every 2-D ".weight" parameter matched by
/// a config pattern. Up factors start at zero, so the fresh adapter is a
/// functional identity.
template <typename Real>
LoraAdapter<Real> attach_adapter(const TransformerModel<Real>& model, const LoraConfig& config,
                                 std::uint64_t seed) {
    config.validate();
    LoraAdapter<Real> adapter;
    adapter.config = config;
    adapter.scaling = static_cast<Real>(config.scaling());
    Rng rng(seed);
    for (const auto& pattern : config.target_module_names) {
        bool matched = false;
        for (const auto& [name, tensor] : model.params) {
            if (tensor.rank() != 2) continue;
            if (name.find(pattern) == std::string::npos) continue;
            if (name.size() < 7 || name.rfind(".weight") != name.size() - 7) continue;
            if (adapter.find(name)) {
                matched = true;
                continue;
            }
            const std::size_t d_out = tensor.dim(0), d_in = tensor.dim(1);
            const Real down_std = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(d_in)));
            LoraTarget<Real> target;
            target.param_name = name;
            target.down = Tensor<Real>::randn({static_cast<std::size_t>(config.rank), d_in}, rng,
                                              down_std);
            target.up = Tensor<Real>::zeros({d_out, static_cast<std::size_t>(config.rank)});
            adapter.targets.push_back(std::move(target));
            matched = true;
        }
        if (!matched) {
            throw ConfigError("lora: pattern '" + pattern + "' matches no model parameter");
        }
    }
    return adapter;
}

/// Returns a copy of the model with base + delta on every target; the input
/// model is unchanged. Merging the same adapter twice adds its delta twice;
/// a warning is printed when that happens.
template <typename Real>
TransformerModel<Real> merge_adapter(const TransformerModel<Real>& model,
                                     const LoraAdapter<Real>& adapter) {
    auto merged = model.clone();
    merged.merged_adapter_fingerprints = model.merged_adapter_fingerprints;
    const std::uint64_t fp = adapter.fingerprint();
    for (std::uint64_t prev : merged.merged_adapter_fingerprints) {
        if (prev == fp) {
            std::cerr << "[ftlab] warning: adapter already merged into this model; "
                         "merging again adds its delta twice\n";
            break;
        }
    }
    merged.merged_adapter_fingerprints.push_back(fp);
    for (auto& [name, delta] : extract_delta_tensors(adapter)) {
        if (!merged.has_param(name)) {
            throw StructuralError("merge_adapter: model has no parameter '" + name + "'");
        }
        auto& p = merged.param(name);
        if (!same_shape(p, delta)) {
            throw DimensionError("merge_adapter: delta shape " + shape_to_string(delta.shape()) +
                                 " does not match parameter '" + name + "' " +
                                 shape_to_string(p.shape()));
        }
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] += delta.data()[i];
    }
    return merged;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

template <typename Real>
void save_checkpoint(const TransformerModel<Real>& model, const std::string& path) {
    TarcArchive<Real> archive;
    archive.tensors.reserve(model.params.size());
    for (const auto& [name, t] : model.params) archive.tensors.push_back({name, t});
    archive.config = model.config.to_json();
    archive.config["kind"] = "model";
    save_tarc(archive, path);
}

template <typename Real>
TransformerModel<Real> load_checkpoint(const std::string& path) {
    auto archive = load_tarc<Real>(path);
    if (archive.config.value("kind", "") != "model") {
        throw FormatError("'" + path + "' is not a model checkpoint");
    }
    const ModelConfig config = ModelConfig::from_json(archive.config);
    auto model = init_model<Real>(config);
    std::vector<bool> filled(model.params.size(), false);
    for (const auto& entry : archive.tensors) {
        auto it = model.index.find(entry.name);
        if (it == model.index.end()) {
            throw FormatError("checkpoint contains unknown tensor '" + entry.name + "'");
        }
        auto& p = model.params[it->second].second;
        if (!same_shape(p, entry.tensor)) {
            throw FormatError("checkpoint tensor '" + entry.name + "' has shape " +
                              shape_to_string(entry.tensor.shape()) + ", expected " +
                              shape_to_string(p.shape()));
        }
        p.values() = entry.tensor.values();
        filled[it->second] = true;
    }
    for (std::size_t i = 0; i < filled.size(); ++i) {
        if (!filled[i]) {
            throw FormatError("checkpoint missing tensor '" + model.params[i].first + "'");
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

struct SamplerConfig {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

/// Autoregressive completion of prompt ids until `stop_token` or the
/// context limit. Greedy by default; temperature sampling otherwise.
template <typename Real>
std::vector<std::uint32_t> generate(const TransformerModel<Real>& model,
                                    const LoraAdapter<Real>* adapter,
                                    std::vector<std::uint32_t> ids, std::uint32_t stop_token,
                                    const SamplerConfig& sampler = {},
                                    std::size_t max_new_tokens = 0) {
    typename Tape<Real>::NoGrad no_grad;
    const std::size_t prompt_len = ids.size();
    const std::size_t limit = model.config.context_length;
    Rng rng(sampler.seed);
    while (ids.size() < limit) {
        if (max_new_tokens && ids.size() - prompt_len >= max_new_tokens) break;
        auto trace = forward(model, ids, adapter);
        const std::size_t v = trace.logits.cols();
        const Real* row = trace.logits.data() + (ids.size() - 1) * v;
        std::uint32_t next = 0;
        if (sampler.greedy) {
            for (std::size_t c = 1; c < v; ++c) {
                if (row[c] > row[next]) next = static_cast<std::uint32_t>(c);
            }
        } else {
            const double temp = sampler.temperature > 0 ? sampler.temperature : 1.0;
            double mx = row[0];
            for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(row[c]));
            std::vector<double> probs(v);
            double denom = 0;
            for (std::size_t c = 0; c < v; ++c) {
                probs[c] = std::exp((static_cast<double>(row[c]) - mx) / temp);
                denom += probs[c];
            }
            double draw = rng.next_double() * denom;
            double acc = 0;
            next = static_cast<std::uint32_t>(v - 1);
            for (std::size_t c = 0; c < v; ++c) {
                acc += probs[c];
                if (draw < acc) {
                    next = static_cast<std::uint32_t>(c);
                    break;
                }
            }
        }
        ids.push_back(next);
        if (next == stop_token) break;
    }
    return std::vector<std::uint32_t>(ids.begin() + static_cast<std::ptrdiff_t>(prompt_len),
                                      ids.end());
}

}  // namespace ftlab
