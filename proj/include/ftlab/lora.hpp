#pragma once

// Low-rank adapters with rsLoRA scaling. The adapter itself is plain data
// keyed by target parameter name; attach_adapter / merge_adapter live next
// to the model in model.hpp.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ftlab/autodiff.hpp"
#include "ftlab/errors.hpp"
#include "ftlab/rng.hpp"
#include "ftlab/tarc.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

struct LoraConfig {
    int rank = 32;
    double alpha = 64.0;
    // substring patterns over parameter names; only 2-D ".weight" tensors match
    std::vector<std::string> target_module_names{"q_proj", "k_proj", "v_proj",
                                                 "o_proj", "up_proj", "down_proj"};
    double dropout = 0.0;
    /// rsLoRA scaling alpha/sqrt(r); the classic alpha/r is available for
    /// ablation behind this flag.
    bool use_rslora = true;

    void validate() const {
        if (rank < 1) throw ConfigError("lora: rank must be >= 1, got " + std::to_string(rank));
        if (alpha <= 0) throw ConfigError("lora: alpha must be > 0, got " + std::to_string(alpha));
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("lora: dropout must be in [0, 1), got " + std::to_string(dropout));
        }
        if (target_module_names.empty()) throw ConfigError("lora: no target patterns given");
    }

    double scaling() const {
        return use_rslora ? alpha / std::sqrt(static_cast<double>(rank))
                          : alpha / static_cast<double>(rank);
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"lora_r", rank},
                              {"lora_alpha", alpha},
                              {"target_modules", target_module_names},
                              {"lora_dropout", dropout},
                              {"use_rslora", use_rslora}};
    }

    static LoraConfig from_json(const nlohmann::json& j) {
        LoraConfig cfg;
        cfg.rank = j.value("lora_r", cfg.rank);
        cfg.alpha = j.value("lora_alpha", cfg.alpha);
        if (j.contains("target_modules")) {
            cfg.target_module_names = j["target_modules"].get<std::vector<std::string>>();
        }
        cfg.dropout = j.value("lora_dropout", cfg.dropout);
        cfg.use_rslora = j.value("use_rslora", cfg.use_rslora);
        cfg.validate();
        return cfg;
    }
};

/// Per-target pair of factors. The effective delta for a [out,in] weight is
/// scaling * up[out,r] * down[r,in]; up starts at zero so a fresh adapter is
/// a functional identity.
template <typename Real>
struct LoraTarget {
    std::string param_name;
    Tensor<Real> down;  // [r, d_in]
    Tensor<Real> up;    // [d_out, r]
};

template <typename Real>
struct LoraAdapter {
    LoraConfig config;
    std::vector<LoraTarget<Real>> targets;
    bool enabled = true;
    Real scaling = Real(0);
    // armed by the trainer when dropout > 0; null means eval (identity)
    Rng* train_rng = nullptr;

    const LoraTarget<Real>* find(const std::string& param_name) const {
        for (const auto& t : targets) {
            if (t.param_name == param_name) return &t;
        }
        return nullptr;
    }

    LoraTarget<Real>* find(const std::string& param_name) {
        for (auto& t : targets) {
            if (t.param_name == param_name) return &t;
        }
        return nullptr;
    }

    std::vector<Tensor<Real>> trainable_parameters() const {
        std::vector<Tensor<Real>> out;
        out.reserve(targets.size() * 2);
        for (const auto& t : targets) {
            out.push_back(t.down);
            out.push_back(t.up);
        }
        return out;
    }

    LoraAdapter clone() const {
        LoraAdapter copy;
        copy.config = config;
        copy.enabled = enabled;
        copy.scaling = scaling;
        for (const auto& t : targets) {
            copy.targets.push_back({t.param_name, t.down.clone(), t.up.clone()});
        }
        return copy;
    }

    /// Stable fingerprint of the adapter contents, used to warn on a
    /// repeated merge into the same model.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& t : targets) {
            h = fnv1a(t.param_name.data(), t.param_name.size(), h);
            h = fnv1a(t.down.data(), t.down.numel() * sizeof(Real), h);
            h = fnv1a(t.up.data(), t.up.numel() * sizeof(Real), h);
        }
        return h;
    }
};

template <typename Real>
void set_adapter_enabled(LoraAdapter<Real>& adapter, bool flag) {
    adapter.enabled = flag;
}

/// Per target, delta = scaling * up * down, shaped like the base parameter.
template <typename Real>
std::vector<std::pair<std::string, Tensor<Real>>> extract_delta_tensors(
    const LoraAdapter<Real>& adapter) {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    out.reserve(adapter.targets.size());
    for (const auto& t : adapter.targets) {
        const std::size_t d_out = t.up.rows(), r = t.up.cols(), d_in = t.down.cols();
        auto delta = Tensor<Real>::zeros({d_out, d_in});
        detail::mm_nn(t.up.data(), t.down.data(), delta.data(), d_out, r, d_in);
        for (std::size_t i = 0; i < delta.numel(); ++i) delta.data()[i] *= adapter.scaling;
        out.emplace_back(t.param_name, std::move(delta));
    }
    return out;
}

template <typename Real>
void save_adapter(const LoraAdapter<Real>& adapter, const std::string& path) {
    TarcArchive<Real> archive;
    for (const auto& t : adapter.targets) {
        archive.tensors.push_back({t.param_name + ".down", t.down});
        archive.tensors.push_back({t.param_name + ".up", t.up});
    }
    archive.config = adapter.config.to_json();
    archive.config["kind"] = "lora_adapter";
    archive.config["scaling"] = static_cast<double>(adapter.scaling);
    archive.config["enabled"] = adapter.enabled;
    save_tarc(archive, path);
}

template <typename Real>
LoraAdapter<Real> load_adapter(const std::string& path) {
    auto archive = load_tarc<Real>(path);
    if (archive.config.value("kind", "") != "lora_adapter") {
        throw FormatError("'" + path + "' is not a LoRA adapter archive");
    }
    LoraAdapter<Real> adapter;
    adapter.config = LoraConfig::from_json(archive.config);
    adapter.scaling = static_cast<Real>(archive.config.value("scaling", 0.0));
    adapter.enabled = archive.config.value("enabled", true);
    for (const auto& entry : archive.tensors) {
        const auto& name = entry.name;
        const bool is_down = name.size() > 5 && name.rfind(".down") == name.size() - 5;
        const bool is_up = name.size() > 3 && name.rfind(".up") == name.size() - 3;
        if (!is_down && !is_up) {
            throw FormatError("adapter archive has unexpected tensor '" + name + "'");
        }
        const std::string target = name.substr(0, name.size() - (is_down ? 5 : 3));
        auto* slot = adapter.find(target);
        if (!slot) {
            adapter.targets.push_back({target, Tensor<Real>(), Tensor<Real>()});
            slot = &adapter.targets.back();
        }
        (is_down ? slot->down : slot->up) = entry.tensor;
    }
    for (const auto& t : adapter.targets) {
        if (t.down.numel() == 0 || t.up.numel() == 0) {
            throw FormatError("adapter archive missing one factor for target '" + t.param_name + "'");
        }
    }
    return adapter;
}

}  // namespace ftlab
