#pragma once

// Training loop: full-precision AdamW with decoupled weight decay, linear
// warmup then linear decay, gradient accumulation, and the composite loss.
// Deterministic given (config, data, seed).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ftlab/autodiff.hpp"
#include "ftlab/data.hpp"
#include "ftlab/errors.hpp"
#include "ftlab/lora.hpp"
#include "ftlab/model.hpp"
#include "ftlab/regularizers.hpp"
#include "ftlab/rng.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

struct TrainConfig {
    int epochs = 1;
    int batch_size = 4;
    int gradient_accumulation_steps = 4;
    int warmup_steps = 5;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    std::string lr_scheduler_type = "linear";
    std::uint64_t seed = 0;
    std::size_t max_seq_length = 0;  // 0: use the model's context length
    RegConfig reg;
    /// When nonempty, a NaN abort saves the last good parameters here.
    std::string abort_checkpoint_path;

    void validate() const {
        if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        if (gradient_accumulation_steps < 1) {
            throw ConfigError("train config: gradient_accumulation_steps must be >= 1");
        }
        if (warmup_steps < 0) throw ConfigError("train config: warmup_steps must be >= 0");
        if (learning_rate <= 0) throw ConfigError("train config: learning_rate must be > 0");
        if (weight_decay < 0) throw ConfigError("train config: weight_decay must be >= 0");
        if (lr_scheduler_type != "linear" && lr_scheduler_type != "constant") {
            throw ConfigError("train config: unknown lr_scheduler_type '" + lr_scheduler_type + "'");
        }
        reg.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"epochs", epochs},
                         {"per_device_train_batch_size", batch_size},
                         {"gradient_accumulation_steps", gradient_accumulation_steps},
                         {"warmup_steps", warmup_steps},
                         {"learning_rate", learning_rate},
                         {"weight_decay", weight_decay},
                         {"lr_scheduler_type", lr_scheduler_type},
                         {"optimizer", "adamw (full precision; 8-bit states not used)"},
                         {"seed", seed},
                         {"max_seq_length", max_seq_length}};
        j.update(reg.to_json());
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig cfg;
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("per_device_train_batch_size", cfg.batch_size);
        cfg.gradient_accumulation_steps =
            j.value("gradient_accumulation_steps", cfg.gradient_accumulation_steps);
        cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
        cfg.lr_scheduler_type = j.value("lr_scheduler_type", cfg.lr_scheduler_type);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.max_seq_length = j.value("max_seq_length", cfg.max_seq_length);
        cfg.reg = RegConfig::from_json(j);
        cfg.validate();
        return cfg;
    }
};

/// Closed-form linear warmup/decay multiplier applied to the base rate.
inline double learning_rate_at(const TrainConfig& cfg, long step, long total_steps) {
    if (cfg.lr_scheduler_type == "constant") return cfg.learning_rate;
    const long warmup = cfg.warmup_steps;
    if (step < warmup) {
        return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (total_steps <= warmup) return cfg.learning_rate;
    const double remaining =
        static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
    return cfg.learning_rate * std::max(0.0, remaining);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename Real>
class AdamW {
public:
    AdamW(std::vector<Tensor<Real>> params, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& p : params) {
            slots_.push_back({p, std::vector<Real>(p.numel(), Real(0)),
                              std::vector<Real>(p.numel(), Real(0))});
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& slot : slots_) {
            if (!slot.param.has_grad()) continue;  // untouched this step
            const auto& g = slot.param.grad();
            Real* p = slot.param.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double m = beta1_ * static_cast<double>(slot.m[i]) + (1.0 - beta1_) * gi;
                const double v = beta2_ * static_cast<double>(slot.v[i]) + (1.0 - beta2_) * gi * gi;
                slot.m[i] = static_cast<Real>(m);
                slot.v[i] = static_cast<Real>(v);
                const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
                p[i] = static_cast<Real>(static_cast<double>(p[i]) - lr * update -
                                         lr * weight_decay_ * static_cast<double>(p[i]));
            }
        }
    }

    void zero_grad() {
        for (auto& slot : slots_) slot.param.zero_grad();
    }

private:
    struct Slot {
        Tensor<Real> param;
        std::vector<Real> m;
        std::vector<Real> v;
    };
    std::vector<Slot> slots_;
    long t_ = 0;
    double weight_decay_, beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

struct StepRecord {
    long step = 0;
    double lr = 0;
    double ce = 0;
    double kl = 0;
    double ldifs = 0;
    double total = 0;
};

struct RunManifest {
    nlohmann::json config_snapshot;
    std::uint64_t dataset_hash = 0;
    std::size_t dataset_size = 0;
    std::vector<StepRecord> steps;
    double wall_clock_seconds = 0;
    std::size_t truncated_sequences = 0;
    std::size_t skipped_sequences = 0;
    nlohmann::json final_metrics;
    std::vector<std::string> artifacts;

    nlohmann::json to_json() const {
        nlohmann::json step_rows = nlohmann::json::array();
        for (const auto& s : steps) {
            step_rows.push_back({{"step", s.step},
                                 {"lr", s.lr},
                                 {"ce", s.ce},
                                 {"kl", s.kl},
                                 {"ldifs", s.ldifs},
                                 {"total", s.total}});
        }
        return nlohmann::json{{"config", config_snapshot},
                              {"dataset_hash", dataset_hash},
                              {"dataset_size", dataset_size},
                              {"steps", step_rows},
                              {"wall_clock_seconds", wall_clock_seconds},
                              {"truncated_sequences", truncated_sequences},
                              {"skipped_sequences", skipped_sequences},
                              {"final_metrics", final_metrics},
                              {"artifacts", artifacts}};
    }
};

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Trains the adapter when one is given, otherwise the full model. One
/// sequence at a time; an optimizer step fires every batch_size *
/// gradient_accumulation_steps sequences, each backward pre-scaled by the
/// step's sequence count so accumulation matches the equivalent large batch.
/// The optional epoch callback runs after each epoch; returning false stops
/// training early (the schedule is still laid out over the configured run).
template <typename Real>
RunManifest train(TransformerModel<Real>& model, LoraAdapter<Real>* adapter,
                  const std::vector<data::ChatExample>& train_data,
                  const data::TokenizerSpec& tokenizer, const TrainConfig& config,
                  const std::function<bool(int epoch, long steps_done)>& epoch_callback = {}) {
    config.validate();
    if (train_data.empty()) throw SizeError("train: empty dataset");

    const auto t_start = std::chrono::steady_clock::now();
    const std::size_t context =
        config.max_seq_length ? std::min<std::size_t>(config.max_seq_length, model.config.context_length)
                              : model.config.context_length;

    RunManifest manifest;
    manifest.config_snapshot = config.to_json();
    manifest.config_snapshot["model"] = model.config.to_json();
    manifest.config_snapshot["trains"] = adapter ? "adapter" : "full_model";
    manifest.dataset_hash = data::content_hash(train_data);
    manifest.dataset_size = train_data.size();

    // tokenize once; drop sequences with no supervised target after the shift
    struct Prepared {
        std::vector<std::uint32_t> ids;
        std::vector<std::uint32_t> targets;
        std::vector<bool> target_mask;
    };
    std::vector<Prepared> prepared;
    prepared.reserve(train_data.size());
    for (const auto& ex : train_data) {
        auto tok = data::tokenize(ex, tokenizer, context);
        if (tok.truncated) ++manifest.truncated_sequences;
        if (tok.ids.size() < 2) {
            ++manifest.skipped_sequences;
            continue;
        }
        Prepared p;
        p.ids = tok.ids;
        p.targets.resize(p.ids.size(), 0);
        p.target_mask.resize(p.ids.size(), false);
        bool any = false;
        for (std::size_t t = 0; t + 1 < p.ids.size(); ++t) {
            p.targets[t] = p.ids[t + 1];
            p.target_mask[t] = tok.completion_mask[t + 1];
            any = any || p.target_mask[t];
        }
        if (!any) {
            ++manifest.skipped_sequences;
            continue;
        }
        prepared.push_back(std::move(p));
    }
    if (prepared.empty()) throw SizeError("train: no sequence has supervised tokens");

    std::vector<Tensor<Real>> trainable;
    model.set_requires_grad(adapter == nullptr);
    if (adapter) {
        for (auto& t : adapter->trainable_parameters()) {
            trainable.push_back(t.set_requires_grad(true));
        }
    } else {
        trainable = model.parameters();
    }

    const RegConfig& reg = config.reg;
    const bool want_kl = reg.lambda_kl > 0;
    const bool want_ldifs = reg.lambda_ldifs > 0;
    if ((want_kl || want_ldifs) && !adapter) {
        throw ConfigError("train: KL/LDIFS penalties need an adapter (the reference forward "
                          "disables it)");
    }
    const auto taps =
        want_ldifs ? ldifs_tap_layers<Real>(model.config.n_layers, reg.ldifs_tap_stride)
                   : std::set<std::size_t>{};

    Rng dropout_rng(derive_seed(config.seed, 0xd20));
    if (adapter && adapter->config.dropout > 0.0) adapter->train_rng = &dropout_rng;

    AdamW<Real> optimizer(trainable, config.weight_decay);
    optimizer.zero_grad();

    const std::size_t n = prepared.size();
    const std::size_t step_span =
        static_cast<std::size_t>(config.batch_size) *
        static_cast<std::size_t>(config.gradient_accumulation_steps);
    const long steps_per_epoch = static_cast<long>((n + step_span - 1) / step_span);
    const long total_steps = steps_per_epoch * config.epochs;

    long opt_step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(config.seed, 0xe90c + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        std::size_t cursor = 0;
        while (cursor < n) {
            const std::size_t step_end = std::min(n, cursor + step_span);
            const std::size_t step_count = step_end - cursor;
            const Real seed_grad = Real(1) / static_cast<Real>(step_count);

            double ce_sum = 0, kl_sum = 0, ldifs_sum = 0, total_sum = 0;
            for (std::size_t s = cursor; s < step_end; ++s) {
                const Prepared& seq = prepared[order[s]];
                Tape<Real> tape;
                typename Tape<Real>::Scope scope(tape);
                auto trace = forward(model, seq.ids, adapter, taps);
                auto ce = cross_entropy_masked(trace.logits, seq.targets, seq.target_mask);

                Tensor<Real> kl, ldifs;
                if (want_kl || want_ldifs) {
                    Tensor<Real> base_logits;
                    std::map<std::size_t, Tensor<Real>> base_taps;
                    {
                        typename Tape<Real>::NoGrad no_grad;
                        auto base = forward<Real>(model, seq.ids, nullptr, taps);
                        base_logits = base.logits;
                        base_taps = std::move(base.residual_taps);
                    }
                    if (want_kl) kl = kl_divergence_rows(trace.logits, base_logits, seq.target_mask);
                    if (want_ldifs) {
                        ldifs = ldifs_distance(trace.residual_taps, base_taps,
                                               reg.ldifs_mean_normalized);
                    }
                }
                auto total = composed_loss(ce, want_kl ? &kl : nullptr,
                                           want_ldifs ? &ldifs : nullptr, reg);

                const double ce_item = static_cast<double>(ce.item());
                const double kl_item = want_kl ? static_cast<double>(kl.item()) : 0.0;
                const double ldifs_item = want_ldifs ? static_cast<double>(ldifs.item()) : 0.0;
                ce_sum += ce_item;
                kl_sum += kl_item;
                ldifs_sum += ldifs_item;
                total_sum += ce_item + reg.lambda_kl * kl_item + reg.lambda_ldifs * ldifs_item;

                backward(total, seed_grad);
            }

            StepRecord record;
            record.step = opt_step;
            record.ce = ce_sum / static_cast<double>(step_count);
            record.kl = kl_sum / static_cast<double>(step_count);
            record.ldifs = ldifs_sum / static_cast<double>(step_count);
            record.total = total_sum / static_cast<double>(step_count);
            record.lr = learning_rate_at(config, opt_step, total_steps);

            if (!std::isfinite(record.total)) {
                if (adapter) adapter->train_rng = nullptr;
                if (!config.abort_checkpoint_path.empty()) {
                    if (adapter) {
                        save_adapter(*adapter, config.abort_checkpoint_path);
                    } else {
                        save_checkpoint(model, config.abort_checkpoint_path);
                    }
                }
                throw TrainAbortError(
                    "train: non-finite loss at optimizer step " + std::to_string(opt_step) +
                    " (ce=" + std::to_string(record.ce) + ", kl=" + std::to_string(record.kl) +
                    ", ldifs=" + std::to_string(record.ldifs) + "); last good parameters " +
                    (config.abort_checkpoint_path.empty() ? "were not saved (no path configured)"
                                                          : "saved to " + config.abort_checkpoint_path));
            }

            optimizer.step(record.lr);
            optimizer.zero_grad();
            manifest.steps.push_back(record);
            ++opt_step;
            cursor = step_end;
        }
        if (epoch_callback && !epoch_callback(epoch, opt_step)) break;
    }

    if (adapter) adapter->train_rng = nullptr;
    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return manifest;
}

}  // namespace ftlab
