#pragma once

// End-to-end OpSwap experiment: pretrain a tiny model on tier-0 chains,
// fine-tune LoRA adapters on tier-1 under each mitigation, and report
// exact-match scores per tier plus held-out KL to the pretrained reference.
// The pretrained checkpoint doubles as the aligned prior for SafeLoRA; the
// random initialization is its unaligned counterpart, with both recorded in
// the alignment vector's provenance.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftlab/data.hpp"
#include "ftlab/errors.hpp"
#include "ftlab/eval.hpp"
#include "ftlab/lora.hpp"
#include "ftlab/model.hpp"
#include "ftlab/opswap.hpp"
#include "ftlab/regularizers.hpp"
#include "ftlab/train.hpp"

namespace ftlab::repro {

struct ReproductionOptions {
    ModelConfig model{.vocab_size = 261,
                      .context_length = 112,
                      .n_layers = 6,
                      .n_heads = 4,
                      .d_model = 64,
                      .d_ff = 256,
                      .seed = 0};
    std::uint64_t seed = 0;

    // datasets: one per tier, split 90/10
    std::size_t dataset_size = 6000;
    std::pair<int, int> op_count_range{1, 2};
    std::pair<int, int> operand_range{1, 9};

    // tier-0 pretraining (full-parameter)
    double pretrain_lr = 1.5e-3;
    int pretrain_epochs = 14;
    long pretrain_step_budget = 20000;
    double pretrain_em_target = 90.0;

    // tier-1 LoRA fine-tuning; remaining knobs come from TrainConfig defaults
    LoraConfig lora{};
    int finetune_epochs = 1;
    double finetune_lr = 1e-4;

    // mitigation grids
    std::vector<double> kl_grid{0.01, 0.1, 1.0};
    double ldifs_lambda = 1.0;
    std::vector<double> safelora_taus{0.1, 0.3, 0.5};
    std::vector<double> interleave_fractions{0.05, 0.20};

    // evaluation
    std::size_t em_eval_questions = 80;
    std::size_t kl_eval_sequences = 64;
};

struct CellResult {
    std::string name;
    double tier0_em = 0;
    double tier1_em = 0;
    std::optional<double> heldout_kl;
    std::optional<std::size_t> safelora_replaced;
    long train_steps = 0;
    double final_ce = 0;
};

struct ReproductionReport {
    std::vector<double> pretrain_em_curve;  // one entry per pretrain epoch
    long pretrain_steps = 0;
    double pretrain_tier0_em = 0;
    std::vector<CellResult> cells;
    double wall_clock_seconds = 0;
    nlohmann::json options_echo;

    const CellResult& cell(const std::string& name) const {
        for (const auto& c : cells) {
            if (c.name == name) return c;
        }
        throw Error("reproduction report has no cell '" + name + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& c : cells) {
            nlohmann::json row{{"method", c.name},
                               {"tier0_em", c.tier0_em},
                               {"tier1_em", c.tier1_em},
                               {"train_steps", c.train_steps},
                               {"final_ce", c.final_ce}};
            if (c.heldout_kl) row["heldout_kl"] = *c.heldout_kl;
            if (c.safelora_replaced) row["safelora_replaced"] = *c.safelora_replaced;
            rows.push_back(std::move(row));
        }
        return nlohmann::json{{"pretrain_em_curve", pretrain_em_curve},
                              {"pretrain_steps", pretrain_steps},
                              {"pretrain_tier0_em", pretrain_tier0_em},
                              {"cells", rows},
                              {"wall_clock_seconds", wall_clock_seconds},
                              {"options", options_echo}};
    }
};

namespace detail {

/// "0.01", "0.1", "1.0": compact but never ambiguous between grid points.
inline std::string format_coeff(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    std::string s(buf);
    if (s.find('.') == std::string::npos) s += ".0";
    return s;
}

inline std::vector<data::ChatExample> to_chat(const std::vector<opswap::OpSwapExample>& in,
                                              const std::string& tag) {
    std::vector<data::ChatExample> out;
    out.reserve(in.size());
    for (const auto& ex : in) {
        data::ChatExample chat;
        chat.source_tag = tag;
        chat.messages.push_back({data::Role::User, ex.expression_text});
        chat.messages.push_back({data::Role::Assistant, opswap::join_chain(ex.chain)});
        out.push_back(std::move(chat));
    }
    return out;
}

/// Deterministic 90/10 split over parallel example/chat arrays.
struct TierData {
    std::vector<data::ChatExample> train_chat;
    std::vector<opswap::OpSwapExample> eval_examples;
    std::vector<data::ChatExample> eval_chat;
};

inline TierData split_tier(const std::vector<opswap::OpSwapExample>& examples,
                           const std::string& tag, std::uint64_t seed) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t n_train = static_cast<std::size_t>(0.9 * static_cast<double>(order.size()));
    TierData out;
    std::vector<opswap::OpSwapExample> train_examples;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < n_train) {
            train_examples.push_back(examples[order[i]]);
        } else {
            out.eval_examples.push_back(examples[order[i]]);
        }
    }
    out.train_chat = to_chat(train_examples, tag);
    out.eval_chat = to_chat(out.eval_examples, tag);
    return out;
}

/// Mean held-out KL between the adapted and adapter-disabled model over the
/// completion tokens of up to `limit` sequences.
template <typename Real>
double heldout_kl(const TransformerModel<Real>& model, const LoraAdapter<Real>& adapter,
                  const std::vector<data::ChatExample>& eval_chat,
                  const data::TokenizerSpec& tokenizer, std::size_t limit) {
    typename Tape<Real>::NoGrad no_grad;
    double total = 0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < eval_chat.size() && used < limit; ++i) {
        auto tok = data::tokenize(eval_chat[i], tokenizer, model.config.context_length);
        if (tok.ids.size() < 2) continue;
        std::vector<bool> target_mask(tok.ids.size(), false);
        bool any = false;
        for (std::size_t t = 0; t + 1 < tok.ids.size(); ++t) {
            target_mask[t] = tok.completion_mask[t + 1];
            any = any || target_mask[t];
        }
        if (!any) continue;
        auto adapted = forward(model, tok.ids, &adapter);
        auto base = forward<Real>(model, tok.ids, nullptr);
        total += static_cast<double>(
            kl_divergence_rows(adapted.logits, base.logits, target_mask).item());
        ++used;
    }
    if (used == 0) throw SizeError("heldout_kl: no usable sequences");
    return total / static_cast<double>(used);
}

template <typename Real>
double em_on(const TransformerModel<Real>& model, const LoraAdapter<Real>* adapter,
             const std::vector<opswap::OpSwapExample>& eval_examples,
             const data::TokenizerSpec& tokenizer, std::size_t limit) {
    std::vector<opswap::OpSwapExample> subset(
        eval_examples.begin(),
        eval_examples.begin() + std::min<std::size_t>(limit, eval_examples.size()));
    return eval::run_exact_match_eval(model, adapter, subset, tokenizer, 1);
}

}  // namespace detail

/// Full reproduction run. Writes checkpoints, per-cell manifests, a
/// tier-by-method CSV and a JSON report under out_dir; returns the report.
template <typename Real = float>
ReproductionReport run_opswap_reproduction(const std::string& out_dir,
                                           const ReproductionOptions& options = {}) {
    namespace fs = std::filesystem;
    const auto t_start = std::chrono::steady_clock::now();
    fs::create_directories(fs::path(out_dir) / "checkpoints");
    fs::create_directories(fs::path(out_dir) / "reports");

    data::TokenizerSpec tokenizer;
    ReproductionReport report;

    opswap::GeneratorOptions gen;
    gen.op_count_range = options.op_count_range;
    gen.operand_range = options.operand_range;

    // tier-0 corpus: pretraining data, EM reference set and safe corpus
    auto tier0_examples = opswap::generate_dataset(0, options.dataset_size, options.seed, gen);
    auto tier0 = detail::split_tier(tier0_examples, "opswap-tier0", derive_seed(options.seed, 100));

    // tier-1 corpus: answers must differ from the standard reading, so exact
    // match measures the remapped semantics rather than overlap
    auto gen1 = gen;
    gen1.distinct_from_tier0 = true;
    auto tier1_examples =
        opswap::generate_dataset(1, options.dataset_size, derive_seed(options.seed, 1), gen1);
    auto tier1 = detail::split_tier(tier1_examples, "opswap-tier1", derive_seed(options.seed, 101));

    // --- stage 1: pretrain the base model on tier-0 chains ---
    auto model = init_model<Real>(options.model);
    const auto init_snapshot = model.clone();  // unaligned counterpart for SafeLoRA
    save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / "init.tarc").string());

    TrainConfig pretrain_cfg;
    pretrain_cfg.epochs = options.pretrain_epochs;
    pretrain_cfg.learning_rate = options.pretrain_lr;
    pretrain_cfg.seed = options.seed;
    pretrain_cfg.reg.lambda_kl = 0;
    pretrain_cfg.reg.lambda_ldifs = 0;
    pretrain_cfg.abort_checkpoint_path =
        (fs::path(out_dir) / "checkpoints" / "pretrain_abort.tarc").string();

    const std::size_t curve_questions = std::min<std::size_t>(options.em_eval_questions, 50);
    auto pretrain_manifest = train<Real>(
        model, nullptr, tier0.train_chat, tokenizer, pretrain_cfg,
        [&](int epoch, long steps_done) {
            const double em =
                detail::em_on<Real>(model, nullptr, tier0.eval_examples, tokenizer, curve_questions);
            report.pretrain_em_curve.push_back(em);
            if (em >= options.pretrain_em_target) return false;
            return steps_done < options.pretrain_step_budget;
        });
    report.pretrain_steps = static_cast<long>(pretrain_manifest.steps.size());
    report.pretrain_tier0_em =
        detail::em_on<Real>(model, nullptr, tier0.eval_examples, tokenizer,
                            options.em_eval_questions);
    if (report.pretrain_tier0_em < options.pretrain_em_target) {
        nlohmann::json curve = report.pretrain_em_curve;
        throw ReproductionInfeasibleError(
            "pretraining reached " + std::to_string(report.pretrain_tier0_em) +
            "% tier-0 exact match after " + std::to_string(report.pretrain_steps) +
            " steps (target " + std::to_string(options.pretrain_em_target) +
            "%); learning curve per epoch: " + curve.dump());
    }
    save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / "pretrained.tarc").string());

    // alignment vector: pretrained (aligned) minus random init (unaligned)
    auto probe_adapter = attach_adapter(model, options.lora, derive_seed(options.seed, 7));
    std::vector<std::string> target_names;
    for (const auto& t : probe_adapter.targets) target_names.push_back(t.param_name);
    auto alignment = compute_alignment_vector(model, init_snapshot, target_names,
                                              "tier0-pretrained", "random-init");
    save_alignment_vector(alignment,
                          (fs::path(out_dir) / "checkpoints" / "alignment_vector.tarc").string());

    // --- stage 2: tier-1 fine-tuning grid ---
    struct Cell {
        std::string name;
        RegConfig reg;
        double interleave_fraction = 0.0;
    };
    std::vector<Cell> cells;
    {
        RegConfig off;
        off.lambda_kl = 0;
        off.lambda_ldifs = 0;
        cells.push_back({"sft", off, 0.0});
        for (double lk : options.kl_grid) {
            RegConfig reg = off;
            reg.lambda_kl = lk;
            cells.push_back({"kl_" + detail::format_coeff(lk), reg, 0.0});
        }
        RegConfig ldifs = off;
        ldifs.lambda_ldifs = options.ldifs_lambda;
        cells.push_back({"ldifs_" + detail::format_coeff(options.ldifs_lambda), ldifs, 0.0});
        for (double f : options.interleave_fractions) {
            cells.push_back({"interleave_" + detail::format_coeff(f), off, f});
        }
    }

    LoraAdapter<Real> sft_adapter;
    for (const auto& cell : cells) {
        auto adapter = attach_adapter(model, options.lora, derive_seed(options.seed, 11));
        TrainConfig cfg;
        cfg.epochs = options.finetune_epochs;
        cfg.learning_rate = options.finetune_lr;
        cfg.seed = options.seed;
        cfg.reg = cell.reg;
        cfg.reg.interleave_fraction = cell.interleave_fraction;
        cfg.abort_checkpoint_path =
            (fs::path(out_dir) / "checkpoints" / (cell.name + "_abort.tarc")).string();

        std::vector<data::ChatExample> train_data = tier1.train_chat;
        if (cell.interleave_fraction > 0) {
            train_data = data::interleave(tier1.train_chat, tier0.train_chat,
                                          cell.interleave_fraction, derive_seed(options.seed, 21));
        }

        auto manifest = train<Real>(model, &adapter, train_data, tokenizer, cfg);
        save_adapter(adapter,
                     (fs::path(out_dir) / "checkpoints" / (cell.name + ".tarc")).string());
        {
            std::ofstream mf(fs::path(out_dir) / "reports" / (cell.name + "_manifest.json"));
            mf << manifest.to_json().dump(2) << "\n";
        }

        CellResult result;
        result.name = cell.name;
        result.train_steps = static_cast<long>(manifest.steps.size());
        result.final_ce = manifest.steps.empty() ? 0 : manifest.steps.back().ce;
        result.tier0_em = detail::em_on<Real>(model, &adapter, tier0.eval_examples, tokenizer,
                                              options.em_eval_questions);
        result.tier1_em = detail::em_on<Real>(model, &adapter, tier1.eval_examples, tokenizer,
                                              options.em_eval_questions);
        result.heldout_kl = detail::heldout_kl<Real>(model, adapter, tier1.eval_chat, tokenizer,
                                                     options.kl_eval_sequences);
        report.cells.push_back(std::move(result));
        if (cell.name == "sft") sft_adapter = adapter;
    }

    // --- stage 3: SafeLoRA projection of the unregularized adapter ---
    for (double tau : options.safelora_taus) {
        auto adapter = sft_adapter.clone();
        auto safelora_report = safelora_apply(adapter, alignment, tau);
        const std::string name = "safelora_" + detail::format_coeff(tau);
        {
            std::ofstream rf(fs::path(out_dir) / "reports" / (name + "_projection.json"));
            rf << safelora_report.to_json().dump(2) << "\n";
        }
        save_adapter(adapter, (fs::path(out_dir) / "checkpoints" / (name + ".tarc")).string());

        CellResult result;
        result.name = name;
        result.safelora_replaced = safelora_report.replaced_count();
        result.tier0_em = detail::em_on<Real>(model, &adapter, tier0.eval_examples, tokenizer,
                                              options.em_eval_questions);
        result.tier1_em = detail::em_on<Real>(model, &adapter, tier1.eval_examples, tokenizer,
                                              options.em_eval_questions);
        result.heldout_kl = detail::heldout_kl<Real>(model, adapter, tier1.eval_chat, tokenizer,
                                                     options.kl_eval_sequences);
        report.cells.push_back(std::move(result));
    }

    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    report.options_echo = nlohmann::json{
        {"model", options.model.to_json()},
        {"seed", options.seed},
        {"dataset_size", options.dataset_size},
        {"op_count_range", {options.op_count_range.first, options.op_count_range.second}},
        {"operand_range", {options.operand_range.first, options.operand_range.second}},
        {"pretrain_lr", options.pretrain_lr},
        {"pretrain_epochs", options.pretrain_epochs},
        {"finetune_epochs", options.finetune_epochs},
        {"finetune_lr", options.finetune_lr},
        {"em_eval_questions", options.em_eval_questions},
        {"lora", options.lora.to_json()},
        {"notes",
         "tier-1 data filtered to answers that differ from the standard reading; "
         "safelora aligned/unaligned pair synthesized as pretrained vs random init"}};

    // table: one row per method, EM per tier
    {
        std::ofstream csv(fs::path(out_dir) / "reports" / "em_by_method.csv");
        csv << "method,tier0_em,tier1_em,heldout_kl,safelora_replaced\n";
        for (const auto& c : report.cells) {
            csv << c.name << "," << c.tier0_em << "," << c.tier1_em << ",";
            if (c.heldout_kl) csv << *c.heldout_kl;
            csv << ",";
            if (c.safelora_replaced) csv << *c.safelora_replaced;
            csv << "\n";
        }
    }
    {
        std::ofstream js(fs::path(out_dir) / "reports" / "reproduction.json");
        js << report.to_json().dump(2) << "\n";
    }
    {
        std::ofstream mf(fs::path(out_dir) / "manifest.json");
        mf << nlohmann::json{{"kind", "opswap_reproduction"},
                             {"options", report.options_echo},
                             {"pretrain_steps", report.pretrain_steps},
                             {"pretrain_tier0_em", report.pretrain_tier0_em},
                             {"wall_clock_seconds", report.wall_clock_seconds},
                             {"artifacts",
                              {"checkpoints/init.tarc", "checkpoints/pretrained.tarc",
                               "checkpoints/alignment_vector.tarc", "reports/em_by_method.csv",
                               "reports/reproduction.json"}}}
                  .dump(2)
           << "\n";
    }
    return report;
}

}  // namespace ftlab::repro
