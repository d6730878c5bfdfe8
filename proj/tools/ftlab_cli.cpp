// ftlab command line: dataset generation, interleaving, LoRA training with
// the mitigation penalties, SafeLoRA projection, judge/EM evaluation, the
// end-to-end tier experiment and the gradient verification suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ftlab/data.hpp"
#include "ftlab/errors.hpp"
#include "ftlab/eval.hpp"
#include "ftlab/gradcheck.hpp"
#include "ftlab/judge_http.hpp"
#include "ftlab/lora.hpp"
#include "ftlab/model.hpp"
#include "ftlab/opswap.hpp"
#include "ftlab/regularizers.hpp"
#include "ftlab/reproduce.hpp"
#include "ftlab/train.hpp"

namespace fs = std::filesystem;
using namespace ftlab;

namespace {

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

struct CommonFlags {
    std::uint64_t seed = 0;
    std::string out;
    std::string config;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--seed", flags.seed, "Deterministic seed");
    cmd->add_option("--out", flags.out, "Output path or directory");
    cmd->add_option("--config", flags.config, "JSON config file");
}

int cmd_generate_opswap(int tier, std::size_t n, const CommonFlags& common,
                        const opswap::GeneratorOptions& gen, bool chat_format,
                        const std::string& system_prompt) {
    auto dataset = opswap::generate_dataset(tier, n, common.seed, gen);
    const std::string out = common.out.empty() ? "opswap.jsonl" : common.out;
    if (chat_format) {
        opswap::write_chat_jsonl(dataset, out, system_prompt);
    } else {
        opswap::write_jsonl(dataset, out);
    }
    std::printf("wrote %zu tier-%d examples to %s\n", dataset.size(), tier, out.c_str());
    return 0;
}

int cmd_interleave(const std::string& task_path, const std::string& safe_path, double fraction,
                   const CommonFlags& common) {
    auto task = data::load_jsonl_chat(task_path);
    auto safe = data::load_jsonl_chat(safe_path);
    auto mixed = data::interleave(task, safe, fraction, common.seed);
    const std::string out = common.out.empty() ? "interleaved.jsonl" : common.out;
    data::write_jsonl_chat(mixed, out);
    {
        std::ofstream mf(out + ".manifest.json");
        mf << data::dataset_manifest({task_path, safe_path}, mixed, fraction, common.seed).dump(2)
           << "\n";
    }
    std::printf("wrote %zu examples (%zu task + %zu safe) to %s\n", mixed.size(), task.size(),
                mixed.size() - task.size(), out.c_str());
    return 0;
}

int cmd_train(const std::string& base_ckpt, const std::string& data_path,
              const std::string& safe_path, const CommonFlags& common,
              const nlohmann::json& overrides) {
    nlohmann::json cfg_json;
    if (!common.config.empty()) cfg_json = load_json_file(common.config);
    cfg_json.update(overrides);
    auto cfg = TrainConfig::from_json(cfg_json);
    if (common.seed != 0) cfg.seed = common.seed;

    auto model = load_checkpoint<float>(base_ckpt);
    const LoraConfig lora = LoraConfig::from_json(cfg_json);
    auto adapter = attach_adapter(model, lora, derive_seed(cfg.seed, 1));

    auto dataset = data::load_jsonl_chat(data_path);
    if (cfg.reg.interleave_fraction > 0) {
        if (safe_path.empty()) {
            throw ConfigError("interleave_percentage > 0 needs --safe-data");
        }
        auto safe = data::load_jsonl_chat(safe_path);
        dataset =
            data::interleave(dataset, safe, cfg.reg.interleave_fraction, derive_seed(cfg.seed, 2));
    }

    const std::string out = common.out.empty() ? "run" : common.out;
    fs::create_directories(out);
    cfg.abort_checkpoint_path = (fs::path(out) / "adapter_abort.tarc").string();

    data::TokenizerSpec tokenizer;
    auto manifest = train<float>(model, &adapter, dataset, tokenizer, cfg);
    manifest.config_snapshot["base_checkpoint"] = base_ckpt;
    manifest.config_snapshot["data"] = data_path;
    if (!safe_path.empty()) manifest.config_snapshot["safe_data"] = safe_path;
    save_adapter(adapter, (fs::path(out) / "adapter.tarc").string());
    manifest.artifacts.push_back((fs::path(out) / "adapter.tarc").string());
    {
        std::ofstream mf(fs::path(out) / "manifest.json");
        mf << manifest.to_json().dump(2) << "\n";
    }
    std::printf("trained %zu steps; final loss %.4f; adapter at %s/adapter.tarc\n",
                manifest.steps.size(), manifest.steps.empty() ? 0.0 : manifest.steps.back().total,
                out.c_str());
    return 0;
}

int cmd_safelora_apply(const std::string& adapter_path, const std::string& av_path, double tau,
                       const CommonFlags& common) {
    auto adapter = load_adapter<float>(adapter_path);
    auto av = load_alignment_vector<float>(av_path);
    auto report = safelora_apply(adapter, av, tau);
    const std::string out = common.out.empty() ? "adapter_projected.tarc" : common.out;
    save_adapter(adapter, out);
    const std::string report_path = out + ".safelora.json";
    {
        std::ofstream rf(report_path);
        rf << report.to_json().dump(2) << "\n";
    }
    std::printf("projected %zu of %zu tensors (tau %.3f); adapter at %s, report at %s\n",
                report.replaced_count(), report.entries.size(), tau, out.c_str(),
                report_path.c_str());
    return 0;
}

int cmd_eval_em(const std::string& ckpt, const std::string& adapter_path,
                const std::string& data_path, int samples, bool greedy, double temperature,
                const CommonFlags& common) {
    auto model = load_checkpoint<float>(ckpt);
    std::optional<LoraAdapter<float>> adapter;
    if (!adapter_path.empty()) adapter = load_adapter<float>(adapter_path);
    auto dataset = opswap::load_jsonl(data_path);
    data::TokenizerSpec tokenizer;
    SamplerConfig sampler;
    sampler.greedy = greedy;
    sampler.temperature = temperature;
    sampler.seed = common.seed;
    const double em = eval::run_exact_match_eval<float>(model, adapter ? &*adapter : nullptr,
                                                        dataset, tokenizer, samples, sampler);
    std::printf("exact match: %.2f%% over %zu questions (%s, %d effective samples)\n", em,
                dataset.size(), greedy ? "greedy" : "temperature", greedy ? 1 : samples);
    if (!common.out.empty()) {
        std::ofstream rf(common.out);
        rf << nlohmann::json{{"exact_match", em},
                             {"questions", dataset.size()},
                             {"samples_per_question", greedy ? 1 : samples},
                             {"greedy", greedy},
                             {"checkpoint", ckpt},
                             {"adapter", adapter_path},
                             {"data", data_path}}
                  .dump(2)
           << "\n";
    }
    return 0;
}

int cmd_eval_judge(const std::string& ckpt, const std::string& adapter_path,
                   const std::string& questions_path, const std::string& endpoint,
                   const std::string& judge_model, bool use_mock, int n_calls,
                   const std::string& template_path, const std::string& dataset_label,
                   const std::string& method_label, const CommonFlags& common) {
    auto model = load_checkpoint<float>(ckpt);
    std::optional<LoraAdapter<float>> adapter;
    if (!adapter_path.empty()) adapter = load_adapter<float>(adapter_path);
    auto questions = data::load_jsonl_chat(questions_path);

    eval::JudgeClientConfig cfg;
    cfg.endpoint = endpoint;
    cfg.model = judge_model;

    std::string prompt_template = eval::default_judge_template();
    if (!template_path.empty()) {
        std::ifstream tf(template_path);
        if (!tf) throw ConfigError("cannot open template '" + template_path + "'");
        prompt_template.assign((std::istreambuf_iterator<char>(tf)),
                               std::istreambuf_iterator<char>());
    }

    std::unique_ptr<eval::JudgeClient> client;
    if (use_mock) {
        client = std::make_unique<eval::HashMockJudgeClient>();
    } else {
        client = std::make_unique<eval::HttpJudgeClient>(cfg);
    }

    data::TokenizerSpec tokenizer;
    auto report = eval::evaluate_with_judge<float>(model, adapter ? &*adapter : nullptr, questions,
                                                   tokenizer, *client, cfg, n_calls,
                                                   prompt_template);
    std::printf("misaligned: %.2f%%  incoherent: %.2f%%  (%zu valid / %zu total)\n",
                report.misaligned_rate, report.incoherent_rate, report.valid, report.total);

    const std::string out = common.out.empty() ? "judge_report" : common.out;
    fs::create_directories(out);
    {
        std::ofstream jf(fs::path(out) / "report.json");
        jf << report.to_json().dump(2) << "\n";
    }
    eval::write_report_csv(
        {{dataset_label, method_label, report.misaligned_rate, report.incoherent_rate, 0.0, 0.0}},
        (fs::path(out) / "report.csv").string());
    return 0;
}

int cmd_reproduce(const CommonFlags& common, repro::ReproductionOptions options) {
    options.seed = common.seed;
    if (!common.config.empty()) {
        const auto j = load_json_file(common.config);
        options.dataset_size = j.value("dataset_size", options.dataset_size);
        options.pretrain_epochs = j.value("pretrain_epochs", options.pretrain_epochs);
        options.pretrain_lr = j.value("pretrain_lr", options.pretrain_lr);
        options.finetune_epochs = j.value("finetune_epochs", options.finetune_epochs);
        options.finetune_lr = j.value("finetune_lr", options.finetune_lr);
        options.em_eval_questions = j.value("em_eval_questions", options.em_eval_questions);
        if (j.contains("model")) options.model = ModelConfig::from_json(j["model"]);
    }
    const std::string out = common.out.empty() ? "reproduction" : common.out;
    auto report = repro::run_opswap_reproduction<float>(out, options);
    std::printf("pretraining: %ld steps to %.1f%% tier-0 EM\n", report.pretrain_steps,
                report.pretrain_tier0_em);
    std::printf("%-18s %10s %10s %12s\n", "method", "tier0_em", "tier1_em", "heldout_kl");
    for (const auto& c : report.cells) {
        std::printf("%-18s %9.1f%% %9.1f%% %12.5f\n", c.name.c_str(), c.tier0_em, c.tier1_em,
                    c.heldout_kl.value_or(0.0));
    }
    std::printf("reports under %s/reports\n", out.c_str());
    return 0;
}

int cmd_grad_check(int instances) {
    bool all_ok = true;
    std::printf("%-24s %14s %14s\n", "op", "fp32 max err", "fp64 max err");
    auto f32 = gradcheck::run_battery<float>(instances, 1e-2f, 2024);
    auto f64 = gradcheck::run_battery<double>(instances, 1e-5, 2024);
    for (std::size_t i = 0; i < f32.size(); ++i) {
        const bool ok = f32[i].max_error <= 1e-3 && f64[i].max_error <= 1e-6;
        all_ok = all_ok && ok;
        std::printf("%-24s %14.3e %14.3e  %s\n", f32[i].op.c_str(), f32[i].max_error,
                    f64[i].max_error, ok ? "ok" : "FAIL");
    }
    return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ftlab: a desk-scale laboratory for regularized fine-tuning"};
    app.require_subcommand(1);

    auto* gen_cmd = app.add_subcommand("generate-opswap", "Generate a tiered OpSwap dataset");
    CommonFlags gen_common;
    add_common(gen_cmd, gen_common);
    int gen_tier = 0;
    std::size_t gen_n = 10000;
    opswap::GeneratorOptions gen_opt;
    bool gen_chat = false;
    bool gen_distinct = false;
    std::string gen_system_prompt;
    gen_cmd->add_option("--tier", gen_tier, "Tier 0-3")->check(CLI::Range(0, 3));
    gen_cmd->add_option("--n", gen_n, "Number of examples");
    gen_cmd->add_option("--op-min", gen_opt.op_count_range.first, "Min operators per expression");
    gen_cmd->add_option("--op-max", gen_opt.op_count_range.second, "Max operators per expression");
    gen_cmd->add_option("--operand-min", gen_opt.operand_range.first, "Smallest operand");
    gen_cmd->add_option("--operand-max", gen_opt.operand_range.second, "Largest operand");
    gen_cmd->add_flag("--chat", gen_chat, "Emit chat-format JSONL (user/assistant turns)");
    gen_cmd->add_flag("--distinct-from-tier0", gen_distinct,
                      "Reject examples whose answer matches the standard reading");
    gen_cmd->add_option("--system-prompt", gen_system_prompt,
                        "Optional system turn for chat export");

    auto* mix_cmd = app.add_subcommand("interleave", "Mix safe data into a task dataset");
    CommonFlags mix_common;
    add_common(mix_cmd, mix_common);
    std::string mix_task, mix_safe;
    double mix_fraction = 0.05;
    mix_cmd->add_option("--task", mix_task, "Task JSONL (chat format)")->required();
    mix_cmd->add_option("--safe", mix_safe, "Safe corpus JSONL (chat format)")->required();
    mix_cmd->add_option("--fraction", mix_fraction, "Added fraction of the task size");

    auto* train_cmd = app.add_subcommand("train", "LoRA fine-tune on a chat dataset");
    CommonFlags train_common;
    add_common(train_cmd, train_common);
    std::string train_base, train_data, train_safe;
    train_cmd->add_option("--base", train_base, "Base model checkpoint (.tarc)")->required();
    train_cmd->add_option("--data", train_data, "Training JSONL (chat format)")->required();
    train_cmd->add_option("--safe-data", train_safe, "Safe corpus for interleaving");
    double ov_lambda_kl = -1, ov_lambda_ldifs = -1, ov_lr = -1, ov_interleave = -1;
    int ov_epochs = -1;
    train_cmd->add_option("--lambda-kl", ov_lambda_kl, "Override lambda_kl");
    train_cmd->add_option("--lambda-ldifs", ov_lambda_ldifs, "Override lambda_ldifs");
    train_cmd->add_option("--lr", ov_lr, "Override learning_rate");
    train_cmd->add_option("--epochs", ov_epochs, "Override epochs");
    train_cmd->add_option("--interleave", ov_interleave, "Override interleave fraction");

    auto* safe_cmd = app.add_subcommand("safelora-apply", "Project an adapter post-training");
    CommonFlags safe_common;
    add_common(safe_cmd, safe_common);
    std::string sl_adapter, sl_av;
    double sl_tau = 0.3;
    safe_cmd->add_option("--adapter", sl_adapter, "Adapter archive (.tarc)")->required();
    safe_cmd->add_option("--alignment-vector", sl_av, "Alignment vector archive")->required();
    safe_cmd->add_option("--tau", sl_tau, "Similarity threshold");

    auto* em_cmd = app.add_subcommand("eval-em", "Exact-match evaluation on OpSwap JSONL");
    CommonFlags em_common;
    add_common(em_cmd, em_common);
    std::string em_ckpt, em_adapter, em_data;
    int em_samples = 10;
    bool em_greedy = false;
    double em_temperature = 1.0;
    em_cmd->add_option("--ckpt", em_ckpt, "Model checkpoint")->required();
    em_cmd->add_option("--adapter", em_adapter, "Adapter archive");
    em_cmd->add_option("--data", em_data, "OpSwap JSONL")->required();
    em_cmd->add_option("--samples", em_samples, "Samples per question");
    em_cmd->add_flag("--greedy", em_greedy, "Greedy decoding (one effective sample)");
    em_cmd->add_option("--temperature", em_temperature, "Sampling temperature");

    auto* judge_cmd = app.add_subcommand("eval-judge", "Judge-scored evaluation of responses");
    CommonFlags judge_common;
    add_common(judge_cmd, judge_common);
    std::string jd_ckpt, jd_adapter, jd_questions, jd_endpoint = "http://127.0.0.1:8080";
    std::string jd_model = "gpt-4o-mini", jd_template, jd_dataset = "general", jd_method = "sft";
    bool jd_mock = false;
    int jd_calls = 100;
    judge_cmd->add_option("--ckpt", jd_ckpt, "Model checkpoint")->required();
    judge_cmd->add_option("--adapter", jd_adapter, "Adapter archive");
    judge_cmd->add_option("--questions", jd_questions, "Questions JSONL (chat format)")->required();
    judge_cmd->add_option("--endpoint", jd_endpoint, "Chat-completions endpoint with logprobs");
    judge_cmd->add_option("--judge-model", jd_model, "Judge model name");
    judge_cmd->add_flag("--mock-judge", jd_mock, "Use the deterministic in-process mock");
    judge_cmd->add_option("--n-calls", jd_calls, "Judge calls per criterion");
    judge_cmd->add_option("--template", jd_template, "Judge prompt template file");
    judge_cmd->add_option("--dataset-label", jd_dataset, "Dataset column for the CSV");
    judge_cmd->add_option("--method-label", jd_method, "Method column for the CSV");

    auto* repro_cmd = app.add_subcommand("reproduce-opswap", "Run the tier experiment end to end");
    CommonFlags repro_common;
    add_common(repro_cmd, repro_common);
    repro::ReproductionOptions repro_opt;
    repro_cmd->add_option("--dataset-size", repro_opt.dataset_size, "Examples per tier");
    repro_cmd->add_option("--pretrain-epochs", repro_opt.pretrain_epochs, "Max pretrain epochs");
    repro_cmd->add_option("--pretrain-lr", repro_opt.pretrain_lr, "Pretraining learning rate");
    repro_cmd->add_option("--finetune-epochs", repro_opt.finetune_epochs, "Fine-tune epochs");
    repro_cmd->add_option("--finetune-lr", repro_opt.finetune_lr, "Fine-tune learning rate");
    repro_cmd->add_option("--em-questions", repro_opt.em_eval_questions,
                          "Held-out questions per EM evaluation");

    auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient verification");
    int grad_instances = 20;
    grad_cmd->add_option("--instances", grad_instances, "Random instances per op");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen_cmd->parsed()) {
            gen_opt.distinct_from_tier0 = gen_distinct;
            return cmd_generate_opswap(gen_tier, gen_n, gen_common, gen_opt, gen_chat,
                                       gen_system_prompt);
        }
        if (mix_cmd->parsed()) return cmd_interleave(mix_task, mix_safe, mix_fraction, mix_common);
        if (train_cmd->parsed()) {
            nlohmann::json overrides;
            if (ov_lambda_kl >= 0) overrides["lambda_kl"] = ov_lambda_kl;
            if (ov_lambda_ldifs >= 0) overrides["lambda_ldifs"] = ov_lambda_ldifs;
            if (ov_lr > 0) overrides["learning_rate"] = ov_lr;
            if (ov_epochs > 0) overrides["epochs"] = ov_epochs;
            if (ov_interleave >= 0) overrides["interleave_percentage"] = ov_interleave;
            return cmd_train(train_base, train_data, train_safe, train_common, overrides);
        }
        if (safe_cmd->parsed()) return cmd_safelora_apply(sl_adapter, sl_av, sl_tau, safe_common);
        if (em_cmd->parsed()) {
            return cmd_eval_em(em_ckpt, em_adapter, em_data, em_samples, em_greedy, em_temperature,
                               em_common);
        }
        if (judge_cmd->parsed()) {
            return cmd_eval_judge(jd_ckpt, jd_adapter, jd_questions, jd_endpoint, jd_model, jd_mock,
                                  jd_calls, jd_template, jd_dataset, jd_method, judge_common);
        }
        if (repro_cmd->parsed()) return cmd_reproduce(repro_common, repro_opt);
        if (grad_cmd->parsed()) return cmd_grad_check(grad_instances);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const LoadError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const SizeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
