#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "ftlab/opswap.hpp"
#include "ftlab/train.hpp"

using namespace ftlab;

namespace {

ModelConfig smoke_config(std::uint64_t seed = 70) {
    ModelConfig cfg;
    cfg.vocab_size = 261;
    cfg.context_length = 64;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.seed = seed;
    return cfg;
}

std::vector<data::ChatExample> smoke_dataset(std::size_t n, int tier = 0, std::uint64_t seed = 71) {
    opswap::GeneratorOptions opt;
    opt.op_count_range = {1, 2};
    auto raw = opswap::generate_dataset(tier, n, seed, opt);
    std::vector<data::ChatExample> out;
    for (const auto& ex : raw) {
        data::ChatExample chat;
        chat.source_tag = "opswap";
        chat.messages.push_back({data::Role::User, ex.expression_text});
        chat.messages.push_back({data::Role::Assistant, opswap::join_chain(ex.chain)});
        out.push_back(std::move(chat));
    }
    return out;
}

bool adapters_bitwise_equal(const LoraAdapter<float>& a, const LoraAdapter<float>& b) {
    if (a.targets.size() != b.targets.size()) return false;
    for (std::size_t i = 0; i < a.targets.size(); ++i) {
        if (!bitwise_equal(a.targets[i].up, b.targets[i].up)) return false;
        if (!bitwise_equal(a.targets[i].down, b.targets[i].down)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("learning rate schedule is the closed form") {
    TrainConfig cfg;
    cfg.warmup_steps = 5;
    cfg.learning_rate = 1e-4;
    const long total = 20;
    CHECK(learning_rate_at(cfg, 0, total) == 0.0);
    CHECK(learning_rate_at(cfg, 1, total) == 1e-4 * 1.0 / 5.0);
    CHECK(learning_rate_at(cfg, 3, total) == 1e-4 * 3.0 / 5.0);
    CHECK(learning_rate_at(cfg, 5, total) == 1e-4);
    CHECK(learning_rate_at(cfg, 12, total) == 1e-4 * (20.0 - 12.0) / 15.0);
    CHECK(learning_rate_at(cfg, 20, total) == 0.0);
    cfg.lr_scheduler_type = "constant";
    CHECK(learning_rate_at(cfg, 12, total) == 1e-4);
}

TEST_CASE("adamw single-step hand check") {
    auto p = Tensor<float>::from({1}, {1.0f}).set_requires_grad(true);
    {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto loss = sum(p);  // gradient 1
        backward(loss);
    }
    AdamW<float> opt({p}, 0.0);
    opt.step(0.1);
    // mhat = 1, vhat = 1 after bias correction; update ~ 0.1/(1+1e-8)
    CHECK(p.at(0) == doctest::Approx(0.9).epsilon(1e-6));

    auto q = Tensor<float>::from({1}, {1.0f}).set_requires_grad(true);
    {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        backward(sum(q));
    }
    AdamW<float> opt_wd({q}, 0.5);
    opt_wd.step(0.1);
    // decoupled decay subtracts lr*wd*p on top of the adam update
    CHECK(q.at(0) == doctest::Approx(0.9 - 0.1 * 0.5 * 1.0).epsilon(1e-6));
}

TEST_CASE("ten smoke steps reduce the cross-entropy") {
    auto model = init_model<float>(smoke_config());
    auto dataset = smoke_dataset(40);
    data::TokenizerSpec spec;
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.gradient_accumulation_steps = 1;
    cfg.learning_rate = 3e-3;
    cfg.warmup_steps = 2;
    cfg.reg.lambda_kl = 0;
    cfg.reg.lambda_ldifs = 0;
    auto manifest = train<float>(model, nullptr, dataset, spec, cfg);
    REQUIRE(manifest.steps.size() == 10);
    CHECK(manifest.steps.back().ce < manifest.steps.front().ce);
    CHECK(manifest.dataset_size == 40);
}

TEST_CASE("zero lambdas make the recorded total equal the ce term bitwise") {
    auto model = init_model<float>(smoke_config(72));
    auto dataset = smoke_dataset(8);
    data::TokenizerSpec spec;
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.gradient_accumulation_steps = 1;
    cfg.reg.lambda_kl = 0;
    cfg.reg.lambda_ldifs = 0;
    auto manifest = train<float>(model, nullptr, dataset, spec, cfg);
    for (const auto& s : manifest.steps) {
        CHECK(s.total == s.ce);
        CHECK(s.kl == 0.0);
        CHECK(s.ldifs == 0.0);
    }
}

TEST_CASE("training is deterministic given the seed") {
    auto dataset = smoke_dataset(16);
    data::TokenizerSpec spec;
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.gradient_accumulation_steps = 2;
    cfg.learning_rate = 1e-3;
    cfg.seed = 9;
    cfg.reg.lambda_kl = 0;
    cfg.reg.lambda_ldifs = 0;

    LoraConfig lcfg;
    lcfg.rank = 4;
    LoraAdapter<float> adapters[2];
    RunManifest manifests[2];
    for (int run = 0; run < 2; ++run) {
        auto model = init_model<float>(smoke_config(73));
        adapters[run] = attach_adapter(model, lcfg, 5);
        manifests[run] = train<float>(model, &adapters[run], dataset, spec, cfg);
    }
    CHECK(adapters_bitwise_equal(adapters[0], adapters[1]));
    REQUIRE(manifests[0].steps.size() == manifests[1].steps.size());
    for (std::size_t i = 0; i < manifests[0].steps.size(); ++i) {
        CHECK(manifests[0].steps[i].total == manifests[1].steps[i].total);
    }
}

TEST_CASE("adapter training leaves the base parameters untouched") {
    auto model = init_model<float>(smoke_config(74));
    auto reference = model.clone();
    auto dataset = smoke_dataset(8);
    data::TokenizerSpec spec;
    LoraConfig lcfg;
    lcfg.rank = 4;
    auto adapter = attach_adapter(model, lcfg, 6);
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.gradient_accumulation_steps = 1;
    cfg.learning_rate = 1e-3;
    cfg.reg.lambda_kl = 0;
    cfg.reg.lambda_ldifs = 0;
    train<float>(model, &adapter, dataset, spec, cfg);
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        CHECK(bitwise_equal(model.params[i].second, reference.params[i].second));
    }
    // and the adapter moved
    bool moved = false;
    for (const auto& t : adapter.targets) {
        for (std::size_t i = 0; i < t.up.numel(); ++i) moved = moved || t.up.data()[i] != 0.0f;
    }
    CHECK(moved);
}

TEST_CASE("gradient accumulation equals the large batch") {
    auto dataset = smoke_dataset(16);
    data::TokenizerSpec spec;

    TrainConfig accumulated;
    accumulated.batch_size = 4;
    accumulated.gradient_accumulation_steps = 4;
    accumulated.learning_rate = 1e-3;
    accumulated.warmup_steps = 0;
    accumulated.seed = 3;
    accumulated.reg.lambda_kl = 0;
    accumulated.reg.lambda_ldifs = 0;

    TrainConfig large = accumulated;
    large.batch_size = 16;
    large.gradient_accumulation_steps = 1;

    TransformerModel<float> models[2] = {init_model<float>(smoke_config(75)),
                                         init_model<float>(smoke_config(75))};
    train<float>(models[0], nullptr, dataset, spec, accumulated);
    train<float>(models[1], nullptr, dataset, spec, large);
    float worst = 0;
    for (std::size_t i = 0; i < models[0].params.size(); ++i) {
        worst = std::max(worst, max_abs_diff(models[0].params[i].second, models[1].params[i].second));
    }
    CHECK(worst <= 1e-5f);
}

TEST_CASE("loss decomposition holds at every step") {
    auto model = init_model<float>(smoke_config(76));
    auto dataset = smoke_dataset(8, 1, 77);
    data::TokenizerSpec spec;
    LoraConfig lcfg;
    lcfg.rank = 4;
    auto adapter = attach_adapter(model, lcfg, 7);
    // non-identity adapter so the penalties are live
    Rng rng(8);
    for (auto& t : adapter.targets) t.up = Tensor<float>::randn(t.up.shape(), rng, 0.05f);

    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.gradient_accumulation_steps = 1;
    cfg.learning_rate = 1e-3;
    cfg.reg.lambda_kl = 0.1;
    cfg.reg.lambda_ldifs = 1.0;
    cfg.reg.ldifs_tap_stride = 2;
    auto manifest = train<float>(model, &adapter, dataset, spec, cfg);
    for (const auto& s : manifest.steps) {
        CHECK(std::abs(s.total - (s.ce + 0.1 * s.kl + 1.0 * s.ldifs)) <= 1e-6);
        CHECK(s.kl >= -1e-6);
        CHECK(s.ldifs >= 0.0);
    }
}

TEST_CASE("non-finite loss aborts with the last good parameters saved") {
    auto model = init_model<float>(smoke_config(78));
    auto dataset = smoke_dataset(8);
    data::TokenizerSpec spec;
    LoraConfig lcfg;
    lcfg.rank = 2;
    auto adapter = attach_adapter(model, lcfg, 9);
    for (auto& t : adapter.targets) {
        t.up = Tensor<float>::full(t.up.shape(), 1e30f);  // forces inf logits
    }
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.gradient_accumulation_steps = 1;
    cfg.reg.lambda_kl = 0;
    cfg.reg.lambda_ldifs = 0;
    cfg.abort_checkpoint_path = "/tmp/ftlab_test_abort.tarc";
    CHECK_THROWS_AS(train<float>(model, &adapter, dataset, spec, cfg), TrainAbortError);
    auto recovered = load_adapter<float>(cfg.abort_checkpoint_path);
    CHECK(recovered.targets.size() == adapter.targets.size());
    std::remove(cfg.abort_checkpoint_path.c_str());
}

TEST_CASE("train config json round trip uses the published field names") {
    nlohmann::json j{{"epochs", 2},
                     {"per_device_train_batch_size", 8},
                     {"gradient_accumulation_steps", 2},
                     {"warmup_steps", 7},
                     {"learning_rate", 5e-4},
                     {"weight_decay", 0.02},
                     {"lr_scheduler_type", "linear"},
                     {"seed", 11},
                     {"lambda_kl", 0.3},
                     {"lambda_ldifs", 0.0},
                     {"tau", 0.4},
                     {"interleave_percentage", 0.2}};
    auto cfg = TrainConfig::from_json(j);
    CHECK(cfg.epochs == 2);
    CHECK(cfg.batch_size == 8);
    CHECK(cfg.warmup_steps == 7);
    CHECK(cfg.reg.lambda_kl == 0.3);
    CHECK(cfg.reg.safelora_tau == 0.4);
    CHECK(cfg.reg.interleave_fraction == 0.2);
    auto round = TrainConfig::from_json(cfg.to_json());
    CHECK(round.to_json() == cfg.to_json());

    nlohmann::json bad = j;
    bad["learning_rate"] = -1.0;
    CHECK_THROWS_AS(TrainConfig::from_json(bad), ConfigError);
}
