#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"
#include "peft_forge/trainer.hpp"

using namespace peft;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "peft_forge_test_trainer";
    std::filesystem::create_directories(dir);
    return dir / name;
}

RunConfig small_run() {
    RunConfig rc;
    rc.model.d_model = 16;
    rc.model.n_layers = 2;
    rc.model.n_heads = 4;
    rc.model.n_kv_heads = 2;
    rc.model.mlp_hidden = 24;
    rc.model.context_len = 16;
    rc.model.init_std = 0.2f;
    rc.model.embed_std = 1.0f;
    rc.model.head_std = 0.2f;
    rc.lora.rank = 2;
    rc.lora.alpha = 4.0f;
    rc.optimizer.peak_lr = 1e-2;
    rc.optimizer.warmup_steps = 4;
    rc.seed = 17;
    rc.data_path = "toy.jsonl";
    return rc;
}

std::vector<TokenizedExample> toy_examples(std::size_t n) {
    Rng rng(5);
    std::vector<TokenizedExample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = 6 + rng.below(8);
        // A repeating pattern the adapters can learn.
        const auto base = static_cast<std::int32_t>(65 + i % 3);
        out[i].tokens.push_back(kBos);
        out[i].label_mask.push_back(0);
        for (std::size_t t = 1; t + 1 < len; ++t) {
            out[i].tokens.push_back(base + static_cast<std::int32_t>(t % 4));
            out[i].label_mask.push_back(t >= 2 ? 1 : 0);
        }
        out[i].tokens.push_back(kEos);
        out[i].label_mask.push_back(1);
    }
    return out;
}

const HardwareProfile kSmall{"small", 2, 1, 1};
const HardwareProfile kLarge{"large", 2, 4, 1};

}  // namespace

TEST_CASE("plan_phase reproduces both phase step counts") {
    const HardwareProfile p100{"p100", 2, 4, 1};
    const HardwareProfile t4{"t4", 4, 8, 1};
    const auto a = plan_phase(2274, p100, 1);
    CHECK(a.steps_per_epoch == 284);
    CHECK(a.total_steps == 284);
    const auto b = plan_phase(2274, t4, 2);
    CHECK(b.steps_per_epoch == 71);
    CHECK(b.total_steps == 142);
    CHECK(plan_phase(8, HardwareProfile{"x", 8, 1, 1}, 3).total_steps == 3);
    CHECK_THROWS_AS(plan_phase(7, p100, 1), ConfigError);
    CHECK_THROWS_AS(plan_phase(8, p100, 0), ConfigError);
}

TEST_CASE("log records round-trip through JSON and reject bad fields") {
    LogRecord r{"phase1-p100", 3, 0.75, 2.5, 0.4, 1e-4, 120, 4096};
    const auto j = nlohmann::json::parse(log_record_to_json(r));
    CHECK(log_record_from_json(j) == r);
    for (const char* key : {"phase", "step", "epoch", "loss", "grad_norm", "lr", "elapsed_ms", "mem_est_bytes"}) {
        CHECK(j.contains(key));
        auto missing = j;
        missing.erase(key);
        CHECK_THROWS_AS(log_record_from_json(missing), SchemaError);
    }
    auto bad = j;
    bad["loss"] = "high";
    CHECK_THROWS_AS(log_record_from_json(bad), SchemaError);
}

TEST_CASE("a phase emits one record per step and is deterministic") {
    const auto rc = small_run();
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(128);

    auto run_once = [&] {
        auto st = init_train_state(rc);
        begin_phase(st, ex.size(), kSmall, 1);
        RunOptions opt;
        opt.zero_timing = true;
        auto logs = run_phase(model, st, ex, opt);
        return std::make_pair(std::move(st), std::move(logs));
    };
    const auto [st1, logs1] = run_once();
    const auto [st2, logs2] = run_once();
    REQUIRE(logs1.size() == 64);
    for (std::size_t i = 0; i < logs1.size(); ++i) {
        CHECK(logs1[i].step == i + 1);
        CHECK(std::isfinite(logs1[i].loss));
        CHECK(std::isfinite(logs1[i].grad_norm));
        CHECK(logs1[i].elapsed_ms == 0);
        CHECK(log_record_to_json(logs1[i]) == log_record_to_json(logs2[i]));
    }
    CHECK(logs1.front().lr == 0.0);
    CHECK(logs1[4].lr == doctest::Approx(rc.optimizer.peak_lr));
    CHECK(logs1.back().epoch == doctest::Approx(1.0));
    CHECK(st1.adapters == st2.adapters);
    CHECK(st1.global_step == 64);
    CHECK(st1.opt.step_count == 64);
    CHECK(!st1.active.has_value());
    REQUIRE(st1.phases.size() == 1);
    CHECK(st1.phases[0].steps == 64);

    double start = 0.0;
    double end = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        start += logs1[i].loss;
        end += logs1[logs1.size() - 1 - i].loss;
    }
    CHECK(end < start);
}

TEST_CASE("resume at k reproduces the uninterrupted run bitwise") {
    const auto rc = small_run();
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(128);
    RunOptions opt;
    opt.zero_timing = true;

    auto straight = init_train_state(rc);
    begin_phase(straight, ex.size(), kSmall, 1);
    const auto logs_straight = run_phase(model, straight, ex, opt);

    auto first = init_train_state(rc);
    begin_phase(first, ex.size(), kSmall, 1);
    opt.max_steps = 32;
    auto logs = run_phase(model, first, ex, opt);
    REQUIRE(first.active.has_value());
    CHECK(first.active->steps_done == 32);
    const auto path = temp_path("half.pfrg");
    save_checkpoint(first, path);

    auto second = load_checkpoint(path, rc.model);
    CHECK(second == first);
    opt.max_steps.reset();
    const auto rest = run_phase(model, second, ex, opt);
    logs.insert(logs.end(), rest.begin(), rest.end());

    CHECK(second.adapters == straight.adapters);
    CHECK(second.opt == straight.opt);
    CHECK(second == straight);
    REQUIRE(logs.size() == logs_straight.size());
    for (std::size_t i = 0; i < logs.size(); ++i) {
        CHECK(logs[i] == logs_straight[i]);
    }
}

TEST_CASE("checkpoints round-trip byte for byte") {
    const auto rc = small_run();
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(32);
    auto st = init_train_state(rc);
    begin_phase(st, ex.size(), kSmall, 1);
    RunOptions opt;
    opt.max_steps = 5;
    run_phase(model, st, ex, opt);

    const auto bytes = serialize_checkpoint(st);
    CHECK(bytes[0] == 'P');
    CHECK(bytes[1] == 'F');
    CHECK(bytes[2] == 'R');
    CHECK(bytes[3] == 'G');
    const auto back = deserialize_checkpoint(bytes);
    CHECK(back == st);
    CHECK(serialize_checkpoint(back) == bytes);

    const auto a = temp_path("a.pfrg");
    const auto b = temp_path("b.pfrg");
    save_checkpoint(st, a);
    save_checkpoint(load_checkpoint(a), b);
    CHECK(read_file_bytes(a) == read_file_bytes(b));

    const auto base = checkpoint_base_tensors(bytes);
    REQUIRE(base.size() == model.quantized_tensors().size());
    CHECK(base == model.quantized_tensors());
}

TEST_CASE("damaged or mismatched checkpoints are refused") {
    const auto rc = small_run();
    const auto st = init_train_state(rc);
    const auto bytes = serialize_checkpoint(st);

    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        CHECK_THROWS_AS(deserialize_checkpoint(std::span(bytes.data(), cut)), CheckpointError);
    }
    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(magic), CheckpointError);
    auto version = bytes;
    version[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
    CHECK_THROWS_AS(deserialize_checkpoint(version), CheckpointError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize_checkpoint(trailing), CheckpointError);

    const auto path = temp_path("cfg.pfrg");
    save_checkpoint(st, path);
    auto other = rc.model;
    other.d_model = 32;
    CHECK_THROWS_AS(load_checkpoint(path, other), CheckpointError);
    CHECK_NOTHROW(load_checkpoint(path, rc.model));
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.pfrg")), Error);
}

TEST_CASE("cross-profile resume carries adapters and moments exactly") {
    const auto rc = small_run();
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(64);
    auto st = init_train_state(rc);
    begin_phase(st, ex.size(), kSmall, 1);
    RunOptions opt;
    opt.zero_timing = true;
    const auto phase1 = run_phase(model, st, ex, opt);
    const auto path = temp_path("phase1.pfrg");
    save_checkpoint(st, path);

    auto loaded = load_checkpoint(path);
    const auto adapters_before = loaded.adapters;
    const auto opt_before = loaded.opt;
    CHECK_THROWS_AS(resume_phase(loaded, ex.size(), kLarge, 0), ConfigError);
    const auto& plan = resume_phase(loaded, ex.size(), kLarge, 2);
    CHECK(plan.steps_per_epoch == 8);
    CHECK(plan.total_steps == 16);
    CHECK(plan.seed != st.phases[0].steps);  // fresh seed draw, not a step count
    CHECK(loaded.adapters == adapters_before);
    CHECK(loaded.opt == opt_before);
    CHECK_THROWS_AS(begin_phase(loaded, ex.size(), kLarge, 1), ConfigError);

    const auto phase2 = run_phase(model, loaded, ex, opt);
    REQUIRE(phase2.size() == 16);
    CHECK(phase2.front().step == 1);
    CHECK(phase2.front().phase != phase1.front().phase);
    CHECK(loaded.global_step == 32 + 16);
    REQUIRE(loaded.phases.size() == 2);
    CHECK(loaded.phases[1].profile == kLarge);
    CHECK(phase2.front().loss < phase1.front().loss);
    CHECK(loaded.phases[1].final_loss <= loaded.phases[0].final_loss);

    auto reset = load_checkpoint(path);
    resume_phase(reset, ex.size(), kLarge, 1, true);
    CHECK(reset.opt == init_opt_state(reset.adapters));
    CHECK(reset.adapters == adapters_before);
}

TEST_CASE("epoch callbacks fire at every epoch end") {
    const auto rc = small_run();
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(16);
    auto st = init_train_state(rc);
    begin_phase(st, ex.size(), kSmall, 3);
    std::vector<std::size_t> epochs;
    std::vector<std::size_t> steps;
    RunOptions opt;
    opt.on_epoch_end = [&](const TrainState& s, std::size_t e) {
        epochs.push_back(e);
        steps.push_back(s.global_step);
    };
    std::size_t logged = 0;
    opt.on_log = [&](const LogRecord&) { ++logged; };
    run_phase(model, st, ex, opt);
    CHECK(epochs == std::vector<std::size_t>{1, 2, 3});
    CHECK(steps == std::vector<std::size_t>{8, 16, 24});
    CHECK(logged == 24);
}

TEST_CASE("a non-finite update aborts with the offending step") {
    auto rc = small_run();
    rc.optimizer.peak_lr = 1e300;
    rc.optimizer.warmup_steps = 1;
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(16);
    auto st = init_train_state(rc);
    begin_phase(st, ex.size(), kSmall, 1);
    try {
        run_phase(model, st, ex);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 2);
    }
}

TEST_CASE("run_phase checks its inputs") {
    const auto rc = small_run();
    const QuantizedModel model(rc.model);
    const auto ex = toy_examples(16);
    auto st = init_train_state(rc);
    CHECK_THROWS_AS(run_phase(model, st, ex), ConfigError);
    begin_phase(st, ex.size(), kSmall, 1);
    const auto fewer = toy_examples(12);
    CHECK_THROWS_AS(run_phase(model, st, fewer), ConfigError);
}

TEST_CASE("memory estimate for the mistral-7b shape") {
    LoraConfig lc;
    lc.rank = 16;
    const auto shape = mistral7b_shape();
    const HardwareProfile p{"p100", 2, 4, 1};
    const auto m = estimate_memory(shape, p, lc, true);
    const double P = static_cast<double>(shape.total_params);
    CHECK(m.base_weights == doctest::Approx(P * 0.5).epsilon(1e-6));
    CHECK(m.base_weights / 1e9 == doctest::Approx(3.62).epsilon(0.01));
    CHECK(m.scales == doctest::Approx(P / 64 * 4).epsilon(1e-6));
    CHECK(m.scales / 1e9 == doctest::Approx(0.45).epsilon(0.01));
    CHECK(m.adapters == 41'943'040ULL * 4);
    CHECK(m.gradients == m.adapters);
    CHECK(m.optimizer_state / 1e6 == doctest::Approx(83.9).epsilon(0.02));
    CHECK(m.optimizer_state > 2ULL * 41'943'040);
    CHECK(m.activations == 32ULL * 2 * shape.context_len * 4096 * 4 * 2);
    CHECK(m.total == m.base_weights + m.scales + m.adapters + m.gradients + m.optimizer_state + m.activations);

    const auto dq = estimate_memory(shape, p, lc, true, true);
    CHECK(dq.scales < m.scales / 3);
    CHECK(dq.base_weights == m.base_weights);
    const auto no_ckpt = estimate_memory(shape, p, lc, false);
    CHECK(no_ckpt.activations == m.activations / 2 * kActivationsPerLayer);

    ModelShape empty = shape;
    empty.n_layers = 0;
    CHECK(estimate_memory(empty, p, lc, false).activations == 0);
}
