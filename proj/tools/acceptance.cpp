// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "peft_forge/cli.hpp"
#include "peft_forge/config.hpp"
#include "peft_forge/data.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/evaluator.hpp"
#include "peft_forge/io.hpp"
#include "peft_forge/model.hpp"
#include "peft_forge/optim.hpp"
#include "peft_forge/quant.hpp"
#include "peft_forge/rng.hpp"
#include "peft_forge/trainer.hpp"

using namespace peft;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

fs::path g_work;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = g_work / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

// Every template advisor answer passes the checker, so answers make a clean
// training and evaluation set.
std::vector<TokenizedExample> template_examples(std::size_t n, std::uint64_t seed,
                                                std::size_t context_len) {
    TemplateProvider provider(seed);
    const auto corpus = generate_corpus(n, seed, provider);
    std::vector<TokenizedExample> out;
    for (const auto& r : corpus) out.push_back(render_example(r, context_len));
    return out;
}

AdapterSet busy_adapters(const ModelConfig& c, std::uint32_t rank, std::uint64_t seed) {
    LoraConfig lc;
    lc.rank = rank;
    lc.alpha = 2.0f * rank;
    lc.init_std = 0.1f;
    lc.seed = seed;
    auto set = lora_init(c.shape(), lc);
    Rng rng(seed + 1);
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (auto& v : set[i].b) v = static_cast<float>(rng.normal(0.0, 0.1));
    }
    return set;
}

// ---------------------------------------------------------------------------

Outcome parameter_arithmetic() {
    const auto t0 = Clock::now();
    const auto r = run_cli({"count-params", "--shape", "mistral7b", "--rank", "16"});
    const double secs = seconds_since(t0);
    const bool count_ok = r.out.find("trainable: 41943040\n") != std::string::npos;
    const bool ratio_ok = r.out.find("ratio: 0.599%\n") != std::string::npos;
    const auto pc = lora_param_count(mistral7b_shape(), [] {
        LoraConfig lc;
        lc.rank = 16;
        return lc;
    }());
    const double pct = pc.ratio * 100.0;
    return {r.code == 0 && count_ok && ratio_ok && pct >= 0.599 && pct <= 0.600 && secs < 1.0,
            "trainable " + std::to_string(pc.trainable) + ", ratio " + fmt(pct, 6) + "%, " +
                fmt(secs * 1000, 3) + " ms"};
}

Outcome step_plan_arithmetic() {
    const auto t0 = Clock::now();
    const HardwareProfile a{"p100", 2, 4, 1};
    const HardwareProfile b{"t4", 4, 8, 1};
    const auto pa = plan_phase(2274, a, 1, 0);
    const auto pb = plan_phase(2274, b, 2, 0);
    const double secs = seconds_since(t0);
    return {pa.total_steps == 284 && pb.total_steps == 142 && secs < 1.0,
            "phase A " + std::to_string(pa.total_steps) + " steps, phase B " +
                std::to_string(pb.total_steps) + " steps"};
}

Outcome loss_reduction_arithmetic() {
    const double direct = loss_reduction(1.0125, 0.3405);
    const auto dir = fresh_dir("reduction");
    auto record = [](const std::string& phase, std::uint64_t step, double loss) {
        LogRecord r;
        r.phase = phase;
        r.step = step;
        r.epoch = 1.0;
        r.loss = loss;
        r.lr = 1e-4;
        r.grad_norm = 1.0;
        return log_record_to_json(r) + "\n";
    };
    write_file_atomic(dir / "a.jsonl", record("phase1-p100", 1, 1.0125) + record("phase1-p100", 284, 0.4787));
    write_file_atomic(dir / "b.jsonl", record("phase2-t4", 285, 0.43) + record("phase2-t4", 426, 0.3405));
    const std::vector<fs::path> logs{dir / "a.jsonl", dir / "b.jsonl"};
    const auto report = build_report(logs, dir / "report");
    const bool ok = std::abs(direct - 66.4) <= 0.1 && std::abs(report.reduction_percent - direct) < 1e-9 &&
                    report.phases.size() == 2;
    return {ok, "direct " + fmt(direct) + "%, report " + fmt(report.reduction_percent) + "% over " +
                    std::to_string(report.phases.size()) + " phases"};
}

Outcome toy_convergence(const fs::path& configs) {
    const auto t0 = Clock::now();
    const auto dir = fresh_dir("convergence");
    const auto data = dir / "toy.jsonl";
    if (run_cli({"gen-data", "--n", "512", "--seed", "42", "--out", data.string()}).code != 0) {
        return {false, "gen-data failed"};
    }
    cli::RecipeOptions o;
    o.model_config = configs / "mini.json";
    o.lora_config = configs / "lora.json";
    o.data = data;
    o.profile_a = configs / "p100.json";
    o.profile_b = configs / "t4.json";
    o.epochs_a = 1;
    o.epochs_b = 2;
    o.seed = 1;
    o.out_dir = dir / "run";
    o.zero_timing = true;
    std::ostringstream sink;
    const auto result = cli::two_phase_recipe(o, sink);

    std::vector<double> losses;
    bool finite = true;
    for (const auto& phase : result.report.phases) {
        for (const auto& r : phase.records) {
            losses.push_back(r.loss);
            finite = finite && std::isfinite(r.loss) && std::isfinite(r.grad_norm) && std::isfinite(r.lr);
        }
    }
    if (losses.size() < 40) return {false, "only " + std::to_string(losses.size()) + " steps logged"};
    double head = 0.0;
    double tail = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        head += losses[i] / 20.0;
        tail += losses[losses.size() - 1 - i] / 20.0;
    }
    const double ratio = tail / head;
    const double secs = seconds_since(t0);
    return {result.report.phases.size() == 2 && finite && ratio <= 0.5 && secs <= 1800.0,
            std::to_string(losses.size()) + " steps, moving average " + fmt(head) + " -> " + fmt(tail) +
                " (ratio " + fmt(ratio) + "), " + fmt(secs, 3) + " s"};
}

Outcome gradient_correctness() {
    const auto cfg = mini_advisor_config();
    const QuantizedModel model(cfg);
    const auto adapters = busy_adapters(cfg, 4, 11);
    auto batch = template_examples(2, 5, cfg.context_len);
    Tape tape;
    model.forward_loss(adapters, batch, &tape);
    const auto grads = model.backward_lora(adapters, tape);

    Tape ckpt;
    model.forward_loss(adapters, batch, &ckpt, true);
    const auto grads_ckpt = model.backward_lora(adapters, ckpt);
    bool bitwise = grads.size() == grads_ckpt.size();
    for (std::size_t i = 0; bitwise && i < grads.size(); ++i) {
        bitwise = grads[i].a == grads_ckpt[i].a && grads[i].b == grads_ckpt[i].b;
    }

    // Perturbed values are stored in fp32; the step is the exact difference
    // of the stored values, and the loss is evaluated in double.
    auto loss_at = [&](std::size_t ai, bool is_b, std::size_t idx, float value) {
        auto copy = adapters;
        (is_b ? copy[ai].b : copy[ai].a)[idx] = value;
        return model.forward_loss(copy, batch).loss;
    };
    Rng pick(2024);
    double worst = 0.0;
    std::size_t checked = 0;
    while (checked < 112) {
        const auto ai = static_cast<std::size_t>(pick.below(adapters.size()));
        const bool is_b = pick.below(2) == 1;
        const auto& param = is_b ? adapters[ai].b : adapters[ai].a;
        const auto& grad = is_b ? grads[ai].b : grads[ai].a;
        const auto idx = static_cast<std::size_t>(pick.below(param.size()));
        const float p = param[idx] + 1e-4f;
        const float m = param[idx] - 1e-4f;
        const double fd = (loss_at(ai, is_b, idx, p) - loss_at(ai, is_b, idx, m)) /
                          (static_cast<double>(p) - static_cast<double>(m));
        const double scale = std::max(std::abs(fd), std::abs(grad[idx]));
        const double rel = scale == 0.0 ? 0.0 : std::abs(fd - grad[idx]) / scale;
        worst = std::max(worst, rel);
        ++checked;
    }
    return {worst < 1e-4 && bitwise, std::to_string(checked) + " entries, worst relative error " +
                                         fmt(worst, 3) + ", checkpointed gradients " +
                                         (bitwise ? "bitwise equal" : "DIFFER")};
}

RunConfig small_run_config() {
    RunConfig rc;
    rc.model = mini_advisor_config();
    rc.model.d_model = 32;
    rc.model.n_layers = 2;
    rc.model.mlp_hidden = 64;
    rc.model.context_len = 256;
    rc.model.embed_std = 1.0f;
    rc.model.init_std = 0.125f;
    rc.model.head_std = 0.25f;
    rc.lora.rank = 4;
    rc.lora.alpha = 8.0f;
    rc.optimizer.peak_lr = 1e-2;
    rc.optimizer.warmup_steps = 4;
    rc.seed = 17;
    return rc;
}

Outcome resume_fidelity() {
    const auto rc = small_run_config();
    const QuantizedModel model(rc.model);
    const auto examples = template_examples(128, 9, rc.model.context_len);
    const HardwareProfile profile{"p", 1, 2, 1};

    auto straight = init_train_state(rc);
    begin_phase(straight, examples.size(), profile, 1);
    RunOptions all;
    all.zero_timing = true;
    run_phase(model, straight, examples, all);

    auto split = init_train_state(rc);
    begin_phase(split, examples.size(), profile, 1);
    RunOptions half;
    half.zero_timing = true;
    half.max_steps = 32;
    run_phase(model, split, examples, half);
    const auto path = fresh_dir("resume") / "half.pfrg";
    save_checkpoint(split, path);
    auto restored = load_checkpoint(path, rc.model);
    const bool round_trip = restored == split;
    run_phase(model, restored, examples, all);

    const bool adapters_equal = restored.adapters == straight.adapters;
    const bool opt_equal = restored.opt == straight.opt;
    return {round_trip && adapters_equal && opt_equal && straight.global_step == 64,
            std::to_string(straight.global_step) + " steps; adapters " +
                (adapters_equal ? "identical" : "DIFFER") + ", optimizer codes " +
                (opt_equal ? "identical" : "DIFFER")};
}

Outcome accumulation_equivalence() {
    const auto cfg = mini_advisor_config();
    const QuantizedModel model(cfg);
    const auto adapters = busy_adapters(cfg, 8, 21);
    const auto batch = template_examples(8, 13, cfg.context_len);
    Tape tape;
    model.forward_loss(adapters, batch, &tape);
    const auto full = model.backward_lora(adapters, tape);
    GradAccumulator acc(adapters, 4);
    for (std::size_t m = 0; m < 4; ++m) {
        model.forward_loss(adapters, std::span(batch).subspan(2 * m, 2), &tape);
        acc.accumulate(model.backward_lora(adapters, tape));
    }
    double diff = 0.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < full.size(); ++i) {
        for (int w = 0; w < 2; ++w) {
            const auto& f = w ? full[i].b : full[i].a;
            const auto& g = w ? acc.sum()[i].b : acc.sum()[i].a;
            for (std::size_t j = 0; j < f.size(); ++j) {
                diff += (f[j] - g[j]) * (f[j] - g[j]);
                norm += f[j] * f[j];
            }
        }
    }
    const double rel = std::sqrt(diff / norm);
    return {rel <= 1e-6, "relative difference " + fmt(rel, 3)};
}

Outcome quantization_suite() {
    std::vector<std::string> failures;
    const auto& cb = quant::nf4_codebook();
    bool invariants = cb[0] == -1.0f && cb[15] == 1.0f && cb[quant::kNf4ZeroCode] == 0.0f;
    for (std::size_t i = 1; i < cb.size(); ++i) invariants = invariants && cb[i - 1] < cb[i];
    if (!invariants) failures.push_back("codebook invariants");

    Rng rng(77);
    std::vector<float> w(64 * 40);
    for (auto& x : w) x = static_cast<float>(rng.normal(0.0, 0.05));
    w[5] = 0.9f;  // one outlier-dominated block
    const auto q = quant::quantize_nf4(w);
    const auto back = quant::dequantize_nf4(q);
    const auto scales = q.effective_scales();
    bool bound = true;
    bool absmax = true;
    for (std::size_t b = 0; b < q.num_blocks(); ++b) {
        float amax = 0.0f;
        for (std::size_t i = b * 64; i < (b + 1) * 64; ++i) {
            bound = bound && std::abs(back[i] - w[i]) <= scales[b] * quant::nf4_max_gap() / 2 * (1 + 1e-6);
            amax = std::max(amax, std::abs(w[i]));
        }
        for (std::size_t i = b * 64; i < (b + 1) * 64; ++i) {
            if (std::abs(w[i]) == amax) absmax = absmax && back[i] == w[i];
        }
    }
    if (!bound) failures.push_back("round-trip bound");
    if (!absmax) failures.push_back("absmax reconstruction");
    if (quant::quantize_nf4(back) != q) failures.push_back("idempotence");

    const auto q8 = quant::quantize_q8(w);
    const auto back8 = quant::dequantize_q8(q8, w.size());
    bool q8_bound = true;
    for (std::size_t i = 0; i < w.size(); ++i) {
        q8_bound = q8_bound && std::abs(back8[i] - w[i]) <= q8[i / 256].absmax / 254.0f * (1 + 1e-6);
    }
    if (!q8_bound) failures.push_back("Q8 bound");

    AdamConfig c;
    std::vector<float> p{1.0f};
    auto mom = zero_moments(1);
    double ref = 1.0;
    double m = 0.0;
    double v = 0.0;
    double worst = 0.0;
    for (std::uint64_t t = 1; t <= 200; ++t) {
        const std::vector<double> g{2.0 * p[0]};
        adam8_update(p, g, mom, c, 0.1, t);
        const double rg = 2.0 * ref;
        m = c.beta1 * m + (1 - c.beta1) * rg;
        v = c.beta2 * v + (1 - c.beta2) * rg * rg;
        ref -= 0.1 * (m / (1 - std::pow(c.beta1, t))) / (std::sqrt(v / (1 - std::pow(c.beta2, t))) + c.eps);
        worst = std::max(worst, std::abs(p[0] - ref));
    }
    if (worst > 5e-3) failures.push_back("8-bit Adam drift");

    std::string detail = "8-bit vs full Adam max gap " + fmt(worst, 3);
    for (const auto& f : failures) detail += "; failed: " + f;
    return {failures.empty(), detail};
}

Outcome dataset_and_compliance() {
    const auto dir = fresh_dir("dataset");
    const auto path = dir / "corpus.jsonl";
    if (run_cli({"gen-data", "--n", "2274", "--seed", "42", "--out", path.string()}).code != 0) {
        return {false, "gen-data failed"};
    }
    const auto corpus = read_corpus(path);
    std::vector<std::string> answers;
    for (const auto& r : corpus) {
        for (const auto& t : r.turns) {
            if (t.role == Role::Advisor) answers.push_back(t.content);
        }
    }
    const double rate = compliance_rate(answers);

    struct Fixture {
        const char* text;
        bool r1, r2, r3, r4;
    };
    const Fixture fixtures[] = {
        {"plain paragraph", false, false, true, true},
        {"# A\n### C\n- x\n- y", true, true, false, true},
        {"## Steps\n- one\n- two\n```\ncode", true, true, true, false},
    };
    bool fixtures_ok = true;
    for (const auto& f : fixtures) {
        const auto r = check_markdown(f.text);
        fixtures_ok = fixtures_ok && !r.compliant() && r.heading_present == f.r1 &&
                      r.bullet_list_present == f.r2 && r.no_heading_jump == f.r3 && r.fences_balanced == f.r4;
    }
    return {corpus.size() == 2274 && rate == 1.0 && fixtures_ok,
            std::to_string(corpus.size()) + " records, compliance " + fmt(rate) + ", fixtures " +
                (fixtures_ok ? "fail the expected rules" : "MISMATCH")};
}

Outcome determinism() {
    const auto dir = g_work / "determinism";
    const auto model = dir / "model.json";
    const auto lora = dir / "lora.json";
    const auto small = dir / "small.json";
    const auto large = dir / "large.json";
    const auto data = dir / "corpus.jsonl";
    const auto ck = dir / "ckpt";
    const auto logs = dir / "logs";
    const std::vector<std::vector<std::string>> commands = {
        {"gen-data", "--n", "24", "--seed", "3", "--out", data.string()},
        {"count-params", "--shape", "mini", "--rank", "8"},
        {"train", "--config", model.string(), "--lora", lora.string(), "--data", data.string(), "--profile",
         small.string(), "--epochs", "1", "--seed", "5", "--out", ck.string(), "--log",
         (logs / "phase1.jsonl").string(), "--zero-timing"},
        {"resume", "--checkpoint", (ck / "latest.pfrg").string(), "--profile", large.string(), "--epochs", "1",
         "--log", (logs / "phase2.jsonl").string(), "--zero-timing"},
        {"eval", "--checkpoint", (ck / "latest.pfrg").string(), "--data", data.string(), "--split", "0.25",
         "--markdown", data.string(), "--out", (dir / "eval.json").string()},
        {"report", "--logs", (logs / "*.jsonl").string(), "--out", (dir / "report").string()},
        {"inspect-quant", "--checkpoint", (ck / "latest.pfrg").string()},
        {"recipe", "--config", model.string(), "--lora", lora.string(), "--data", data.string(), "--profile-a",
         small.string(), "--profile-b", large.string(), "--epochs-b", "1", "--seed", "9", "--out",
         (dir / "recipe").string(), "--zero-timing"},
    };

    // One pass: fresh directory, every command in order, then a hash of each
    // command's stdout and of every file left behind.
    auto pass = [&]() -> std::vector<std::string> {
        fs::remove_all(dir);
        fs::create_directories(logs);
        write_file_atomic(model, std::string(R"({"model":{"d_model":16,"n_layers":1,"n_heads":2,)"
                                             R"("n_kv_heads":1,"mlp_hidden":16,"embed_std":1.0},)"
                                             R"("optimizer":{"peak_lr":0.01,"warmup_steps":2}})"));
        write_file_atomic(lora, std::string(R"({"rank":2,"alpha":4})"));
        write_file_atomic(small, std::string(R"({"name":"small","per_device_batch":2,"grad_accum":2,"devices":1})"));
        write_file_atomic(large, std::string(R"({"name":"large","per_device_batch":2,"grad_accum":4,"devices":1})"));
        std::vector<std::string> hashes;
        for (const auto& cmd : commands) {
            const auto r = run_cli(cmd);
            if (r.code != 0) throw Error(cmd[0] + " failed: " + r.err);
            hashes.push_back(cmd[0] + " " + to_hex(sha256(r.out)));
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            hashes.push_back(fs::relative(f, dir).string() + " " + file_sha256_hex(f));
        }
        return hashes;
    };
    const auto first = pass();
    const auto second = pass();
    std::size_t differing = 0;
    for (std::size_t i = 0; i < std::min(first.size(), second.size()); ++i) {
        if (first[i] != second[i]) ++differing;
    }
    return {first == second, std::to_string(commands.size()) + " commands, " + std::to_string(first.size()) +
                                 " hashes compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
    g_work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "peft_forge_acceptance";
    const fs::path configs = argc > 2 ? fs::path(argv[2]) : fs::path(PEFT_CONFIGS_DIR);
    fs::create_directories(g_work);

    struct Criterion {
        int id;
        const char* title;
        std::function<Outcome()> run;
    };
    std::vector<std::pair<int, bool>> results;
    auto report = [&](int id, const char* title, const Outcome& o) {
        std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << title << ": " << o.detail << "\n"
                  << std::flush;
        results.emplace_back(id, o.pass);
    };
    auto guarded = [](const std::function<Outcome()>& f) {
        try {
            return f();
        } catch (const std::exception& e) {
            return Outcome{false, std::string("error: ") + e.what()};
        }
    };

    const std::vector<Criterion> before = {
        {1, "parameter arithmetic", parameter_arithmetic},
        {2, "step-plan arithmetic", step_plan_arithmetic},
        {3, "loss-reduction arithmetic", loss_reduction_arithmetic},
    };
    const std::vector<Criterion> properties = {
        {5, "two-phase toy convergence", [&] { return toy_convergence(configs); }},
        {6, "gradient correctness", gradient_correctness},
        {7, "resume fidelity", resume_fidelity},
        {8, "accumulation equivalence", accumulation_equivalence},
        {9, "quantization suite", quantization_suite},
    };
    const std::vector<Criterion> after = {
        {10, "dataset and compliance", dataset_and_compliance},
        {11, "determinism", determinism},
    };

    for (const auto& c : before) report(c.id, c.title, guarded(c.run));
    std::vector<Outcome> prop_outcomes;
    for (const auto& c : properties) prop_outcomes.push_back(guarded(c.run));

    // The 7B-scale figures cannot be reproduced here; this criterion holds when
    // the property-based substitutes (5-9) hold. The estimator is shown as context.
    {
        bool substitutes = true;
        for (const auto& o : prop_outcomes) substitutes = substitutes && o.pass;
        LoraConfig lc;
        lc.rank = 16;
        const auto a = estimate_memory(mistral7b_shape(), HardwareProfile{"p100", 2, 4, 1}, lc, true, true);
        const auto b = estimate_memory(mistral7b_shape(), HardwareProfile{"t4", 4, 8, 1}, lc, true, true);
        report(4, "7B-scale figures substituted",
               Outcome{substitutes, std::string("substitutes 5-9 ") + (substitutes ? "pass" : "do not all pass") +
                                        "; estimator " + fmt(a.total / 1e9) + " GB / " + fmt(b.total / 1e9) +
                                        " GB vs measured 15.888 / 14.741 GB (not reproducible here)"});
    }
    for (std::size_t i = 0; i < properties.size(); ++i) {
        report(properties[i].id, properties[i].title, prop_outcomes[i]);
    }
    for (const auto& c : after) report(c.id, c.title, guarded(c.run));

    const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second; });
    std::cout << (results.size() - failed) << "/" << results.size() << " criteria passed\n";
    return failed == 0 ? 0 : 1;
}
