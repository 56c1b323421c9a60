#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/evaluator.hpp"
#include "peft_forge/io.hpp"

using namespace peft;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "peft_forge_test_evaluator" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string jsonl(const std::vector<LogRecord>& records) {
    std::string out;
    for (const auto& r : records) out += log_record_to_json(r) + "\n";
    return out;
}

std::vector<LogRecord> linear_phase(const std::string& name, std::size_t steps, double first,
                                    double last) {
    std::vector<LogRecord> out;
    for (std::size_t i = 0; i < steps; ++i) {
        const double t = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        out.push_back({name, i + 1, static_cast<double>(i + 1) / steps, first + (last - first) * t,
                       0.5, 1e-4, 10 * i, 1000});
    }
    return out;
}

std::vector<TokenizedExample> random_byte_examples(std::size_t n, std::size_t len, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenizedExample> out(n);
    for (auto& ex : out) {
        ex.tokens.push_back(kBos);
        ex.label_mask.push_back(0);
        for (std::size_t i = 0; i < len; ++i) {
            ex.tokens.push_back(static_cast<std::int32_t>(rng.below(256)));
            ex.label_mask.push_back(1);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("markdown worked examples") {
    const auto ok = check_markdown("## Visas\n- step one\n- step two");
    CHECK(ok.heading_present);
    CHECK(ok.bullet_list_present);
    CHECK(ok.no_heading_jump);
    CHECK(ok.fences_balanced);
    CHECK(ok.compliant());

    const auto plain = check_markdown("plain paragraph");
    CHECK(!plain.heading_present);
    CHECK(!plain.bullet_list_present);
    CHECK(plain.no_heading_jump);
    CHECK(plain.fences_balanced);
    CHECK(!plain.compliant());

    const auto jump = check_markdown("# A\n### C\n- x\n- y");
    CHECK(jump.heading_present);
    CHECK(jump.bullet_list_present);
    CHECK(!jump.no_heading_jump);
    CHECK(jump.fences_balanced);
    CHECK(!jump.compliant());
}

TEST_CASE("markdown rule edges") {
    CHECK(!check_markdown("#NoSpace\n- a\n- b").heading_present);
    CHECK(!check_markdown("####### seven\n- a\n- b").heading_present);
    CHECK(!check_markdown("#  \n- a\n- b").heading_present);
    CHECK(check_markdown("###### six").heading_present);
    // Bullets must be adjacent and share a marker.
    CHECK(!check_markdown("# h\n- a\ntext\n- b").bullet_list_present);
    CHECK(!check_markdown("# h\n- a\n* b").bullet_list_present);
    CHECK(check_markdown("# h\n* a\n* b").bullet_list_present);
    CHECK(!check_markdown("# h\n-a\n-b").bullet_list_present);
    // Levels may fall freely; the first heading may start deep.
    CHECK(check_markdown("### a\n#### b\n# c\n## d").no_heading_jump);
    CHECK(!check_markdown("## a\n#### b").no_heading_jump);
    CHECK(!check_markdown("```\ncode").fences_balanced);
    CHECK(check_markdown("```cpp\nint x;\n```").fences_balanced);
    // Windows line endings behave like Unix ones.
    CHECK(check_markdown("## Visas\r\n- one\r\n- two\r\n").compliant());
}

TEST_CASE("check_markdown is total on arbitrary bytes") {
    Rng rng(1);
    for (int i = 0; i < 500; ++i) {
        std::string s;
        const auto n = rng.below(64);
        for (std::uint64_t k = 0; k < n; ++k) {
            const char alphabet[] = "#-* `\n\r\tab\xC3\xA9";
            s += alphabet[rng.below(sizeof(alphabet) - 1)];
        }
        const auto r = check_markdown(s);
        CHECK(r.compliant() == (r.heading_present && r.bullet_list_present && r.no_heading_jump &&
                                r.fences_balanced));
        CHECK(check_markdown(s) == r);
    }
}

TEST_CASE("compliance rate over template answers and mixed sets") {
    TemplateProvider provider(11);
    const auto corpus = generate_corpus(100, 11, provider);
    std::vector<std::string> answers;
    for (const auto& r : corpus) answers.push_back(r.turns[1].content);
    CHECK(compliance_rate(answers) == 1.0);
    const std::vector<std::string> mixed{"## a\n- x\n- y", "nothing", "# b\n* p\n* q", "## c"};
    CHECK(compliance_rate(mixed) == 0.5);
    CHECK_THROWS_AS(compliance_rate(std::vector<std::string>{}), ConfigError);
}

TEST_CASE("loss reduction matches the reported endpoints") {
    CHECK(loss_reduction(1.0125, 0.3405) == doctest::Approx(66.37).epsilon(1e-4));
    CHECK(loss_reduction(1.0125, 0.4787) == doctest::Approx(52.72).epsilon(1e-4));
    CHECK(loss_reduction(0.7, 0.7) == 0.0);
    for (double k : {0.001, 3.0, 1e6}) {
        CHECK(loss_reduction(k * 1.0125, k * 0.3405) ==
              doctest::Approx(loss_reduction(1.0125, 0.3405)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(loss_reduction(0.0, 1.0), ConfigError);
    CHECK_THROWS_AS(loss_reduction(-1.0, 1.0), ConfigError);
}

TEST_CASE("split indices: floor arithmetic, determinism and disjointness") {
    const auto s = split_indices(2274, 0.05, 42);
    CHECK(s.held_out.size() == 113);
    CHECK(s.train.size() == 2274 - 113);
    CHECK(split_indices(2274, 0.05, 42).held_out == s.held_out);
    CHECK(split_indices(2274, 0.05, 43).held_out != s.held_out);
    std::vector<bool> seen(2274, false);
    for (auto i : s.held_out) seen[i] = true;
    for (auto i : s.train) {
        CHECK(!seen[i]);
        seen[i] = true;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
    CHECK_THROWS_AS(split_indices(10, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(split_indices(10, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(split_indices(10, 0.05, 1), ConfigError);
}

TEST_CASE("untrained perplexity on random bytes is near the vocabulary size") {
    const auto cfg = mini_advisor_config();
    const QuantizedModel model(cfg);
    LoraConfig lc;
    const auto adapters = lora_init(cfg.shape(), lc);
    const auto ex = random_byte_examples(20, 60, 3);
    const auto r = eval_split_loss(model, adapters, ex, 0.25, 9);
    CHECK(r.examples == 5);
    CHECK(r.tokens == 5 * 60);
    CHECK(r.perplexity == doctest::Approx(std::exp(r.loss)));
    CHECK(std::abs(r.perplexity - 259.0) < 0.15 * 259.0);
}

TEST_CASE("eval_loss weights every labelled token equally") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.mlp_hidden = 16;
    cfg.context_len = 64;
    cfg.embed_std = 1.0f;
    const QuantizedModel model(cfg);
    LoraConfig lc;
    const auto adapters = lora_init(cfg.shape(), lc);
    auto ex = random_byte_examples(2, 10, 4);
    ex[1] = random_byte_examples(1, 40, 5)[0];
    const auto a = model.forward_loss(adapters, std::span(ex).first(1));
    const auto b = model.forward_loss(adapters, std::span(ex).subspan(1, 1));
    const auto both = eval_loss(model, adapters, ex);
    CHECK(both.tokens == 50);
    CHECK(both.loss == doctest::Approx((a.loss * 10 + b.loss * 40) / 50).epsilon(1e-12));
}

TEST_CASE("two synthetic phases report the expected reduction") {
    auto p1 = linear_phase("phase1-p100", 284, 1.0125, 0.4787);
    auto p2 = linear_phase("phase2-t4", 142, 0.43, 0.3405);
    auto all = p1;
    all.insert(all.end(), p2.begin(), p2.end());
    const auto report = summarize_logs(all);
    REQUIRE(report.phases.size() == 2);
    CHECK(report.phases[0].name == "phase1-p100");
    CHECK(report.phases[0].steps == 284);
    CHECK(report.phases[0].initial_loss == doctest::Approx(1.0125));
    CHECK(report.phases[0].final_loss == doctest::Approx(0.4787));
    CHECK(report.phases[1].initial_loss == doctest::Approx(0.43));
    CHECK(report.phases[1].steps == 142);
    CHECK(report.reduction_percent == doctest::Approx(66.37).epsilon(1e-4));

    const auto single = summarize_logs(linear_phase("only", 1, 0.9, 0.9));
    CHECK(single.reduction_percent == 0.0);
    CHECK(single.phases[0].initial_loss == single.phases[0].final_loss);

    auto repeated = p1;
    repeated[10].step = 5;
    CHECK_THROWS_AS(summarize_logs(repeated), SchemaError);
}

TEST_CASE("log parsing names the source and line") {
    const auto text = jsonl(linear_phase("p", 3, 2.0, 1.0));
    CHECK(parse_log(text, "x.jsonl").size() == 3);
    CHECK(parse_log(text + "\n", "x.jsonl").size() == 3);
    const std::string broken = text + "{\"phase\":\"p\"}\n";
    try {
        parse_log(broken, "x.jsonl");
        FAIL("expected a schema error");
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("x.jsonl:4") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_log("{oops\n", "y.jsonl"), SchemaError);
}

TEST_CASE("build_report writes curves, charts and a summary") {
    const auto dir = temp_dir("report");
    const auto log1 = dir / "phase1.jsonl";
    const auto log2 = dir / "phase2.jsonl";
    write_file_atomic(log1, jsonl(linear_phase("phase1-p100", 64, 6.0, 3.0)));
    write_file_atomic(log2, jsonl(linear_phase("phase2-t4", 32, 2.9, 2.0)));
    const std::vector<std::filesystem::path> logs{log1, log2};
    const std::vector<std::string> responses{"## a\n- x\n- y", "no"};
    const auto out = dir / "out";
    const auto report = build_report(logs, out, responses);
    CHECK(report.reduction_percent == doctest::Approx((1.0 - 2.0 / 6.0) * 100.0));
    REQUIRE(report.compliance_rate.has_value());
    CHECK(*report.compliance_rate == 0.5);

    for (const char* name : {"phase1-p100", "phase2-t4"}) {
        const auto csv = read_file_text(out / (std::string(name) + ".csv"));
        std::istringstream lines(csv);
        std::string header;
        std::getline(lines, header);
        CHECK(header == "step,loss,grad_norm,lr");
        std::size_t rows = 0;
        for (std::string l; std::getline(lines, l);) {
            if (!l.empty()) ++rows;
        }
        CHECK(rows == (std::string(name) == "phase1-p100" ? 64u : 32u));
        for (const char* kind : {"-loss.svg", "-grad_norm.svg"}) {
            const auto svg = read_file_text(out / (std::string(name) + kind));
            CHECK(svg.find("<svg") != std::string::npos);
            CHECK(svg.find("width=\"800\"") != std::string::npos);
            CHECK(svg.find("height=\"400\"") != std::string::npos);
            CHECK(svg.find("<polyline") != std::string::npos);
        }
    }
    const auto summary = nlohmann::json::parse(read_file_text(out / "summary.json"));
    CHECK(summary["phases"].size() == 2);
    CHECK(summary["reduction_percent"].get<double>() == doctest::Approx(report.reduction_percent));
    CHECK(summary["compliance_rate"].get<double>() == 0.5);

    CHECK_THROWS_AS(build_report(std::vector<std::filesystem::path>{}, out), ConfigError);
}

TEST_CASE("response files accept strings, text objects and corpus records") {
    const auto dir = temp_dir("responses");
    const auto path = dir / "r.jsonl";
    write_file_atomic(path, std::string(
        "\"## a\\n- x\\n- y\"\n"
        "{\"text\":\"plain\"}\n"
        "{\"id\":\"r\",\"topic\":\"visas\",\"turns\":[{\"role\":\"user\",\"content\":\"q\"},"
        "{\"role\":\"advisor\",\"content\":\"ans\"}]}\n"));
    const auto rs = read_responses(path);
    CHECK(rs == std::vector<std::string>{"## a\n- x\n- y", "plain", "ans"});
}
