#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "peft_forge/data.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/evaluator.hpp"
#include "peft_forge/rng.hpp"

using namespace peft;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "peft_forge_test_data";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void append_utf8(std::string& s, std::uint32_t cp) {
    if (cp < 0x80) {
        s += static_cast<char>(cp);
    } else if (cp < 0x800) {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        s += static_cast<char>(0xE0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        s += static_cast<char>(0xF0 | (cp >> 18));
        s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

std::string random_utf8(Rng& rng) {
    std::string s;
    const auto len = rng.below(40);
    for (std::uint64_t i = 0; i < len; ++i) {
        std::uint32_t cp = 0;
        switch (rng.below(4)) {
            case 0: cp = static_cast<std::uint32_t>(rng.below(0x80)); break;
            case 1: cp = 0x80 + static_cast<std::uint32_t>(rng.below(0x800 - 0x80)); break;
            case 2:
                do {
                    cp = 0x800 + static_cast<std::uint32_t>(rng.below(0x10000 - 0x800));
                } while (cp >= 0xD800 && cp <= 0xDFFF);
                break;
            default: cp = 0x10000 + static_cast<std::uint32_t>(rng.below(0x110000 - 0x10000));
        }
        append_utf8(s, cp);
    }
    return s;
}

ConversationRecord minimal_record() {
    return {"r1", Topic::Visas, {{Role::User, "Do I need a visa?"}, {Role::Advisor, "## Yes\n- a\n- b"}}};
}

std::vector<TokenizedExample> numbered_examples(std::size_t n) {
    std::vector<TokenizedExample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = 3 + i % 5;
        out[i].tokens.assign(len, static_cast<std::int32_t>(i % 256));
        out[i].tokens.back() = kEos;
        out[i].label_mask.assign(len, 1);
        out[i].label_mask[0] = 0;
    }
    return out;
}

class FlakyProvider final : public CompletionProvider {
public:
    explicit FlakyProvider(int failures) : failures_(failures) {}
    ProviderResponse complete(const ProviderRequest& request) override {
        ++calls;
        if (failures_-- > 0) {
            return {"", "stop"};  // empty advisor text fails validation
        }
        return inner_.complete(request);
    }
    int calls = 0;

private:
    int failures_;
    TemplateProvider inner_{1};
};

}  // namespace

TEST_CASE("byte codec worked examples") {
    CHECK(encode_text("").empty());
    CHECK(encode_text("Hi") == std::vector<std::int32_t>{72, 105});
    CHECK(encode_text("\xC3\xA9") == std::vector<std::int32_t>{0xC3, 0xA9});
    const std::vector<std::int32_t> with_specials{kBos, 72, kPad, 105, kEos};
    CHECK(decode(with_specials) == "Hi");
    CHECK_THROWS_AS(decode(std::vector<std::int32_t>{259}), IntegrityError);
    CHECK_THROWS_AS(decode(std::vector<std::int32_t>{-1}), IntegrityError);
}

TEST_CASE("codec round-trips 1000 random UTF-8 strings") {
    Rng rng(2024);
    for (int i = 0; i < 1000; ++i) {
        const auto s = random_utf8(rng);
        REQUIRE(is_valid_utf8(s));
        const auto ids = encode_text(s);
        CHECK(ids.size() == s.size());
        CHECK(decode(ids) == s);
    }
}

TEST_CASE("UTF-8 validation rejects malformed sequences") {
    CHECK(is_valid_utf8(""));
    CHECK(is_valid_utf8("plain ascii"));
    CHECK(is_valid_utf8("\xF0\x9F\x8E\x93"));
    CHECK(!is_valid_utf8("\x80"));
    CHECK(!is_valid_utf8("\xC3"));
    CHECK(!is_valid_utf8("\xC0\xAF"));          // overlong '/'
    CHECK(!is_valid_utf8("\xED\xA0\x80"));      // surrogate
    CHECK(!is_valid_utf8("\xF4\x90\x80\x80"));  // above U+10FFFF
    CHECK(!is_valid_utf8("\xFF"));
    CHECK_THROWS_AS(encode_text("\xFF"), SchemaError);
}

TEST_CASE("validate_record accepts a minimal record and names the first violation") {
    CHECK_NOTHROW(validate_record(minimal_record()));

    auto rec = minimal_record();
    rec.turns[1].content = "";
    try {
        validate_record(rec);
        FAIL("expected a schema error");
    } catch (const SchemaError& e) {
        CHECK(e.rule() == "advisor turns non-empty");
        CHECK(e.field() == "turns[1].content");
    }

    rec = minimal_record();
    rec.turns.pop_back();
    CHECK_THROWS_AS(validate_record(rec), SchemaError);
    rec = minimal_record();
    std::swap(rec.turns[0].role, rec.turns[1].role);
    CHECK_THROWS_AS(validate_record(rec), SchemaError);
    rec = minimal_record();
    rec.turns[0].content = "\xC3";
    CHECK_THROWS_AS(validate_record(rec), SchemaError);
    rec = minimal_record();
    rec.id.clear();
    CHECK_THROWS_AS(validate_record(rec), SchemaError);
}

TEST_CASE("validate_record on raw JSON") {
    auto j = nlohmann::json::parse(
        R"({"id":"a","topic":"scholarships","turns":[{"role":"user","content":"q"},{"role":"advisor","content":"a"}]})");
    const auto rec = validate_record(j);
    CHECK(rec.topic == Topic::Scholarships);
    CHECK(rec.turns.size() == 2);

    auto bad = j;
    bad["topic"] = "housing";
    CHECK_THROWS_AS(validate_record(bad), SchemaError);
    bad = j;
    bad["extra"] = 1;
    CHECK_THROWS_AS(validate_record(bad), SchemaError);
    bad = j;
    bad["turns"][1]["role"] = "assistant";
    CHECK_THROWS_AS(validate_record(bad), SchemaError);
    bad = j;
    bad["turns"][0]["content"] = 5;
    CHECK_THROWS_AS(validate_record(bad), SchemaError);
    CHECK_THROWS_AS(validate_record(nlohmann::json::array()), SchemaError);
}

TEST_CASE("corpus JSONL keeps field order and reports bad lines by number") {
    const auto rec = minimal_record();
    const auto line = record_to_json(rec).dump();
    CHECK(line.find("\"id\"") < line.find("\"topic\""));
    CHECK(line.find("\"topic\"") < line.find("\"turns\""));
    const std::vector<ConversationRecord> two{rec, rec};
    const auto text = corpus_to_jsonl(two);
    CHECK(parse_corpus(text) == two);

    const std::string broken = line + "\n{\"id\":\"x\"}\n";
    try {
        parse_corpus(broken);
        FAIL("expected a schema error");
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_corpus("not json\n"), SchemaError);
}

TEST_CASE("template corpus: topic split, validity and determinism") {
    TemplateProvider provider(42);
    const auto corpus = generate_corpus(2274, 42, provider);
    REQUIRE(corpus.size() == 2274);
    std::map<Topic, int> counts;
    std::set<std::string> ids;
    std::vector<std::string> answers;
    for (const auto& r : corpus) {
        ++counts[r.topic];
        ids.insert(r.id);
        CHECK_NOTHROW(validate_record(r));
        answers.push_back(r.turns[1].content);
    }
    CHECK(counts[Topic::Applications] == 758);
    CHECK(counts[Topic::Visas] == 758);
    CHECK(counts[Topic::Scholarships] == 758);
    CHECK(ids.size() == corpus.size());
    // Every generated answer passes the markdown compliance rules.
    CHECK(compliance_rate(answers) == 1.0);

    TemplateProvider again(42);
    const auto a = temp_path("a.jsonl");
    const auto b = temp_path("b.jsonl");
    write_corpus(a, corpus);
    write_corpus(b, generate_corpus(2274, 42, again));
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    CHECK(slurp(a) == slurp(b));
    CHECK(read_corpus(a) == corpus);

    TemplateProvider other(43);
    CHECK(generate_corpus(20, 43, other) != std::vector<ConversationRecord>(corpus.begin(), corpus.begin() + 20));
}

TEST_CASE("a single generated record is valid") {
    TemplateProvider provider(0);
    const auto one = generate_corpus(1, 0, provider);
    REQUIRE(one.size() == 1);
    CHECK_NOTHROW(validate_record(one[0]));
    CHECK_THROWS_AS(generate_corpus(0, 0, provider), ConfigError);
}

TEST_CASE("template provider is a pure function of seed and prompt") {
    TemplateProvider p(7);
    TemplateProvider q(7);
    ProviderRequest req;
    req.prompt = "Topic: visas\nQuestion: how?\n";
    CHECK(p.complete(req).text == q.complete(req).text);
    CHECK(p.complete(req).text == p.complete(req).text);
    req.max_tokens = 10;
    const auto cut = p.complete(req);
    CHECK(cut.text.size() <= 10);
    CHECK(cut.finish_reason == "length");
}

TEST_CASE("generation retries failed records and then aborts") {
    FlakyProvider recovers(2);
    CorpusOptions opt;
    opt.max_attempts = 3;
    const auto corpus = generate_corpus(1, 5, recovers, opt);
    CHECK(recovers.calls == 3);
    CHECK_NOTHROW(validate_record(corpus[0]));

    FlakyProvider hopeless(100);
    try {
        generate_corpus(2, 5, hopeless, opt);
        FAIL("expected failure");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("rec-00000") != std::string::npos);
        CHECK(msg.find("3 attempts") != std::string::npos);
    }
    CHECK(hopeless.calls == 3);
}

TEST_CASE("render_example matches the frozen golden tokens") {
    std::ifstream in(std::string(PEFT_FIXTURES_DIR) + "/render_golden.json");
    REQUIRE(in.good());
    const auto j = nlohmann::json::parse(in);
    const auto rec = validate_record(j["record"]);
    const auto ex = render_example(rec, j["context_len"].get<std::size_t>());
    CHECK(ex.tokens == j["tokens"].get<std::vector<std::int32_t>>());
    CHECK(ex.label_mask == j["label_mask"].get<std::vector<std::uint8_t>>());
}

TEST_CASE("render_example masks the instruction and ends with EOS") {
    TemplateProvider provider(3);
    for (const auto& rec : generate_corpus(30, 3, provider)) {
        const auto ex = render_example(rec, 256);
        REQUIRE(ex.tokens.size() == ex.label_mask.size());
        CHECK(ex.tokens.size() <= 256);
        CHECK(ex.tokens.front() == kBos);
        CHECK(ex.tokens.back() == kEos);
        CHECK(ex.label_mask.back() == 1);
        const auto prompt = render_prompt(rec.turns[0].content);
        CHECK(std::equal(prompt.begin(), prompt.end(), ex.tokens.begin()));
        for (std::size_t i = 0; i < prompt.size(); ++i) {
            CHECK(ex.label_mask[i] == 0);
        }
        for (std::size_t i = prompt.size(); i < ex.tokens.size(); ++i) {
            CHECK(ex.label_mask[i] == 1);
        }
    }
}

TEST_CASE("render_example truncates overlong responses to exactly context_len") {
    auto rec = minimal_record();
    rec.turns[1].content = std::string(500, 'x');
    const auto ex = render_example(rec, 64);
    CHECK(ex.tokens.size() == 64);
    CHECK(ex.tokens.back() == kEos);
    CHECK(ex.tokens[62] == 'x');
    rec.turns[0].content = std::string(80, 'q');
    CHECK_THROWS_AS(render_example(rec, 64), ConfigError);
}

TEST_CASE("multi-turn rendering separates turns and labels only advisor text") {
    ConversationRecord rec{"m", Topic::Applications,
                           {{Role::User, "A"}, {Role::Advisor, "B"}, {Role::User, "C"}, {Role::Advisor, "D"}}};
    const auto ex = render_example(rec, 256);
    const std::string expected = "### Instruction:\nA\n\n### Response:\nB\n\n### Instruction:\nC\n\n### Response:\nD";
    CHECK(decode(ex.tokens) == expected);
    std::string labelled;
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
        if (ex.label_mask[i] && ex.tokens[i] < 256) labelled += static_cast<char>(ex.tokens[i]);
    }
    CHECK(labelled == "BD");
}

TEST_CASE("epoch batching: paper step counts and drop-last") {
    auto steps = [](std::size_t n, std::size_t per_device, std::size_t accum) {
        const auto ex = numbered_examples(n);
        HardwareProfile p{"p", per_device, accum, 1};
        return make_epoch_batches(ex, p, 0, 1).steps;
    };
    CHECK(steps(2274, 2, 4) == 284);
    CHECK(steps(2274, 4, 8) == 71);
    CHECK(steps(8, 2, 4) == 1);
    const auto ex = numbered_examples(7);
    HardwareProfile p{"p", 2, 4, 1};
    CHECK_THROWS_AS(make_epoch_batches(ex, p, 0, 1), ConfigError);
}

TEST_CASE("epoch batching pads with PAD and visits each example at most once") {
    const auto ex = numbered_examples(21);
    HardwareProfile p{"p", 2, 2, 1};
    const auto eb = make_epoch_batches(ex, p, 3, 9);
    CHECK(eb.steps == 5);
    REQUIRE(eb.micro_batches.size() == 10);
    const auto order = epoch_order(21, 3, 9);
    std::vector<std::size_t> seen;
    for (const auto& mb : eb.micro_batches) {
        REQUIRE(mb.sequences.size() == 2);
        const auto len = mb.sequences[0].tokens.size();
        for (std::size_t k = 0; k < 2; ++k) {
            const auto& s = mb.sequences[k];
            const auto& src = ex[mb.example_ids[k]];
            CHECK(s.tokens.size() == len);
            CHECK(std::equal(src.tokens.begin(), src.tokens.end(), s.tokens.begin()));
            for (std::size_t i = src.tokens.size(); i < len; ++i) {
                CHECK(s.tokens[i] == kPad);
                CHECK(s.label_mask[i] == 0);
            }
            seen.push_back(mb.example_ids[k]);
        }
    }
    CHECK(std::equal(seen.begin(), seen.end(), order.begin()));
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 20);
}

TEST_CASE("shuffles repeat per (seed, epoch) and differ across epochs") {
    const auto a = epoch_order(100, 0, 5);
    CHECK(a == epoch_order(100, 0, 5));
    CHECK(a != epoch_order(100, 1, 5));
    CHECK(a != epoch_order(100, 0, 6));
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("hardware profiles load strictly") {
    const auto p = profile_from_json(R"({"name":"t4","per_device_batch":4,"grad_accum":8,"devices":1})");
    CHECK(p.effective_batch() == 32);
    CHECK(profile_from_json(profile_to_json(p)) == p);
    CHECK_THROWS_AS(profile_from_json(R"({"per_device_batch":4})"), ConfigError);
    CHECK_THROWS_AS(profile_from_json(R"({"per_device_batch":0,"grad_accum":1})"), ConfigError);
    CHECK_THROWS_AS(profile_from_json(R"({"per_device_batch":1,"grad_accum":1,"devices":2})"), ConfigError);
    CHECK_THROWS_AS(profile_from_json(R"({"per_device_batch":1,"grad_accum":1,"gpus":1})"), ConfigError);
    const auto path = temp_path("p100.json");
    std::ofstream(path) << R"({"per_device_batch":2,"grad_accum":4})";
    const auto loaded = load_profile(path);
    CHECK(loaded.name == "p100");
    CHECK(loaded.effective_batch() == 8);
}
