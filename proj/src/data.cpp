#include "peft_forge/data.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <sstream>

#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"
#include "peft_forge/rng.hpp"

namespace peft {

namespace {

constexpr std::array<std::string_view, kNumTopics> kTopicNames = {"applications", "visas",
                                                                  "scholarships"};

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& pool) {
    return pool[rng.below(N)];
}

// Draws k distinct entries, keeping pool order randomised.
template <std::size_t N>
std::vector<std::string_view> pick_distinct(Rng& rng, const std::array<std::string_view, N>& pool,
                                            std::size_t k) {
    std::array<std::size_t, N> idx{};
    for (std::size_t i = 0; i < N; ++i) {
        idx[i] = i;
    }
    std::vector<std::string_view> out;
    for (std::size_t i = 0; i < k && i < N; ++i) {
        const std::size_t j = i + rng.below(N - i);
        std::swap(idx[i], idx[j]);
        out.push_back(pool[idx[i]]);
    }
    return out;
}

std::string fill(std::string_view tmpl, std::string_view country, std::string_view degree,
                 std::string_view field) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i);
            const auto key = tmpl.substr(i + 1, close - i - 1);
            if (key == "country") {
                out += country;
            } else if (key == "degree") {
                out += degree;
            } else if (key == "field") {
                out += field;
            }
            i = close;
        } else {
            out.push_back(tmpl[i]);
        }
    }
    return out;
}

// Grammar pools -------------------------------------------------------------

constexpr std::array<std::string_view, 10> kCountries = {
    "Germany", "Canada",  "Japan", "Australia", "the Netherlands",
    "Ireland", "Korea",   "France", "Sweden",   "New Zealand"};
constexpr std::array<std::string_view, 5> kDegrees = {"master's", "bachelor's", "PhD",
                                                      "exchange term", "MBA"};
constexpr std::array<std::string_view, 7> kFields = {
    "computer science", "public health", "economics", "engineering",
    "data science",     "architecture",  "biology"};

constexpr std::array<std::array<std::string_view, 4>, kNumTopics> kQuestions = {{
    {"How do I apply for a {degree} in {country}?",
     "What documents does a {degree} application in {country} need?",
     "When should I start applying to {field} programs in {country}?",
     "How can I make my {field} application stand out?"},
    {"What do I need for a student visa to {country}?",
     "Can I work while studying in {country}?",
     "How long does a {country} student visa take?",
     "What proof of funds does {country} ask for?"},
    {"Are there scholarships for {field} in {country}?",
     "How can I fund a {degree} in {country}?",
     "What makes a strong scholarship essay?",
     "Can international students get aid in {country}?"},
}};

constexpr std::array<std::array<std::string_view, 3>, kNumTopics> kHeadings = {{
    {"Application Steps", "Your Application Plan", "Applying to {country}"},
    {"Visa Checklist", "Student Visa Basics", "Visa Steps for {country}"},
    {"Funding Options", "Scholarship Plan", "Paying for Your {degree}"},
}};

constexpr std::array<std::string_view, 4> kIntros = {
    "Start early and stay organized.", "Here is a short plan.", "Focus on these steps.",
    "Plan for {country} like this."};

constexpr std::array<std::array<std::string_view, 6>, kNumTopics> kBullets = {{
    {"Shortlist programs and note deadlines.", "Order your transcripts early.",
     "Ask for two reference letters.", "Write a focused personal statement.",
     "Book the language test in time.", "Submit before the priority date."},
    {"Get your admission letter first.", "Show proof of funds for a year.",
     "Book the visa appointment early.", "Buy approved health insurance.",
     "Keep copies of every document.", "Check the student work-hour limit."},
    {"Check the university funding page.", "Look at government awards.",
     "Apply to several awards at once.", "Tailor each essay to the funder.",
     "Track every deadline in one place.", "Ask about teaching assistantships."},
}};

constexpr std::array<std::string_view, 4> kClosings = {
    "Good luck!", "Check official sources for updates.", "Start at least six months ahead.",
    "Your advisor can review drafts."};

constexpr std::string_view kPromptPreamble =
    "You are a study-abroad advisor. Reply in markdown with a heading and a bulleted list.\n";

std::string prompt_field(std::string_view prompt, std::string_view key) {
    std::istringstream in{std::string(prompt)};
    std::string line;
    const std::string prefix = std::string(key) + ": ";
    while (std::getline(in, line)) {
        if (line.rfind(prefix, 0) == 0) {
            return line.substr(prefix.size());
        }
    }
    return {};
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace

std::string_view topic_name(Topic t) noexcept { return kTopicNames[static_cast<std::size_t>(t)]; }

// ---------------------------------------------------------------------------
// Records

bool is_valid_utf8(std::string_view text) noexcept {
    std::size_t i = 0;
    const auto n = text.size();
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > n) {
            return false;
        }
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(text[i + k]);
            if ((cc & 0xC0) != 0x80) {
                return false;
            }
            cp = (cp << 6) | (cc & 0x3F);
        }
        if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
            cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
            return false;
        }
        i += len;
    }
    return true;
}

void validate_record(const ConversationRecord& record) {
    if (record.id.empty()) {
        throw SchemaError("id", "must be a non-empty string");
    }
    if (static_cast<std::size_t>(record.topic) >= kNumTopics) {
        throw SchemaError("topic", "must be one of applications, visas, scholarships");
    }
    if (record.turns.size() < 2) {
        throw SchemaError("turns", "at least 2 turns required");
    }
    if (record.turns.front().role != Role::User) {
        throw SchemaError("turns[0].role", "first turn role must be user");
    }
    for (std::size_t i = 0; i < record.turns.size(); ++i) {
        const auto& turn = record.turns[i];
        const std::string field = "turns[" + std::to_string(i) + "].content";
        if (!is_valid_utf8(turn.content)) {
            throw SchemaError(field, "content must be valid UTF-8");
        }
        if (turn.role == Role::Advisor && turn.content.empty()) {
            throw SchemaError(field, "advisor turns non-empty");
        }
    }
}

ConversationRecord validate_record(const nlohmann::json& raw) {
    if (!raw.is_object()) {
        throw SchemaError("record", "must be a JSON object");
    }
    for (const auto& [key, _] : raw.items()) {
        if (key != "id" && key != "topic" && key != "turns") {
            throw SchemaError(key, "unexpected field");
        }
    }
    ConversationRecord rec;
    if (!raw.contains("id") || !raw["id"].is_string()) {
        throw SchemaError("id", "must be a non-empty string");
    }
    rec.id = raw["id"].get<std::string>();
    if (!raw.contains("topic") || !raw["topic"].is_string()) {
        throw SchemaError("topic", "must be one of applications, visas, scholarships");
    }
    const auto topic = raw["topic"].get<std::string>();
    const auto it = std::find(kTopicNames.begin(), kTopicNames.end(), topic);
    if (it == kTopicNames.end()) {
        throw SchemaError("topic", "must be one of applications, visas, scholarships");
    }
    rec.topic = static_cast<Topic>(it - kTopicNames.begin());
    if (!raw.contains("turns") || !raw["turns"].is_array()) {
        throw SchemaError("turns", "must be an array");
    }
    const auto& turns = raw["turns"];
    for (std::size_t i = 0; i < turns.size(); ++i) {
        const auto& t = turns[i];
        const std::string base = "turns[" + std::to_string(i) + "]";
        if (!t.is_object() || !t.contains("role") || !t["role"].is_string()) {
            throw SchemaError(base + ".role", "must be user or advisor");
        }
        for (const auto& [key, _] : t.items()) {
            if (key != "role" && key != "content") {
                throw SchemaError(base + "." + key, "unexpected field");
            }
        }
        Turn turn;
        const auto role = t["role"].get<std::string>();
        if (role == "user") {
            turn.role = Role::User;
        } else if (role == "advisor") {
            turn.role = Role::Advisor;
        } else {
            throw SchemaError(base + ".role", "must be user or advisor");
        }
        if (!t.contains("content") || !t["content"].is_string()) {
            throw SchemaError(base + ".content", "must be a string");
        }
        turn.content = t["content"].get<std::string>();
        rec.turns.push_back(std::move(turn));
    }
    validate_record(rec);
    return rec;
}

nlohmann::ordered_json record_to_json(const ConversationRecord& record) {
    nlohmann::ordered_json j;
    j["id"] = record.id;
    j["topic"] = std::string(topic_name(record.topic));
    auto turns = nlohmann::ordered_json::array();
    for (const auto& t : record.turns) {
        nlohmann::ordered_json tj;
        tj["role"] = t.role == Role::User ? "user" : "advisor";
        tj["content"] = t.content;
        turns.push_back(std::move(tj));
    }
    j["turns"] = std::move(turns);
    return j;
}

std::string corpus_to_jsonl(std::span<const ConversationRecord> records) {
    std::string out;
    for (const auto& r : records) {
        out += record_to_json(r).dump();
        out.push_back('\n');
    }
    return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const ConversationRecord> records) {
    write_file_atomic(path, corpus_to_jsonl(records));
}

std::vector<ConversationRecord> parse_corpus(std::string_view jsonl) {
    std::vector<ConversationRecord> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < jsonl.size()) {
        auto end = jsonl.find('\n', start);
        if (end == std::string_view::npos) {
            end = jsonl.size();
        }
        ++line_no;
        const auto line = jsonl.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw SchemaError("line " + std::to_string(line_no), std::string("invalid JSON: ") + e.what());
        }
        try {
            out.push_back(validate_record(j));
        } catch (const SchemaError& e) {
            throw SchemaError("line " + std::to_string(line_no) + ": " + e.field(), e.rule());
        }
    }
    return out;
}

std::vector<ConversationRecord> read_corpus(const std::filesystem::path& path) {
    return parse_corpus(read_file_text(path));
}

// ---------------------------------------------------------------------------
// Providers

ProviderResponse TemplateProvider::complete(const ProviderRequest& request) {
    Rng rng(derive_seed(seed_, fnv1a(request.prompt)));
    const auto topic_text = prompt_field(request.prompt, "Topic");
    std::size_t topic = 0;
    for (std::size_t i = 0; i < kNumTopics; ++i) {
        if (kTopicNames[i] == topic_text) {
            topic = i;
        }
    }
    std::string country = prompt_field(request.prompt, "Country");
    std::string degree = prompt_field(request.prompt, "Degree");
    std::string field = prompt_field(request.prompt, "Field");
    if (country.empty()) {
        country = "your destination";
    }
    if (degree.empty()) {
        degree = "degree";
    }
    if (field.empty()) {
        field = "your field";
    }

    std::string text = "## ";
    text += fill(pick(rng, kHeadings[topic]), country, degree, field);
    text += '\n';
    if (rng.below(2) == 0) {
        text += fill(pick(rng, kIntros), country, degree, field);
        text += '\n';
    }
    const std::size_t n_bullets = 2 + rng.below(2);
    for (auto b : pick_distinct(rng, kBullets[topic], n_bullets)) {
        text += "- ";
        text += b;
        text += '\n';
    }
    text += pick(rng, kClosings);

    ProviderResponse resp;
    if (request.max_tokens > 0 && text.size() > request.max_tokens) {
        text.resize(request.max_tokens);
        resp.finish_reason = "length";
    } else {
        resp.finish_reason = "stop";
    }
    resp.text = std::move(text);
    return resp;
}

std::vector<ConversationRecord> generate_corpus(std::size_t n, std::uint64_t seed,
                                                CompletionProvider& provider,
                                                const CorpusOptions& options) {
    if (n < 1) {
        throw ConfigError("generate_corpus: n must be >= 1");
    }
    const std::size_t attempts = std::max<std::size_t>(1, options.max_attempts);
    std::vector<ConversationRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        const auto topic = static_cast<Topic>(i % kNumTopics);
        const auto t = static_cast<std::size_t>(topic);
        const auto country = pick(rng, kCountries);
        const auto degree = pick(rng, kDegrees);
        const auto field = pick(rng, kFields);
        const std::string question = fill(pick(rng, kQuestions[t]), country, degree, field);

        ProviderRequest req;
        req.prompt = std::string(kPromptPreamble) + "Topic: " + std::string(topic_name(topic)) +
                     "\nCountry: " + std::string(country) + "\nDegree: " + std::string(degree) +
                     "\nField: " + std::string(field) + "\nQuestion: " + question + "\n";
        req.max_tokens = 512;
        req.temperature = 0.7;

        ConversationRecord rec;
        char id[32];
        std::snprintf(id, sizeof(id), "rec-%05zu", i);
        rec.id = id;
        rec.topic = topic;
        rec.turns.push_back({Role::User, question});

        std::string last_error;
        bool ok = false;
        for (std::size_t attempt = 1; attempt <= attempts && !ok; ++attempt) {
            try {
                auto resp = provider.complete(req);
                rec.turns.push_back({Role::Advisor, std::move(resp.text)});
                validate_record(rec);
                ok = true;
            } catch (const Error& e) {
                if (rec.turns.size() > 1) {
                    rec.turns.pop_back();
                }
                last_error = e.what();
            }
        }
        if (!ok) {
            throw Error("record " + rec.id + " failed after " + std::to_string(attempts) +
                        " attempts: " + last_error);
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::int32_t> encode_text(std::string_view text) {
    if (!is_valid_utf8(text)) {
        throw SchemaError("text", "content must be valid UTF-8");
    }
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(c);
    }
    return out;
}

std::string decode(std::span<const std::int32_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= kVocabSize) {
            throw IntegrityError("decode: token id " + std::to_string(id) + " outside vocabulary");
        }
        if (id < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

std::vector<std::int32_t> render_prompt(std::string_view user_text) {
    std::vector<std::int32_t> out{kBos};
    for (auto part : {kInstructionHeader, user_text, kResponseHeader}) {
        const auto ids = encode_text(part);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

TokenizedExample render_example(const ConversationRecord& record, std::size_t context_len) {
    validate_record(record);
    if (context_len < 2) {
        throw ConfigError("render_example: context_len must be >= 2");
    }
    TokenizedExample ex;
    auto append = [&ex](std::string_view text, bool label) {
        const auto ids = encode_text(text);
        ex.tokens.insert(ex.tokens.end(), ids.begin(), ids.end());
        ex.label_mask.insert(ex.label_mask.end(), ids.size(), label ? 1 : 0);
    };
    ex.tokens.push_back(kBos);
    ex.label_mask.push_back(0);

    std::size_t first_prompt_len = 0;
    Role prev = Role::Advisor;
    for (std::size_t i = 0; i < record.turns.size(); ++i) {
        const auto& turn = record.turns[i];
        if (turn.role == Role::User) {
            if (i > 0) {
                append("\n\n", false);
            }
            append(kInstructionHeader, false);
            append(turn.content, false);
            append(kResponseHeader, false);
            if (first_prompt_len == 0) {
                first_prompt_len = ex.tokens.size();
            }
        } else {
            if (prev == Role::Advisor) {
                append("\n\n", false);
            }
            append(turn.content, true);
        }
        prev = turn.role;
    }
    if (first_prompt_len + 1 > context_len) {
        throw ConfigError("record " + record.id + ": instruction of " +
                          std::to_string(first_prompt_len) + " tokens leaves no room in context " +
                          std::to_string(context_len));
    }
    if (ex.tokens.size() + 1 > context_len) {
        ex.tokens.resize(context_len - 1);
        ex.label_mask.resize(context_len - 1);
    }
    ex.tokens.push_back(kEos);
    ex.label_mask.push_back(1);
    return ex;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(derive_seed(seed, epoch));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

EpochBatches make_epoch_batches(std::span<const TokenizedExample> examples,
                                const HardwareProfile& profile, std::size_t epoch,
                                std::uint64_t seed) {
    profile.validate();
    const std::size_t eff = profile.effective_batch();
    if (examples.size() < eff) {
        throw ConfigError("dataset of " + std::to_string(examples.size()) +
                          " examples is smaller than one effective batch (" + std::to_string(eff) +
                          ")");
    }
    EpochBatches out;
    out.steps = examples.size() / eff;
    const auto order = epoch_order(examples.size(), epoch, seed);
    const std::size_t micro = profile.per_device_batch;
    const std::size_t n_micro = out.steps * profile.grad_accum * profile.devices;
    out.micro_batches.reserve(n_micro);
    for (std::size_t m = 0; m < n_micro; ++m) {
        MicroBatch mb;
        std::size_t longest = 0;
        for (std::size_t k = 0; k < micro; ++k) {
            const std::size_t id = order[m * micro + k];
            mb.example_ids.push_back(id);
            mb.sequences.push_back(examples[id]);
            longest = std::max(longest, examples[id].tokens.size());
        }
        for (auto& s : mb.sequences) {
            s.tokens.resize(longest, kPad);
            s.label_mask.resize(longest, 0);
        }
        out.micro_batches.push_back(std::move(mb));
    }
    return out;
}

}  // namespace peft
