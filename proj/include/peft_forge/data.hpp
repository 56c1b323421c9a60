#pragma once

// Synthetic student-advisor corpus: records, generation through a pluggable
// completion provider, byte-level tokenization, chat-template rendering with
// loss masks, and per-epoch micro-batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peft_forge/model.hpp"
#include "peft_forge/profile.hpp"
#include "json.hpp"

namespace peft {

enum class Topic : std::uint8_t { Applications = 0, Visas = 1, Scholarships = 2 };
inline constexpr std::size_t kNumTopics = 3;

std::string_view topic_name(Topic t) noexcept;

enum class Role : std::uint8_t { User, Advisor };

struct Turn {
    Role role = Role::User;
    std::string content;

    friend bool operator==(const Turn&, const Turn&) = default;
};

struct ConversationRecord {
    std::string id;
    Topic topic = Topic::Applications;
    std::vector<Turn> turns;

    friend bool operator==(const ConversationRecord&, const ConversationRecord&) = default;
};

bool is_valid_utf8(std::string_view text) noexcept;

// Enforces every record invariant; throws SchemaError naming the first
// violated field.
ConversationRecord validate_record(const nlohmann::json& raw);
void validate_record(const ConversationRecord& record);

// {"id", "topic", "turns": [{"role", "content"}]} with keys in that order.
nlohmann::ordered_json record_to_json(const ConversationRecord& record);
std::string corpus_to_jsonl(std::span<const ConversationRecord> records);
void write_corpus(const std::filesystem::path& path, std::span<const ConversationRecord> records);
// Parses and validates every line; SchemaError messages carry the line number.
std::vector<ConversationRecord> read_corpus(const std::filesystem::path& path);
std::vector<ConversationRecord> parse_corpus(std::string_view jsonl);

// ---------------------------------------------------------------------------
// Providers

struct ProviderRequest {
    std::string prompt;
    std::uint32_t max_tokens = 512;
    double temperature = 0.7;
};

struct ProviderResponse {
    std::string text;
    std::string finish_reason;
};

class CompletionProvider {
public:
    virtual ~CompletionProvider() = default;
    virtual ProviderResponse complete(const ProviderRequest& request) = 0;
};

// Offline backend: answers advisor prompts from a fixed grammar. The answer is
// a pure function of (seed, prompt).
class TemplateProvider final : public CompletionProvider {
public:
    explicit TemplateProvider(std::uint64_t seed) : seed_(seed) {}
    ProviderResponse complete(const ProviderRequest& request) override;

private:
    std::uint64_t seed_;
};

struct CorpusOptions {
    std::size_t max_attempts = 3;
};

// Records cycle through the three topics; record i draws its question from
// derive_seed(seed, i) and asks the provider for the advisor answer.
std::vector<ConversationRecord> generate_corpus(std::size_t n, std::uint64_t seed,
                                                CompletionProvider& provider,
                                                const CorpusOptions& options = {});

// ---------------------------------------------------------------------------
// Tokenizer: one token per byte, plus three specials.

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::size_t kVocabSize = 259;

std::vector<std::int32_t> encode_text(std::string_view text);
std::string decode(std::span<const std::int32_t> ids);

inline constexpr std::string_view kInstructionHeader = "### Instruction:\n";
inline constexpr std::string_view kResponseHeader = "\n\n### Response:\n";

using TokenizedExample = Sequence;

// BOS + instruction header + user text + response header + advisor text + EOS.
// Only advisor tokens and EOS are labelled. Overlong responses are cut so the
// sequence is exactly context_len with EOS kept last.
TokenizedExample render_example(const ConversationRecord& record, std::size_t context_len);

// Prompt tokens (BOS through the response header) for the first user turn.
std::vector<std::int32_t> render_prompt(std::string_view user_text);

struct MicroBatch {
    std::vector<Sequence> sequences;       // padded with PAD to the longest member
    std::vector<std::size_t> example_ids;  // positions in the source example list
};

struct EpochBatches {
    std::size_t steps = 0;               // optimizer steps this epoch
    std::vector<MicroBatch> micro_batches;  // steps * grad_accum, in order
};

// Shuffles with a generator seeded by (seed, epoch) and drops the trailing
// partial effective batch. Throws ConfigError when fewer examples than one
// effective batch are available.
EpochBatches make_epoch_batches(std::span<const TokenizedExample> examples,
                                const HardwareProfile& profile, std::size_t epoch,
                                std::uint64_t seed);

// Order in which examples are visited in the given epoch (before drop-last).
std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch, std::uint64_t seed);

}  // namespace peft
