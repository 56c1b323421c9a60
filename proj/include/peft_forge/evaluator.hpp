#pragma once

// Held-out loss, markdown compliance, loss-reduction arithmetic, and the
// phase report built from training logs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peft_forge/data.hpp"
#include "peft_forge/model.hpp"
#include "peft_forge/trainer.hpp"

namespace peft {

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> held_out;  // floor(n * fraction) examples
};

// Seeded permutation of [0, n); the first floor(n * fraction) entries are
// held out. Throws ConfigError when fraction is outside (0, 1) or the held-out
// set would be empty.
SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed);

struct SplitLoss {
    double loss = 0.0;  // mean cross-entropy per labelled token (nats)
    double perplexity = 0.0;
    std::size_t examples = 0;
    std::size_t tokens = 0;
};

SplitLoss eval_split_loss(const QuantizedModel& model, const AdapterSet& adapters,
                          std::span<const TokenizedExample> examples, double split_fraction,
                          std::uint64_t seed);

// Token-weighted loss over an explicit example list.
SplitLoss eval_loss(const QuantizedModel& model, const AdapterSet& adapters,
                    std::span<const TokenizedExample> examples);

struct ComplianceReport {
    bool heading_present = false;      // R1: an ATX heading "#".."######" + space + text
    bool bullet_list_present = false;  // R2: two consecutive lines with the same "- " or "* " marker
    bool no_heading_jump = false;      // R3: heading level never rises by more than 1
    bool fences_balanced = false;      // R4: an even number of lines starting with ```

    bool compliant() const noexcept {
        return heading_present && bullet_list_present && no_heading_jump && fences_balanced;
    }
    friend bool operator==(const ComplianceReport&, const ComplianceReport&) = default;
};

// Total: never throws.
ComplianceReport check_markdown(std::string_view text) noexcept;

// Fraction of texts whose report is compliant. Throws ConfigError when empty.
double compliance_rate(std::span<const std::string> texts);

// (1 - final / initial) * 100. Throws ConfigError when initial <= 0.
double loss_reduction(double initial, double final_loss);

struct PhaseCurve {
    std::string name;
    std::vector<LogRecord> records;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t steps = 0;
    double epochs = 0.0;
};

struct PhaseReport {
    std::vector<PhaseCurve> phases;  // in order of first appearance
    double reduction_percent = 0.0;
    std::optional<double> compliance_rate;
};

// Parses JSONL log text; SchemaError messages carry `source` and the line number.
std::vector<LogRecord> parse_log(std::string_view text, const std::string& source);

// Groups records by phase and checks steps are strictly increasing in each.
PhaseReport summarize_logs(std::span<const LogRecord> records);

// Reads every log, writes <phase>.csv, <phase>-loss.svg, <phase>-grad_norm.svg
// and summary.json into out_dir. Throws ConfigError on an empty log set.
PhaseReport build_report(std::span<const std::filesystem::path> logs,
                         const std::filesystem::path& out_dir,
                         std::optional<std::vector<std::string>> responses = std::nullopt);

std::string curve_csv(const PhaseCurve& curve);
// 800 x 400 line chart of one series.
std::string curve_svg(const std::string& title, std::span<const double> xs,
                      std::span<const double> ys);
std::string summary_json(const PhaseReport& report);

// Response texts from JSONL: a JSON string, an object with "text", or a
// corpus record (its advisor turns).
std::vector<std::string> read_responses(const std::filesystem::path& path);

}  // namespace peft
