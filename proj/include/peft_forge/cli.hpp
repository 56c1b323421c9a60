#pragma once

// The peft-forge command line: gen-data, train, resume, eval, report,
// count-params, inspect-quant, recipe.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "peft_forge/evaluator.hpp"
#include "peft_forge/trainer.hpp"

namespace peft::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct RecipeOptions {
    std::filesystem::path model_config;
    std::filesystem::path lora_config;
    std::filesystem::path data;
    std::filesystem::path profile_a;
    std::filesystem::path profile_b;
    std::size_t epochs_a = 1;
    std::size_t epochs_b = 2;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
    bool grad_checkpoint = false;
    bool reset_optimizer = false;
    bool zero_timing = false;
};

struct RecipeResult {
    PhaseReport report;
    std::string adapter_sha256;  // final adapters
    std::filesystem::path final_checkpoint;
};

// train(profile A) -> resume(profile B) -> report, laid out under out_dir as
// checkpoints/, logs/phase1.jsonl, logs/phase2.jsonl and report/.
RecipeResult two_phase_recipe(const RecipeOptions& options, std::ostream& out);

// Hex SHA-256 over the adapters' parameter bytes in checkpoint order.
std::string adapter_sha256(const AdapterSet& adapters);

// Files in the pattern's directory whose names match its final component
// ('*' and '?' wildcards), sorted by name.
std::vector<std::filesystem::path> expand_glob(const std::string& pattern);

}  // namespace peft::cli
