#pragma once

// Two-phase training: phase planning, the accumulate-clip-step loop, JSONL
// analytics, checkpoints, and resume across hardware profiles.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "peft_forge/data.hpp"
#include "peft_forge/lora.hpp"
#include "peft_forge/model.hpp"
#include "peft_forge/optim.hpp"
#include "peft_forge/profile.hpp"
#include "peft_forge/rng.hpp"

namespace peft {

struct PhasePlan {
    HardwareProfile profile;
    std::size_t dataset_size = 0;
    std::size_t epochs = 0;
    std::size_t steps_per_epoch = 0;
    std::size_t total_steps = 0;
    std::uint64_t seed = 0;  // data-order seed of this phase

    friend bool operator==(const PhasePlan&, const PhasePlan&) = default;
};

// steps_per_epoch = floor(dataset_size / effective_batch). Throws ConfigError
// when the dataset cannot fill one step or epochs == 0.
PhasePlan plan_phase(std::size_t dataset_size, const HardwareProfile& profile, std::size_t epochs,
                     std::uint64_t seed = 0);

struct LogRecord {
    std::string phase;
    std::uint64_t step = 0;  // 1-based within the phase
    double epoch = 0.0;      // fractional epochs completed in the phase
    double loss = 0.0;
    double grad_norm = 0.0;  // before clipping
    double lr = 0.0;
    std::uint64_t elapsed_ms = 0;
    std::uint64_t mem_est_bytes = 0;

    friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

std::string log_record_to_json(const LogRecord& record);
// Throws SchemaError naming the first missing or mistyped field.
LogRecord log_record_from_json(const nlohmann::json& j);

// Settings fixed for the lifetime of a training run.
struct RunConfig {
    ModelConfig model;
    LoraConfig lora;
    AdamConfig optimizer;  // total_steps is set per phase
    bool grad_checkpoint = false;
    std::uint64_t seed = 0;  // source of every phase's data-order seed
    std::string data_path;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct PhaseSummary {
    std::string name;
    HardwareProfile profile;
    std::size_t epochs = 0;
    std::size_t steps = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;

    friend bool operator==(const PhaseSummary&, const PhaseSummary&) = default;
};

// A phase that has been planned but not yet run to completion.
struct ActivePhase {
    std::string name;
    PhasePlan plan;
    std::size_t steps_done = 0;
    double initial_loss = 0.0;
    double last_loss = 0.0;

    friend bool operator==(const ActivePhase&, const ActivePhase&) = default;
};

struct TrainState {
    RunConfig config;
    AdapterSet adapters;
    OptState opt;
    std::vector<PhaseSummary> phases;  // completed phases, in order
    std::optional<ActivePhase> active;
    std::uint64_t global_step = 0;
    Rng rng;  // draws each phase's data-order seed

    friend bool operator==(const TrainState&, const TrainState&) = default;
};

// Fresh adapters (B = 0), zero moments, and the phase-seed generator.
TrainState init_train_state(const RunConfig& config);

// Plans a new phase on `profile` and makes it active. Throws ConfigError when
// another phase is still active.
const PhasePlan& begin_phase(TrainState& state, std::size_t dataset_size,
                             const HardwareProfile& profile, std::size_t epochs);

// Starts the next phase from a loaded state: adapters always carry over;
// optimizer moments carry over unless reset_optimizer is set.
const PhasePlan& resume_phase(TrainState& state, std::size_t dataset_size,
                              const HardwareProfile& profile, std::size_t epochs,
                              bool reset_optimizer = false);

struct RunOptions {
    // Steps to run in this call; nullopt runs the phase to completion.
    std::optional<std::size_t> max_steps;
    // Writes 0 into elapsed_ms so logs from identical runs hash identically.
    bool zero_timing = false;
    std::function<void(const LogRecord&)> on_log;
    // Called after the last step of each epoch (1-based), including the final one.
    std::function<void(const TrainState&, std::size_t epoch)> on_epoch_end;
};

// Runs the active phase from its current position. Each step consumes
// grad_accum micro-batches of the epoch order for (plan.seed, epoch), clips,
// and applies one 8-bit Adam update at lr_at(step - 1). When the phase
// completes it is moved into state.phases. Throws DivergenceError naming the
// step on a non-finite loss or gradient.
std::vector<LogRecord> run_phase(const QuantizedModel& model, TrainState& state,
                                 std::span<const TokenizedExample> examples,
                                 const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints: "PFRG", u16 version, then length-prefixed sections
// {header, config hash, adapters, optimizer, counters, rng}.

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state);
TrainState deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
// Also requires the stored model configuration to hash equal to `expected`.
TrainState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

// Frozen base tensors stored in a checkpoint header, in model order.
std::vector<std::pair<std::string, quant::QuantizedTensor>> checkpoint_base_tensors(
    std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------

struct MemoryBreakdown {
    std::uint64_t base_weights = 0;
    std::uint64_t scales = 0;
    std::uint64_t adapters = 0;
    std::uint64_t gradients = 0;
    std::uint64_t optimizer_state = 0;
    std::uint64_t activations = 0;
    std::uint64_t total = 0;
};

// Activation multiplier per layer without checkpointing.
inline constexpr std::uint64_t kActivationsPerLayer = 16;

// Analytic byte counts. Base weights at 4 bits each; scales as one f32 per
// 64-block, or with double_quantized_scales one byte per block plus 8 bytes
// per 256-scale group; adapters and gradients f32; optimizer two Q8 moments.
MemoryBreakdown estimate_memory(const ModelShape& shape, const HardwareProfile& profile,
                                const LoraConfig& lora, bool grad_checkpoint,
                                bool double_quantized_scales = false);

}  // namespace peft
