#include "peft_forge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include "peft_forge/binary_io.hpp"
#include "peft_forge/config.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"

namespace peft {

PhasePlan plan_phase(std::size_t dataset_size, const HardwareProfile& profile, std::size_t epochs,
                     std::uint64_t seed) {
    profile.validate();
    if (epochs < 1) {
        throw ConfigError("epochs must be >= 1");
    }
    const std::size_t eff = profile.effective_batch();
    if (dataset_size < eff) {
        throw ConfigError("dataset of " + std::to_string(dataset_size) +
                          " examples is too small for one step at effective batch " +
                          std::to_string(eff));
    }
    PhasePlan plan;
    plan.profile = profile;
    plan.dataset_size = dataset_size;
    plan.epochs = epochs;
    plan.steps_per_epoch = dataset_size / eff;
    plan.total_steps = plan.steps_per_epoch * epochs;
    plan.seed = seed;
    return plan;
}

// ---------------------------------------------------------------------------
// Log records

std::string log_record_to_json(const LogRecord& r) {
    nlohmann::ordered_json j;
    j["phase"] = r.phase;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["grad_norm"] = r.grad_norm;
    j["lr"] = r.lr;
    j["elapsed_ms"] = r.elapsed_ms;
    j["mem_est_bytes"] = r.mem_est_bytes;
    return j.dump();
}

LogRecord log_record_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw SchemaError("record", "must be a JSON object");
    }
    auto number = [&j](const char* key) -> const nlohmann::json& {
        if (!j.contains(key) || !j[key].is_number()) {
            throw SchemaError(key, "must be a number");
        }
        return j[key];
    };
    auto count = [&j](const char* key) -> std::uint64_t {
        if (!j.contains(key) || !j[key].is_number_unsigned()) {
            throw SchemaError(key, "must be a non-negative integer");
        }
        return j[key].get<std::uint64_t>();
    };
    LogRecord r;
    if (!j.contains("phase") || !j["phase"].is_string()) {
        throw SchemaError("phase", "must be a string");
    }
    r.phase = j["phase"].get<std::string>();
    r.step = count("step");
    r.epoch = number("epoch").get<double>();
    r.loss = number("loss").get<double>();
    r.grad_norm = number("grad_norm").get<double>();
    r.lr = number("lr").get<double>();
    r.elapsed_ms = count("elapsed_ms");
    r.mem_est_bytes = count("mem_est_bytes");
    if (!std::isfinite(r.loss)) {
        throw SchemaError("loss", "must be finite");
    }
    return r;
}

// ---------------------------------------------------------------------------
// State and phases

TrainState init_train_state(const RunConfig& config) {
    config.model.validate();
    config.lora.validate();
    TrainState st;
    st.config = config;
    st.adapters = lora_init(config.model.shape(), config.lora);
    st.opt = init_opt_state(st.adapters);
    st.rng = Rng(derive_seed(config.seed, 0x7068617365ULL));
    return st;
}

const PhasePlan& begin_phase(TrainState& state, std::size_t dataset_size,
                             const HardwareProfile& profile, std::size_t epochs) {
    if (state.active) {
        throw ConfigError("phase '" + state.active->name + "' is unfinished (" +
                          std::to_string(state.active->steps_done) + " of " +
                          std::to_string(state.active->plan.total_steps) + " steps)");
    }
    auto plan = plan_phase(dataset_size, profile, epochs, 0);
    plan.seed = state.rng.next_u64();
    ActivePhase ap;
    ap.name = "phase" + std::to_string(state.phases.size() + 1) + "-" +
              (profile.name.empty() ? std::string("profile") : profile.name);
    ap.plan = plan;
    state.active = std::move(ap);
    return state.active->plan;
}

const PhasePlan& resume_phase(TrainState& state, std::size_t dataset_size,
                              const HardwareProfile& profile, std::size_t epochs,
                              bool reset_optimizer) {
    if (epochs < 1) {
        throw ConfigError("resume needs epochs >= 1");
    }
    if (state.active) {
        throw ConfigError("checkpoint holds unfinished phase '" + state.active->name +
                          "'; finish it before starting a new phase");
    }
    const auto& plan = begin_phase(state, dataset_size, profile, epochs);
    if (reset_optimizer) {
        state.opt = init_opt_state(state.adapters);
    }
    return plan;
}

std::vector<LogRecord> run_phase(const QuantizedModel& model, TrainState& state,
                                 std::span<const TokenizedExample> examples,
                                 const RunOptions& options) {
    if (!state.active) {
        throw ConfigError("run_phase: no active phase");
    }
    if (!(model.config() == state.config.model)) {
        throw ConfigError("run_phase: model configuration differs from the training state");
    }
    ActivePhase& ap = *state.active;
    const PhasePlan plan = ap.plan;
    if (examples.size() != plan.dataset_size) {
        throw ConfigError("run_phase: phase was planned for " + std::to_string(plan.dataset_size) +
                          " examples but " + std::to_string(examples.size()) + " were given");
    }
    AdamConfig cfg = state.config.optimizer;
    cfg.total_steps = plan.total_steps;
    cfg.warmup_steps = std::min<std::uint64_t>(cfg.warmup_steps, plan.total_steps);
    cfg.validate();

    const std::size_t accum = plan.profile.grad_accum * plan.profile.devices;
    const std::uint64_t mem =
        estimate_memory(model.config().shape(), plan.profile, state.config.lora,
                        state.config.grad_checkpoint, true)
            .total;
    std::size_t target = plan.total_steps;
    if (options.max_steps) {
        target = std::min(target, ap.steps_done + *options.max_steps);
    }

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<LogRecord> records;
    GradAccumulator acc(state.adapters, accum);
    EpochBatches batches;
    std::size_t loaded_epoch = plan.epochs;

    while (state.active && state.active->steps_done < target) {
        ActivePhase& cur = *state.active;
        const std::size_t epoch = cur.steps_done / plan.steps_per_epoch;
        const std::size_t within = cur.steps_done % plan.steps_per_epoch;
        if (epoch != loaded_epoch) {
            batches = make_epoch_batches(examples, plan.profile, epoch, plan.seed);
            loaded_epoch = epoch;
        }
        const std::uint64_t step = cur.steps_done + 1;

        double loss = 0.0;
        for (std::size_t m = 0; m < accum; ++m) {
            const auto& mb = batches.micro_batches[within * accum + m];
            Tape tape;
            const auto bl =
                model.forward_loss(state.adapters, mb.sequences, &tape, state.config.grad_checkpoint);
            if (!std::isfinite(bl.loss)) {
                throw DivergenceError("non-finite loss in " + cur.name, step);
            }
            loss += bl.loss / static_cast<double>(accum);
            acc.accumulate(model.backward_lora(state.adapters, tape));
        }

        double grad_norm = 0.0;
        const double lr = lr_at(cur.steps_done, cfg);
        try {
            grad_norm = clip_global_norm(acc.sum(), cfg.max_grad_norm);
            adam8_step(state.adapters, acc.sum(), state.opt, cfg, lr);
        } catch (const DivergenceError& e) {
            throw DivergenceError(cur.name + ": " + e.what(), step);
        }
        acc.reset();

        cur.steps_done = step;
        ++state.global_step;
        if (step == 1) {
            cur.initial_loss = loss;
        }
        cur.last_loss = loss;

        LogRecord rec;
        rec.phase = cur.name;
        rec.step = step;
        rec.epoch = static_cast<double>(epoch) +
                    static_cast<double>(within + 1) / static_cast<double>(plan.steps_per_epoch);
        rec.loss = loss;
        rec.grad_norm = grad_norm;
        rec.lr = lr;
        rec.elapsed_ms =
            options.zero_timing
                ? 0
                : static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                 std::chrono::steady_clock::now() - t0)
                                                 .count());
        rec.mem_est_bytes = mem;
        if (options.on_log) {
            options.on_log(rec);
        }
        records.push_back(std::move(rec));

        const bool epoch_done = within + 1 == plan.steps_per_epoch;
        if (step == plan.total_steps) {
            PhaseSummary summary;
            summary.name = cur.name;
            summary.profile = plan.profile;
            summary.epochs = plan.epochs;
            summary.steps = plan.total_steps;
            summary.initial_loss = cur.initial_loss;
            summary.final_loss = cur.last_loss;
            state.phases.push_back(std::move(summary));
            state.active.reset();
        }
        if (epoch_done && options.on_epoch_end) {
            options.on_epoch_end(state, epoch + 1);
        }
    }
    return records;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'P', 'F', 'R', 'G'};

nlohmann::ordered_json profile_json(const HardwareProfile& p) {
    nlohmann::ordered_json j;
    j["name"] = p.name;
    j["per_device_batch"] = p.per_device_batch;
    j["grad_accum"] = p.grad_accum;
    j["devices"] = p.devices;
    return j;
}

HardwareProfile profile_from(const nlohmann::json& j) { return profile_from_json(j.dump()); }

nlohmann::ordered_json header_json(const TrainState& st) {
    nlohmann::ordered_json run;
    run["model"] = model_config_to_json(st.config.model);
    run["lora"] = lora_config_to_json(st.config.lora);
    run["optimizer"] = adam_config_to_json(st.config.optimizer);
    run["grad_checkpoint"] = st.config.grad_checkpoint;
    run["seed"] = st.config.seed;
    run["data_path"] = st.config.data_path;

    auto phases = nlohmann::ordered_json::array();
    for (const auto& p : st.phases) {
        nlohmann::ordered_json pj;
        pj["name"] = p.name;
        pj["profile"] = profile_json(p.profile);
        pj["epochs"] = p.epochs;
        pj["steps"] = p.steps;
        pj["initial_loss"] = p.initial_loss;
        pj["final_loss"] = p.final_loss;
        phases.push_back(std::move(pj));
    }

    nlohmann::ordered_json j;
    j["run"] = std::move(run);
    j["phases"] = std::move(phases);
    if (st.active) {
        const auto& a = *st.active;
        nlohmann::ordered_json aj;
        aj["name"] = a.name;
        aj["profile"] = profile_json(a.plan.profile);
        aj["dataset_size"] = a.plan.dataset_size;
        aj["epochs"] = a.plan.epochs;
        aj["steps_per_epoch"] = a.plan.steps_per_epoch;
        aj["total_steps"] = a.plan.total_steps;
        aj["initial_loss"] = a.initial_loss;
        aj["last_loss"] = a.last_loss;
        j["active"] = std::move(aj);
    } else {
        j["active"] = nullptr;
    }
    return j;
}

void put_section(ByteWriter& out, const ByteWriter& section) {
    out.put(static_cast<std::uint64_t>(section.size()));
    out.put_bytes(section.bytes());
}

ByteReader take_section(ByteReader& in, const char* name) {
    const auto len = in.get<std::uint64_t>();
    if (len > in.remaining()) {
        throw CheckpointError(std::string("checkpoint truncated in section '") + name + "'");
    }
    return ByteReader(in.get_bytes(static_cast<std::size_t>(len)));
}

void put_q8(ByteWriter& w, const std::vector<quant::Q8Block>& blocks, std::uint32_t block_size) {
    w.put(block_size);
    w.put(static_cast<std::uint32_t>(blocks.size()));
    for (const auto& b : blocks) {
        w.put(b.absmax);
        w.put_span(std::span<const std::int8_t>(b.codes));
    }
}

std::vector<quant::Q8Block> get_q8(ByteReader& r, std::size_t size, std::uint32_t expected_block) {
    const auto block_size = r.get<std::uint32_t>();
    const auto count = r.get<std::uint32_t>();
    if (block_size != expected_block || block_size == 0 ||
        count != (size + block_size - 1) / block_size) {
        throw CheckpointError("optimizer block layout does not match adapter sizes");
    }
    std::vector<quant::Q8Block> blocks(count);
    for (std::size_t b = 0; b < count; ++b) {
        blocks[b].absmax = r.get<float>();
        const std::size_t n = std::min<std::size_t>(block_size, size - b * block_size);
        blocks[b].codes.resize(n);
        r.get_into(std::span<std::int8_t>(blocks[b].codes));
    }
    return blocks;
}

struct ParsedHeader {
    nlohmann::json json;
    std::vector<std::pair<std::string, quant::QuantizedTensor>> tensors;
};

ParsedHeader parse_header(ByteReader& r) {
    ParsedHeader h;
    const auto text = r.get_string();
    try {
        h.json = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        auto name = r.get_string();
        auto t = quant::QuantizedTensor::deserialize(r);
        h.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done()) {
        throw CheckpointError("trailing bytes in checkpoint header");
    }
    return h;
}

ByteReader open_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader in(bytes);
    if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    in.get_bytes(4);
    const auto version = in.get<std::uint16_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    return in;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& st) {
    ByteWriter out;
    out.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
    out.put(kCheckpointVersion);

    {
        ByteWriter w;
        w.put_string(header_json(st).dump());
        const QuantizedModel model(st.config.model);
        const auto& tensors = model.quantized_tensors();
        w.put(static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            w.put_string(name);
            t.serialize(w);
        }
        put_section(out, w);
    }
    {
        ByteWriter w;
        const auto hash = model_config_hash(st.config.model);
        w.put_bytes(hash);
        put_section(out, w);
    }
    {
        ByteWriter w;
        w.put(static_cast<std::uint32_t>(st.adapters.size()));
        for (const auto& a : st.adapters) {
            w.put(a.layer);
            w.put(static_cast<std::uint8_t>(a.target));
            w.put(a.rank);
            w.put(a.alpha);
            w.put_span(std::span<const float>(a.a));
            w.put_span(std::span<const float>(a.b));
        }
        put_section(out, w);
    }
    {
        ByteWriter w;
        w.put(static_cast<std::uint32_t>(st.opt.tensors.size()));
        for (const auto& t : st.opt.tensors) {
            put_q8(w, t.m, t.block_size);
            put_q8(w, t.v, t.block_size);
        }
        put_section(out, w);
    }
    {
        ByteWriter w;
        w.put(static_cast<std::uint64_t>(st.global_step));
        w.put(static_cast<std::uint64_t>(st.opt.step_count));
        w.put(static_cast<std::uint32_t>(st.phases.size()));
        w.put(static_cast<std::uint64_t>(st.active ? st.active->steps_done : 0));
        w.put(static_cast<std::uint64_t>(st.active ? st.active->plan.seed : 0));
        put_section(out, w);
    }
    {
        ByteWriter w;
        for (auto word : st.rng.state()) {
            w.put(word);
        }
        put_section(out, w);
    }
    return out.take();
}

TrainState deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    try {
        auto in = open_checkpoint(bytes);
        auto header_r = take_section(in, "header");
        auto hash_r = take_section(in, "config hash");
        auto adapters_r = take_section(in, "adapters");
        auto optim_r = take_section(in, "optimizer");
        auto counters_r = take_section(in, "counters");
        auto rng_r = take_section(in, "rng");
        if (!in.done()) {
            throw CheckpointError("trailing bytes after the last checkpoint section");
        }

        const auto header = parse_header(header_r);
        const auto& hj = header.json;
        TrainState st;
        const auto& run = hj.at("run");
        st.config.model = model_config_from_json(run.at("model"));
        st.config.lora = lora_config_from_json(run.at("lora"));
        st.config.optimizer = adam_config_from_json(run.at("optimizer"));
        st.config.grad_checkpoint = run.at("grad_checkpoint").get<bool>();
        st.config.seed = run.at("seed").get<std::uint64_t>();
        st.config.data_path = run.at("data_path").get<std::string>();

        Sha256Digest stored{};
        hash_r.get_into(std::span<std::uint8_t>(stored));
        if (!hash_r.done() || stored != model_config_hash(st.config.model)) {
            throw CheckpointError("config hash mismatch: stored hash does not match the model "
                                  "configuration in the header");
        }

        for (const auto& pj : hj.at("phases")) {
            PhaseSummary p;
            p.name = pj.at("name").get<std::string>();
            p.profile = profile_from(pj.at("profile"));
            p.epochs = pj.at("epochs").get<std::size_t>();
            p.steps = pj.at("steps").get<std::size_t>();
            p.initial_loss = pj.at("initial_loss").get<double>();
            p.final_loss = pj.at("final_loss").get<double>();
            st.phases.push_back(std::move(p));
        }

        // Adapters: dimensions come from the model shape.
        const auto shape = st.config.model.shape();
        std::vector<LoraAdapter> adapters(adapters_r.get<std::uint32_t>());
        for (auto& a : adapters) {
            a.layer = adapters_r.get<std::uint32_t>();
            const auto target = adapters_r.get<std::uint8_t>();
            if (target >= kNumTargets || a.layer >= shape.n_layers) {
                throw CheckpointError("adapter refers to an unknown projection");
            }
            a.target = static_cast<Target>(target);
            a.rank = adapters_r.get<std::uint32_t>();
            a.alpha = adapters_r.get<float>();
            if (a.rank != st.config.lora.rank) {
                throw CheckpointError("adapter rank differs from the stored LoRA configuration");
            }
            a.d_in = shape.dims(a.target).d_in;
            a.d_out = shape.dims(a.target).d_out;
            a.a.resize(static_cast<std::size_t>(a.rank) * a.d_in);
            a.b.resize(a.d_out * static_cast<std::size_t>(a.rank));
            adapters_r.get_into(std::span<float>(a.a));
            adapters_r.get_into(std::span<float>(a.b));
        }
        if (!adapters_r.done()) {
            throw CheckpointError("trailing bytes in adapter section");
        }
        st.adapters = AdapterSet(std::move(adapters));

        const auto n_tensors = optim_r.get<std::uint32_t>();
        if (n_tensors != 2 * st.adapters.size()) {
            throw CheckpointError("optimizer state does not match the adapter count");
        }
        for (std::size_t i = 0; i < n_tensors; ++i) {
            const auto& a = st.adapters[i / 2];
            TensorMoments t;
            t.size = i % 2 == 0 ? a.a.size() : a.b.size();
            t.m = get_q8(optim_r, t.size, t.block_size);
            t.v = get_q8(optim_r, t.size, t.block_size);
            st.opt.tensors.push_back(std::move(t));
        }
        if (!optim_r.done()) {
            throw CheckpointError("trailing bytes in optimizer section");
        }

        st.global_step = counters_r.get<std::uint64_t>();
        st.opt.step_count = counters_r.get<std::uint64_t>();
        const auto n_phases = counters_r.get<std::uint32_t>();
        const auto steps_done = counters_r.get<std::uint64_t>();
        const auto data_seed = counters_r.get<std::uint64_t>();
        if (!counters_r.done() || n_phases != st.phases.size()) {
            throw CheckpointError("counter section disagrees with the header");
        }

        if (!hj.at("active").is_null()) {
            const auto& aj = hj.at("active");
            ActivePhase ap;
            ap.name = aj.at("name").get<std::string>();
            ap.plan = plan_phase(aj.at("dataset_size").get<std::size_t>(),
                                 profile_from(aj.at("profile")), aj.at("epochs").get<std::size_t>(),
                                 data_seed);
            if (ap.plan.total_steps != aj.at("total_steps").get<std::size_t>() ||
                ap.plan.steps_per_epoch != aj.at("steps_per_epoch").get<std::size_t>() ||
                steps_done > ap.plan.total_steps) {
                throw CheckpointError("active phase plan is inconsistent");
            }
            ap.steps_done = steps_done;
            ap.initial_loss = aj.at("initial_loss").get<double>();
            ap.last_loss = aj.at("last_loss").get<double>();
            st.active = std::move(ap);
        }

        Rng::State rs{};
        for (auto& word : rs) {
            word = rng_r.get<std::uint64_t>();
        }
        if (!rng_r.done()) {
            throw CheckpointError("trailing bytes in rng section");
        }
        st.rng.set_state(rs);
        return st;
    } catch (const CheckpointError&) {
        throw;
    } catch (const IntegrityError& e) {
        throw CheckpointError(std::string("checkpoint truncated or corrupt: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header malformed: ") + e.what());
    } catch (const Error& e) {
        throw CheckpointError(std::string("checkpoint invalid: ") + e.what());
    }
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(state));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file_bytes(path));
}

TrainState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
    auto st = load_checkpoint(path);
    if (model_config_hash(st.config.model) != model_config_hash(expected)) {
        throw CheckpointError("config hash mismatch: checkpoint was written for model " +
                              model_config_hash_hex(st.config.model).substr(0, 16) +
                              ", expected " + model_config_hash_hex(expected).substr(0, 16));
    }
    return st;
}

std::vector<std::pair<std::string, quant::QuantizedTensor>> checkpoint_base_tensors(
    std::span<const std::uint8_t> bytes) {
    try {
        auto in = open_checkpoint(bytes);
        auto header_r = take_section(in, "header");
        return parse_header(header_r).tensors;
    } catch (const CheckpointError&) {
        throw;
    } catch (const Error& e) {
        throw CheckpointError(std::string("checkpoint truncated or corrupt: ") + e.what());
    }
}

// ---------------------------------------------------------------------------

MemoryBreakdown estimate_memory(const ModelShape& shape, const HardwareProfile& profile,
                                const LoraConfig& lora, bool grad_checkpoint,
                                bool double_quantized_scales) {
    auto ceil_div = [](std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; };
    MemoryBreakdown m;
    const std::uint64_t params = shape.total_params;
    m.base_weights = ceil_div(params, 2);
    const std::uint64_t blocks = ceil_div(params, quant::kNf4BlockSize);
    m.scales = double_quantized_scales ? blocks + ceil_div(blocks, quant::kScaleGroupSize) * 8
                                       : blocks * 4;

    std::uint64_t trainable = 0;
    std::uint64_t optimizer = 0;
    for (std::size_t l = 0; l < shape.n_layers; ++l) {
        for (auto t : lora.targets) {
            const auto& d = shape.dims(t);
            for (std::uint64_t n : {static_cast<std::uint64_t>(lora.rank) * d.d_in,
                                    static_cast<std::uint64_t>(lora.rank) * d.d_out}) {
                trainable += n;
                optimizer += 2 * (n + 4 * ceil_div(n, quant::kQ8BlockSize));
            }
        }
    }
    m.adapters = trainable * 4;
    m.gradients = trainable * 4;
    m.optimizer_state = optimizer;
    m.activations = static_cast<std::uint64_t>(shape.n_layers) * profile.per_device_batch *
                    shape.context_len * shape.d_model * 4 *
                    (grad_checkpoint ? 2 : kActivationsPerLayer);
    m.total = m.base_weights + m.scales + m.adapters + m.gradients + m.optimizer_state +
              m.activations;
    return m;
}

}  // namespace peft
