#include "peft_forge/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "peft_forge/binary_io.hpp"
#include "peft_forge/config.hpp"
#include "peft_forge/data.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"
#include "peft_forge/provider.hpp"

namespace peft::cli {

namespace fs = std::filesystem;

std::string adapter_sha256(const AdapterSet& adapters) {
    ByteWriter w;
    for (const auto& a : adapters) {
        w.put(a.layer);
        w.put(static_cast<std::uint8_t>(a.target));
        w.put(a.rank);
        w.put(a.alpha);
        w.put_span(std::span<const float>(a.a));
        w.put_span(std::span<const float>(a.b));
    }
    return to_hex(sha256(w.bytes()));
}

namespace {

bool glob_match(std::string_view pat, std::string_view s) {
    std::size_t p = 0;
    std::size_t i = 0;
    std::size_t star = std::string_view::npos;
    std::size_t mark = 0;
    while (i < s.size()) {
        if (p < pat.size() && (pat[p] == '?' || pat[p] == s[i])) {
            ++p;
            ++i;
        } else if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = i;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            i = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') {
        ++p;
    }
    return p == pat.size();
}

}  // namespace

std::vector<fs::path> expand_glob(const std::string& pattern) {
    const fs::path p(pattern);
    const auto name = p.filename().string();
    if (name.find_first_of("*?") == std::string::npos) {
        return fs::exists(p) ? std::vector<fs::path>{p} : std::vector<fs::path>{};
    }
    fs::path dir = p.parent_path();
    if (dir.empty()) {
        dir = ".";
    }
    std::vector<fs::path> out;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(dir, ec)) {
        if (entry.is_regular_file() && glob_match(name, entry.path().filename().string())) {
            out.push_back(entry.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

// Append-only JSONL log. Every append rewrites the file atomically, so a
// reader sees either the previous or the new complete content.
class LogFile {
public:
    LogFile(fs::path path, bool append) : path_(std::move(path)) {
        if (append && fs::exists(path_)) {
            content_ = read_file_text(path_);
            if (!content_.empty() && content_.back() != '\n') {
                content_.push_back('\n');
            }
        }
    }
    void add(const LogRecord& r) {
        content_ += log_record_to_json(r);
        content_.push_back('\n');
        write_file_atomic(path_, content_);
    }

private:
    fs::path path_;
    std::string content_;
};

std::vector<TokenizedExample> load_examples(const fs::path& data, std::size_t context_len) {
    const auto corpus = read_corpus(data);
    std::vector<TokenizedExample> ex;
    ex.reserve(corpus.size());
    for (const auto& r : corpus) {
        ex.push_back(render_example(r, context_len));
    }
    return ex;
}

std::size_t phase_number(const TrainState& st) {
    return st.phases.size() + (st.active ? 1 : 0);
}

struct DriveOptions {
    fs::path ckpt_dir;
    fs::path log_path;
    bool append_log = false;
    bool zero_timing = false;
    std::optional<std::size_t> max_steps;
};

// Runs the active phase, writing logs and checkpoints; returns the path of
// the newest checkpoint.
fs::path drive_phase(const QuantizedModel& model, TrainState& state,
                     std::span<const TokenizedExample> examples, const DriveOptions& opt,
                     std::ostream& out) {
    LogFile log(opt.log_path, opt.append_log);
    const auto& plan = state.active->plan;
    out << "phase " << state.active->name << ": profile " << plan.profile.name << " (batch "
        << plan.profile.per_device_batch << " x accum " << plan.profile.grad_accum
        << " = effective " << plan.profile.effective_batch() << "), " << plan.epochs
        << " epoch(s), " << plan.steps_per_epoch << " steps/epoch, " << plan.total_steps
        << " steps, data seed " << plan.seed << ", starting at step "
        << state.active->steps_done << "\n";
    fs::create_directories(opt.ckpt_dir);
    const fs::path latest = opt.ckpt_dir / "latest.pfrg";

    RunOptions ro;
    ro.zero_timing = opt.zero_timing;
    ro.max_steps = opt.max_steps;
    ro.on_log = [&log](const LogRecord& r) { log.add(r); };
    ro.on_epoch_end = [&](const TrainState& st, std::size_t epoch) {
        const auto bytes = serialize_checkpoint(st);
        const auto name = "phase" + std::to_string(phase_number(st)) + "-epoch" +
                          std::to_string(epoch) + ".pfrg";
        write_file_atomic(opt.ckpt_dir / name, bytes);
        write_file_atomic(latest, bytes);
        out << "  epoch " << epoch << " done at global step " << st.global_step << " -> "
            << (opt.ckpt_dir / name).string() << "\n";
    };
    const auto records = run_phase(model, state, examples, ro);
    if (!records.empty()) {
        out << "  loss " << records.front().loss << " -> " << records.back().loss << " over "
            << records.size() << " step(s)\n";
    }
    if (state.active) {
        const auto bytes = serialize_checkpoint(state);
        const auto name = "phase" + std::to_string(phase_number(state)) + "-step" +
                          std::to_string(state.active->steps_done) + ".pfrg";
        write_file_atomic(opt.ckpt_dir / name, bytes);
        write_file_atomic(latest, bytes);
        out << "  paused at step " << state.active->steps_done << " of "
            << state.active->plan.total_steps << " -> " << (opt.ckpt_dir / name).string()
            << "\n";
    }
    out << "adapter_sha256: " << adapter_sha256(state.adapters) << "\n";
    out << "checkpoint: " << latest.string() << "\n";
    return latest;
}

void print_run_config(const RunConfig& rc, std::ostream& out) {
    out << "seeds: run=" << rc.seed << " model=" << rc.model.seed << " lora=" << rc.lora.seed
        << "\n";
    nlohmann::ordered_json j;
    j["model"] = model_config_to_json(rc.model);
    j["lora"] = lora_config_to_json(rc.lora);
    j["optimizer"] = adam_config_to_json(rc.optimizer);
    j["grad_checkpoint"] = rc.grad_checkpoint;
    j["data"] = rc.data_path;
    out << "config: " << j.dump() << "\n";
}

struct TrainArgs {
    std::string config;
    std::string lora;
    std::string data;
    std::string profile;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    std::string out;
    std::string log;
    bool grad_checkpoint = false;
    bool reset_optimizer = false;
    bool zero_timing = false;
    std::size_t max_steps = 0;
};

fs::path cmd_train(const TrainArgs& a, std::ostream& out) {
    const auto mf = load_model_file(a.config);
    RunConfig rc;
    rc.model = mf.model;
    rc.optimizer = mf.optimizer;
    rc.lora = load_lora_file(a.lora);
    rc.grad_checkpoint = a.grad_checkpoint;
    rc.seed = a.seed;
    rc.data_path = a.data;
    print_run_config(rc, out);
    const auto profile = load_profile(a.profile);
    const auto examples = load_examples(a.data, rc.model.context_len);
    const QuantizedModel model(rc.model);
    auto state = init_train_state(rc);
    begin_phase(state, examples.size(), profile, a.epochs);
    DriveOptions d;
    d.ckpt_dir = a.out;
    d.log_path = a.log;
    d.zero_timing = a.zero_timing;
    if (a.max_steps > 0) {
        d.max_steps = a.max_steps;
    }
    return drive_phase(model, state, examples, d, out);
}

struct ResumeArgs {
    std::string checkpoint;
    std::string profile;
    std::size_t epochs = 1;
    std::string log;
    std::string out;
    std::string data;
    bool reset_optimizer = false;
    bool finish_phase = false;
    bool zero_timing = false;
    std::size_t max_steps = 0;
};

fs::path cmd_resume(const ResumeArgs& a, std::ostream& out) {
    auto state = load_checkpoint(a.checkpoint);
    if (!a.data.empty()) {
        state.config.data_path = a.data;
    }
    print_run_config(state.config, out);
    const auto examples = load_examples(state.config.data_path, state.config.model.context_len);
    const QuantizedModel model(state.config.model);
    if (a.finish_phase) {
        if (!state.active) {
            throw ConfigError("--finish-phase: checkpoint has no unfinished phase");
        }
    } else {
        if (a.profile.empty()) {
            throw ConfigError("resume needs --profile unless --finish-phase is given");
        }
        resume_phase(state, examples.size(), load_profile(a.profile), a.epochs,
                     a.reset_optimizer);
    }
    DriveOptions d;
    d.ckpt_dir = a.out.empty() ? fs::path(a.checkpoint).parent_path() : fs::path(a.out);
    if (d.ckpt_dir.empty()) {
        d.ckpt_dir = ".";
    }
    d.log_path = a.log;
    d.append_log = true;
    d.zero_timing = a.zero_timing;
    if (a.max_steps > 0) {
        d.max_steps = a.max_steps;
    }
    return drive_phase(model, state, examples, d, out);
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    double split = 0.05;
    std::uint64_t seed = 0;
    std::string markdown;
    std::size_t generate = 0;
    std::size_t max_new = 200;
    std::string responses_out;
    std::string out;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
    out << "seeds: split=" << a.seed << "\n";
    const auto state = load_checkpoint(a.checkpoint);
    const QuantizedModel model(state.config.model);
    const auto corpus = read_corpus(a.data);
    std::vector<TokenizedExample> examples;
    for (const auto& r : corpus) {
        examples.push_back(render_example(r, state.config.model.context_len));
    }
    const auto base = lora_init(state.config.model.shape(), state.config.lora);
    const auto trained = eval_split_loss(model, state.adapters, examples, a.split, a.seed);
    const auto untrained = eval_split_loss(model, base, examples, a.split, a.seed);

    nlohmann::ordered_json j;
    j["checkpoint"] = a.checkpoint;
    j["held_out_examples"] = trained.examples;
    j["held_out_tokens"] = trained.tokens;
    j["loss"] = trained.loss;
    j["perplexity"] = trained.perplexity;
    j["base_loss"] = untrained.loss;
    j["base_perplexity"] = untrained.perplexity;
    if (!a.markdown.empty()) {
        j["markdown_compliance_rate"] = compliance_rate(read_responses(a.markdown));
    }
    if (a.generate > 0) {
        const auto split = split_indices(corpus.size(), a.split, a.seed);
        const std::size_t n = std::min(a.generate, split.held_out.size());
        std::vector<std::string> texts;
        std::string jsonl;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& rec = corpus[split.held_out[i]];
            const auto prompt = render_prompt(rec.turns.front().content);
            GenerateOptions go;
            go.max_new = a.max_new;
            go.end_token = kEos;
            const auto toks = generate(model, state.adapters, prompt, go);
            std::vector<std::int32_t> gen(toks.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                          toks.end());
            texts.push_back(decode(gen));
            nlohmann::ordered_json rj;
            rj["id"] = rec.id;
            rj["text"] = texts.back();
            jsonl += rj.dump() + "\n";
        }
        j["generated"] = n;
        j["generated_compliance_rate"] = n > 0 ? compliance_rate(texts) : 0.0;
        if (!a.responses_out.empty()) {
            write_file_atomic(a.responses_out, jsonl);
        }
    }
    const auto text = j.dump(2) + "\n";
    out << text;
    if (!a.out.empty()) {
        write_file_atomic(a.out, text);
    }
}

}  // namespace

RecipeResult two_phase_recipe(const RecipeOptions& o, std::ostream& out) {
    const fs::path ckpt = o.out_dir / "checkpoints";
    const fs::path logs = o.out_dir / "logs";
    TrainArgs t;
    t.config = o.model_config.string();
    t.lora = o.lora_config.string();
    t.data = o.data.string();
    t.profile = o.profile_a.string();
    t.epochs = o.epochs_a;
    t.seed = o.seed;
    t.out = ckpt.string();
    t.log = (logs / "phase1.jsonl").string();
    t.grad_checkpoint = o.grad_checkpoint;
    t.zero_timing = o.zero_timing;
    fs::create_directories(logs);
    const auto after_a = cmd_train(t, out);

    ResumeArgs r;
    r.checkpoint = after_a.string();
    r.profile = o.profile_b.string();
    r.epochs = o.epochs_b;
    r.log = (logs / "phase2.jsonl").string();
    r.out = ckpt.string();
    r.reset_optimizer = o.reset_optimizer;
    r.zero_timing = o.zero_timing;
    const auto after_b = cmd_resume(r, out);

    const std::vector<fs::path> log_files{logs / "phase1.jsonl", logs / "phase2.jsonl"};
    RecipeResult res;
    res.report = build_report(log_files, o.out_dir / "report");
    res.final_checkpoint = after_b;
    res.adapter_sha256 = adapter_sha256(load_checkpoint(after_b).adapters);
    out << "report: " << (o.out_dir / "report").string() << "\n";
    for (const auto& p : res.report.phases) {
        out << "  " << p.name << ": loss " << p.initial_loss << " -> " << p.final_loss << " over "
            << p.steps << " steps\n";
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", res.report.reduction_percent);
    out << "reduction_percent: " << buf << "\n";
    return res;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"peft-forge: QLoRA-style fine-tuning of a toy advisor model"};
    app.name("peft-forge");
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    // gen-data
    std::size_t gen_n = 0;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    std::string gen_provider = "template";
    std::string gen_url;
    std::size_t gen_attempts = 3;
    double gen_timeout = 30.0;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic advisor corpus (JSONL)");
    gen->add_option("--n", gen_n, "Number of records")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "Corpus seed");
    gen->add_option("--out", gen_out, "Output JSONL path")->required();
    gen->add_option("--provider", gen_provider, "Completion backend")
        ->check(CLI::IsMember({"template", "http"}));
    gen->add_option("--provider-url", gen_url, "Endpoint URL for the http provider");
    gen->add_option("--max-attempts", gen_attempts, "Attempts per record before aborting")
        ->check(CLI::PositiveNumber);
    gen->add_option("--timeout", gen_timeout, "HTTP timeout in seconds")
        ->check(CLI::PositiveNumber);

    // train
    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Run the first training phase from fresh adapters");
    train->add_option("--config", ta.config, "Model config JSON")->required();
    train->add_option("--lora", ta.lora, "LoRA config JSON")->required();
    train->add_option("--data", ta.data, "Corpus JSONL")->required();
    train->add_option("--profile", ta.profile, "Hardware profile JSON")->required();
    train->add_option("--epochs", ta.epochs, "Epochs in this phase")->check(CLI::PositiveNumber);
    train->add_option("--seed", ta.seed, "Run seed (data order)");
    train->add_option("--out", ta.out, "Checkpoint directory")->required();
    train->add_option("--log", ta.log, "JSONL training log")->required();
    train->add_flag("--grad-checkpoint", ta.grad_checkpoint, "Recompute activations in backward");
    train->add_flag("--reset-optimizer", ta.reset_optimizer,
                    "Start from zero moments (always true for a fresh run)");
    train->add_flag("--zero-timing", ta.zero_timing, "Write elapsed_ms as 0");
    train->add_option("--steps", ta.max_steps, "Stop after this many steps (0 = run the phase)");

    // resume
    ResumeArgs ra;
    auto* resume = app.add_subcommand("resume", "Continue training from a checkpoint");
    resume->add_option("--checkpoint", ra.checkpoint, "Checkpoint file")->required();
    resume->add_option("--profile", ra.profile, "Hardware profile JSON for the new phase");
    resume->add_option("--epochs", ra.epochs, "Epochs in the new phase")
        ->check(CLI::PositiveNumber);
    resume->add_option("--log", ra.log, "JSONL training log (appended)")->required();
    resume->add_option("--out", ra.out, "Checkpoint directory (default: the checkpoint's)");
    resume->add_option("--data", ra.data, "Corpus JSONL (default: the path stored at train time)");
    resume->add_flag("--reset-optimizer", ra.reset_optimizer, "Zero optimizer moments first");
    resume->add_flag("--finish-phase", ra.finish_phase,
                     "Finish the checkpoint's unfinished phase instead of starting a new one");
    resume->add_flag("--zero-timing", ra.zero_timing, "Write elapsed_ms as 0");
    resume->add_option("--steps", ra.max_steps, "Stop after this many steps (0 = run the phase)");

    // eval
    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Held-out loss, perplexity and markdown compliance");
    eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", ea.data, "Corpus JSONL")->required();
    eval->add_option("--split", ea.split, "Held-out fraction")->check(CLI::Range(0.0, 1.0));
    eval->add_option("--seed", ea.seed, "Split seed");
    eval->add_option("--markdown", ea.markdown, "Responses JSONL to check for compliance");
    eval->add_option("--generate", ea.generate, "Greedy-decode this many held-out prompts");
    eval->add_option("--max-new", ea.max_new, "Token budget per generated response");
    eval->add_option("--responses-out", ea.responses_out, "Write generated responses (JSONL)");
    eval->add_option("--out", ea.out, "Also write the result JSON here");

    // report
    std::string rep_logs;
    std::string rep_out;
    std::string rep_responses;
    auto* report = app.add_subcommand("report", "Phase summaries, curves and overall reduction");
    report->add_option("--logs", rep_logs, "Glob of JSONL logs")->required();
    report->add_option("--out", rep_out, "Output directory")->required();
    report->add_option("--responses", rep_responses, "Responses JSONL for the compliance rate");

    // count-params
    std::string cp_shape;
    std::uint32_t cp_rank = 16;
    double cp_alpha = 16.0;
    std::uint64_t cp_nominal = 0;
    auto* count = app.add_subcommand("count-params", "Trainable LoRA parameters for a shape");
    count->add_option("--shape", cp_shape, "Model shape")
        ->required()
        ->check(CLI::IsMember({"mistral7b", "mini"}));
    count->add_option("--rank", cp_rank, "LoRA rank")->check(CLI::PositiveNumber);
    count->add_option("--alpha", cp_alpha, "LoRA alpha");
    count->add_option("--nominal-total", cp_nominal,
                      "Denominator for the ratio (0 = the shape's nominal size)");

    // inspect-quant
    std::string iq_ckpt;
    auto* inspect = app.add_subcommand("inspect-quant", "NF4 error statistics per base tensor");
    inspect->add_option("--checkpoint", iq_ckpt, "Checkpoint file")->required();

    // recipe
    RecipeOptions ro;
    std::string ro_config;
    std::string ro_lora;
    std::string ro_data;
    std::string ro_pa;
    std::string ro_pb;
    std::string ro_out;
    auto* recipe =
        app.add_subcommand("recipe", "Two-phase workflow: train, cross-profile resume, report");
    recipe->add_option("--config", ro_config, "Model config JSON")->required();
    recipe->add_option("--lora", ro_lora, "LoRA config JSON")->required();
    recipe->add_option("--data", ro_data, "Corpus JSONL")->required();
    recipe->add_option("--profile-a", ro_pa, "Profile for phase 1")->required();
    recipe->add_option("--profile-b", ro_pb, "Profile for phase 2")->required();
    recipe->add_option("--epochs-a", ro.epochs_a, "Phase 1 epochs")->check(CLI::PositiveNumber);
    recipe->add_option("--epochs-b", ro.epochs_b, "Phase 2 epochs")->check(CLI::PositiveNumber);
    recipe->add_option("--seed", ro.seed, "Run seed");
    recipe->add_option("--out", ro_out, "Output directory")->required();
    recipe->add_flag("--grad-checkpoint", ro.grad_checkpoint, "Recompute activations in backward");
    recipe->add_flag("--reset-optimizer", ro.reset_optimizer, "Zero moments before phase 2");
    recipe->add_flag("--zero-timing", ro.zero_timing, "Write elapsed_ms as 0");

    std::vector<std::string> argv_store{"peft-forge"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& s : argv_store) {
        argv.push_back(s.c_str());
    }
    // Unknown flags are reported by name before any other usage check.
    CLI::App* chosen = nullptr;
    for (const auto& a : args) {
        if (chosen == nullptr) {
            if (!a.empty() && a[0] != '-') {
                chosen = app.get_subcommand_no_throw(a);
                if (chosen == nullptr) {
                    err << "usage error: unknown command '" << a << "'\n";
                    return kExitUsage;
                }
            }
            continue;
        }
        if (a.size() > 2 && a.compare(0, 2, "--") == 0) {
            const auto name = a.substr(0, a.find('='));
            if (chosen->get_option_no_throw(name) == nullptr) {
                err << "usage error: unknown flag '" << name << "' for " << chosen->get_name()
                    << "\n";
                return kExitUsage;
            }
        }
    }

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        err << "run 'peft-forge --help' or 'peft-forge <command> --help'\n";
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            out << "seeds: corpus=" << gen_seed << "\n";
            std::unique_ptr<CompletionProvider> provider;
            if (gen_provider == "http") {
                EndpointConfig ec;
                ec.url = gen_url;
                ec.api_key = provider_key_from_env();
                ec.timeout_seconds = gen_timeout;
                if (!ec.api_key) {
                    throw ProviderError(ProviderError::Kind::Auth,
                                        std::string("missing provider credential: set ") +
                                            kProviderKeyEnv);
                }
                provider = std::make_unique<HttpProvider>(ec);
            } else {
                provider = std::make_unique<TemplateProvider>(gen_seed);
            }
            CorpusOptions co;
            co.max_attempts = gen_attempts;
            const auto corpus = generate_corpus(gen_n, gen_seed, *provider, co);
            write_corpus(gen_out, corpus);
            std::array<std::size_t, kNumTopics> counts{};
            for (const auto& r : corpus) {
                ++counts[static_cast<std::size_t>(r.topic)];
            }
            out << "wrote " << corpus.size() << " records to " << gen_out << " (";
            for (std::size_t t = 0; t < kNumTopics; ++t) {
                out << (t ? ", " : "") << topic_name(static_cast<Topic>(t)) << " " << counts[t];
            }
            out << ")\nsha256: " << file_sha256_hex(gen_out) << "\n";
        } else if (train->parsed()) {
            cmd_train(ta, out);
        } else if (resume->parsed()) {
            cmd_resume(ra, out);
        } else if (eval->parsed()) {
            cmd_eval(ea, out);
        } else if (report->parsed()) {
            out << "seeds: none\n";
            const auto logs = expand_glob(rep_logs);
            if (logs.empty()) {
                throw ConfigError("no log files match '" + rep_logs + "'");
            }
            std::optional<std::vector<std::string>> responses;
            if (!rep_responses.empty()) {
                responses = read_responses(rep_responses);
            }
            const auto rep = build_report(logs, rep_out, responses);
            for (const auto& p : rep.phases) {
                out << p.name << ": " << p.steps << " steps, " << p.epochs << " epochs, loss "
                    << p.initial_loss << " -> " << p.final_loss << "\n";
            }
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.2f", rep.reduction_percent);
            out << "reduction_percent: " << buf << "\n";
            if (rep.compliance_rate) {
                out << "compliance_rate: " << *rep.compliance_rate << "\n";
            }
            out << "wrote " << (fs::path(rep_out) / "summary.json").string() << "\n";
        } else if (count->parsed()) {
            out << "seeds: none\n";
            const ModelShape shape =
                cp_shape == "mistral7b" ? mistral7b_shape() : mini_advisor_config().shape();
            LoraConfig lc;
            lc.rank = cp_rank;
            lc.alpha = static_cast<float>(cp_alpha);
            const std::uint64_t nominal = cp_nominal > 0 ? cp_nominal : shape.nominal_params;
            const auto pc = lora_param_count(shape, lc, nominal);
            char ratio[64];
            std::snprintf(ratio, sizeof(ratio), "%.3f", pc.ratio * 100.0);
            char exact[64];
            std::snprintf(exact, sizeof(exact), "%.3f",
                          100.0 * static_cast<double>(pc.trainable) /
                              static_cast<double>(shape.total_params));
            out << "shape: " << shape.name << "\n";
            out << "rank: " << cp_rank << "\n";
            out << "trainable: " << pc.trainable << "\n";
            out << "nominal_total: " << nominal << "\n";
            out << "ratio: " << ratio << "%\n";
            out << "exact_total: " << shape.total_params << "\n";
            out << "ratio_vs_exact_total: " << exact << "%\n";
        } else if (inspect->parsed()) {
            out << "seeds: none\n";
            const auto bytes = read_file_bytes(iq_ckpt);
            const auto state = deserialize_checkpoint(bytes);
            const auto tensors = checkpoint_base_tensors(bytes);
            const auto originals = QuantizedModel::draw_base_weights(state.config.model);
            if (originals.size() != tensors.size()) {
                throw CheckpointError("checkpoint base tensors do not match the model config");
            }
            out << "tensor elements blocks scale_encoding storage_bytes max_abs_err mean_abs_err "
                   "mse\n";
            for (std::size_t i = 0; i < tensors.size(); ++i) {
                const auto& [name, q] = tensors[i];
                const auto st = quant::quant_error_stats(originals[i].second, q);
                char line[256];
                std::snprintf(line, sizeof(line), "%s %zu %zu %s %zu %.6e %.6e %.6e\n",
                              name.c_str(), q.num_elements(), q.num_blocks(),
                              q.scale_encoding() == quant::ScaleEncoding::DoubleQuantized ? "dq8"
                                                                                          : "f32",
                              q.storage_bytes(), st.max_abs_err, st.mean_abs_err, st.mse);
                out << line;
            }
        } else if (recipe->parsed()) {
            ro.model_config = ro_config;
            ro.lora_config = ro_lora;
            ro.data = ro_data;
            ro.profile_a = ro_pa;
            ro.profile_b = ro_pb;
            ro.out_dir = ro_out;
            const auto res = two_phase_recipe(ro, out);
            out << "adapter_sha256: " << res.adapter_sha256 << "\n";
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args, out, err);
}

}  // namespace peft::cli
