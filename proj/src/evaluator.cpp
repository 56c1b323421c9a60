#include "peft_forge/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "json.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"
#include "peft_forge/rng.hpp"

namespace peft {

SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ConfigError("split fraction must lie in (0, 1)");
    }
    const auto held = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction));
    if (held == 0) {
        throw ConfigError("held-out split of " + std::to_string(n) + " examples at fraction " +
                          std::to_string(fraction) + " is empty");
    }
    const auto order = epoch_order(n, 0, derive_seed(seed, 0x73706C6974ULL));
    SplitIndices s;
    s.held_out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
    std::sort(s.held_out.begin(), s.held_out.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

SplitLoss eval_loss(const QuantizedModel& model, const AdapterSet& adapters,
                    std::span<const TokenizedExample> examples) {
    if (examples.empty()) {
        throw ConfigError("evaluation set is empty");
    }
    double total = 0.0;
    SplitLoss out;
    for (const auto& ex : examples) {
        const auto bl = model.forward_loss(adapters, std::span(&ex, 1));
        total += bl.loss * static_cast<double>(bl.token_count);
        out.tokens += bl.token_count;
    }
    out.examples = examples.size();
    out.loss = total / static_cast<double>(out.tokens);
    out.perplexity = std::exp(out.loss);
    return out;
}

SplitLoss eval_split_loss(const QuantizedModel& model, const AdapterSet& adapters,
                          std::span<const TokenizedExample> examples, double split_fraction,
                          std::uint64_t seed) {
    const auto split = split_indices(examples.size(), split_fraction, seed);
    std::vector<TokenizedExample> held;
    held.reserve(split.held_out.size());
    for (auto i : split.held_out) {
        held.push_back(examples[i]);
    }
    return eval_loss(model, adapters, held);
}

// ---------------------------------------------------------------------------
// Markdown rules

namespace {

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        lines.push_back(line);
        start = end + 1;
    }
    return lines;
}

bool is_space(char c) { return c == ' ' || c == '\t'; }

// Level 1-6 for an ATX heading line, 0 otherwise.
int heading_level(std::string_view line) {
    std::size_t n = 0;
    while (n < line.size() && line[n] == '#') {
        ++n;
    }
    if (n < 1 || n > 6 || n >= line.size() || line[n] != ' ') {
        return 0;
    }
    for (std::size_t i = n + 1; i < line.size(); ++i) {
        if (!is_space(line[i])) {
            return static_cast<int>(n);
        }
    }
    return 0;
}

char bullet_marker(std::string_view line) {
    if (line.size() >= 2 && (line[0] == '-' || line[0] == '*') && line[1] == ' ') {
        return line[0];
    }
    return 0;
}

}  // namespace

ComplianceReport check_markdown(std::string_view text) noexcept {
    ComplianceReport r;
    r.no_heading_jump = true;
    int prev_level = 0;
    char prev_marker = 0;
    std::size_t fences = 0;
    for (auto line : split_lines(text)) {
        if (const int level = heading_level(line); level > 0) {
            r.heading_present = true;
            if (prev_level > 0 && level > prev_level + 1) {
                r.no_heading_jump = false;
            }
            prev_level = level;
        }
        const char marker = bullet_marker(line);
        if (marker != 0 && marker == prev_marker) {
            r.bullet_list_present = true;
        }
        prev_marker = marker;
        if (line.substr(0, 3) == "```") {
            ++fences;
        }
    }
    r.fences_balanced = fences % 2 == 0;
    return r;
}

double compliance_rate(std::span<const std::string> texts) {
    if (texts.empty()) {
        throw ConfigError("compliance rate over an empty response set");
    }
    std::size_t ok = 0;
    for (const auto& t : texts) {
        ok += check_markdown(t).compliant() ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(texts.size());
}

double loss_reduction(double initial, double final_loss) {
    if (!(initial > 0.0) || !std::isfinite(initial) || !std::isfinite(final_loss)) {
        throw ConfigError("loss_reduction needs a finite initial loss > 0");
    }
    return (1.0 - final_loss / initial) * 100.0;
}

// ---------------------------------------------------------------------------
// Report

std::vector<LogRecord> parse_log(std::string_view text, const std::string& source) {
    std::vector<LogRecord> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        ++line_no;
        const auto line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            continue;
        }
        const std::string where = source + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            throw SchemaError(where, "malformed JSON log line");
        }
        try {
            out.push_back(log_record_from_json(j));
        } catch (const SchemaError& e) {
            throw SchemaError(where + ": " + e.field(), e.rule());
        }
    }
    return out;
}

PhaseReport summarize_logs(std::span<const LogRecord> records) {
    if (records.empty()) {
        throw ConfigError("no log records to report on");
    }
    PhaseReport rep;
    std::map<std::string, std::size_t> index;
    for (const auto& r : records) {
        auto it = index.find(r.phase);
        if (it == index.end()) {
            it = index.emplace(r.phase, rep.phases.size()).first;
            rep.phases.push_back(PhaseCurve{r.phase, {}, 0.0, 0.0, 0, 0.0});
        }
        auto& curve = rep.phases[it->second];
        if (!curve.records.empty() && r.step <= curve.records.back().step) {
            throw SchemaError(r.phase, "steps must be strictly increasing within a phase (step " +
                                           std::to_string(r.step) + " after " +
                                           std::to_string(curve.records.back().step) + ")");
        }
        curve.records.push_back(r);
    }
    for (auto& c : rep.phases) {
        c.initial_loss = c.records.front().loss;
        c.final_loss = c.records.back().loss;
        c.steps = c.records.size();
        c.epochs = c.records.back().epoch;
    }
    rep.reduction_percent =
        loss_reduction(rep.phases.front().initial_loss, rep.phases.back().final_loss);
    return rep;
}

namespace {

std::string fmt(double v, const char* format = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

}  // namespace

std::string curve_csv(const PhaseCurve& curve) {
    std::string out = "step,loss,grad_norm,lr\n";
    for (const auto& r : curve.records) {
        out += std::to_string(r.step) + "," + fmt(r.loss, "%.17g") + "," +
               fmt(r.grad_norm, "%.17g") + "," + fmt(r.lr, "%.17g") + "\n";
    }
    return out;
}

std::string curve_svg(const std::string& title, std::span<const double> xs,
                      std::span<const double> ys) {
    constexpr double kW = 800.0;
    constexpr double kH = 400.0;
    constexpr double kLeft = 60.0;
    constexpr double kRight = 20.0;
    constexpr double kTop = 30.0;
    constexpr double kBottom = 40.0;
    double x0 = std::numeric_limits<double>::infinity();
    double x1 = -x0;
    double y0 = x0;
    double y1 = -x0;
    for (std::size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
        x0 = std::min(x0, xs[i]);
        x1 = std::max(x1, xs[i]);
        y0 = std::min(y0, ys[i]);
        y1 = std::max(y1, ys[i]);
    }
    if (xs.empty() || ys.empty()) {
        x0 = y0 = 0.0;
        x1 = y1 = 1.0;
    }
    if (x1 == x0) {
        x1 = x0 + 1.0;
    }
    if (y1 == y0) {
        y1 = y0 + 1.0;
    }
    const double pw = kW - kLeft - kRight;
    const double ph = kH - kTop - kBottom;
    std::string pts;
    for (std::size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
        const double px = kLeft + (xs[i] - x0) / (x1 - x0) * pw;
        const double py = kTop + (1.0 - (ys[i] - y0) / (y1 - y0)) * ph;
        if (!pts.empty()) {
            pts.push_back(' ');
        }
        pts += fmt(px, "%.2f") + "," + fmt(py, "%.2f");
    }
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"400\" viewBox=\"0 0 800 400\">\n";
    s += "<rect width=\"800\" height=\"400\" fill=\"white\"/>\n";
    s += "<text x=\"400\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         xml_escape(title) + "</text>\n";
    s += "<line x1=\"60\" y1=\"360\" x2=\"780\" y2=\"360\" stroke=\"black\"/>\n";
    s += "<line x1=\"60\" y1=\"30\" x2=\"60\" y2=\"360\" stroke=\"black\"/>\n";
    auto label = [&s](double x, double y, const char* anchor, const std::string& text) {
        s += "<text x=\"" + fmt(x, "%.0f") + "\" y=\"" + fmt(y, "%.0f") + "\" text-anchor=\"" +
             anchor + "\" font-family=\"sans-serif\" font-size=\"11\">" + text + "</text>\n";
    };
    label(55, 34, "end", fmt(y1, "%.4g"));
    label(55, 360, "end", fmt(y0, "%.4g"));
    label(60, 376, "start", fmt(x0, "%.4g"));
    label(780, 376, "end", fmt(x1, "%.4g"));
    s += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"" + pts +
         "\"/>\n";
    s += "</svg>\n";
    return s;
}

std::string summary_json(const PhaseReport& report) {
    nlohmann::ordered_json j;
    auto phases = nlohmann::ordered_json::array();
    for (const auto& p : report.phases) {
        nlohmann::ordered_json pj;
        pj["name"] = p.name;
        pj["initial_loss"] = p.initial_loss;
        pj["final_loss"] = p.final_loss;
        pj["steps"] = p.steps;
        pj["epochs"] = p.epochs;
        phases.push_back(std::move(pj));
    }
    j["phases"] = std::move(phases);
    j["reduction_percent"] = report.reduction_percent;
    if (report.compliance_rate) {
        j["compliance_rate"] = *report.compliance_rate;
    }
    return j.dump(2) + "\n";
}

PhaseReport build_report(std::span<const std::filesystem::path> logs,
                         const std::filesystem::path& out_dir,
                         std::optional<std::vector<std::string>> responses) {
    if (logs.empty()) {
        throw ConfigError("report: no log files given");
    }
    std::vector<LogRecord> all;
    for (const auto& p : logs) {
        auto recs = parse_log(read_file_text(p), p.filename().string());
        all.insert(all.end(), std::make_move_iterator(recs.begin()),
                   std::make_move_iterator(recs.end()));
    }
    auto rep = summarize_logs(all);
    if (responses) {
        rep.compliance_rate = compliance_rate(*responses);
    }
    for (const auto& c : rep.phases) {
        write_file_atomic(out_dir / (c.name + ".csv"), curve_csv(c));
        std::vector<double> xs;
        std::vector<double> loss;
        std::vector<double> gn;
        for (const auto& r : c.records) {
            xs.push_back(static_cast<double>(r.step));
            loss.push_back(r.loss);
            gn.push_back(r.grad_norm);
        }
        write_file_atomic(out_dir / (c.name + "-loss.svg"), curve_svg(c.name + " loss", xs, loss));
        write_file_atomic(out_dir / (c.name + "-grad_norm.svg"),
                          curve_svg(c.name + " grad norm", xs, gn));
    }
    write_file_atomic(out_dir / "summary.json", summary_json(rep));
    return rep;
}

std::vector<std::string> read_responses(const std::filesystem::path& path) {
    const auto text = read_file_text(path);
    std::vector<std::string> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        ++line_no;
        const std::string_view line(text.data() + start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            continue;
        }
        const std::string where = path.filename().string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            throw SchemaError(where, "malformed JSON");
        }
        if (j.is_string()) {
            out.push_back(j.get<std::string>());
        } else if (j.is_object() && j.contains("turns")) {
            const auto rec = validate_record(j);
            for (const auto& t : rec.turns) {
                if (t.role == Role::Advisor) {
                    out.push_back(t.content);
                }
            }
        } else if (j.is_object() && j.contains("text") && j["text"].is_string()) {
            out.push_back(j["text"].get<std::string>());
        } else {
            throw SchemaError(where, "expected a string, {\"text\": ...}, or a corpus record");
        }
    }
    return out;
}

}  // namespace peft
