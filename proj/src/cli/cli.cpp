#include "mseg/cli.hpp"

#include "mseg/dataset.hpp"
#include "mseg/eval.hpp"
#include "mseg/gradsuite.hpp"
#include "mseg/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>

namespace mseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

std::string hex(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const fs::path& path, const std::string& text)
{
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// Re-reads every output and records its checksum; a file that does not read
// back with the bytes we meant to write is an error.
class OutputSet {
public:
    void add(const fs::path& path, const std::vector<std::uint8_t>& expected)
    {
        const auto back = read_file_bytes(path);
        if (back != expected) {
            throw std::runtime_error("output '" + path.string() + "' failed verification");
        }
        checksums_[path.string()] = "fnv1a64:" + hex(fnv1a(back));
    }
    void add_text(const fs::path& path, const std::string& text)
    {
        add(path, std::vector<std::uint8_t>(text.begin(), text.end()));
    }
    json to_json() const { return json(checksums_); }

private:
    std::map<std::string, std::string> checksums_;
};

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void write_manifest(const fs::path& path, json manifest)
{
    write_text(path, manifest.dump(2) + "\n");
}

TrainConfig config_with_seed(const std::string& file, const std::optional<std::uint64_t>& seed)
{
    TrainConfig c = file.empty() ? TrainConfig{} : load_train_config(file);
    if (seed) {
        c.seed = *seed;
    }
    return c;
}

// Writes checkpoint, log and manifest next to each other and verifies them.
void emit_training(const fs::path& out, const Checkpoint& ckpt, const TrainLog& log, json manifest,
                   Clock::time_point start)
{
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    OutputSet outputs;
    const auto bytes = encode_checkpoint(ckpt);
    write_file_bytes(out, bytes);
    decode_checkpoint(read_file_bytes(out));
    outputs.add(out, bytes);
    const fs::path log_path = out.string() + ".log.csv";
    const std::string csv = log.to_csv();
    write_text(log_path, csv);
    outputs.add_text(log_path, csv);
    manifest["outputs"] = outputs.to_json();
    manifest["wall_ms"] = std::llround(elapsed_ms(start));
    write_manifest(out.string() + ".manifest.json", std::move(manifest));
}

// ------------------------------------------------------------- commands --

struct PhantomArgs {
    int count = 1;
    int size = 32;
    int structures = 6;
    int partial = 3;
    double noise = 0.05;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> anatomy;
    int first = 0;
    bool partial_only = false;
    std::string out;
};

int cmd_phantom(const PhantomArgs& a, std::ostream& out)
{
    PhantomSetOptions o;
    o.count = a.count;
    o.first_index = a.first;
    o.seed = a.seed;
    o.partial_only = a.partial_only;
    o.spec.size = a.size;
    o.spec.num_structures = a.structures;
    o.spec.partial_subset = a.partial;
    o.spec.noise_sigma = a.noise;
    o.spec.anatomy_seed = a.anatomy ? *a.anatomy : derive_seed(a.seed, "anatomy");
    const auto files = write_phantom_set(a.out, o);
    // Re-read audit.
    for (const auto& c : list_cases(a.out)) {
        read_image(c / "image.msegvol").validate();
        if (fs::exists(c / "labels.msegvol")) {
            read_labels(c / "labels.msegvol").validate();
            LabelMap::read(c / "labels.map");
        }
        if (fs::exists(c / "partial.msegvol")) {
            read_labels(c / "partial.msegvol").validate();
        }
    }
    out << "wrote " << a.count << " phantom case(s) to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out;
    std::string init = "none";
    std::optional<std::uint64_t> seed;
};

int cmd_pretrain(const TrainArgs& a, std::ostream& out)
{
    const auto start = Clock::now();
    const TrainConfig config = config_with_seed(a.config, a.seed);
    const auto data = load_partial_subjects(a.data);
    const PretrainResult r = pretrain(data, config);
    json manifest{{"command", "pretrain"},
                  {"config", to_json(config)},
                  {"seed", config.seed},
                  {"inputs", {{"data", a.data}, {"config", a.config}}},
                  {"subjects", data.size()}};
    emit_training(a.out, r.checkpoint, r.log, std::move(manifest), start);
    out << "pretrain: " << r.log.records.size() << " steps";
    if (!r.log.records.empty()) {
        out << ", final loss " << r.log.records.back().loss_total;
    }
    out << " -> " << a.out << "\n";
    return 0;
}

int cmd_jointtrain(const TrainArgs& a, std::ostream& out)
{
    const auto start = Clock::now();
    const TrainConfig config = config_with_seed(a.config, a.seed);
    const auto data = load_full_subjects(a.data);
    std::optional<Checkpoint> init;
    if (a.init != "none") {
        init = load_checkpoint(a.init, config.arch, ModelKind::unet);
    }
    const JointResult r = joint_train(data, init, config);
    json copied = json::array();
    for (const auto& c : r.manifest.copied) {
        copied.push_back({{"from", c.from}, {"to", c.to}});
    }
    json manifest{{"command", "jointtrain"},
                  {"config", to_json(config)},
                  {"seed", config.seed},
                  {"init", a.init},
                  {"inputs", {{"data", a.data}, {"config", a.config}, {"init", a.init}}},
                  {"subjects", data.size()},
                  {"transfer", {{"applied", r.transferred}, {"copied", copied}, {"skipped", r.manifest.skipped}}}};
    emit_training(a.out, r.checkpoint, r.log, std::move(manifest), start);
    out << "jointtrain (" << (init ? "init " + a.init : std::string("from scratch")) << "): "
        << r.log.records.size() << " steps";
    if (!r.log.records.empty()) {
        out << ", final loss " << r.log.records.back().loss_total;
    }
    out << " -> " << a.out << "\n";
    return 0;
}

struct InferArgs {
    std::string ckpt;
    std::string input;
    std::string head = "w";
    std::string out;
    std::int64_t patch = 32;
    std::int64_t stride = 0;
};

LabelVolume infer_one(const Model<float>& model, const fs::path& input, Head head, const TileOptions& t)
{
    const Volume v = zscore_normalize(read_image(input));
    return tile_infer(model, v, head, t);
}

int cmd_infer(const InferArgs& a, std::ostream& out)
{
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const Head head = head_from_string(a.head);
    if (head == Head::full && !ckpt.model.has_full_head()) {
        throw std::invalid_argument("checkpoint '" + a.ckpt + "' has no full-task decoder; use --head w");
    }
    const TileOptions t{a.patch, a.stride};
    int written = 0;
    if (fs::is_directory(a.input)) {
        for (const auto& c : list_cases(a.input)) {
            const fs::path dst = fs::path(a.out) / c.filename();
            fs::create_directories(dst);
            const LabelVolume seg = infer_one(ckpt.model, c / "image.msegvol", head, t);
            const auto bytes = encode_volume(seg);
            write_file_bytes(dst / "labels.msegvol", bytes);
            if (read_file_bytes(dst / "labels.msegvol") != bytes) {
                throw std::runtime_error("output '" + (dst / "labels.msegvol").string() + "' failed verification");
            }
            ++written;
        }
    } else {
        if (!fs::exists(a.input)) {
            throw std::runtime_error("input volume '" + a.input + "' does not exist");
        }
        const fs::path dst(a.out);
        if (dst.has_parent_path()) {
            fs::create_directories(dst.parent_path());
        }
        const auto bytes = encode_volume(infer_one(ckpt.model, a.input, head, t));
        write_file_bytes(dst, bytes);
        if (read_file_bytes(dst) != bytes) {
            throw std::runtime_error("output '" + dst.string() + "' failed verification");
        }
        written = 1;
    }
    out << "infer: " << written << " volume(s), head " << to_string(head) << " -> " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string pred;
    std::string truth;
    std::string map;
    std::string out;
    std::string spread = "subjects";
    int structures = 0;
};

fs::path label_file(const fs::path& c, bool partial_first)
{
    if (partial_first && fs::exists(c / "partial.msegvol")) {
        return c / "partial.msegvol";
    }
    return c / "labels.msegvol";
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out)
{
    std::optional<LabelMap> map;
    if (!a.map.empty()) {
        map = LabelMap::read(a.map);
    }
    const std::string task = map ? "partial" : "full";
    if (!fs::is_directory(a.pred)) {
        throw std::runtime_error("prediction directory '" + a.pred + "' does not exist");
    }
    if (!fs::is_directory(a.truth)) {
        throw std::runtime_error("truth directory '" + a.truth + "' does not exist");
    }
    std::vector<fs::path> truth_cases;
    for (const auto& e : fs::directory_iterator(a.truth)) {
        if (e.is_directory() && fs::exists(e.path() / "labels.msegvol")) {
            truth_cases.push_back(e.path());
        }
    }
    std::sort(truth_cases.begin(), truth_cases.end());
    if (truth_cases.empty()) {
        throw std::runtime_error("truth directory '" + a.truth + "' holds no labelled cases");
    }

    std::vector<std::pair<LabelVolume, LabelVolume>> pairs;
    int max_structure = 0;
    for (const auto& c : truth_cases) {
        LabelVolume truth = read_labels(label_file(c, false));
        if (map) {
            truth = extract_partial(truth, *map);
            max_structure = std::max(max_structure, map->partial_count());
        }
        const fs::path p = fs::path(a.pred) / c.filename() / "labels.msegvol";
        if (!fs::exists(p)) {
            throw std::runtime_error("no prediction '" + p.string() + "' for case " + c.filename().string());
        }
        LabelVolume pred = read_labels(p);
        if (!map) {
            max_structure = std::max(max_structure, truth.observed_classes() - 1);
        }
        pairs.emplace_back(std::move(pred), std::move(truth));
    }
    if (a.structures > 0) {
        max_structure = a.structures;
    }
    std::vector<DiceEntry> entries;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto e = evaluate_subject(truth_cases[i].filename().string(), pairs[i].first, pairs[i].second, max_structure);
        entries.insert(entries.end(), e.begin(), e.end());
    }
    SpreadAxis axis = SpreadAxis::subjects;
    if (a.spread == "structures") {
        axis = SpreadAxis::structures;
    } else if (a.spread != "subjects") {
        throw std::invalid_argument("--spread must be subjects or structures");
    }
    const DiceReport r = aggregate(entries, task, axis);

    fs::create_directories(a.out);
    OutputSet outputs;
    const std::string csv = r.to_csv();
    const std::string summary = r.summary().dump(2) + "\n";
    write_text(fs::path(a.out) / "dice.csv", csv);
    write_text(fs::path(a.out) / "summary.json", summary);
    outputs.add_text(fs::path(a.out) / "dice.csv", csv);
    outputs.add_text(fs::path(a.out) / "summary.json", summary);

    out << std::left << std::setw(16) << "subject" << "mean dice\n";
    out << std::fixed << std::setprecision(4);
    for (const auto& [name, m] : r.subject_means) {
        out << std::setw(16) << name << m << "\n";
    }
    out << task << " task: " << r.mean << " +- " << r.std << " over " << r.n_subjects << " subject(s)\n";
    out.unsetf(std::ios::floatfield);
    return 0;
}

struct GradArgs {
    std::int64_t size = 8;
    std::uint64_t seed = 0;
    int depth = 2;
    int base = 2;
    int samples = 16;
    std::string fault;
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out)
{
    GradSuiteOptions o;
    o.patch_size = a.size;
    o.seed = a.seed;
    o.depth = a.depth;
    o.base_channels = a.base;
    o.network_samples = a.samples;
    if (!a.fault.empty()) {
        const auto fam = op_family_from_string(a.fault);
        if (!fam) {
            throw std::invalid_argument("unknown op family '" + a.fault + "'");
        }
        debug::inject_fault(*fam);
    }
    struct Reset {
        ~Reset() { debug::inject_fault(std::nullopt); }
    } reset;
    const auto start = Clock::now();
    const auto reports = run_gradient_suite(o);
    double worst = 0.0;
    bool ok = true;
    for (const auto& r : reports) {
        out << std::left << std::setw(18) << r.label << " max_rel_err " << std::scientific << std::setprecision(3)
            << r.max_rel_error << "  entries " << std::setw(5) << r.entries_checked << (r.passed ? "  ok" : "  FAIL")
            << "\n";
        worst = std::max(worst, r.max_rel_error);
        ok = ok && r.passed;
    }
    out << "max relative error " << std::scientific << std::setprecision(3) << worst << " (tolerance "
        << o.check.tolerance << "), " << std::fixed << std::setprecision(1) << elapsed_ms(start) / 1000.0 << " s\n";
    out.unsetf(std::ios::floatfield);
    out << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
    return ok ? 0 : 1;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"volumetric segmentation with partial-label pre-training", "mseg"};
    app.require_subcommand(1);

    PhantomArgs ph;
    auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
    phantom->add_option("--count", ph.count, "number of cases")->capture_default_str();
    phantom->add_option("--size", ph.size, "cube extent in voxels")->capture_default_str();
    phantom->add_option("--structures", ph.structures, "full-label structures K")->capture_default_str();
    phantom->add_option("--partial", ph.partial, "structures exposed as partial labels")->capture_default_str();
    phantom->add_option("--noise", ph.noise, "Gaussian noise sigma")->capture_default_str();
    phantom->add_option("--seed", ph.seed, "run seed")->capture_default_str();
    phantom->add_option("--anatomy", ph.anatomy, "population seed (default derived from --seed)");
    phantom->add_option("--first", ph.first, "index of the first case")->capture_default_str();
    phantom->add_flag("--partial-only", ph.partial_only, "write images with partial labels only");
    phantom->add_option("--out", ph.out, "output directory")->required();

    TrainArgs pt;
    auto* pre = app.add_subcommand("pretrain", "stage 1: single-decoder network on partial labels");
    pre->add_option("--data", pt.data, "dataset directory")->required();
    pre->add_option("--config", pt.config, "JSON training config");
    pre->add_option("--out", pt.out, "checkpoint path")->required();
    pre->add_option("--seed", pt.seed, "overrides the config seed");

    TrainArgs jt;
    auto* joint = app.add_subcommand("jointtrain", "stage 2: dual-decoder network on full labels");
    joint->add_option("--data", jt.data, "dataset directory")->required();
    joint->add_option("--init", jt.init, "stage-1 checkpoint, or none")->capture_default_str();
    joint->add_option("--config", jt.config, "JSON training config");
    joint->add_option("--out", jt.out, "checkpoint path")->required();
    joint->add_option("--seed", jt.seed, "overrides the config seed");

    InferArgs in;
    auto* infer = app.add_subcommand("infer", "tiled whole-volume segmentation");
    infer->add_option("--ckpt", in.ckpt, "checkpoint")->required();
    infer->add_option("--input", in.input, "volume or dataset directory")->required();
    infer->add_option("--head", in.head, "w (partial) or s (full)")->capture_default_str();
    infer->add_option("--out", in.out, "label volume or output directory")->required();
    infer->add_option("--patch", in.patch, "tile extent")->capture_default_str();
    infer->add_option("--stride", in.stride, "tile stride (default patch/2)");

    EvalArgs ev;
    auto* evaluate = app.add_subcommand("evaluate", "Dice report of predictions against truth");
    evaluate->add_option("--pred", ev.pred, "prediction directory")->required();
    evaluate->add_option("--truth", ev.truth, "truth dataset directory")->required();
    evaluate->add_option("--map", ev.map, "label map; evaluates the partial task");
    evaluate->add_option("--out", ev.out, "report directory")->required();
    evaluate->add_option("--spread", ev.spread, "std across subjects or structures")->capture_default_str();
    evaluate->add_option("--structures", ev.structures, "evaluate ids 1..N (default: from truth)");

    GradArgs gc;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    grad->add_option("--size", gc.size, "network patch extent")->capture_default_str();
    grad->add_option("--seed", gc.seed, "seed")->capture_default_str();
    grad->add_option("--depth", gc.depth, "network depth")->capture_default_str();
    grad->add_option("--base", gc.base, "network base channels")->capture_default_str();
    grad->add_option("--samples", gc.samples, "probes per parameter tensor")->capture_default_str();
    grad->add_option("--inject-fault", gc.fault, "corrupt one op family's backward rule");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "mseg: " << e.what() << "\n";
        return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
    }

    try {
        if (phantom->parsed()) return cmd_phantom(ph, out);
        if (pre->parsed()) return cmd_pretrain(pt, out);
        if (joint->parsed()) return cmd_jointtrain(jt, out);
        if (infer->parsed()) return cmd_infer(in, out);
        if (evaluate->parsed()) return cmd_evaluate(ev, out);
        if (grad->parsed()) return cmd_gradcheck(gc, out);
    } catch (const std::exception& e) {
        err << "mseg: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace mseg::cli
