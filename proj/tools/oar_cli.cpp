#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "oar/runtime.hpp"
#include "oar/synth.hpp"
#include "oar/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Flags win over the optional JSON config file, which wins over defaults.
struct Resolver {
    json cfg = json::object();

    void load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw oar::IoError("cannot open config file: " + path);
        try {
            f >> cfg;
        } catch (const json::exception& e) {
            throw oar::ConfigError("bad config JSON: " + std::string(e.what()));
        }
    }

    template <typename T>
    void apply(const CLI::Option* opt, const std::string& key, T& value) const {
        if (opt != nullptr && opt->count() > 0) return;  // flag explicitly given
        if (cfg.contains(key)) value = cfg.at(key).get<T>();
    }
};

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("OAR_SEED");
    if (s == nullptr || *s == '\0') return std::nullopt;
    return std::strtoull(s, nullptr, 10);
}

bool parse_size(const std::string& s, int* w, int* h) {
    const auto x = s.find('x');
    if (x == std::string::npos) return false;
    try {
        *w = std::stoi(s.substr(0, x));
        *h = std::stoi(s.substr(x + 1));
    } catch (...) {
        return false;
    }
    return *w > 0 && *h > 0;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw oar::IoError("cannot write " + path);
    f << text;
    if (text.empty() || text.back() != '\n') f << "\n";
}

void print_resolved(const json& j) {
    std::cout << "resolved config: " << j.dump() << "\n";
}

int cmd_synth(const Resolver& rc, const CLI::App* sub, int classes, int clips, int len,
              std::string size, int gop, std::optional<std::uint64_t> seed, std::string out) {
    rc.apply(sub->get_option("--classes"), "classes", classes);
    rc.apply(sub->get_option("--clips"), "clips", clips);
    rc.apply(sub->get_option("--len"), "len", len);
    rc.apply(sub->get_option("--size"), "size", size);
    rc.apply(sub->get_option("--gop"), "gop", gop);
    rc.apply(sub->get_option("--out"), "out", out);
    if (!seed) seed = env_seed();
    if (!seed && rc.cfg.contains("seed")) seed = rc.cfg.at("seed").get<std::uint64_t>();
    if (!seed) {
        std::cerr << "error: --seed is required for synth (or set OAR_SEED)\n";
        return kExitUsage;
    }
    if (out.empty()) {
        std::cerr << "error: --out is required\n";
        return kExitUsage;
    }
    int w = 0, h = 0;
    if (!parse_size(size, &w, &h)) {
        std::cerr << "error: --size must look like 64x64\n";
        return kExitUsage;
    }

    oar::SynthSpec spec;
    spec.num_classes = classes;
    spec.clips_per_class = clips;
    spec.frames_per_clip = len;
    spec.width = w;
    spec.height = h;
    spec.gop = gop;
    spec.seed = *seed;

    json resolved = {{"command", "synth"}, {"classes", classes}, {"clips", clips}, {"len", len},
                     {"size", size},       {"gop", gop},         {"seed", *seed},  {"out", out}};
    print_resolved(resolved);

    oar::DatasetManifest m = oar::synthesize_dataset(spec, out);
    std::cout << "wrote " << m.clips.size() << " clips (" << classes << " classes x " << clips
              << " clips x " << len << " frames, " << w << "x" << h << ", gop " << gop << ") to "
              << out << "\n";
    return kExitOk;
}

int cmd_train(const Resolver& rc, const CLI::App* sub, std::string data, std::string out,
              std::optional<std::uint64_t> seed, oar::TrainConfig cfg, bool iie_fixed) {
    rc.apply(sub->get_option("--data"), "data", data);
    rc.apply(sub->get_option("--out"), "out", out);
    rc.apply(sub->get_option("--theta"), "theta", cfg.theta);
    rc.apply(sub->get_option("--tau"), "tau", cfg.tau);
    rc.apply(sub->get_option("--lr"), "lr", cfg.learning_rate);
    rc.apply(sub->get_option("--epochs-per-test"), "epochs_per_test", cfg.epochs_per_test);
    rc.apply(sub->get_option("--max-iters"), "max_iters", cfg.max_outer_iters);
    rc.apply(sub->get_option("--cap"), "cap", cfg.gate_label_cap);
    rc.apply(sub->get_option("--jobs"), "jobs", cfg.jobs);
    rc.apply(sub->get_option("--batch"), "batch", cfg.batch_size);
    rc.apply(sub->get_option("--frames-per-clip"), "frames_per_clip", cfg.frames_per_clip_sample);
    rc.apply(sub->get_option("--max-epochs-per-phase"), "max_epochs_per_phase",
             cfg.max_epochs_per_phase);
    if (!seed) seed = env_seed();
    if (!seed && rc.cfg.contains("seed")) seed = rc.cfg.at("seed").get<std::uint64_t>();
    if (!seed) {
        std::cerr << "error: --seed is required for train (or set OAR_SEED)\n";
        return kExitUsage;
    }
    if (data.empty() || out.empty()) {
        std::cerr << "error: --data and --out are required\n";
        return kExitUsage;
    }
    cfg.seed = *seed;

    json resolved = {{"command", "train"},
                     {"data", data},
                     {"out", out},
                     {"seed", *seed},
                     {"theta", cfg.theta},
                     {"tau", cfg.tau},
                     {"lr", cfg.learning_rate},
                     {"epochs_per_test", cfg.epochs_per_test},
                     {"max_iters", cfg.max_outer_iters},
                     {"cap", cfg.gate_label_cap},
                     {"jobs", cfg.jobs},
                     {"batch", cfg.batch_size},
                     {"frames_per_clip", cfg.frames_per_clip_sample},
                     {"max_epochs_per_phase", cfg.max_epochs_per_phase},
                     {"tdp_literal_terminal", cfg.tdp_literal_terminal},
                     {"tdp_loss_weighting", cfg.tdp_loss_weighting},
                     {"iie_fixed_weights", iie_fixed}};
    print_resolved(resolved);

    fs::create_directories(out);
    oar::Dataset dataset = oar::Dataset::load(data, cfg.jobs);

    oar::ModelConfig mc;
    mc.num_classes = dataset.manifest.num_classes;
    mc.width = dataset.manifest.width;
    mc.height = dataset.manifest.height;
    mc.gop = dataset.manifest.gop;
    mc.iie_fixed_debug = iie_fixed;
    oar::Model model = oar::Model::init(mc, cfg.seed);

    oar::TrainReport report = oar::iterative_train(model, dataset, cfg, out);
    if (report.eq4_log.empty()) {
        std::cout << "eq4: no decision points (stop rule needs at least 2 outer iterations)\n";
    }
    for (const auto& line : report.eq4_log) std::cout << "eq4: " << line << "\n";
    std::cout << "mean branch validation accuracy: " << report.mean_branch_accuracy << "\n"
              << "fused online validation accuracy: " << report.fused_online_accuracy << "\n"
              << "wall clock: " << report.wall_clock_seconds << " s\n";

    model.save(out + "/model.oarckpt");
    write_text(out + "/train_trace.json", report.to_json());
    std::cout << "wrote " << out << "/model.oarckpt and train_trace.json\n";
    return kExitOk;
}

int cmd_run(std::string model_path, std::string stream_path, std::string cost_path,
            std::string record_out, std::string trace_out) {
    oar::Model model = oar::Model::load(model_path);
    oar::CostModel costs =
        cost_path.empty() ? oar::CostModel::defaults() : oar::CostModel::from_json_file(cost_path);

    json resolved = {{"command", "run"},
                     {"model", model_path},
                     {"stream", stream_path},
                     {"cost_profile", cost_path.empty() ? "<defaults>" : cost_path}};
    print_resolved(resolved);

    oar::ExitRecord rec = oar::run_stream_file(model, stream_path, costs);
    std::cout << rec.to_json() << "\n";
    if (!record_out.empty()) write_text(record_out, rec.to_json());
    if (!trace_out.empty()) {
        std::string lines;
        for (const auto& c : rec.trace) lines += json{{"component", c}}.dump() + "\n";
        write_text(trace_out, lines);
    }
    return kExitOk;
}

int cmd_eval(std::string model_path, std::string data, std::string cost_path, std::string report_path,
             std::string csv_path, std::string policy, int jobs, int tau) {
    if (policy != "online" && policy != "offline") {
        std::cerr << "error: --policy must be online or offline\n";
        return kExitUsage;
    }
    oar::Model model = oar::Model::load(model_path);
    oar::CostModel costs =
        cost_path.empty() ? oar::CostModel::defaults() : oar::CostModel::from_json_file(cost_path);

    json resolved = {{"command", "eval"},
                     {"model", model_path},
                     {"data", data},
                     {"cost_profile", cost_path.empty() ? "<defaults>" : cost_path},
                     {"policy", policy},
                     {"jobs", jobs},
                     {"tau", tau}};
    print_resolved(resolved);

    oar::EvalOptions opts;
    opts.policy = policy == "online" ? oar::Policy::Online : oar::Policy::Offline;
    opts.jobs = jobs;
    opts.tau = tau;
    opts.config_json = resolved.dump();
    oar::EvalReport report = oar::evaluate_dataset(model, data, costs, opts);

    std::cout << "clips: " << report.num_clips << " (failed " << report.failed_clips << ")\n"
              << "top1: " << report.top1 << "\n"
              << "tdp_accuracy: " << report.tdp_accuracy << "\n"
              << "mean_exit_frame: " << report.mean_exit_frame << "\n"
              << "mean_latency: " << report.mean_latency << "\n"
              << "mean_energy: " << report.mean_energy << "\n";
    for (int m = 0; m < oar::kNumModalities; ++m) {
        std::cout << "activation_ratio[" << oar::modality_name(static_cast<oar::Modality>(m))
                  << "]: " << report.activation_ratio[static_cast<std::size_t>(m)] << "\n";
    }
    if (!report_path.empty()) write_text(report_path, report.to_json());
    if (!csv_path.empty()) write_text(csv_path, report.per_class_csv());
    return kExitOk;
}

int cmd_cost(std::string emit_default, std::string profile, std::string trace_path) {
    if (!emit_default.empty()) {
        write_text(emit_default, oar::CostModel::defaults().to_json());
        std::cout << "wrote default cost profile to " << emit_default << "\n";
        return kExitOk;
    }
    if (trace_path.empty()) {
        std::cerr << "error: cost needs --emit-default or --trace\n";
        return kExitUsage;
    }
    oar::CostModel costs =
        profile.empty() ? oar::CostModel::defaults() : oar::CostModel::from_json_file(profile);
    std::ifstream f(trace_path);
    if (!f) throw oar::IoError("cannot open trace: " + trace_path);
    std::vector<std::string> trace;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        trace.push_back(json::parse(line).at("component").get<std::string>());
    }
    auto [latency, energy] = oar::simulate_cost(trace, costs);
    std::cout << json{{"entries", trace.size()}, {"latency", latency}, {"energy", energy}}.dump(2)
              << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"oar: early-exit multi-modal action recognition over synthetic compressed-domain streams"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags win)");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    int classes = 4, clips = 50, len = 60, gop = 12;
    std::string size = "64x64", out_dir;
    std::optional<std::uint64_t> seed;
    synth->add_option("--classes", classes);
    synth->add_option("--clips", clips, "clips per class");
    synth->add_option("--len", len, "frames per clip");
    synth->add_option("--size", size, "WxH, multiples of 64");
    synth->add_option("--gop", gop);
    synth->add_option("--seed", seed);
    synth->add_option("--out", out_dir);

    // train
    auto* train = app.add_subcommand("train", "iterative two-phase training");
    std::string train_data, train_out;
    oar::TrainConfig tcfg;
    tcfg.jobs = oar::default_jobs();
    bool iie_fixed = false;
    std::optional<std::uint64_t> train_seed;
    train->add_option("--data", train_data);
    train->add_option("--out", train_out, "output directory");
    train->add_option("--seed", train_seed);
    train->add_option("--theta", tcfg.theta);
    train->add_option("--tau", tcfg.tau);
    train->add_option("--lr", tcfg.learning_rate);
    train->add_option("--epochs-per-test", tcfg.epochs_per_test);
    train->add_option("--max-iters", tcfg.max_outer_iters);
    train->add_option("--cap", tcfg.gate_label_cap, "gate-exit positive label cap");
    train->add_option("--jobs", tcfg.jobs);
    train->add_option("--batch", tcfg.batch_size);
    train->add_option("--frames-per-clip", tcfg.frames_per_clip_sample);
    train->add_option("--max-epochs-per-phase", tcfg.max_epochs_per_phase);
    train->add_flag("--tdp-literal-terminal", tcfg.tdp_literal_terminal,
                    "use the unnormalized terminal TDP weight");
    train->add_flag("--tdp-loss-weighting", tcfg.tdp_loss_weighting,
                    "weight losses by TDP instead of sampling by it");
    train->add_flag("--iie-fixed-weights", iie_fixed,
                    "debug: bypass learnable modal weights with IIE scalars");

    // run
    auto* run = app.add_subcommand("run", "run one stream and print the exit record");
    std::string run_model, run_stream_path, run_cost, run_out, run_trace;
    run->add_option("--model", run_model)->required();
    run->add_option("--stream", run_stream_path)->required();
    run->add_option("--cost-profile", run_cost);
    run->add_option("--out", run_out, "write the exit record JSON here too");
    run->add_option("--trace-out", run_trace, "write the invocation trace as JSON lines");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a dataset");
    std::string eval_model, eval_data, eval_cost, eval_report, eval_csv, eval_policy = "online";
    int eval_jobs = oar::default_jobs(), eval_tau = 2;
    eval->add_option("--model", eval_model)->required();
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--cost-profile", eval_cost);
    eval->add_option("--report", eval_report);
    eval->add_option("--csv", eval_csv);
    eval->add_option("--policy", eval_policy, "online|offline");
    eval->add_option("--jobs", eval_jobs);
    eval->add_option("--tau", eval_tau);

    // cost
    auto* cost = app.add_subcommand("cost", "cost profile tools");
    std::string cost_emit, cost_profile, cost_trace;
    cost->add_option("--emit-default", cost_emit, "write the default profile JSON");
    cost->add_option("--profile", cost_profile);
    cost->add_option("--trace", cost_trace, "JSONL invocation trace to price");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        Resolver rc;
        if (!config_path.empty()) rc.load(config_path);
        if (synth->parsed()) return cmd_synth(rc, synth, classes, clips, len, size, gop, seed, out_dir);
        if (train->parsed())
            return cmd_train(rc, train, train_data, train_out, train_seed, tcfg, iie_fixed);
        if (run->parsed()) return cmd_run(run_model, run_stream_path, run_cost, run_out, run_trace);
        if (eval->parsed())
            return cmd_eval(eval_model, eval_data, eval_cost, eval_report, eval_csv, eval_policy,
                            eval_jobs, eval_tau);
        if (cost->parsed()) return cmd_cost(cost_emit, cost_profile, cost_trace);
    } catch (const oar::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
