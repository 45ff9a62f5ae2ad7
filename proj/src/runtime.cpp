#include "oar/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "oar/training.hpp"

namespace oar {

namespace {

const char* kComponents[] = {"decode",  "gate_image", "gate_mv", "gate_res", "main_image",
                             "main_mv", "main_res",   "fusion",  "gating"};

std::string gate_component(Modality m) { return std::string("gate_") + modality_name(m); }
std::string main_component(Modality m) { return std::string("main_") + modality_name(m); }

}  // namespace

CostModel CostModel::defaults() {
    CostModel m;
    for (const char* c : kComponents) m.entries[c] = CostEntry{1.0, 1.0};
    // Measured CPU latency of the full fusion step in the reference setup.
    m.entries["fusion"] = CostEntry{0.69, 1.0};
    return m;
}

CostModel CostModel::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open cost profile: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad cost profile JSON: " + std::string(e.what()));
    }
    CostModel m = defaults();
    for (auto it = j.begin(); it != j.end(); ++it) {
        CostEntry e;
        e.latency = it.value().value("latency", 1.0);
        e.energy = it.value().value("energy", 1.0);
        if (e.latency < 0 || e.energy < 0) throw ConfigError("cost entries must be >= 0");
        m.entries[it.key()] = e;
    }
    return m;
}

std::string CostModel::to_json() const {
    nlohmann::json j;
    for (const auto& [name, e] : entries) {
        j[name] = {{"latency", e.latency}, {"energy", e.energy}};
    }
    return j.dump(2);
}

std::pair<double, double> simulate_cost(const std::vector<std::string>& trace,
                                        const CostModel& model) {
    double latency = 0.0, energy = 0.0;
    for (const auto& name : trace) {
        const CostEntry& e = model.at(name);
        latency += e.latency;
        energy += e.energy;
    }
    return {latency, energy};
}

std::string ExitRecord::to_json() const {
    nlohmann::json j;
    j["exit_frame"] = exit_frame;
    j["frames_decoded"] = frames_decoded;
    j["predicted_class"] = predicted_class;
    j["exit_confidence"] = exit_confidence;
    j["exited_early"] = exited_early;
    j["fused_frames"] = fused_frames;
    j["latency"] = latency;
    j["energy"] = energy;
    for (int m = 0; m < kNumModalities; ++m) {
        j["main_activations"][modality_name(static_cast<Modality>(m))] =
            main_activations[static_cast<std::size_t>(m)];
        j["gate_invocations"][modality_name(static_cast<Modality>(m))] =
            gate_invocations[static_cast<std::size_t>(m)];
    }
    return j.dump(2);
}

ExitRecord run_stream(Model& model, const DecodedStream& stream, const CostModel& costs,
                      const RunOptions& options) {
    const StreamHeader& h = stream.header;
    if (h.width != model.cfg.width || h.height != model.cfg.height) {
        throw ConfigError("stream " + std::to_string(h.width) + "x" + std::to_string(h.height) +
                          " does not match model " + std::to_string(model.cfg.width) + "x" +
                          std::to_string(model.cfg.height));
    }
    if (h.class_id >= model.cfg.num_classes) {
        throw ConfigError("stream class_id " + std::to_string(h.class_id) +
                          " outside model's " + std::to_string(model.cfg.num_classes) + " classes");
    }

    ExitRecord rec;
    GopState gop(h.width, h.height, h.gop);
    std::array<ShiftHistory, kNumModalities> histories = {ShiftHistory(model.cfg.tlsm.n_frames),
                                                          ShiftHistory(model.cfg.tlsm.n_frames),
                                                          ShiftHistory(model.cfg.tlsm.n_frames)};
    FusedState state;
    int last_pred = -1;
    double last_conf = 0.0;

    const int n_frames = static_cast<int>(stream.packets.size());
    for (int fi = 0; fi < n_frames; ++fi) {
        const FramePacket& packet = stream.packets[static_cast<std::size_t>(fi)];
        rec.trace.push_back("decode");
        ++rec.frames_decoded;
        accumulate_gop(gop, packet);
        const ModalityInputs inputs = make_modality_inputs(packet, gop);

        std::vector<ModalSummary> summaries(kNumModalities);
        bool any_active = false;
        if (options.policy == Policy::Online) {
            std::array<BranchOutput, kNumModalities> raw;
            for (int oi = 0; oi < kNumModalities; ++oi) {
                const int mi = options.modality_order[static_cast<std::size_t>(oi)];
                const Modality m = static_cast<Modality>(mi);
                rec.trace.push_back(gate_component(m));
                ++rec.gate_invocations[static_cast<std::size_t>(mi)];
                int mains = 0;
                raw[static_cast<std::size_t>(mi)] =
                    branch_step(model, m, inputs, histories[static_cast<std::size_t>(mi)], &mains);
                if (mains > 0) {
                    rec.trace.push_back(main_component(m));
                    rec.main_activations[static_cast<std::size_t>(mi)] += mains;
                }
            }
            for (int mi = 0; mi < kNumModalities; ++mi) {
                const BranchOutput& b = raw[static_cast<std::size_t>(mi)];
                if (b.activated) {
                    any_active = true;
                    summaries[static_cast<std::size_t>(mi)] =
                        modal_weight(model, b.modality, b.features, b.iie, b.probs->argmax());
                } else {
                    ModalSummary s;
                    s.modality = b.modality;
                    s.active = false;
                    s.weighted = Tensor({model.cfg.feature_channels(), model.cfg.feature_height(),
                                         model.cfg.feature_width()});
                    summaries[static_cast<std::size_t>(mi)] = std::move(s);
                }
            }
        } else {
            // Offline policy: every f_Main runs on every frame, no gates.
            for (int mi = 0; mi < kNumModalities; ++mi) {
                const Modality m = static_cast<Modality>(mi);
                rec.trace.push_back(main_component(m));
                ++rec.main_activations[static_cast<std::size_t>(mi)];
                MainResult r = main_infer(model, m, inputs.modality(m), inputs.saliency);
                const double conf = iie(r.probs);
                summaries[static_cast<std::size_t>(mi)] =
                    modal_weight(model, m, r.features, conf, r.probs.argmax());
            }
            any_active = true;
        }

        if (any_active) {
            rec.trace.push_back("fusion");
            FuseResult fused = fuse_modalities(model, summaries);
            temporal_fuse(state, fused.fused, mc_weight(summaries));
            ++rec.fused_frames;
            last_pred = classify_fused(state, model.params).argmax();

            if (options.policy == Policy::Online) {
                rec.trace.push_back("gating");
                GateExitResult exit = gate_exit(state, model.params);
                last_conf = exit.confidence;
                if (exit.decision == 1) {
                    rec.exit_frame = fi + 1;
                    rec.predicted_class = last_pred;
                    rec.exit_confidence = exit.confidence;
                    rec.exited_early = fi + 1 < n_frames;
                    rec.frame_predictions.push_back(last_pred);
                    auto [lat, en] = simulate_cost(rec.trace, costs);
                    rec.latency = lat;
                    rec.energy = en;
                    return rec;
                }
            }
        }
        rec.frame_predictions.push_back(last_pred);
    }

    // Unconditional exit at the final frame.
    rec.exit_frame = n_frames;
    rec.predicted_class = state.empty() ? -1 : classify_fused(state, model.params).argmax();
    rec.exit_confidence = last_conf;
    rec.exited_early = false;
    auto [lat, en] = simulate_cost(rec.trace, costs);
    rec.latency = lat;
    rec.energy = en;
    return rec;
}

ExitRecord run_stream_file(Model& model, const std::string& path, const CostModel& costs,
                           const RunOptions& options) {
    DecodedStream s = decode_stream(path);
    return run_stream(model, s, costs, options);
}

namespace {

double offline_latency_for(const CostModel& costs, int n_frames) {
    double per_frame = costs.at("decode").latency + costs.at("fusion").latency;
    for (int m = 0; m < kNumModalities; ++m) {
        per_frame += costs.at(std::string("main_") + modality_name(static_cast<Modality>(m))).latency;
    }
    return per_frame * n_frames;
}

}  // namespace

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["num_clips"] = num_clips;
    j["failed_clips"] = failed_clips;
    j["policy"] = policy;
    j["top1"] = top1;
    j["tdp_accuracy"] = tdp_accuracy;
    j["mean_exit_frame"] = mean_exit_frame;
    j["median_exit_frame"] = median_exit_frame;
    j["mean_latency"] = mean_latency;
    j["mean_energy"] = mean_energy;
    for (int m = 0; m < kNumModalities; ++m) {
        j["activation_ratio"][modality_name(static_cast<Modality>(m))] =
            activation_ratio[static_cast<std::size_t>(m)];
    }
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : per_class) {
        nlohmann::json cj;
        cj["label"] = c.label;
        cj["clips"] = c.clips;
        cj["top1"] = c.top1;
        cj["tdp_accuracy"] = c.tdp_accuracy;
        cj["mean_exit_frame"] = c.mean_exit_frame;
        cj["mean_latency"] = c.mean_latency;
        cj["mean_energy"] = c.mean_energy;
        for (int m = 0; m < kNumModalities; ++m) {
            cj["activation_ratio"][modality_name(static_cast<Modality>(m))] =
                c.activation_ratio[static_cast<std::size_t>(m)];
        }
        classes.push_back(cj);
    }
    j["per_class"] = classes;
    nlohmann::json clip_rows = nlohmann::json::array();
    for (const auto& c : clips) {
        nlohmann::json cj;
        cj["path"] = c.path;
        cj["label"] = c.label;
        cj["ok"] = c.ok;
        if (!c.ok) {
            cj["error"] = c.error;
        } else {
            cj["exit_frame"] = c.record.exit_frame;
            cj["predicted_class"] = c.record.predicted_class;
            cj["tdp_accuracy"] = c.tdp_accuracy;
            cj["latency"] = c.record.latency;
            cj["energy"] = c.record.energy;
            cj["offline_latency"] = c.offline_latency;
        }
        clip_rows.push_back(cj);
    }
    j["clips"] = clip_rows;
    j["config"] = nlohmann::json::parse(config_json);
    return j.dump(2);
}

std::string EvalReport::per_class_csv() const {
    std::string csv =
        "label,clips,top1,tdp_accuracy,mean_exit_frame,activation_image,activation_mv,"
        "activation_res,mean_latency,mean_energy\n";
    char buf[256];
    for (const auto& c : per_class) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.4f,%.6f,%.6f,%.6f,%.6f,%.6f\n", c.label,
                      c.clips, c.top1, c.tdp_accuracy, c.mean_exit_frame, c.activation_ratio[0],
                      c.activation_ratio[1], c.activation_ratio[2], c.mean_latency, c.mean_energy);
        csv += buf;
    }
    return csv;
}

EvalReport evaluate_dataset(Model& model, const std::string& dataset_dir, const CostModel& costs,
                            const EvalOptions& options) {
    const DatasetManifest manifest = load_manifest(dataset_dir);
    EvalReport report;
    report.policy = options.policy == Policy::Online ? "online" : "offline";
    report.config_json = options.config_json;
    report.clips.resize(manifest.clips.size());

    RunOptions run_opts;
    run_opts.policy = options.policy;

    parallel_for(manifest.clips.size(), options.jobs, [&](std::size_t i) {
        ClipEval& ce = report.clips[i];
        ce.path = manifest.clips[i].path;
        ce.label = manifest.clips[i].label;
        try {
            const DecodedStream s = decode_stream(dataset_dir + "/" + ce.path);
            ce.record = run_stream(model, s, costs, run_opts);
            // Per-frame correctness: running fused predictions before the exit
            // frame, the exit prediction from the exit frame onward.
            std::vector<int> correct(s.packets.size(), 0);
            for (std::size_t f = 0; f < s.packets.size(); ++f) {
                const int t = static_cast<int>(f) + 1;
                int pred;
                if (t >= ce.record.exit_frame) {
                    pred = ce.record.predicted_class;
                } else {
                    pred = ce.record.frame_predictions[f];
                }
                correct[f] = (pred == ce.label) ? 1 : 0;
            }
            ce.tdp_accuracy =
                tdp_weighted_accuracy(correct, options.tau, options.tdp_literal_terminal);
            ce.offline_latency = offline_latency_for(costs, static_cast<int>(s.packets.size()));
            ce.ok = true;
        } catch (const std::exception& e) {
            ce.ok = false;
            ce.error = e.what();
        }
    });

    // Aggregate in manifest order.
    std::map<int, std::vector<const ClipEval*>> by_class;
    std::vector<double> exits;
    int ok_count = 0;
    for (const auto& ce : report.clips) {
        if (!ce.ok) {
            ++report.failed_clips;
            continue;
        }
        ++ok_count;
        by_class[ce.label].push_back(&ce);
        report.top1 += ce.record.predicted_class == ce.label ? 1.0 : 0.0;
        report.tdp_accuracy += ce.tdp_accuracy;
        report.mean_exit_frame += ce.record.exit_frame;
        exits.push_back(ce.record.exit_frame);
        report.mean_latency += ce.record.latency;
        report.mean_energy += ce.record.energy;
        for (int m = 0; m < kNumModalities; ++m) {
            report.activation_ratio[static_cast<std::size_t>(m)] +=
                static_cast<double>(ce.record.main_activations[static_cast<std::size_t>(m)]) /
                static_cast<double>(ce.record.exit_frame);
        }
    }
    report.num_clips = static_cast<int>(report.clips.size());
    if (ok_count > 0) {
        const double n = ok_count;
        report.top1 /= n;
        report.tdp_accuracy /= n;
        report.mean_exit_frame /= n;
        report.mean_latency /= n;
        report.mean_energy /= n;
        for (auto& r : report.activation_ratio) r /= n;
        std::sort(exits.begin(), exits.end());
        report.median_exit_frame = exits.size() % 2 == 1
                                       ? exits[exits.size() / 2]
                                       : 0.5 * (exits[exits.size() / 2 - 1] + exits[exits.size() / 2]);
    }
    for (const auto& [label, rows] : by_class) {
        ClassBreakdown c;
        c.label = label;
        c.clips = static_cast<int>(rows.size());
        for (const ClipEval* ce : rows) {
            c.top1 += ce->record.predicted_class == ce->label ? 1.0 : 0.0;
            c.tdp_accuracy += ce->tdp_accuracy;
            c.mean_exit_frame += ce->record.exit_frame;
            c.mean_latency += ce->record.latency;
            c.mean_energy += ce->record.energy;
            for (int m = 0; m < kNumModalities; ++m) {
                c.activation_ratio[static_cast<std::size_t>(m)] +=
                    static_cast<double>(ce->record.main_activations[static_cast<std::size_t>(m)]) /
                    static_cast<double>(ce->record.exit_frame);
            }
        }
        const double n = std::max(1, c.clips);
        c.top1 /= n;
        c.tdp_accuracy /= n;
        c.mean_exit_frame /= n;
        c.mean_latency /= n;
        c.mean_energy /= n;
        for (auto& r : c.activation_ratio) r /= n;
        report.per_class.push_back(c);
    }
    return report;
}

}  // namespace oar
