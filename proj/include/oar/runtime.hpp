#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oar/model.hpp"
#include "oar/synth.hpp"

namespace oar {

struct CostEntry {
    double latency = 1.0;
    double energy = 1.0;
};

// Abstract per-component costs (latency in ms-like units, energy in mJ-like
// units). Components: decode, gate_<mod>, main_<mod>, fusion, gating.
struct CostModel {
    std::map<std::string, CostEntry> entries;

    static CostModel defaults();
    static CostModel from_json_file(const std::string& path);
    std::string to_json() const;

    const CostEntry& at(const std::string& component) const {
        auto it = entries.find(component);
        if (it == entries.end()) throw ConfigError("unknown cost component: " + component);
        return it->second;
    }
};

// Sums per-entry costs of an invocation log. Pure function of (trace, model).
std::pair<double, double> simulate_cost(const std::vector<std::string>& trace,
                                        const CostModel& model);

enum class Policy { Online, Offline };

struct RunOptions {
    Policy policy = Policy::Online;
    // Per-frame branch scheduling order (indices into Modality); results must
    // not depend on it.
    std::array<int, kNumModalities> modality_order = {0, 1, 2};
};

struct ExitRecord {
    int exit_frame = 0;  // 1-based; equals frames_decoded
    int frames_decoded = 0;
    int predicted_class = -1;
    double exit_confidence = 0.0;
    bool exited_early = false;
    std::array<int, kNumModalities> main_activations = {0, 0, 0};
    std::array<int, kNumModalities> gate_invocations = {0, 0, 0};
    int fused_frames = 0;
    double latency = 0.0;
    double energy = 0.0;
    std::vector<std::string> trace;     // component invocation log
    std::vector<int> frame_predictions;  // running fused prediction per decoded frame (-1 none)

    std::string to_json() const;
};

ExitRecord run_stream(Model& model, const DecodedStream& stream, const CostModel& costs,
                      const RunOptions& options = {});
ExitRecord run_stream_file(Model& model, const std::string& path, const CostModel& costs,
                           const RunOptions& options = {});

struct ClipEval {
    std::string path;
    int label = -1;
    bool ok = false;
    std::string error;
    ExitRecord record;
    double tdp_accuracy = 0.0;
    double offline_latency = 0.0;  // same cost model, full-frame policy
};

struct ClassBreakdown {
    int label = 0;
    int clips = 0;
    double top1 = 0.0;
    double tdp_accuracy = 0.0;
    double mean_exit_frame = 0.0;
    std::array<double, kNumModalities> activation_ratio = {0, 0, 0};
    double mean_latency = 0.0;
    double mean_energy = 0.0;
};

struct EvalReport {
    int num_clips = 0;
    int failed_clips = 0;
    double top1 = 0.0;
    double tdp_accuracy = 0.0;
    double mean_exit_frame = 0.0;
    double median_exit_frame = 0.0;
    std::array<double, kNumModalities> activation_ratio = {0, 0, 0};
    double mean_latency = 0.0;
    double mean_energy = 0.0;
    std::vector<ClassBreakdown> per_class;
    std::vector<ClipEval> clips;
    std::string policy = "online";
    std::string config_json;  // resolved run configuration, embedded verbatim

    std::string to_json() const;
    std::string per_class_csv() const;
};

struct EvalOptions {
    Policy policy = Policy::Online;
    int tau = 2;
    bool tdp_literal_terminal = false;
    int jobs = 1;
    std::string config_json = "{}";
};

EvalReport evaluate_dataset(Model& model, const std::string& dataset_dir, const CostModel& costs,
                            const EvalOptions& options);

}  // namespace oar
