#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oar/model.hpp"
#include "oar/synth.hpp"

namespace oar {

struct TrainConfig {
    double theta = 1e-2;       // accuracy-gain stop threshold
    int tau = 2;               // TDP knee
    int epochs_per_test = 3;
    double learning_rate = 0.01;
    double momentum = 0.9;
    int max_outer_iters = 10;
    int gate_label_cap = 5;
    std::uint64_t seed = 0;

    int batch_size = 16;
    int frames_per_clip_sample = 2;  // frames drawn per clip per epoch
    int max_epochs_per_phase = 30;
    int max_head_epochs = 40;        // cap for fusion / exit-head phases
    int jobs = 1;
    double validation_fraction = 0.2;
    bool tdp_literal_terminal = false;  // terminal weight 1/2^(v_len-tau+2) as printed
    bool tdp_loss_weighting = false;    // weight losses instead of sampling

    void validate() const {
        if (theta <= 0) throw ConfigError("theta must be > 0");
        if (tau < 1) throw ConfigError("tau must be >= 1");
        if (gate_label_cap < 1) throw ConfigError("gate label cap must be >= 1");
        if (epochs_per_test < 1) throw ConfigError("epochs_per_test must be >= 1");
    }
};

// Temporally decaying frame priority; t is 1-based. The terminal frame takes
// the whole geometric remainder 1/2^(v_len-tau) so the weights sum to 1 for
// tau=2; the literal 1/2^(v_len-tau+2) variant stays available for comparison.
double tdp_weight(int t, int v_len, int tau, bool literal_terminal = false);

// Sum of correct_t * tdp_weight(t) over one clip.
double tdp_weighted_accuracy(const std::vector<int>& per_frame_correct, int tau,
                             bool literal_terminal = false);

// Frame-level hard labels: 1 where the prediction matches the clip label.
std::vector<int> make_hard_labels(const std::vector<int>& main_predictions, int truth);

// Exit labels: 1 on correct frames until `cap` positives have been emitted.
std::vector<int> make_gate_exit_labels(const std::vector<int>& fused_correct, int cap);

// In-memory dataset: decoded clips with per-frame modality inputs built lazily.
struct ClipData {
    int label = 0;
    std::string path;
    std::vector<FramePacket> packets;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<ClipData> clips;

    static Dataset load(const std::string& dataset_dir, int jobs = 1);
    int frames(std::size_t clip) const { return static_cast<int>(clips[clip].packets.size()); }
};

// Per-frame inputs for one clip, after GOP accumulation.
std::vector<ModalityInputs> prepare_clip_inputs(const ClipData& clip, int gop);

struct PhaseTrace {
    std::string name;
    std::vector<double> accuracies;  // baseline test first, then one per test
    int epochs_run = 0;
};

struct ModalityTrainReport {
    std::string modality;
    std::vector<double> outer_accuracies;  // A_0, A_1, ...
    std::vector<PhaseTrace> phases;
    int stop_iteration = -1;
    bool eq4_fired = false;
    double final_accuracy = 0.0;
};

struct TrainReport {
    std::vector<ModalityTrainReport> modalities;
    PhaseTrace fusion_phase;
    PhaseTrace exit_phase;
    double mean_branch_accuracy = 0.0;   // mean over modalities of final A_i
    double fused_online_accuracy = 0.0;  // no-exit replay on the validation split
    double wall_clock_seconds = 0.0;
    std::vector<std::string> eq4_log;

    std::string to_json() const;
};

// Deterministic stratified 80/20 split by seed.
struct DataSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};
DataSplit split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed);

// Two-phase iterative training of all three branches, then the fusion and
// stopping heads. Emits per-iteration checkpoints into checkpoint_dir when
// non-empty.
TrainReport iterative_train(Model& model, const Dataset& data, const TrainConfig& cfg,
                            const std::string& checkpoint_dir = "");

}  // namespace oar
