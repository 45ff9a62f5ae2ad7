#pragma once

#include <string>
#include <vector>

#include "oar/branch.hpp"
#include "oar/checkpoint.hpp"
#include "oar/compressed.hpp"
#include "oar/fusion.hpp"

namespace oar {

struct ModelConfig {
    int num_classes = 4;
    int width = 64;
    int height = 64;
    int gop = 12;
    TlsmConfig tlsm;
    MsemConfig msem;
    std::vector<int> gate_widths = {8, 16, 32};
    std::vector<int> main_widths = {16, 32, 64, 64};
    int gating_hidden = 64;
    bool iie_fixed_debug = false;  // bypass learnable modal weights with IIE scalars

    static int modality_channels(Modality m) {
        return m == Modality::MotionVectors ? 2 : 1;
    }

    BranchConfig branch(Modality m) const {
        BranchConfig b;
        b.modality = m;
        b.input_channels = modality_channels(m);
        b.tlsm = tlsm;
        b.msem = msem;
        b.gate_widths = gate_widths;
        b.main_widths = main_widths;
        b.num_classes = num_classes;
        return b;
    }

    int feature_channels() const { return main_widths.back(); }
    int feature_height() const { return height / 16; }
    int feature_width() const { return width / 16; }
    int flat_dim() const { return feature_channels() * feature_height() * feature_width(); }

    void validate() const {
        if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
        if (width % 16 != 0 || height % 16 != 0 || width <= 0 || height <= 0) {
            throw ConfigError("frame dimensions must be positive multiples of 16");
        }
        if (gate_widths.size() != 3 || main_widths.size() != 4) {
            throw ConfigError("backbone width lists must have 3 (gate) and 4 (main) entries");
        }
    }
};

// All trainable parameters of the pipeline plus their configuration.
struct Model {
    ModelConfig cfg;
    ParamSet<float> params;

    static Model init(const ModelConfig& cfg, std::uint64_t seed);

    void save(const std::string& path) const;
    static Model load(const std::string& path);

    std::string gate_prefix(Modality m) const { return std::string("gate.") + modality_name(m); }
    std::string main_prefix(Modality m) const { return std::string("main.") + modality_name(m); }
};

// Per-modality tensors derived from one frame (after GOP accumulation).
struct ModalityInputs {
    Tensor image;     // 1×H×W, centered and scaled to roughly unit range
    Tensor mv;        // 2×H×W, accumulated displacement / 8
    Tensor res;       // 1×H×W, accumulated residual / 128
    Tensor saliency;  // 1×(H/2)×(W/2), bilinear-resized MB saliency

    const Tensor& modality(Modality m) const {
        switch (m) {
            case Modality::Image: return image;
            case Modality::MotionVectors: return mv;
            default: return res;
        }
    }
};

ModalityInputs make_modality_inputs(const FramePacket& packet, const GopState& gop);

// Gate stage: runs the tiny backbone (TLSM at its insertion point), pushes
// the pre-shift features into `history`, and thresholds the sigmoid score.
GateResult gate_infer(Model& model, Modality m, const Tensor& input, ShiftHistory& history);

struct MainResult {
    Tensor features;
    ProbDist probs;
};

// Main stage; call only when the gate decided 1.
MainResult main_infer(Model& model, Modality m, const Tensor& input, const Tensor& saliency);

// One modality branch step: gate, then main + IIE when the gate fires.
// `main_invocations`, when set, counts actual f_Main runs (for cost
// accounting and the no-main-after-reject invariant).
BranchOutput branch_step(Model& model, Modality m, const ModalityInputs& inputs,
                         ShiftHistory& history, int* main_invocations = nullptr);

// Weighted modality features for fusion (runtime wrapper over the tape op).
ModalSummary modal_weight(Model& model, Modality m, const Tensor& features, double iie_value,
                          int prediction);

struct FuseResult {
    Tensor fused;
    ProbDist probs;
};

// Fixed-order concat + 1x1 mix + classifier over the frame's summaries.
FuseResult fuse_modalities(Model& model, const std::vector<ModalSummary>& summaries);

}  // namespace oar
