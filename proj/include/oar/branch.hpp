#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "oar/autodiff.hpp"
#include "oar/compressed.hpp"
#include "oar/ops.hpp"
#include "oar/params.hpp"

namespace oar {

enum class Modality { Image = 0, MotionVectors = 1, Residuals = 2 };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Image: return "image";
        case Modality::MotionVectors: return "mv";
        default: return "res";
    }
}

constexpr int kNumModalities = 3;

struct TlsmConfig {
    double ratio = 1.0 / 16.0;
    int n_frames = 4;
};

struct MsemConfig {
    int pool_window = 3;
    int conv_kernel = 7;
};

struct BranchConfig {
    Modality modality = Modality::Image;
    int input_channels = 1;
    TlsmConfig tlsm;
    MsemConfig msem;
    std::vector<int> gate_widths = {8, 16, 32};
    std::vector<int> main_widths = {16, 32, 64, 64};
    int num_classes = 4;

    // Channels shifted by TLSM for a feature map with C channels: the ratio
    // share rounded down to a multiple of n_frames, but at least n_frames
    // (one channel per shared frame). Ratio 0 disables the shift.
    int shift_channels(int feature_channels) const {
        if (tlsm.ratio <= 0.0) return 0;
        if (tlsm.n_frames < 1) throw ConfigError("tlsm n_frames must be >= 1");
        const int n = tlsm.n_frames;
        int c = static_cast<int>(tlsm.ratio * feature_channels / n) * n;
        c = std::max(c, n);
        if (c > feature_channels) {
            throw ConfigError("TLSM shift span " + std::to_string(c) + " exceeds " +
                              std::to_string(feature_channels) + " feature channels");
        }
        return c;
    }
};

// Ring buffer of the last n feature tensors at the TLSM insertion point,
// most recent first.
class ShiftHistory {
public:
    explicit ShiftHistory(int capacity = 4) : capacity_(capacity) {}

    void push(Tensor features) {
        if (!entries_.empty() && !entries_.front().same_shape(features)) {
            throw ShapeError("shift history shape mismatch: " + shape_str(features.shape) + " vs " +
                             shape_str(entries_.front().shape));
        }
        entries_.push_front(std::move(features));
        while (static_cast<int>(entries_.size()) > capacity_) entries_.pop_back();
    }

    // j in [1, n]: features of frame t-j, or nullptr when not yet seen.
    const Tensor* frame_before(int j) const {
        if (j < 1 || j > static_cast<int>(entries_.size())) return nullptr;
        return &entries_[static_cast<std::size_t>(j - 1)];
    }

    std::size_t size() const { return entries_.size(); }
    int capacity() const { return capacity_; }
    void clear() { entries_.clear(); }

private:
    int capacity_;
    std::deque<Tensor> entries_;
};

// Temporal layering shift: channels [0, c) of x_t become, block j of width
// c/n, channels [0, c/n) of x_{t-j}. Missing history contributes zeros;
// channels [c, C) pass through untouched.
template <typename T>
TensorT<T> tlsm_apply(const ShiftHistory& history, const TensorT<T>& x_t, int c, int n) {
    if (x_t.rank() != 3) throw ShapeError("tlsm_apply expects C×H×W features");
    if (c == 0) return x_t;
    if (n < 1 || c % n != 0) throw ConfigError("TLSM requires c divisible by n");
    if (c > x_t.dim(0)) {
        throw ShapeError("TLSM shift span " + std::to_string(c) + " exceeds feature channels " +
                         std::to_string(x_t.dim(0)));
    }
    const int cw = c / n;
    const std::size_t hw = static_cast<std::size_t>(x_t.dim(1)) * x_t.dim(2);
    TensorT<T> out = x_t;
    for (int j = 1; j <= n; ++j) {
        T* dst = out.data.data() + static_cast<std::size_t>(j - 1) * cw * hw;
        const Tensor* src = history.frame_before(j);
        if (src == nullptr) {
            std::fill(dst, dst + static_cast<std::size_t>(cw) * hw, T(0));
            continue;
        }
        if (src->dim(1) != x_t.dim(1) || src->dim(2) != x_t.dim(2) || src->dim(0) < cw) {
            throw ShapeError("TLSM history entry shape " + shape_str(src->shape) +
                             " incompatible with features " + shape_str(x_t.shape));
        }
        for (std::size_t i = 0; i < static_cast<std::size_t>(cw) * hw; ++i) {
            dst[i] = static_cast<T>(src->data[i]);
        }
    }
    return out;
}

// Tape op: swaps in the TLSM-shifted leading channels as constants; gradient
// flows only through the untouched channels [c, C).
template <typename T>
typename Graph<T>::NodeId tlsm_node(Graph<T>& g, typename Graph<T>::NodeId x,
                                    const ShiftHistory& history, int c, int n) {
    if (c == 0) return x;
    TensorT<T> shifted = tlsm_apply<T>(history, g.value(x), c, n);
    return g.replace_leading_channels(x, std::move(shifted), c);
}

struct GateResult {
    double score = 0.0;
    int decision = 0;
    Tensor insertion_features;  // pre-shift features to push into history
};

// Gate backbone: stride-2 conv blocks with TLSM before the second conv,
// global average, sigmoid head.
template <typename T>
typename Graph<T>::NodeId gate_forward(Graph<T>& g, ParamSet<T>& ps, const std::string& prefix,
                                       typename Graph<T>::NodeId input, const BranchConfig& cfg,
                                       const ShiftHistory& history,
                                       TensorT<T>* insertion_features = nullptr) {
    auto x = g.relu(g.conv2d(input, g.param(ps.at(prefix + ".conv1.weight")),
                             g.param(ps.at(prefix + ".conv1.bias")), 2, 1));
    if (insertion_features) *insertion_features = g.value(x);
    const int c = cfg.shift_channels(g.value(x).dim(0));
    auto shifted = tlsm_node(g, x, history, c, cfg.tlsm.n_frames);
    auto x2 = g.relu(g.conv2d(shifted, g.param(ps.at(prefix + ".conv2.weight")),
                              g.param(ps.at(prefix + ".conv2.bias")), 2, 1));
    auto x3 = g.relu(g.conv2d(x2, g.param(ps.at(prefix + ".conv3.weight")),
                              g.param(ps.at(prefix + ".conv3.bias")), 2, 1));
    auto pooled = g.global_avg(x3);
    return g.affine(pooled, g.param(ps.at(prefix + ".head.weight")),
                    g.param(ps.at(prefix + ".head.bias")));  // logit
}

// MB-guided spatial attention: local mean/max pooling of the saliency plane,
// a small conv, sigmoid, broadcast multiply.
template <typename T>
typename Graph<T>::NodeId msem_node(Graph<T>& g, ParamSet<T>& ps, const std::string& prefix,
                                    typename Graph<T>::NodeId features,
                                    typename Graph<T>::NodeId saliency, const MsemConfig& cfg) {
    const auto& fv = g.value(features);
    const auto& sv = g.value(saliency);
    if (sv.rank() != 3 || sv.dim(0) != 1 || sv.dim(1) != fv.dim(1) || sv.dim(2) != fv.dim(2)) {
        throw ShapeError("MSEM saliency " + shape_str(sv.shape) + " vs features " + shape_str(fv.shape));
    }
    auto mean_plane = g.pool(PoolKind::Mean, saliency, cfg.pool_window, 1, true);
    auto max_plane = g.pool(PoolKind::Max, saliency, cfg.pool_window, 1, true);
    auto stacked = g.concat_channels({mean_plane, max_plane});
    auto att = g.sigmoid(g.conv2d(stacked, g.param(ps.at(prefix + ".msem.weight")),
                                  g.param(ps.at(prefix + ".msem.bias")), 1,
                                  (cfg.conv_kernel - 1) / 2));
    return g.broadcast_mul_plane(features, att);
}

struct MainForwardNodes {
    int features = -1;  // pre-classifier feature map
    int logits = -1;
};

// Main backbone: four stride-2 conv blocks with MSEM after the first,
// global average + affine classifier.
template <typename T>
MainForwardNodes main_forward(Graph<T>& g, ParamSet<T>& ps, const std::string& prefix,
                              typename Graph<T>::NodeId input,
                              typename Graph<T>::NodeId saliency, const BranchConfig& cfg) {
    auto x1 = g.relu(g.conv2d(input, g.param(ps.at(prefix + ".conv1.weight")),
                              g.param(ps.at(prefix + ".conv1.bias")), 2, 1));
    auto enhanced = msem_node(g, ps, prefix, x1, saliency, cfg.msem);
    auto x2 = g.relu(g.conv2d(enhanced, g.param(ps.at(prefix + ".conv2.weight")),
                              g.param(ps.at(prefix + ".conv2.bias")), 2, 1));
    auto x3 = g.relu(g.conv2d(x2, g.param(ps.at(prefix + ".conv3.weight")),
                              g.param(ps.at(prefix + ".conv3.bias")), 2, 1));
    auto x4 = g.relu(g.conv2d(x3, g.param(ps.at(prefix + ".conv4.weight")),
                              g.param(ps.at(prefix + ".conv4.bias")), 2, 1));
    MainForwardNodes out;
    out.features = x4;
    auto pooled = g.global_avg(x4);
    out.logits = g.affine(pooled, g.param(ps.at(prefix + ".classifier.weight")),
                          g.param(ps.at(prefix + ".classifier.bias")));
    return out;
}

template <typename T>
void add_gate_params(ParamSet<T>& ps, const std::string& prefix, const BranchConfig& cfg, Rng& rng) {
    const auto& w = cfg.gate_widths;
    add_conv(ps, prefix + ".conv1", w[0], cfg.input_channels, 3, rng);
    add_conv(ps, prefix + ".conv2", w[1], w[0], 3, rng);
    add_conv(ps, prefix + ".conv3", w[2], w[1], 3, rng);
    add_affine(ps, prefix + ".head", 1, w[2], rng);
}

template <typename T>
void add_main_params(ParamSet<T>& ps, const std::string& prefix, const BranchConfig& cfg, Rng& rng) {
    const auto& w = cfg.main_widths;
    add_conv(ps, prefix + ".conv1", w[0], cfg.input_channels, 3, rng);
    add_conv(ps, prefix + ".msem", 1, 2, cfg.msem.conv_kernel, rng);
    add_conv(ps, prefix + ".conv2", w[1], w[0], 3, rng);
    add_conv(ps, prefix + ".conv3", w[2], w[1], 3, rng);
    add_conv(ps, prefix + ".conv4", w[3], w[2], 3, rng);
    add_affine(ps, prefix + ".classifier", cfg.num_classes, w[3], rng);
}

// Per-modality, per-frame branch result.
struct BranchOutput {
    Modality modality = Modality::Image;
    Tensor features;                 // zero tensor when not activated
    std::optional<ProbDist> probs;   // absent when not activated
    double iie = 0.0;
    bool activated = false;
    double gate_score = 0.0;
};

}  // namespace oar
