#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "oar/autodiff.hpp"
#include "oar/branch.hpp"
#include "oar/params.hpp"
#include "oar/tensor.hpp"

namespace oar {

// Inverse information entropy of a class distribution: 1 - H(P)/log2(N),
// clamped to [0, 1]. Epsilon smoothing keeps one-hot distributions finite.
inline double iie(const ProbDist& probs) {
    const std::size_t n = probs.size();
    if (n < 2) throw ConfigError("IIE needs at least 2 classes (log2 N would be 0)");
    constexpr double eps = 1e-12;
    double h = 0.0;
    for (double p : probs.values) h -= p * std::log2(p + eps);
    const double v = 1.0 - h / std::log2(static_cast<double>(n));
    return std::min(1.0, std::max(0.0, v));
}

// Per-modality weighted-feature summary for one frame.
struct ModalSummary {
    Modality modality = Modality::Image;
    Tensor weighted;                // x'_t; zero tensor when inactive
    double mean_weight = 0.0;       // omega bar; 0 when inactive
    std::optional<int> prediction;  // branch argmax; absent when inactive
    bool active = false;
};

struct ModalWeightNodes {
    int weight_map = -1;  // w
    int weighted = -1;    // x'_t = w ⊙ x_t
};

// w = sigmoid(conv1x1(x_t * iie)); x' = w ⊙ x_t. With the fixed-IIE debug
// mode the learnable map is bypassed and w is the IIE scalar everywhere.
template <typename T>
ModalWeightNodes modal_weight_nodes(Graph<T>& g, ParamSet<T>& ps, const std::string& prefix,
                                    typename Graph<T>::NodeId x, double iie_value,
                                    bool iie_fixed_debug = false) {
    ModalWeightNodes out;
    if (iie_fixed_debug) {
        TensorT<T> w(g.value(x).shape);
        w.fill(static_cast<T>(iie_value));
        out.weight_map = g.input(std::move(w));
    } else {
        auto scaled = g.scale(x, static_cast<T>(iie_value));
        out.weight_map = g.sigmoid(g.conv2d(scaled, g.param(ps.at(prefix + ".weight")),
                                            g.param(ps.at(prefix + ".bias")), 1, 0));
    }
    out.weighted = g.mul(out.weight_map, x);
    return out;
}

struct FuseNodes {
    int fused = -1;   // x^fus_t
    int logits = -1;  // instantaneous classifier logits
};

// Concatenate per-modality weighted features in fixed order (inactive slots
// zero), mix with a 1x1 conv, classify with global average + affine.
template <typename T>
FuseNodes fuse_nodes(Graph<T>& g, ParamSet<T>& ps, const std::vector<int>& modal_features) {
    auto cat = g.concat_channels(modal_features);
    FuseNodes out;
    out.fused = g.conv2d(cat, g.param(ps.at("fusion.mix.weight")), g.param(ps.at("fusion.mix.bias")), 1, 0);
    auto pooled = g.global_avg(out.fused);
    out.logits = g.affine(pooled, g.param(ps.at("fusion.classifier.weight")),
                          g.param(ps.at("fusion.classifier.bias")));
    return out;
}

// Modality-consistency frame weight (salient mean weight plus sign-matched
// mean weights of the other active modalities). Requires >= 1 active summary.
inline double mc_weight(const std::vector<ModalSummary>& summaries) {
    int salient = -1;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        if (!summaries[i].active) continue;
        if (salient < 0 || summaries[i].mean_weight > summaries[static_cast<std::size_t>(salient)].mean_weight) {
            salient = static_cast<int>(i);  // strict > keeps first-in-order on ties
        }
    }
    if (salient < 0) throw ConfigError("mc_weight with no active modality");
    const ModalSummary& sal = summaries[static_cast<std::size_t>(salient)];
    double w = sal.mean_weight;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        if (static_cast<int>(i) == salient || !summaries[i].active) continue;
        const bool agree = summaries[i].prediction && sal.prediction &&
                           *summaries[i].prediction == *sal.prediction;
        w += (agree ? 1.0 : -1.0) * summaries[i].mean_weight;
    }
    return w;
}

// Running MC-weighted temporal average of fused features (Eq.-9 style):
// x^fus_{1:t} = (1/t) * sum_i w_mc_i * x^fus_i, over fused frames only.
// Accumulators are double so the incremental state tracks a batch
// recomputation to full precision over long streams.
struct FusedState {
    int t = 0;
    Tensor64 running_sum;
    Tensor64 current;   // x^fus_{1:t}
    Tensor64 previous;  // x^fus_{1:t-1}; equals current at t=1 (copy rule)
    std::vector<double> w_history;

    bool empty() const { return t == 0; }
    Tensor current_f() const { return current.cast<float>(); }
    Tensor previous_f() const { return previous.cast<float>(); }
};

inline void temporal_fuse(FusedState& state, const Tensor& fused_t, double w_mc) {
    if (state.t == 0) {
        state.running_sum = Tensor64(fused_t.shape);
    } else if (state.running_sum.shape != fused_t.shape) {
        throw ShapeError("fused feature shape changed mid-stream: " + shape_str(fused_t.shape) +
                         " vs " + shape_str(state.running_sum.shape));
    }
    for (std::size_t i = 0; i < fused_t.size(); ++i) {
        state.running_sum.data[i] += w_mc * static_cast<double>(fused_t.data[i]);
    }
    state.t += 1;
    state.w_history.push_back(w_mc);
    Tensor64 avg = state.running_sum;
    const double inv_t = 1.0 / static_cast<double>(state.t);
    for (auto& v : avg.data) v *= inv_t;
    state.previous = (state.t == 1) ? avg : std::move(state.current);
    state.current = std::move(avg);
}

struct GateExitResult {
    int decision = 0;        // B
    double confidence = 0.0;  // sigmoid output
};

// Stopping gate: sigmoid(proj([fc_prev(prev) ; fc_curr(curr)])).
template <typename T>
typename Graph<T>::NodeId gate_exit_logit(Graph<T>& g, ParamSet<T>& ps,
                                          typename Graph<T>::NodeId prev_flat,
                                          typename Graph<T>::NodeId curr_flat) {
    auto a = g.affine(prev_flat, g.param(ps.at("gate_exit.fc_prev.weight")),
                      g.param(ps.at("gate_exit.fc_prev.bias")));
    auto b = g.affine(curr_flat, g.param(ps.at("gate_exit.fc_curr.weight")),
                      g.param(ps.at("gate_exit.fc_curr.bias")));
    auto cat = g.concat_vec({a, b});
    return g.affine(cat, g.param(ps.at("gate_exit.proj.weight")),
                    g.param(ps.at("gate_exit.proj.bias")));
}

inline GateExitResult gate_exit(const FusedState& state, ParamSet<float>& ps) {
    if (state.t < 1) throw ConfigError("gate_exit requires at least one fused frame");
    Graph<float> g;
    auto prev = g.flatten(g.input(state.previous_f()));
    auto curr = g.flatten(g.input(state.current_f()));
    auto logit = gate_exit_logit(g, ps, prev, curr);
    GateExitResult r;
    r.confidence = static_cast<double>(stable_sigmoid(g.value(logit).data[0]));
    r.decision = r.confidence >= 0.5 ? 1 : 0;
    return r;
}

inline ProbDist classify_fused(const FusedState& state, ParamSet<float>& ps) {
    if (state.t < 1) throw ConfigError("classify_fused requires at least one fused frame");
    Graph<float> g;
    auto x = g.input(state.current_f());
    auto pooled = g.global_avg(x);
    auto logits = g.affine(pooled, g.param(ps.at("fusion.classifier.weight")),
                           g.param(ps.at("fusion.classifier.bias")));
    auto probs = g.softmax(logits);
    const auto& v = g.value(probs);
    return ProbDist(std::vector<double>(v.data.begin(), v.data.end()));
}

template <typename T>
void add_fusion_params(ParamSet<T>& ps, int feature_channels, int num_classes, Rng& rng) {
    for (int m = 0; m < kNumModalities; ++m) {
        add_conv(ps, std::string("fusion.modal.") + modality_name(static_cast<Modality>(m)),
                 feature_channels, feature_channels, 1, rng);
    }
    add_conv(ps, "fusion.mix", feature_channels, feature_channels * kNumModalities, 1, rng);
    add_affine(ps, "fusion.classifier", num_classes, feature_channels, rng);
}

template <typename T>
void add_gate_exit_params(ParamSet<T>& ps, int flat_dim, int hidden, Rng& rng) {
    add_affine(ps, "gate_exit.fc_prev", hidden, flat_dim, rng);
    add_affine(ps, "gate_exit.fc_curr", hidden, flat_dim, rng);
    add_affine(ps, "gate_exit.proj", 1, hidden * 2, rng);
}

}  // namespace oar
