#include "oar/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>

#include <json.hpp>

namespace oar {

double tdp_weight(int t, int v_len, int tau, bool literal_terminal) {
    if (v_len <= tau) {
        throw ConfigError("tdp_weight requires v_len > tau (got v_len=" + std::to_string(v_len) +
                          ", tau=" + std::to_string(tau) + ")");
    }
    if (t < 1 || t > v_len) throw ConfigError("tdp_weight frame index out of range");
    if (t <= tau) return std::ldexp(1.0, -tau);
    if (t < v_len) return std::ldexp(1.0, -(t - tau + 1));
    return literal_terminal ? std::ldexp(1.0, -(v_len - tau + 2)) : std::ldexp(1.0, -(v_len - tau));
}

double tdp_weighted_accuracy(const std::vector<int>& per_frame_correct, int tau,
                             bool literal_terminal) {
    if (per_frame_correct.empty()) throw ConfigError("tdp_weighted_accuracy on empty clip");
    const int v_len = static_cast<int>(per_frame_correct.size());
    double acc = 0.0;
    for (int t = 1; t <= v_len; ++t) {
        if (per_frame_correct[static_cast<std::size_t>(t - 1)]) {
            acc += tdp_weight(t, v_len, tau, literal_terminal);
        }
    }
    return acc;
}

std::vector<int> make_hard_labels(const std::vector<int>& main_predictions, int truth) {
    std::vector<int> out(main_predictions.size());
    for (std::size_t i = 0; i < main_predictions.size(); ++i) {
        out[i] = main_predictions[i] == truth ? 1 : 0;
    }
    return out;
}

std::vector<int> make_gate_exit_labels(const std::vector<int>& fused_correct, int cap) {
    std::vector<int> out(fused_correct.size(), 0);
    int emitted = 0;
    for (std::size_t i = 0; i < fused_correct.size(); ++i) {
        if (fused_correct[i] && emitted < cap) {
            out[i] = 1;
            ++emitted;
        }
    }
    return out;
}

Dataset Dataset::load(const std::string& dataset_dir, int jobs) {
    Dataset d;
    d.manifest = load_manifest(dataset_dir);
    d.clips.resize(d.manifest.clips.size());
    std::vector<std::string> errors(d.clips.size());
    parallel_for(d.clips.size(), jobs, [&](std::size_t i) {
        const auto& entry = d.manifest.clips[i];
        try {
            DecodedStream s = decode_stream(dataset_dir + "/" + entry.path);
            d.clips[i].label = entry.label;
            d.clips[i].path = entry.path;
            d.clips[i].packets = std::move(s.packets);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    for (const auto& e : errors) {
        if (!e.empty()) throw IoError("failed to load clip: " + e);
    }
    return d;
}

std::vector<ModalityInputs> prepare_clip_inputs(const ClipData& clip, int gop) {
    std::vector<ModalityInputs> out;
    out.reserve(clip.packets.size());
    if (clip.packets.empty()) return out;
    GopState state(clip.packets[0].width(), clip.packets[0].height(), gop);
    for (const FramePacket& p : clip.packets) {
        accumulate_gop(state, p);
        out.push_back(make_modality_inputs(p, state));
    }
    return out;
}

DataSplit split_dataset(const Dataset& data, double validation_fraction, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < data.clips.size(); ++i) by_label[data.clips[i].label].push_back(i);
    DataSplit split;
    for (auto& [label, indices] : by_label) {
        Rng rng(Rng::derive(seed, 7000 + static_cast<std::uint64_t>(label)));
        for (std::size_t i = indices.size(); i > 1; --i) {
            std::swap(indices[i - 1], indices[rng.next_below(i)]);
        }
        std::size_t n_val = static_cast<std::size_t>(
            std::lround(validation_fraction * static_cast<double>(indices.size())));
        n_val = std::min(std::max<std::size_t>(n_val, 1), indices.size() - 1);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            (i < n_val ? split.validation : split.train).push_back(indices[i]);
        }
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    return split;
}

namespace {

using Clock = std::chrono::steady_clock;

struct SampleRef {
    std::size_t clip = 0;
    int frame = 0;  // 0-based
    double loss_scale = 1.0;
};

// Per-sample gradient capture, reduced in sample order so results do not
// depend on the worker count.
struct GradCapture {
    std::vector<std::pair<Param<float>*, Tensor>> grads;
};

// Momentum SGD over a ParamSet. Velocity buffers live here, in the trainer;
// the plain sgd_update primitive stays untouched for direct use.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum) : lr_(static_cast<float>(lr)),
                                              momentum_(static_cast<float>(momentum)) {}

    void step(ParamSet<float>& params) {
        if (momentum_ == 0.f) {
            sgd_update(params, lr_);
            return;
        }
        for (auto& p : params.params()) {
            auto& v = velocity_[&p];
            if (v.size() != p.value.size()) v.assign(p.value.size(), 0.f);
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                v[i] = momentum_ * v[i] + p.grad.data[i];
                p.value.data[i] -= lr_ * v[i];
            }
            p.grad.fill(0.f);
        }
    }

private:
    float lr_;
    float momentum_;
    std::map<const Param<float>*, std::vector<float>> velocity_;
};

void reduce_grads(std::vector<GradCapture>& captures, ParamSet<float>&) {
    for (auto& c : captures) {
        for (auto& [p, g] : c.grads) {
            for (std::size_t i = 0; i < g.size(); ++i) p->grad.data[i] += g.data[i];
        }
        c.grads.clear();
    }
}

// Gate insertion-point features (no tape) for building shift histories.
Tensor gate_insertion(Model& model, Modality m, const Tensor& input) {
    const std::string prefix = model.gate_prefix(m);
    Tensor h = conv2d(input, model.params.at(prefix + ".conv1.weight").value,
                      model.params.at(prefix + ".conv1.bias").value.data, 2, 1);
    return apply_activation(Activation::Relu, h);
}

ShiftHistory history_before_frame(Model& model, Modality m,
                                  const std::vector<ModalityInputs>& inputs, int frame,
                                  int n_frames) {
    ShiftHistory hist(n_frames);
    for (int j = std::max(0, frame - n_frames); j < frame; ++j) {
        hist.push(gate_insertion(model, m, inputs[static_cast<std::size_t>(j)].modality(m)));
    }
    return hist;
}

std::vector<int> gate_decisions(Model& model, Modality m,
                                const std::vector<ModalityInputs>& inputs) {
    ShiftHistory hist(model.cfg.tlsm.n_frames);
    std::vector<int> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
        out.push_back(gate_infer(model, m, in.modality(m), hist).decision);
    }
    return out;
}

std::vector<int> main_predictions(Model& model, Modality m,
                                  const std::vector<ModalityInputs>& inputs) {
    std::vector<int> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
        out.push_back(main_infer(model, m, in.modality(m), in.saliency).probs.argmax());
    }
    return out;
}

struct Trainer {
    Model& model;
    const Dataset& data;
    const TrainConfig& cfg;
    DataSplit split;

    std::vector<ModalityInputs> inputs_of(std::size_t clip) const {
        return prepare_clip_inputs(data.clips[clip], data.manifest.gop);
    }

    // --- frame sampling ------------------------------------------------------

    std::vector<SampleRef> sample_frames(std::size_t clip, const std::vector<int>& frames,
                                         int count, int v_len, Rng& rng) const {
        std::vector<SampleRef> out;
        if (frames.empty()) return out;
        std::vector<double> weights(frames.size());
        double total = 0.0;
        for (std::size_t i = 0; i < frames.size(); ++i) {
            weights[i] = tdp_weight(frames[i] + 1, v_len, cfg.tau, cfg.tdp_literal_terminal);
            total += weights[i];
        }
        for (int s = 0; s < count; ++s) {
            if (cfg.tdp_loss_weighting) {
                const std::size_t pick = rng.next_below(frames.size());
                const double scale = weights[pick] * static_cast<double>(frames.size()) / total;
                out.push_back({clip, frames[pick], scale});
            } else {
                double r = rng.next_double() * total;
                std::size_t pick = frames.size() - 1;
                for (std::size_t i = 0; i < frames.size(); ++i) {
                    if (r < weights[i]) {
                        pick = i;
                        break;
                    }
                    r -= weights[i];
                }
                out.push_back({clip, frames[pick], 1.0});
            }
        }
        return out;
    }

    // --- batched SGD over clip groups ---------------------------------------

    // One epoch: visit train clips in shuffled order in small groups, prepare
    // each group's inputs once, take one SGD step per group.
    template <typename LossFn>
    void run_epoch(const std::vector<std::vector<int>>& frame_lists, Rng& rng, SgdMomentum& opt,
                   const LossFn& loss_fn) {
        std::vector<std::size_t> order = split.train;
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.next_below(i)]);
        }
        const std::size_t group = std::max<std::size_t>(
            1, static_cast<std::size_t>(cfg.batch_size / std::max(1, cfg.frames_per_clip_sample)));
        for (std::size_t start = 0; start < order.size(); start += group) {
            const std::size_t end = std::min(order.size(), start + group);
            std::vector<std::size_t> clips(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            std::vector<SampleRef> samples;
            for (std::size_t clip : clips) {
                const auto& frames = frame_lists[clip];
                if (frames.empty()) continue;
                auto s = sample_frames(clip, frames, cfg.frames_per_clip_sample, data.frames(clip), rng);
                samples.insert(samples.end(), s.begin(), s.end());
            }
            if (samples.empty()) continue;

            std::map<std::size_t, std::vector<ModalityInputs>> group_inputs;
            std::vector<std::size_t> unique_clips;
            for (const auto& s : samples) {
                if (!group_inputs.count(s.clip)) {
                    group_inputs.emplace(s.clip, std::vector<ModalityInputs>{});
                    unique_clips.push_back(s.clip);
                }
            }
            parallel_for(unique_clips.size(), cfg.jobs, [&](std::size_t i) {
                group_inputs[unique_clips[i]] = inputs_of(unique_clips[i]);
            });

            std::vector<GradCapture> captures(samples.size());
            parallel_for(samples.size(), cfg.jobs, [&](std::size_t i) {
                Graph<float> g;
                auto loss = loss_fn(g, samples[i], group_inputs.at(samples[i].clip));
                g.backward(loss,
                           static_cast<float>(samples[i].loss_scale /
                                              static_cast<double>(samples.size())),
                           false);
                g.for_each_param_grad([&](Param<float>* p, const Tensor& grad) {
                    captures[i].grads.emplace_back(p, grad);
                });
            });
            reduce_grads(captures, model.params);
            opt.step(model.params);
        }
    }

    // --- validation metrics --------------------------------------------------

    // TDP-weighted accuracy of f_Main on the gate-approved frames of the
    // validation split, weights renormalized over the approved set.
    double validate_main(Modality m, const std::vector<std::vector<int>>& approved) const {
        std::vector<double> per_clip(split.validation.size(), -1.0);
        parallel_for(split.validation.size(), cfg.jobs, [&](std::size_t vi) {
            const std::size_t clip = split.validation[vi];
            const auto& frames = approved[clip];
            if (frames.empty()) return;
            const auto inputs = inputs_of(clip);
            const int v_len = data.frames(clip);
            double won = 0.0, total = 0.0;
            for (int f : frames) {
                const auto& in = inputs[static_cast<std::size_t>(f)];
                const int pred = main_infer(model, m, in.modality(m), in.saliency).probs.argmax();
                const double w = tdp_weight(f + 1, v_len, cfg.tau, cfg.tdp_literal_terminal);
                total += w;
                if (pred == data.clips[clip].label) won += w;
            }
            per_clip[vi] = total > 0 ? won / total : 0.0;
        });
        double sum = 0.0;
        int counted = 0;
        for (double v : per_clip) {
            if (v >= 0) {
                sum += v;
                ++counted;
            }
        }
        return counted ? sum / counted : 0.0;
    }

    // TDP-weighted agreement between gate decisions and hard labels.
    double validate_gate(Modality m, const std::vector<std::vector<int>>& hard_labels) const {
        std::vector<double> per_clip(split.validation.size(), 0.0);
        parallel_for(split.validation.size(), cfg.jobs, [&](std::size_t vi) {
            const std::size_t clip = split.validation[vi];
            const auto inputs = inputs_of(clip);
            const std::vector<int> decisions = gate_decisions(model, m, inputs);
            std::vector<int> correct(decisions.size());
            for (std::size_t f = 0; f < decisions.size(); ++f) {
                correct[f] = decisions[f] == hard_labels[clip][f] ? 1 : 0;
            }
            per_clip[vi] = tdp_weighted_accuracy(correct, cfg.tau, cfg.tdp_literal_terminal);
        });
        double sum = 0.0;
        for (double v : per_clip) sum += v;
        return per_clip.empty() ? 0.0 : sum / static_cast<double>(per_clip.size());
    }

    // --- phases ---------------------------------------------------------------

    template <typename EpochFn, typename TestFn>
    PhaseTrace run_phase(const std::string& name, const EpochFn& epoch_fn, const TestFn& test_fn,
                         int max_epochs) {
        PhaseTrace trace;
        trace.name = name;
        trace.accuracies.push_back(test_fn());
        for (int epoch = 1; epoch <= max_epochs; ++epoch) {
            epoch_fn(epoch);
            trace.epochs_run = epoch;
            if (epoch % cfg.epochs_per_test == 0) {
                const double acc = test_fn();
                const double gain = acc - trace.accuracies.back();
                trace.accuracies.push_back(acc);
                if (gain < cfg.theta) break;
            }
        }
        return trace;
    }

    PhaseTrace train_main_phase(Modality m, const std::vector<std::vector<int>>& gate_frame_lists,
                                int iter) {
        warn_empty_lists(gate_frame_lists, m, "main");
        Rng phase_rng(Rng::derive(cfg.seed, 1000 + 100 * static_cast<std::uint64_t>(m) +
                                                static_cast<std::uint64_t>(iter)));
        const std::string prefix = model.main_prefix(m);
        SgdMomentum opt(cfg.learning_rate, cfg.momentum);
        auto epoch_fn = [&](int) {
            run_epoch(gate_frame_lists, phase_rng, opt,
                      [&](Graph<float>& g, const SampleRef& s,
                          const std::vector<ModalityInputs>& inputs) {
                          const auto& in = inputs[static_cast<std::size_t>(s.frame)];
                          auto nodes = main_forward(g, model.params, prefix, g.input(in.modality(m)),
                                                    g.input(in.saliency), model.cfg.branch(m));
                          return g.softmax_cross_entropy(nodes.logits, data.clips[s.clip].label);
                      });
        };
        auto test_fn = [&]() { return validate_main(m, gate_frame_lists); };
        return run_phase(std::string("main.") + modality_name(m) + ".iter" + std::to_string(iter),
                         epoch_fn, test_fn, cfg.max_epochs_per_phase);
    }

    PhaseTrace train_gate_phase(Modality m, const std::vector<std::vector<int>>& hard_labels,
                                int iter) {
        Rng phase_rng(Rng::derive(cfg.seed, 2000 + 100 * static_cast<std::uint64_t>(m) +
                                                static_cast<std::uint64_t>(iter)));
        const std::string prefix = model.gate_prefix(m);
        SgdMomentum opt(cfg.learning_rate, cfg.momentum);
        std::vector<std::vector<int>> all_frames(data.clips.size());
        for (std::size_t c = 0; c < data.clips.size(); ++c) {
            all_frames[c].resize(static_cast<std::size_t>(data.frames(c)));
            std::iota(all_frames[c].begin(), all_frames[c].end(), 0);
        }
        auto epoch_fn = [&](int) {
            run_epoch(all_frames, phase_rng, opt,
                      [&](Graph<float>& g, const SampleRef& s,
                          const std::vector<ModalityInputs>& inputs) {
                          ShiftHistory hist = history_before_frame(model, m, inputs, s.frame,
                                                                   model.cfg.tlsm.n_frames);
                          auto logit = gate_forward(
                              g, model.params, prefix,
                              g.input(inputs[static_cast<std::size_t>(s.frame)].modality(m)),
                              model.cfg.branch(m), hist);
                          const float target = static_cast<float>(
                              hard_labels[s.clip][static_cast<std::size_t>(s.frame)]);
                          return g.bce_with_logit(logit, target);
                      });
        };
        auto test_fn = [&]() { return validate_gate(m, hard_labels); };
        return run_phase(std::string("gate.") + modality_name(m) + ".iter" + std::to_string(iter),
                         epoch_fn, test_fn, cfg.max_epochs_per_phase);
    }

    void warn_empty_lists(const std::vector<std::vector<int>>& lists, Modality m, const char* phase) {
        for (std::size_t clip : split.train) {
            if (lists[clip].empty()) {
                std::cerr << "warning: clip " << data.clips[clip].path << " has no frames for "
                          << phase << "." << modality_name(m) << " training; skipped\n";
            }
        }
    }
};

// Cached branch outputs for the fusion/exit phases (branches frozen).
struct FrameCache {
    std::array<BranchOutput, kNumModalities> branch;
    bool any_active = false;
};

std::vector<std::vector<FrameCache>> cache_branch_outputs(Model& model, const Dataset& data,
                                                          int jobs) {
    std::vector<std::vector<FrameCache>> cache(data.clips.size());
    parallel_for(data.clips.size(), jobs, [&](std::size_t c) {
        const auto clip_in = prepare_clip_inputs(data.clips[c], data.manifest.gop);
        std::array<ShiftHistory, kNumModalities> hist = {
            ShiftHistory(model.cfg.tlsm.n_frames), ShiftHistory(model.cfg.tlsm.n_frames),
            ShiftHistory(model.cfg.tlsm.n_frames)};
        cache[c].resize(clip_in.size());
        for (std::size_t f = 0; f < clip_in.size(); ++f) {
            for (int m = 0; m < kNumModalities; ++m) {
                BranchOutput out = branch_step(model, static_cast<Modality>(m), clip_in[f],
                                               hist[static_cast<std::size_t>(m)]);
                cache[c][f].any_active |= out.activated;
                cache[c][f].branch[static_cast<std::size_t>(m)] = std::move(out);
            }
        }
    });
    return cache;
}

std::vector<ModalSummary> summaries_from_cache(Model& model, const FrameCache& frame) {
    std::vector<ModalSummary> summaries;
    for (int m = 0; m < kNumModalities; ++m) {
        const BranchOutput& b = frame.branch[static_cast<std::size_t>(m)];
        if (b.activated) {
            summaries.push_back(modal_weight(model, b.modality, b.features, b.iie, b.probs->argmax()));
        } else {
            ModalSummary s;
            s.modality = b.modality;
            s.active = false;
            s.mean_weight = 0.0;
            s.weighted = Tensor({model.cfg.feature_channels(), model.cfg.feature_height(),
                                 model.cfg.feature_width()});
            summaries.push_back(std::move(s));
        }
    }
    return summaries;
}

// Fused replay with the current fusion params; per-stream-frame predictions,
// -1 before the first fused frame.
std::vector<int> fused_replay_predictions(Model& model, const std::vector<FrameCache>& frames) {
    FusedState state;
    std::vector<int> preds(frames.size(), -1);
    int last = -1;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        if (frames[f].any_active) {
            std::vector<ModalSummary> summaries = summaries_from_cache(model, frames[f]);
            FuseResult fused = fuse_modalities(model, summaries);
            temporal_fuse(state, fused.fused, mc_weight(summaries));
            last = classify_fused(state, model.params).argmax();
        }
        preds[f] = last;
    }
    return preds;
}

double fused_online_accuracy(Model& model, const Dataset& data,
                             const std::vector<std::vector<FrameCache>>& cache,
                             const std::vector<std::size_t>& clips, const TrainConfig& cfg) {
    std::vector<double> per_clip(clips.size(), 0.0);
    parallel_for(clips.size(), cfg.jobs, [&](std::size_t i) {
        const std::size_t c = clips[i];
        std::vector<int> preds = fused_replay_predictions(model, cache[c]);
        std::vector<int> correct(preds.size());
        for (std::size_t f = 0; f < preds.size(); ++f) {
            correct[f] = preds[f] == data.clips[c].label ? 1 : 0;
        }
        per_clip[i] = tdp_weighted_accuracy(correct, cfg.tau, cfg.tdp_literal_terminal);
    });
    double sum = 0.0;
    for (double v : per_clip) sum += v;
    return clips.empty() ? 0.0 : sum / static_cast<double>(clips.size());
}

// One clip's fusion-head loss: cross-entropy of the running fused state's
// classification at every fused frame, with the accumulated history constant
// and the gradient flowing through the current frame's fusion path.
Graph<float>::NodeId fusion_clip_loss(Graph<float>& g, Model& model,
                                      const std::vector<FrameCache>& frames, int label) {
    FusedState state;  // value-path replay alongside the tape
    std::vector<Graph<float>::NodeId> losses;
    for (const auto& frame : frames) {
        if (!frame.any_active) continue;
        std::vector<ModalSummary> value_summaries;
        std::vector<Graph<float>::NodeId> feats;
        for (int m = 0; m < kNumModalities; ++m) {
            const BranchOutput& b = frame.branch[static_cast<std::size_t>(m)];
            if (b.activated) {
                auto nodes = modal_weight_nodes(
                    g, model.params, std::string("fusion.modal.") + modality_name(b.modality),
                    g.input(b.features), b.iie, model.cfg.iie_fixed_debug);
                feats.push_back(nodes.weighted);
                ModalSummary s;
                s.modality = b.modality;
                s.active = true;
                s.prediction = b.probs->argmax();
                const auto& wmap = g.value(nodes.weight_map);
                double sum = 0.0;
                for (float v : wmap.data) sum += v;
                s.mean_weight = sum / static_cast<double>(wmap.size());
                value_summaries.push_back(std::move(s));
            } else {
                feats.push_back(g.input(Tensor({model.cfg.feature_channels(),
                                                model.cfg.feature_height(),
                                                model.cfg.feature_width()})));
                ModalSummary s;
                s.modality = b.modality;
                s.active = false;
                value_summaries.push_back(std::move(s));
            }
        }
        auto fused = fuse_nodes(g, model.params, feats);
        const double w_mc = mc_weight(value_summaries);

        Tensor hist = state.t == 0 ? Tensor(g.value(fused.fused).shape)
                                   : state.running_sum.cast<float>();
        const float inv_t = 1.0f / static_cast<float>(state.t + 1);
        auto current =
            g.scale(g.add(g.input(hist), g.scale(fused.fused, static_cast<float>(w_mc))), inv_t);
        auto pooled = g.global_avg(current);
        auto logits = g.affine(pooled, g.param(model.params.at("fusion.classifier.weight")),
                               g.param(model.params.at("fusion.classifier.bias")));
        losses.push_back(g.softmax_cross_entropy(logits, label));

        temporal_fuse(state, g.value(fused.fused), w_mc);
    }
    if (losses.empty()) return -1;
    auto total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
    return g.scale(total, 1.0f / static_cast<float>(losses.size()));
}

struct ExitSample {
    Tensor prev;
    Tensor curr;
    float label = 0.f;
};

// The stopping head trains on (previous, current) fused-state pairs. Later
// frames carry near-identical negatives, so keep all early fused frames and
// thin the tail.
std::vector<ExitSample> collect_exit_samples(Model& model, const Dataset& data,
                                             const std::vector<std::vector<FrameCache>>& cache,
                                             const std::vector<std::size_t>& clips, int cap,
                                             int jobs) {
    std::vector<std::vector<ExitSample>> per_clip(clips.size());
    parallel_for(clips.size(), jobs, [&](std::size_t i) {
        const std::size_t c = clips[i];
        FusedState state;
        std::vector<int> fused_correct;
        std::vector<std::pair<Tensor, Tensor>> states;
        for (const auto& frame : cache[c]) {
            if (!frame.any_active) continue;
            std::vector<ModalSummary> summaries = summaries_from_cache(model, frame);
            FuseResult fused = fuse_modalities(model, summaries);
            temporal_fuse(state, fused.fused, mc_weight(summaries));
            states.emplace_back(state.previous_f(), state.current_f());
            fused_correct.push_back(
                classify_fused(state, model.params).argmax() == data.clips[c].label ? 1 : 0);
        }
        const std::vector<int> labels = make_gate_exit_labels(fused_correct, cap);
        for (std::size_t t = 0; t < labels.size(); ++t) {
            const int fused_index = static_cast<int>(t) + 1;
            if (fused_index > cap + 10 && fused_index % 5 != 0) continue;
            ExitSample s;
            s.prev = states[t].first;
            s.curr = states[t].second;
            s.label = static_cast<float>(labels[t]);
            per_clip[i].push_back(std::move(s));
        }
    });
    std::vector<ExitSample> out;
    for (auto& v : per_clip) {
        for (auto& s : v) out.push_back(std::move(s));
    }
    return out;
}

void copy_params_with_prefix(const ParamSet<float>& from, ParamSet<float>& to,
                             const std::string& prefix) {
    for (const auto& p : from.params()) {
        if (p.name.rfind(prefix, 0) == 0) to.at(p.name).value = p.value;
    }
}

}  // namespace

std::string TrainReport::to_json() const {
    nlohmann::json j;
    j["mean_branch_accuracy"] = mean_branch_accuracy;
    j["fused_online_accuracy"] = fused_online_accuracy;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["eq4_log"] = eq4_log;
    auto phase_json = [](const PhaseTrace& p) {
        return nlohmann::json{{"name", p.name}, {"accuracies", p.accuracies}, {"epochs", p.epochs_run}};
    };
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& m : modalities) {
        nlohmann::json mj;
        mj["modality"] = m.modality;
        mj["outer_accuracies"] = m.outer_accuracies;
        mj["stop_iteration"] = m.stop_iteration;
        mj["eq4_fired"] = m.eq4_fired;
        mj["final_accuracy"] = m.final_accuracy;
        nlohmann::json phases = nlohmann::json::array();
        for (const auto& p : m.phases) phases.push_back(phase_json(p));
        mj["phases"] = phases;
        mods.push_back(mj);
    }
    j["modalities"] = mods;
    j["fusion_phase"] = phase_json(fusion_phase);
    j["exit_phase"] = phase_json(exit_phase);
    return j.dump(2);
}

TrainReport iterative_train(Model& model, const Dataset& data, const TrainConfig& cfg,
                            const std::string& checkpoint_dir) {
    cfg.validate();
    if (data.clips.empty()) throw ConfigError("empty dataset");
    const auto t_start = Clock::now();
    TrainReport report;
    Trainer trainer{model, data, cfg, split_dataset(data, cfg.validation_fraction, cfg.seed)};

    for (int mi = 0; mi < kNumModalities; ++mi) {
        const Modality m = static_cast<Modality>(mi);
        ModalityTrainReport mrep;
        mrep.modality = modality_name(m);

        // Iteration 0 samples every frame (segment-style pretraining field).
        std::vector<std::vector<int>> approved(data.clips.size());
        for (std::size_t c = 0; c < data.clips.size(); ++c) {
            approved[c].resize(static_cast<std::size_t>(data.frames(c)));
            std::iota(approved[c].begin(), approved[c].end(), 0);
        }

        ParamSet<float> best_params;
        double best_accuracy = -1.0;
        int best_iteration = -1;

        std::vector<std::vector<int>> hard_labels(data.clips.size());
        for (int iter = 0; iter <= cfg.max_outer_iters; ++iter) {
            PhaseTrace main_trace = trainer.train_main_phase(m, approved, iter);
            const double a_i = main_trace.accuracies.back();
            mrep.phases.push_back(main_trace);
            mrep.outer_accuracies.push_back(a_i);

            if (a_i > best_accuracy) {
                best_params = model.params;
                best_accuracy = a_i;
                best_iteration = iter;
            }
            if (!checkpoint_dir.empty()) {
                model.save(checkpoint_dir + "/iter_" + std::string(modality_name(m)) + "_" +
                           std::to_string(iter) + ".oarckpt");
            }

            // Hard labels regenerate exactly when the Step-1 gain drops below
            // theta, i.e. where the phase just stopped.
            parallel_for(data.clips.size(), cfg.jobs, [&](std::size_t c) {
                hard_labels[c] = make_hard_labels(
                    main_predictions(model, m, trainer.inputs_of(c)), data.clips[c].label);
            });

            const auto& A = mrep.outer_accuracies;
            if (iter >= 2) {
                const double d1 =
                    A[static_cast<std::size_t>(iter - 1)] - A[static_cast<std::size_t>(iter - 2)];
                const double d2 =
                    A[static_cast<std::size_t>(iter)] - A[static_cast<std::size_t>(iter - 1)];
                const bool fired = d1 < cfg.theta && d2 < cfg.theta;
                report.eq4_log.push_back(std::string(modality_name(m)) + ": iter " +
                                         std::to_string(iter) + " deltas (" + std::to_string(d1) +
                                         ", " + std::to_string(d2) +
                                         (fired ? ") < theta -> stop" : ") -> continue"));
                if (fired) {
                    // Keeps f_Main from this iteration and the gate from the
                    // previous one (no Step 2 this round).
                    mrep.eq4_fired = true;
                    mrep.stop_iteration = iter;
                    break;
                }
            }
            if (iter == cfg.max_outer_iters) {
                std::cerr << "warning: " << modality_name(m) << " hit the outer-iteration cap; "
                          << "restoring best-validation iteration " << best_iteration << "\n";
                copy_params_with_prefix(best_params, model.params, model.gate_prefix(m));
                copy_params_with_prefix(best_params, model.params, model.main_prefix(m));
                mrep.stop_iteration = best_iteration;
                break;
            }

            mrep.phases.push_back(trainer.train_gate_phase(m, hard_labels, iter));
            parallel_for(data.clips.size(), cfg.jobs, [&](std::size_t c) {
                std::vector<int> decisions = gate_decisions(model, m, trainer.inputs_of(c));
                approved[c].clear();
                for (std::size_t f = 0; f < decisions.size(); ++f) {
                    if (decisions[f] == 1) approved[c].push_back(static_cast<int>(f));
                }
            });
        }
        mrep.final_accuracy = mrep.outer_accuracies.empty() ? 0.0 : mrep.outer_accuracies.back();
        report.modalities.push_back(std::move(mrep));
    }

    // Branches are frozen from here on; cache their outputs once.
    auto cache = cache_branch_outputs(model, data, cfg.jobs);

    // Fusion heads: modal weight convs, 1x1 mix, classifier.
    {
        Rng phase_rng(Rng::derive(cfg.seed, 3000));
        SgdMomentum opt(cfg.learning_rate, cfg.momentum);
        auto epoch_fn = [&](int) {
            std::vector<std::size_t> order = trainer.split.train;
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[phase_rng.next_below(i)]);
            }
            const std::size_t batch = 4;
            for (std::size_t start = 0; start < order.size(); start += batch) {
                const std::size_t end = std::min(order.size(), start + batch);
                const std::size_t n = end - start;
                std::vector<GradCapture> captures(n);
                parallel_for(n, cfg.jobs, [&](std::size_t i) {
                    Graph<float> g;
                    auto loss = fusion_clip_loss(g, model, cache[order[start + i]],
                                                 data.clips[order[start + i]].label);
                    if (loss < 0) return;
                    g.backward(loss, 1.0f / static_cast<float>(n), false);
                    g.for_each_param_grad([&](Param<float>* p, const Tensor& grad) {
                        captures[i].grads.emplace_back(p, grad);
                    });
                });
                reduce_grads(captures, model.params);
                opt.step(model.params);
            }
        };
        auto test_fn = [&]() {
            return fused_online_accuracy(model, data, cache, trainer.split.validation, cfg);
        };
        report.fusion_phase = trainer.run_phase("fusion", epoch_fn, test_fn, cfg.max_head_epochs);
    }

    // Stopping head on y^g labels.
    {
        std::vector<ExitSample> train_samples = collect_exit_samples(
            model, data, cache, trainer.split.train, cfg.gate_label_cap, cfg.jobs);
        std::vector<ExitSample> val_samples = collect_exit_samples(
            model, data, cache, trainer.split.validation, cfg.gate_label_cap, cfg.jobs);
        Rng phase_rng(Rng::derive(cfg.seed, 4000));
        SgdMomentum opt(cfg.learning_rate, cfg.momentum);

        auto epoch_fn = [&](int) {
            std::vector<std::size_t> order(train_samples.size());
            std::iota(order.begin(), order.end(), 0);
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[phase_rng.next_below(i)]);
            }
            for (std::size_t start = 0; start < order.size();
                 start += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t end =
                    std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
                const std::size_t n = end - start;
                std::vector<GradCapture> captures(n);
                parallel_for(n, cfg.jobs, [&](std::size_t i) {
                    const ExitSample& s = train_samples[order[start + i]];
                    Graph<float> g;
                    auto logit = gate_exit_logit(g, model.params, g.flatten(g.input(s.prev)),
                                                 g.flatten(g.input(s.curr)));
                    auto loss = g.bce_with_logit(logit, s.label);
                    g.backward(loss, 1.0f / static_cast<float>(n), false);
                    g.for_each_param_grad([&](Param<float>* p, const Tensor& grad) {
                        captures[i].grads.emplace_back(p, grad);
                    });
                });
                reduce_grads(captures, model.params);
                opt.step(model.params);
            }
        };
        auto test_fn = [&]() {
            if (val_samples.empty()) return 0.0;
            int correct = 0;
            for (const auto& s : val_samples) {
                Graph<float> g;
                auto logit = gate_exit_logit(g, model.params, g.flatten(g.input(s.prev)),
                                             g.flatten(g.input(s.curr)));
                const double conf = stable_sigmoid(static_cast<double>(g.value(logit).data[0]));
                if ((conf >= 0.5 ? 1 : 0) == static_cast<int>(s.label)) ++correct;
            }
            return static_cast<double>(correct) / static_cast<double>(val_samples.size());
        };
        report.exit_phase = trainer.run_phase("gate_exit", epoch_fn, test_fn, cfg.max_head_epochs);
    }

    double sum = 0.0;
    for (const auto& m : report.modalities) sum += m.final_accuracy;
    report.mean_branch_accuracy = report.modalities.empty() ? 0.0 : sum / kNumModalities;
    report.fused_online_accuracy =
        fused_online_accuracy(model, data, cache, trainer.split.validation, cfg);
    report.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - t_start).count();
    return report;
}

}  // namespace oar
