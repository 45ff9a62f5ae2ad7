#include "oar/model.hpp"

#include <cmath>

namespace oar {

namespace {

// Input normalization: roughly zero-mean, unit-scale tensors so the conv
// stacks see healthy activation magnitudes at the fixed learning rate.
constexpr float kImageCenter = 127.5f;
constexpr float kImageScale = 64.f;
constexpr float kMvScale = 8.f;
constexpr float kResScale = 128.f;

// meta.config layout (version 1).
enum MetaField {
    kMetaVersion = 0,
    kMetaNumClasses,
    kMetaWidth,
    kMetaHeight,
    kMetaGop,
    kMetaTlsmRatio,
    kMetaTlsmFrames,
    kMetaMsemPool,
    kMetaMsemKernel,
    kMetaGatingHidden,
    kMetaGateW0,
    kMetaGateW1,
    kMetaGateW2,
    kMetaMainW0,
    kMetaMainW1,
    kMetaMainW2,
    kMetaMainW3,
    kMetaFieldCount
};

Tensor encode_config(const ModelConfig& c) {
    Tensor t({kMetaFieldCount});
    t.data[kMetaVersion] = 1.f;
    t.data[kMetaNumClasses] = static_cast<float>(c.num_classes);
    t.data[kMetaWidth] = static_cast<float>(c.width);
    t.data[kMetaHeight] = static_cast<float>(c.height);
    t.data[kMetaGop] = static_cast<float>(c.gop);
    t.data[kMetaTlsmRatio] = static_cast<float>(c.tlsm.ratio);
    t.data[kMetaTlsmFrames] = static_cast<float>(c.tlsm.n_frames);
    t.data[kMetaMsemPool] = static_cast<float>(c.msem.pool_window);
    t.data[kMetaMsemKernel] = static_cast<float>(c.msem.conv_kernel);
    t.data[kMetaGatingHidden] = static_cast<float>(c.gating_hidden);
    for (int i = 0; i < 3; ++i) t.data[kMetaGateW0 + i] = static_cast<float>(c.gate_widths[static_cast<std::size_t>(i)]);
    for (int i = 0; i < 4; ++i) t.data[kMetaMainW0 + i] = static_cast<float>(c.main_widths[static_cast<std::size_t>(i)]);
    return t;
}

ModelConfig decode_config(const Tensor& t) {
    if (t.size() < kMetaFieldCount || t.data[kMetaVersion] != 1.f) {
        throw FormatError("unsupported model meta.config record");
    }
    ModelConfig c;
    c.num_classes = static_cast<int>(t.data[kMetaNumClasses]);
    c.width = static_cast<int>(t.data[kMetaWidth]);
    c.height = static_cast<int>(t.data[kMetaHeight]);
    c.gop = static_cast<int>(t.data[kMetaGop]);
    c.tlsm.ratio = static_cast<double>(t.data[kMetaTlsmRatio]);
    c.tlsm.n_frames = static_cast<int>(t.data[kMetaTlsmFrames]);
    c.msem.pool_window = static_cast<int>(t.data[kMetaMsemPool]);
    c.msem.conv_kernel = static_cast<int>(t.data[kMetaMsemKernel]);
    c.gating_hidden = static_cast<int>(t.data[kMetaGatingHidden]);
    for (int i = 0; i < 3; ++i) c.gate_widths[static_cast<std::size_t>(i)] = static_cast<int>(t.data[kMetaGateW0 + i]);
    for (int i = 0; i < 4; ++i) c.main_widths[static_cast<std::size_t>(i)] = static_cast<int>(t.data[kMetaMainW0 + i]);
    return c;
}

}  // namespace

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.params.add("meta.config", encode_config(cfg));
    for (int i = 0; i < kNumModalities; ++i) {
        const Modality mod = static_cast<Modality>(i);
        const BranchConfig bc = cfg.branch(mod);
        Rng gate_rng(Rng::derive(seed, 100 + static_cast<std::uint64_t>(i)));
        add_gate_params(m.params, m.gate_prefix(mod), bc, gate_rng);
        Rng main_rng(Rng::derive(seed, 200 + static_cast<std::uint64_t>(i)));
        add_main_params(m.params, m.main_prefix(mod), bc, main_rng);
    }
    Rng fusion_rng(Rng::derive(seed, 300));
    add_fusion_params(m.params, cfg.feature_channels(), cfg.num_classes, fusion_rng);
    Rng gating_rng(Rng::derive(seed, 400));
    add_gate_exit_params(m.params, cfg.flat_dim(), cfg.gating_hidden, gating_rng);
    return m;
}

void Model::save(const std::string& path) const { save_params_file(path, params); }

Model Model::load(const std::string& path) {
    Model m;
    m.params = load_params_file(path);
    if (!m.params.contains("meta.config")) throw FormatError("checkpoint lacks meta.config record");
    m.cfg = decode_config(m.params.at("meta.config").value);
    m.cfg.validate();
    return m;
}

ModalityInputs make_modality_inputs(const FramePacket& packet, const GopState& gop) {
    const int w = packet.width(), h = packet.height();
    ModalityInputs out;
    out.image = packet.image;
    for (auto& v : out.image.data) v = (v - kImageCenter) / kImageScale;

    out.mv = Tensor({2, h, w});
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    for (std::size_t i = 0; i < plane; ++i) {
        out.mv.data[i] = gop.acc_dx[i] / kMvScale;
        out.mv.data[plane + i] = gop.acc_dy[i] / kMvScale;
    }

    out.res = Tensor({1, h, w});
    for (std::size_t i = 0; i < plane; ++i) out.res.data[i] = gop.acc_residual[i] / kResScale;

    MbSaliencyMap sal = mb_saliency(packet.partition, kMinBlockSide, kMaxBlockSide);
    Tensor sal_plane({1, h, w}, std::vector<float>(sal.values.begin(), sal.values.end()));
    out.saliency = resize_bilinear_plane(sal_plane, h / 2, w / 2);
    return out;
}

GateResult gate_infer(Model& model, Modality m, const Tensor& input, ShiftHistory& history) {
    Graph<float> g;
    const BranchConfig bc = model.cfg.branch(m);
    Tensor insertion;
    auto logit = gate_forward(g, model.params, model.gate_prefix(m), g.input(input), bc, history,
                              &insertion);
    GateResult r;
    r.score = static_cast<double>(stable_sigmoid(g.value(logit).data[0]));
    r.decision = r.score >= 0.5 ? 1 : 0;  // boundary inclusive
    r.insertion_features = insertion;
    history.push(std::move(insertion));
    return r;
}

MainResult main_infer(Model& model, Modality m, const Tensor& input, const Tensor& saliency) {
    Graph<float> g;
    const BranchConfig bc = model.cfg.branch(m);
    auto nodes = main_forward(g, model.params, model.main_prefix(m), g.input(input),
                              g.input(saliency), bc);
    MainResult r;
    r.features = g.value(nodes.features);
    const auto probs = g.value(g.softmax(nodes.logits));
    r.probs = ProbDist(std::vector<double>(probs.data.begin(), probs.data.end()));
    return r;
}

BranchOutput branch_step(Model& model, Modality m, const ModalityInputs& inputs,
                         ShiftHistory& history, int* main_invocations) {
    const Tensor& input = inputs.modality(m);
    GateResult gate = gate_infer(model, m, input, history);
    BranchOutput out;
    out.modality = m;
    out.gate_score = gate.score;
    if (gate.decision == 0) {
        out.activated = false;
        out.features = Tensor({model.cfg.feature_channels(), model.cfg.feature_height(),
                               model.cfg.feature_width()});
        return out;
    }
    if (main_invocations) ++*main_invocations;
    MainResult main = main_infer(model, m, input, inputs.saliency);
    out.activated = true;
    out.features = std::move(main.features);
    out.probs = std::move(main.probs);
    out.iie = iie(*out.probs);
    return out;
}

ModalSummary modal_weight(Model& model, Modality m, const Tensor& features, double iie_value,
                          int prediction) {
    Graph<float> g;
    auto nodes = modal_weight_nodes(g, model.params,
                                    std::string("fusion.modal.") + modality_name(m),
                                    g.input(features), iie_value, model.cfg.iie_fixed_debug);
    ModalSummary s;
    s.modality = m;
    s.active = true;
    s.prediction = prediction;
    s.weighted = g.value(nodes.weighted);
    const auto& wmap = g.value(nodes.weight_map);
    double sum = 0.0;
    for (float v : wmap.data) sum += v;
    s.mean_weight = sum / static_cast<double>(wmap.size());
    return s;
}

FuseResult fuse_modalities(Model& model, const std::vector<ModalSummary>& summaries) {
    bool any_active = false;
    for (const auto& s : summaries) any_active |= s.active;
    if (!any_active) throw ConfigError("fuse_modalities requires at least one active modality");
    Graph<float> g;
    std::vector<int> feats;
    for (int i = 0; i < kNumModalities; ++i) {
        const Modality m = static_cast<Modality>(i);
        const ModalSummary* found = nullptr;
        for (const auto& s : summaries) {
            if (s.modality == m) found = &s;
        }
        if (found && found->active) {
            feats.push_back(g.input(found->weighted));
        } else {
            feats.push_back(g.input(Tensor({model.cfg.feature_channels(), model.cfg.feature_height(),
                                            model.cfg.feature_width()})));
        }
    }
    auto nodes = fuse_nodes(g, model.params, feats);
    FuseResult r;
    r.fused = g.value(nodes.fused);
    const auto probs = g.value(g.softmax(nodes.logits));
    r.probs = ProbDist(std::vector<double>(probs.data.begin(), probs.data.end()));
    return r;
}

}  // namespace oar
