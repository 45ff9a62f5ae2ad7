// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exits nonzero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <vector>

#include "oar/checkpoint.hpp"
#include "oar/grad_check.hpp"
#include "oar/runtime.hpp"
#include "oar/training.hpp"

using namespace oar;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;
std::vector<std::string> g_notes;

void note(const std::string& s) { g_notes.push_back(s); }

void report(int criterion, const std::string& what, bool ok, double seconds) {
    std::printf("[%s] criterion %d: %s (%.1f s)\n", ok ? "PASS" : "FAIL", criterion, what.c_str(),
                seconds);
    for (const auto& n : g_notes) std::printf("    - %s\n", n.c_str());
    g_notes.clear();
    if (!ok) ++g_failures;
    std::fflush(stdout);
}

template <typename Fn>
void criterion(int number, const std::string& what, const Fn& fn) {
    const auto start = Clock::now();
    bool ok = false;
    try {
        ok = fn();
    } catch (const std::exception& e) {
        note(std::string("exception: ") + e.what());
        ok = false;
    }
    report(number, what, ok, std::chrono::duration<double>(Clock::now() - start).count());
}

bool expect(bool cond, const std::string& what) {
    if (!cond) note("FAILED: " + what);
    return cond;
}

std::string work_dir() {
    const std::string d = (fs::temp_directory_path() / "oar_acceptance").string();
    return d;
}

// ---------------------------------------------------------------------------
// Criterion 1: equation unit suite.
bool run_equations() {
    bool ok = true;

    for (int v = 3; v <= 128; ++v) {
        double sum = 0.0;
        for (int t = 1; t <= v; ++t) sum += tdp_weight(t, v, 2);
        ok &= expect(std::abs(sum - 1.0) < 1e-12, "TDP sum v_len=" + std::to_string(v));
    }

    ok &= expect(std::abs(iie(ProbDist({0.25, 0.25, 0.25, 0.25})) - 0.0) < 1e-9, "IIE uniform -> 0");
    ok &= expect(std::abs(iie(ProbDist({1.0, 0.0, 0.0, 0.0})) - 1.0) < 1e-9, "IIE one-hot -> 1");
    ok &= expect(std::abs(iie(ProbDist({0.75, 0.25})) - 0.188722) < 1e-6, "IIE (0.75,0.25)");

    auto saliency_for = [](int side) {
        PartitionMap q;
        q.width = 64;
        q.height = 64;
        for (int y = 0; y < 64; y += side) {
            for (int x = 0; x < 64; x += side) q.blocks.push_back({x, y, side});
        }
        return mb_saliency(q, 4, 64).at(0, 0);
    };
    ok &= expect(saliency_for(4) == 1.0f, "saliency side 4 -> 1.0");
    ok &= expect(saliency_for(16) == 0.5f, "saliency side 16 -> 0.5");
    ok &= expect(saliency_for(64) == 0.0f, "saliency side 64 -> 0.0");

    Rng rng(2024);
    for (int n : {1, 2, 4, 8}) {
        for (int C : {16, 32, 64}) {
            BranchConfig cfg;
            cfg.tlsm.n_frames = n;
            const int c = cfg.shift_channels(C);
            const int H = 2, W = 2;
            const std::size_t hw = 4;
            ShiftHistory hist(n);
            std::vector<Tensor> frames;
            for (int j = 0; j < n; ++j) {
                Tensor t({C, H, W});
                for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1, 1));
                frames.push_back(t);
                hist.push(t);
            }
            Tensor x({C, H, W});
            for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
            Tensor out = tlsm_apply(hist, x, c, n);
            const int cw = c / n;
            for (int j = 1; j <= n; ++j) {
                const Tensor& src = frames[static_cast<std::size_t>(n - j)];
                for (int ch = 0; ch < cw; ++ch) {
                    for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t oi = (static_cast<std::size_t>(j - 1) * cw + ch) * hw + i;
                        ok &= out.data[oi] == src.data[static_cast<std::size_t>(ch) * hw + i];
                    }
                }
            }
            for (std::size_t i = static_cast<std::size_t>(c) * hw; i < out.size(); ++i) {
                ok &= out.data[i] == x.data[i];
            }
        }
    }
    ok &= expect(ok, "TLSM slice exactness grid");
    return ok;
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient checks for every trainable block, 10 random points.
bool run_grad_checks() {
    bool ok = true;
    BranchConfig bc;
    bc.input_channels = 1;
    bc.gate_widths = {4, 6, 8};
    bc.main_widths = {4, 6, 8, 8};
    bc.num_classes = 3;
    bc.msem.conv_kernel = 3;

    auto check_block = [&](const char* name, const std::function<double(ParamSet<double>&, Rng&)>& run) {
        double worst = 0.0;
        for (int point = 0; point < 10; ++point) {
            ParamSet<double> ps;
            Rng rng(5000 + 67 * static_cast<std::uint64_t>(point));
            worst = std::max(worst, run(ps, rng));
        }
        note(std::string(name) + ": max rel err " + std::to_string(worst));
        return expect(worst < 1e-3, std::string(name) + " grad check < 1e-3");
    };

    ok &= check_block("gate backbone", [&](ParamSet<double>& ps, Rng& rng) {
        add_gate_params(ps, "g", bc, rng);
        Tensor64 x({1, 16, 16});
        for (auto& v : x.data) v = rng.uniform(-1, 1);
        ShiftHistory hist(bc.tlsm.n_frames);
        Tensor h({bc.gate_widths[0], 8, 8});
        for (auto& v : h.data) v = static_cast<float>(rng.uniform(-1, 1));
        hist.push(h);
        auto fwd = [&]() {
            Graph<double> g;
            auto logit = gate_forward(g, ps, "g", g.input(x), bc, hist);
            auto loss = g.bce_with_logit(logit, 1.0);
            g.backward(loss);
            return g.value(loss).data[0];
        };
        return grad_check(ps, fwd, 1e-5);
    });

    ok &= check_block("main backbone (with MSEM inside)", [&](ParamSet<double>& ps, Rng& rng) {
        add_main_params(ps, "m", bc, rng);
        Tensor64 x({1, 16, 16});
        for (auto& v : x.data) v = rng.uniform(-1, 1);
        Tensor64 sal({1, 8, 8});
        for (auto& v : sal.data) v = rng.uniform(0, 1);
        auto fwd = [&]() {
            Graph<double> g;
            auto nodes = main_forward(g, ps, "m", g.input(x), g.input(sal), bc);
            auto loss = g.softmax_cross_entropy(nodes.logits, 1);
            g.backward(loss);
            return g.value(loss).data[0];
        };
        return grad_check(ps, fwd, 1e-5);
    });

    ok &= check_block("msem conv", [&](ParamSet<double>& ps, Rng& rng) {
        add_conv(ps, "m.msem", 1, 2, 3, rng);
        Tensor64 feats({4, 8, 8});
        for (auto& v : feats.data) v = rng.uniform(-1, 1);
        Tensor64 sal({1, 8, 8});
        for (auto& v : sal.data) v = rng.uniform(0, 1);
        MsemConfig mcfg;
        mcfg.conv_kernel = 3;
        auto fwd = [&]() {
            Graph<double> g;
            auto out = msem_node(g, ps, "m", g.input(feats), g.input(sal), mcfg);
            auto pooled = g.global_avg(out);
            Tensor64 w({1, 4});
            w.fill(1.0);
            auto loss = g.affine(pooled, g.input(w), g.input(Tensor64({1})));
            g.backward(loss);
            return g.value(loss).data[0];
        };
        return grad_check(ps, fwd, 1e-5);
    });

    ok &= check_block("modal-weight conv", [&](ParamSet<double>& ps, Rng& rng) {
        add_conv(ps, "w", 4, 4, 1, rng);
        Tensor64 x({4, 3, 3});
        for (auto& v : x.data) v = rng.uniform(-1, 1);
        auto fwd = [&]() {
            Graph<double> g;
            auto nodes = modal_weight_nodes(g, ps, "w", g.input(x), 0.7, false);
            auto pooled = g.global_avg(nodes.weighted);
            Tensor64 w({1, 4});
            w.fill(1.0);
            auto loss = g.affine(pooled, g.input(w), g.input(Tensor64({1})));
            g.backward(loss);
            return g.value(loss).data[0];
        };
        return grad_check(ps, fwd, 1e-5);
    });

    ok &= check_block("1x1 fusion conv + classifier", [&](ParamSet<double>& ps, Rng& rng) {
        add_conv(ps, "fusion.mix", 4, 12, 1, rng);
        add_affine(ps, "fusion.classifier", 3, 4, rng);
        Tensor64 a({4, 3, 3}), b({4, 3, 3}), c({4, 3, 3});
        for (auto* t : {&a, &b, &c}) {
            for (auto& v : t->data) v = rng.uniform(-1, 1);
        }
        auto fwd = [&]() {
            Graph<double> g;
            auto fused = fuse_nodes(g, ps, {g.input(a), g.input(b), g.input(c)});
            auto loss = g.softmax_cross_entropy(fused.logits, 2);
            g.backward(loss);
            return g.value(loss).data[0];
        };
        return grad_check(ps, fwd, 1e-5);
    });

    ok &= check_block("gating head", [&](ParamSet<double>& ps, Rng& rng) {
        add_affine(ps, "gate_exit.fc_prev", 4, 12, rng);
        add_affine(ps, "gate_exit.fc_curr", 4, 12, rng);
        add_affine(ps, "gate_exit.proj", 1, 8, rng);
        Tensor64 prev({12}), curr({12});
        for (auto* t : {&prev, &curr}) {
            for (auto& v : t->data) v = rng.uniform(-1, 1);
        }
        auto fwd = [&]() {
            Graph<double> g;
            auto logit = gate_exit_logit(g, ps, g.input(prev), g.input(curr));
            auto loss = g.bce_with_logit(logit, 0.0);
            g.backward(loss);
            return g.value(loss).data[0];
        };
        return grad_check(ps, fwd, 1e-5);
    });

    return ok;
}

// ---------------------------------------------------------------------------
// Criterion 3: oracle equivalences.
bool run_oracles() {
    bool ok = true;

    // Incremental temporal fusion vs brute-force batch (1e-12).
    {
        Rng rng(31);
        FusedState state;
        std::vector<Tensor> xs;
        std::vector<double> ws;
        double worst = 0.0;
        for (int t = 0; t < 60; ++t) {
            Tensor x({4, 2, 2});
            for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
            xs.push_back(x);
            ws.push_back(rng.uniform(-0.5, 1.5));
            temporal_fuse(state, xs.back(), ws.back());
            for (std::size_t i = 0; i < x.size(); ++i) {
                double acc = 0.0;
                for (std::size_t k = 0; k < xs.size(); ++k) {
                    acc += ws[k] * static_cast<double>(xs[k].data[i]);
                }
                acc /= static_cast<double>(xs.size());
                worst = std::max(worst, std::abs(state.current.data[i] - acc));
            }
        }
        note("temporal fusion incremental vs batch: max abs diff " + std::to_string(worst));
        ok &= expect(worst < 1e-12, "temporal fusion oracle < 1e-12");
    }

    // GOP accumulation vs brute-force per-pixel trace (exact).
    {
        const int w = 64, h = 64;
        Rng rng(37);
        GopState state(w, h, 12);
        std::vector<MotionField> motions;
        std::vector<std::vector<float>> residuals;
        for (int f = 0; f < 11; ++f) {
            FramePacket p;
            p.index = f;
            p.type = f == 0 ? FrameType::I : FrameType::P;
            p.image = Tensor({1, h, w});
            p.partition.width = w;
            p.partition.height = h;
            for (int y = 0; y < h; y += 16) {
                for (int x = 0; x < w; x += 16) {
                    p.partition.blocks.push_back({x, y, 16});
                    const int dx = p.type == FrameType::I ? 0 : static_cast<int>(rng.next_below(7)) - 3;
                    const int dy = p.type == FrameType::I ? 0 : static_cast<int>(rng.next_below(7)) - 3;
                    p.block_mvs.push_back({x, y, 16, dx, dy});
                }
            }
            p.residual.assign(static_cast<std::size_t>(w) * h, 0);
            if (p.type == FrameType::P) {
                for (auto& v : p.residual) {
                    v = static_cast<std::int16_t>(static_cast<int>(rng.next_below(31)) - 15);
                }
            }
            accumulate_gop(state, p);
            motions.push_back(interpolate_mv(p.block_mvs, w, h));
            residuals.emplace_back(p.residual.begin(), p.residual.end());
        }
        std::function<void(int, int, int, float*, float*, float*)> trace =
            [&](int f, int x, int y, float* adx, float* ady, float* ares) {
                if (f == 0) {
                    *adx = *ady = *ares = 0.f;
                    return;
                }
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                const float mdx = motions[static_cast<std::size_t>(f)].dx[i];
                const float mdy = motions[static_cast<std::size_t>(f)].dy[i];
                const int sx = std::clamp(x - static_cast<int>(std::lround(mdx)), 0, w - 1);
                const int sy = std::clamp(y - static_cast<int>(std::lround(mdy)), 0, h - 1);
                float pdx, pdy, pres;
                trace(f - 1, sx, sy, &pdx, &pdy, &pres);
                *adx = mdx + pdx;
                *ady = mdy + pdy;
                *ares = residuals[static_cast<std::size_t>(f)][i] + pres;
            };
        bool exact = true;
        for (int y = 0; y < h; y += 3) {
            for (int x = 0; x < w; x += 3) {
                float adx, ady, ares;
                trace(10, x, y, &adx, &ady, &ares);
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                exact &= state.acc_dx[i] == adx && state.acc_dy[i] == ady &&
                         state.acc_residual[i] == ares;
            }
        }
        ok &= expect(exact, "GOP accumulation equals brute-force per-pixel trace exactly");
    }

    // Simulated cost vs replay sum (1e-9) on a real stream run.
    {
        const std::string dir = work_dir() + "/oracle_ds";
        fs::remove_all(dir);
        SynthSpec spec;
        spec.num_classes = 4;
        spec.clips_per_class = 1;
        spec.frames_per_clip = 16;
        spec.seed = 77;
        synthesize_dataset(spec, dir);
        ModelConfig mc;
        mc.num_classes = 4;
        Model model = Model::init(mc, 500);
        CostModel costs = CostModel::defaults();
        double worst = 0.0;
        for (int k = 0; k < 4; ++k) {
            ExitRecord rec = run_stream_file(model, dir + "/class_" + std::to_string(k) + "/clip_0.oar",
                                             costs);
            double lat = 0.0, en = 0.0;
            for (const auto& t : rec.trace) {
                lat += costs.at(t).latency;
                en += costs.at(t).energy;
            }
            worst = std::max({worst, std::abs(lat - rec.latency), std::abs(en - rec.energy)});
        }
        note("cost replay-sum max abs diff " + std::to_string(worst));
        ok &= expect(worst < 1e-9, "simulated cost equals replay sum < 1e-9");
    }

    // Stream container round-trip, bit-exact over >= 100 randomized streams.
    {
        Rng rng(41);
        bool exact = true;
        const std::string dir = work_dir() + "/roundtrip";
        fs::remove_all(dir);
        fs::create_directories(dir);
        for (int rep = 0; rep < 100; ++rep) {
            SynthSpec spec;
            spec.num_classes = 1 + static_cast<int>(rng.next_below(4));
            spec.clips_per_class = 1;
            spec.frames_per_clip = 12 + static_cast<int>(rng.next_below(8));
            spec.seed = rng.next_u64();
            const int cls = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.num_classes)));
            auto packets = synthesize_clip(spec, cls, 0);
            StreamHeader h;
            h.width = spec.width;
            h.height = spec.height;
            h.channels = 1;
            h.gop = spec.gop;
            h.class_id = cls;
            h.num_frames = spec.frames_per_clip;
            const std::string p1 = dir + "/a.oar";
            const std::string p2 = dir + "/b.oar";
            write_stream(p1, h, packets);
            DecodedStream d = decode_stream(p1);
            write_stream(p2, d.header, d.packets);
            std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
            std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
            std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
            exact &= !b1.empty() && b1 == b2;
        }
        ok &= expect(exact, "container round-trip bit-exact over 100 randomized streams");
    }
    return ok;
}

// Shared state between criteria 4 and 5.
struct ToyRun {
    std::string data_dir;
    std::string train_dir;
    Model model = Model();
    TrainReport report;
    EvalReport eval;
    bool trained = false;
};
ToyRun g_toy;

// ---------------------------------------------------------------------------
// Criterion 4: end-to-end toy run.
bool run_end_to_end() {
    bool ok = true;
    g_toy.data_dir = work_dir() + "/toy_data";
    g_toy.train_dir = work_dir() + "/toy_train";
    fs::remove_all(g_toy.data_dir);
    fs::remove_all(g_toy.train_dir);
    fs::create_directories(g_toy.train_dir);

    SynthSpec spec;
    spec.num_classes = 4;
    spec.clips_per_class = 50;
    spec.frames_per_clip = 60;
    spec.width = 64;
    spec.height = 64;
    spec.gop = 12;
    spec.seed = 7;
    synthesize_dataset(spec, g_toy.data_dir);

    TrainConfig cfg;
    cfg.seed = 7;
    cfg.jobs = default_jobs();
    cfg.max_outer_iters = 8;
    Dataset data = Dataset::load(g_toy.data_dir, cfg.jobs);

    ModelConfig mc;
    mc.num_classes = 4;
    mc.width = 64;
    mc.height = 64;
    mc.gop = 12;
    g_toy.model = Model::init(mc, cfg.seed);

    const auto t0 = Clock::now();
    g_toy.report = iterative_train(g_toy.model, data, cfg, g_toy.train_dir);
    const double train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    g_toy.model.save(g_toy.train_dir + "/model.oarckpt");
    g_toy.trained = true;

    note("training wall clock: " + std::to_string(train_seconds) + " s");
    ok &= expect(train_seconds < 900.0, "training time < 15 minutes");

    for (const auto& m : g_toy.report.modalities) {
        note(m.modality + ": final A=" + std::to_string(m.final_accuracy) + ", eq4 stop at iter " +
             std::to_string(m.stop_iteration));
        ok &= expect(m.eq4_fired, m.modality + " Eq.4 stop fired");
        ok &= expect(m.stop_iteration >= 0 && m.stop_iteration <= 8,
                     m.modality + " stop within 8 outer iterations");
    }
    note("mean branch validation TDP accuracy: " + std::to_string(g_toy.report.mean_branch_accuracy));
    note("fused online validation TDP accuracy: " + std::to_string(g_toy.report.fused_online_accuracy));
    ok &= expect(g_toy.report.mean_branch_accuracy >= 0.90,
                 "validation TDP-weighted accuracy >= 0.90");

    EvalOptions eopts;
    eopts.jobs = default_jobs();
    eopts.config_json = "{\"acceptance\":true}";
    g_toy.eval = evaluate_dataset(g_toy.model, g_toy.data_dir, CostModel::defaults(), eopts);
    note("mean exit frame: " + std::to_string(g_toy.eval.mean_exit_frame));
    note("top1: " + std::to_string(g_toy.eval.top1));
    ok &= expect(g_toy.eval.failed_clips == 0, "all clips evaluated");
    ok &= expect(g_toy.eval.mean_exit_frame <= 30.0, "mean exit frame <= 30");
    for (int m = 0; m < kNumModalities; ++m) {
        note(std::string("activation ratio ") + modality_name(static_cast<Modality>(m)) + ": " +
             std::to_string(g_toy.eval.activation_ratio[static_cast<std::size_t>(m)]));
        ok &= expect(g_toy.eval.activation_ratio[static_cast<std::size_t>(m)] <= 0.8,
                     std::string("activation ratio ") + modality_name(static_cast<Modality>(m)) +
                         " <= 0.8");
    }
    return ok;
}

// ---------------------------------------------------------------------------
// Criterion 5: early-exit behavioral invariants.
bool run_behavioral() {
    bool ok = expect(g_toy.trained, "toy model available from criterion 4");
    if (!ok) return false;

    // Zero component invocations after B=1, every evaluated clip.
    bool counters_ok = true;
    bool latency_ok = true;
    for (const auto& c : g_toy.eval.clips) {
        if (!c.ok) {
            counters_ok = false;
            continue;
        }
        int decodes = 0, gates = 0, mains = 0, fusions = 0, gatings = 0;
        for (const auto& t : c.record.trace) {
            if (t == "decode") ++decodes;
            else if (t.rfind("gate_", 0) == 0) ++gates;
            else if (t.rfind("main_", 0) == 0) ++mains;
            else if (t == "fusion") ++fusions;
            else if (t == "gating") ++gatings;
        }
        counters_ok &= decodes == c.record.exit_frame;
        counters_ok &= gates == kNumModalities * c.record.exit_frame;
        counters_ok &= fusions == c.record.fused_frames && gatings == c.record.fused_frames;
        int total_mains = 0;
        for (int m = 0; m < kNumModalities; ++m) {
            total_mains += c.record.main_activations[static_cast<std::size_t>(m)];
        }
        counters_ok &= mains == total_mains;
        if (c.record.exited_early) latency_ok &= c.record.latency < c.offline_latency;
    }
    ok &= expect(counters_ok, "no decode/gate/main/fusion invocations after exit");
    ok &= expect(latency_ok, "online latency < offline policy for every early-exiting clip");

    // Fixed-seed bit-reproducibility: small training run twice.
    {
        const std::string dir = work_dir() + "/repro_data";
        fs::remove_all(dir);
        SynthSpec spec;
        spec.num_classes = 2;
        spec.clips_per_class = 4;
        spec.frames_per_clip = 13;
        spec.seed = 11;
        synthesize_dataset(spec, dir);
        Dataset data = Dataset::load(dir, 2);
        TrainConfig cfg;
        cfg.seed = 13;
        cfg.jobs = 2;
        cfg.epochs_per_test = 1;
        cfg.max_epochs_per_phase = 2;
        cfg.max_outer_iters = 1;
        cfg.max_head_epochs = 1;
        ModelConfig mc;
        mc.num_classes = 2;
        mc.width = 64;
        mc.height = 64;
        mc.gop = 12;

        std::ostringstream a, b;
        {
            Model m1 = Model::init(mc, cfg.seed);
            iterative_train(m1, data, cfg);
            save_params(a, m1.params);
        }
        {
            Model m2 = Model::init(mc, cfg.seed);
            iterative_train(m2, data, cfg);
            save_params(b, m2.params);
        }
        ok &= expect(!a.str().empty() && a.str() == b.str(),
                     "fixed-seed training reproduces checkpoint bytes");
    }

    // Report reproducibility on the toy model.
    {
        EvalOptions eopts;
        eopts.jobs = 2;
        eopts.config_json = "{\"acceptance\":true}";
        EvalReport r1 = evaluate_dataset(g_toy.model, g_toy.data_dir, CostModel::defaults(), eopts);
        EvalReport r2 = evaluate_dataset(g_toy.model, g_toy.data_dir, CostModel::defaults(), eopts);
        ok &= expect(r1.to_json() == r2.to_json(), "evaluation reports byte-identical across runs");
    }
    return ok;
}

// ---------------------------------------------------------------------------
// Criterion 6: degenerate-input suite.
bool run_degenerate() {
    bool ok = true;

    // Empty-history TLSM.
    {
        ShiftHistory empty(4);
        Tensor x({8, 4, 4});
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<float>(i);
        Tensor out = tlsm_apply(empty, x, 4, 4);
        bool zeros = true;
        for (std::size_t i = 0; i < 4 * 16; ++i) zeros &= out.data[i] == 0.f;
        ok &= expect(zeros, "empty-history TLSM zero-fills shifted channels");
    }

    // Single-block partition map.
    {
        PartitionMap p;
        p.width = 64;
        p.height = 64;
        p.blocks = {{0, 0, 64}};
        p.validate(4, 64);
        MbSaliencyMap m = mb_saliency(p, 4, 64);
        bool all_zero = true;
        for (float v : m.values) all_zero &= v == 0.f;
        ok &= expect(all_zero, "single 64-block partition: saliency 0 everywhere");
    }

    // All-inactive frames: no fusion state mutation, clean fallback.
    {
        const std::string dir = work_dir() + "/degen_ds";
        fs::remove_all(dir);
        SynthSpec spec;
        spec.num_classes = 2;
        spec.clips_per_class = 1;
        spec.frames_per_clip = 12;
        spec.seed = 3;
        synthesize_dataset(spec, dir);
        ModelConfig mc;
        mc.num_classes = 2;
        Model model = Model::init(mc, 9);
        for (int m = 0; m < kNumModalities; ++m) {
            model.params.at(model.gate_prefix(static_cast<Modality>(m)) + ".head.bias").value.data[0] =
                -50.f;
        }
        ExitRecord rec = run_stream_file(model, dir + "/class_0/clip_0.oar", CostModel::defaults());
        ok &= expect(rec.fused_frames == 0 && rec.predicted_class == -1 && rec.exit_frame == 12,
                     "all-inactive stream: no fusion mutations, final-frame fallback");
    }

    // v_len = tau + 1 TDP.
    {
        const double w1 = tdp_weight(1, 3, 2), w2 = tdp_weight(2, 3, 2), w3 = tdp_weight(3, 3, 2);
        ok &= expect(w1 == 0.25 && w2 == 0.25 && w3 == 0.5 && std::abs(w1 + w2 + w3 - 1.0) < 1e-12,
                     "TDP at v_len = tau + 1");
    }

    // N = 2 IIE.
    {
        const double v = iie(ProbDist({0.5, 0.5}));
        ok &= expect(std::abs(v) < 1e-9, "IIE N=2 uniform");
        bool threw = false;
        try {
            iie(ProbDist({1.0}));
        } catch (const ConfigError&) {
            threw = true;
        }
        ok &= expect(threw, "IIE N<2 rejected");
    }
    return ok;
}

}  // namespace

int main() {
    fs::create_directories(work_dir());
    std::printf("acceptance suite (work dir: %s)\n", work_dir().c_str());

    criterion(1, "equation unit suite (TDP, IIE, MB saliency, TLSM)", run_equations);
    criterion(2, "gradient checks for all trainable blocks", run_grad_checks);
    criterion(3, "oracle equivalences (fusion, GOP, cost, container)", run_oracles);
    criterion(4, "end-to-end toy run (train, Eq.4 stop, eval)", run_end_to_end);
    criterion(5, "early-exit behavioral invariants", run_behavioral);
    criterion(6, "degenerate-input suite", run_degenerate);

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) failed\n", g_failures);
    return 1;
}
