#include <doctest.h>

#include <filesystem>
#include <map>

#include "oar/runtime.hpp"
#include "oar/training.hpp"

using namespace oar;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const char* name) {
    const std::string d = (fs::temp_directory_path() / name).string();
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

struct Fixture {
    std::string dir;
    DatasetManifest manifest;
    Model model;

    static Fixture make(const char* name, std::uint64_t model_seed = 123) {
        Fixture f{temp_dir(name), {}, Model()};
        SynthSpec spec;
        spec.num_classes = 4;
        spec.clips_per_class = 2;
        spec.frames_per_clip = 16;
        spec.width = 64;
        spec.height = 64;
        spec.seed = 21;
        f.manifest = synthesize_dataset(spec, f.dir);
        ModelConfig mc;
        mc.num_classes = 4;
        mc.width = 64;
        mc.height = 64;
        mc.gop = 12;
        f.model = Model::init(mc, model_seed);
        return f;
    }

private:
    Fixture(std::string d, DatasetManifest m, Model mo)
        : dir(std::move(d)), manifest(std::move(m)), model(std::move(mo)) {}
};

int count(const std::vector<std::string>& trace, const std::string& name) {
    int n = 0;
    for (const auto& t : trace) n += t == name ? 1 : 0;
    return n;
}

}  // namespace

TEST_CASE("simulate_cost basics") {
    CostModel costs = CostModel::defaults();
    CHECK(simulate_cost({}, costs).first == doctest::Approx(0.0));
    CHECK(simulate_cost({}, costs).second == doctest::Approx(0.0));

    // One fusion step under defaults costs the reference 0.69 latency units.
    CHECK(simulate_cost({"fusion"}, costs).first == doctest::Approx(0.69));

    auto [lat, en] = simulate_cost({"decode", "gate_image", "fusion"}, costs);
    CostModel doubled = costs;
    for (auto& [k, v] : doubled.entries) {
        v.latency *= 2;
        v.energy *= 2;
    }
    auto [lat2, en2] = simulate_cost({"decode", "gate_image", "fusion"}, doubled);
    CHECK(lat2 == doctest::Approx(2 * lat));
    CHECK(en2 == doctest::Approx(2 * en));

    CHECK_THROWS_AS(simulate_cost({"warp_drive"}, costs), ConfigError);
}

TEST_CASE("cost profile round-trips through JSON") {
    CostModel costs = CostModel::defaults();
    const std::string dir = temp_dir("oar_cost_profile");
    const std::string path = dir + "/profile.json";
    {
        std::ofstream f(path);
        f << costs.to_json();
    }
    CostModel loaded = CostModel::from_json_file(path);
    CHECK(loaded.at("fusion").latency == doctest::Approx(0.69));
    CHECK(loaded.at("decode").latency == doctest::Approx(1.0));
    fs::remove_all(dir);
}

TEST_CASE("run_stream decodes only up to the exit frame and its costs match a replay sum") {
    Fixture f = Fixture::make("oar_rt_basic");
    CostModel costs = CostModel::defaults();

    DecodedStream s = decode_stream(f.dir + "/" + f.manifest.clips[0].path);
    ExitRecord rec = run_stream(f.model, s, costs);

    CHECK(rec.exit_frame >= 1);
    CHECK(rec.exit_frame <= static_cast<int>(s.packets.size()));
    CHECK(rec.frames_decoded == rec.exit_frame);
    CHECK(count(rec.trace, "decode") == rec.exit_frame);
    for (int m = 0; m < kNumModalities; ++m) {
        const auto name = std::string("gate_") + modality_name(static_cast<Modality>(m));
        CHECK(count(rec.trace, name) == rec.exit_frame);  // every decoded frame gated once
        CHECK(rec.main_activations[static_cast<std::size_t>(m)] <= rec.exit_frame);
        CHECK(count(rec.trace, std::string("main_") + modality_name(static_cast<Modality>(m))) ==
              rec.main_activations[static_cast<std::size_t>(m)]);
    }
    CHECK(count(rec.trace, "gating") == rec.fused_frames);

    // Replay-sum oracle in double precision.
    double lat = 0.0, en = 0.0;
    for (const auto& t : rec.trace) {
        lat += costs.at(t).latency;
        en += costs.at(t).energy;
    }
    CHECK(std::abs(lat - rec.latency) < 1e-9);
    CHECK(std::abs(en - rec.energy) < 1e-9);
}

TEST_CASE("run_stream is bit-reproducible and independent of modality scheduling order") {
    Fixture f = Fixture::make("oar_rt_order");
    CostModel costs = CostModel::defaults();
    DecodedStream s = decode_stream(f.dir + "/" + f.manifest.clips[3].path);

    ExitRecord a = run_stream(f.model, s, costs);
    ExitRecord b = run_stream(f.model, s, costs);
    CHECK(a.exit_frame == b.exit_frame);
    CHECK(a.predicted_class == b.predicted_class);
    CHECK(a.latency == b.latency);
    CHECK(a.frame_predictions == b.frame_predictions);

    RunOptions permuted;
    permuted.modality_order = {2, 0, 1};
    ExitRecord c = run_stream(f.model, s, costs, permuted);
    CHECK(c.exit_frame == a.exit_frame);
    CHECK(c.predicted_class == a.predicted_class);
    CHECK(c.exit_confidence == doctest::Approx(a.exit_confidence));
    CHECK(c.latency == doctest::Approx(a.latency));
    CHECK(c.main_activations == a.main_activations);
}

TEST_CASE("gates that never fire lead to an unconditional final-frame exit") {
    Fixture f = Fixture::make("oar_rt_nogate");
    // Push every gate and the stopping head to permanent rejection.
    for (int m = 0; m < kNumModalities; ++m) {
        f.model.params.at(f.model.gate_prefix(static_cast<Modality>(m)) + ".head.bias")
            .value.data[0] = -50.f;
    }
    CostModel costs = CostModel::defaults();
    DecodedStream s = decode_stream(f.dir + "/" + f.manifest.clips[0].path);
    ExitRecord rec = run_stream(f.model, s, costs);
    CHECK(rec.exit_frame == static_cast<int>(s.packets.size()));
    CHECK_FALSE(rec.exited_early);
    // All frames inactive: no fusion mutations, no prediction.
    CHECK(rec.fused_frames == 0);
    CHECK(rec.predicted_class == -1);
    CHECK(count(rec.trace, "fusion") == 0);
    CHECK(count(rec.trace, "gating") == 0);
    for (int p : rec.frame_predictions) CHECK(p == -1);
}

TEST_CASE("forced exit at the first fused frame stops all further work") {
    Fixture f = Fixture::make("oar_rt_force");
    // Exit head with hugely positive projection bias: B=1 at the first gate.
    f.model.params.at("gate_exit.proj.bias").value.data[0] = 50.f;
    // Make every gate fire so frame 1 fuses.
    for (int m = 0; m < kNumModalities; ++m) {
        f.model.params.at(f.model.gate_prefix(static_cast<Modality>(m)) + ".head.bias")
            .value.data[0] = 50.f;
    }
    CostModel costs = CostModel::defaults();
    DecodedStream s = decode_stream(f.dir + "/" + f.manifest.clips[1].path);
    ExitRecord rec = run_stream(f.model, s, costs);
    CHECK(rec.exit_frame == 1);
    CHECK(rec.exited_early);
    CHECK(rec.frames_decoded == 1);
    CHECK(count(rec.trace, "decode") == 1);
    CHECK(count(rec.trace, "gating") == 1);
    CHECK(rec.predicted_class >= 0);

    // Early exit beats the full-frame policy under the same cost model.
    double offline = 0.0;
    {
        RunOptions off;
        off.policy = Policy::Offline;
        offline = run_stream(f.model, s, costs, off).latency;
    }
    CHECK(rec.latency < offline);
}

TEST_CASE("class-count and dimension mismatches are config errors") {
    Fixture f = Fixture::make("oar_rt_mismatch");
    ModelConfig small = f.model.cfg;
    small.num_classes = 2;
    Model small_model = Model::init(small, 5);
    CostModel costs = CostModel::defaults();
    // Clip of class 3 exceeds a 2-class model.
    DecodedStream s = decode_stream(f.dir + "/" + f.manifest.clips[7].path);
    CHECK_THROWS_AS(run_stream(small_model, s, costs), ConfigError);

    ModelConfig wide = f.model.cfg;
    wide.width = 128;
    wide.height = 128;
    Model wide_model = Model::init(wide, 5);
    CHECK_THROWS_AS(run_stream(wide_model, s, costs), ConfigError);
}

TEST_CASE("evaluate_dataset aggregates deterministically and offline costs dominate") {
    Fixture f = Fixture::make("oar_rt_eval");
    CostModel costs = CostModel::defaults();
    EvalOptions opts;
    opts.jobs = 2;
    opts.config_json = "{\"test\":true}";

    EvalReport r1 = evaluate_dataset(f.model, f.dir, costs, opts);
    EvalReport r2 = evaluate_dataset(f.model, f.dir, costs, opts);
    CHECK(r1.to_json() == r2.to_json());
    CHECK(r1.num_clips == 8);
    CHECK(r1.failed_clips == 0);
    for (double r : r1.activation_ratio) {
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }

    // Activation ratios match a brute-force recount over per-clip records.
    std::array<double, kNumModalities> recount = {0, 0, 0};
    for (const auto& c : r1.clips) {
        for (int m = 0; m < kNumModalities; ++m) {
            recount[static_cast<std::size_t>(m)] +=
                static_cast<double>(c.record.main_activations[static_cast<std::size_t>(m)]) /
                c.record.exit_frame;
        }
    }
    for (int m = 0; m < kNumModalities; ++m) {
        CHECK(r1.activation_ratio[static_cast<std::size_t>(m)] ==
              doctest::Approx(recount[static_cast<std::size_t>(m)] / r1.num_clips));
    }

    for (const auto& c : r1.clips) REQUIRE(c.ok);

    EvalOptions off = opts;
    off.policy = Policy::Offline;
    EvalReport ro = evaluate_dataset(f.model, f.dir, costs, off);
    CHECK(ro.mean_exit_frame == doctest::Approx(16.0));
    for (double r : ro.activation_ratio) CHECK(r == doctest::Approx(1.0));
}

TEST_CASE("a fresh random model scores near chance on a balanced 4-class set") {
    const std::string dir = temp_dir("oar_rt_chance");
    SynthSpec spec;
    spec.num_classes = 4;
    spec.clips_per_class = 50;
    spec.frames_per_clip = 12;
    spec.width = 64;
    spec.height = 64;
    spec.seed = 31;
    synthesize_dataset(spec, dir);
    ModelConfig mc;
    mc.num_classes = 4;
    mc.width = 64;
    mc.height = 64;
    mc.gop = 12;
    Model model = Model::init(mc, 999);
    EvalOptions opts;
    opts.jobs = 2;
    EvalReport r = evaluate_dataset(model, dir, CostModel::defaults(), opts);
    CHECK(r.num_clips == 200);
    CHECK(r.top1 >= 0.20);
    CHECK(r.top1 <= 0.30);
    fs::remove_all(dir);
}

TEST_CASE("unreadable clips are reported per-clip, not fatal") {
    Fixture f = Fixture::make("oar_rt_badclip");
    // Truncate one stream file.
    const std::string victim = f.dir + "/" + f.manifest.clips[2].path;
    std::string bytes;
    {
        std::ifstream in(victim, std::ios::binary);
        bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    {
        std::ofstream out(victim, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EvalOptions opts;
    EvalReport r = evaluate_dataset(f.model, f.dir, CostModel::defaults(), opts);
    CHECK(r.failed_clips == 1);
    CHECK(r.num_clips == 8);
    bool found = false;
    for (const auto& c : r.clips) {
        if (!c.ok) {
            found = true;
            CHECK(c.error.find("truncated") != std::string::npos);
        }
    }
    CHECK(found);
}
