#include "oar/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace oar {

namespace {

constexpr int kSquareSide = 24;
constexpr int kSplitThreshold = 8;  // max |residual| in a block before it splits

struct ClipLayout {
    int start_x = 0;
    int start_y = 0;
    int vx = 0;
    int vy = 0;
    std::vector<float> background;       // H×W, 0..255 integers
    std::vector<float> square_texture;   // side×side class texture
    std::vector<float> neutral_texture;  // side×side frame-1 texture
};

int wrap(int v, int m) {
    v %= m;
    return v < 0 ? v + m : v;
}

// Smooth background: coarse random grid, bilinearly upsampled, quantized.
// Kept to a narrow band so the class-coded square dominates frame statistics.
std::vector<float> make_background(int w, int h, Rng& rng) {
    const int cell = 8;
    const int gw = w / cell + 2, gh = h / cell + 2;
    std::vector<double> grid(static_cast<std::size_t>(gw) * gh);
    for (auto& v : grid) v = rng.uniform(95.0, 135.0);
    std::vector<float> out(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(fy);
        const double wy = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(fx);
            const double wx = fx - x0;
            const double v00 = grid[static_cast<std::size_t>(y0) * gw + x0];
            const double v01 = grid[static_cast<std::size_t>(y0) * gw + x0 + 1];
            const double v10 = grid[static_cast<std::size_t>(y0 + 1) * gw + x0];
            const double v11 = grid[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
            const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
            out[static_cast<std::size_t>(y) * w + x] = std::floor(v);
        }
    }
    return out;
}

// Class texture: stripes perpendicular to the motion axis, a bright band on
// the leading edge, and a class-specific base level. Rigid in local coords so
// interior motion compensation is exact.
std::vector<float> make_square_texture(int class_id, int num_classes, int vx, int vy) {
    std::vector<float> tex(static_cast<std::size_t>(kSquareSide) * kSquareSide);
    const float base =
        30.f + 195.f * static_cast<float>(class_id) / static_cast<float>(std::max(1, num_classes - 1));
    const bool horizontal_motion = vx != 0;
    for (int ly = 0; ly < kSquareSide; ++ly) {
        for (int lx = 0; lx < kSquareSide; ++lx) {
            const int stripe_coord = horizontal_motion ? lx : ly;
            float v = base + ((stripe_coord / 3) % 2 ? 20.f : -20.f);
            // Leading-edge band.
            const int band = 5;
            if ((vx > 0 && lx >= kSquareSide - band) || (vx < 0 && lx < band) ||
                (vy > 0 && ly >= kSquareSide - band) || (vy < 0 && ly < band)) {
                v += 25.f;
            }
            tex[static_cast<std::size_t>(ly) * kSquareSide + lx] = std::clamp(std::floor(v), 0.f, 255.f);
        }
    }
    return tex;
}

// Frame image at 1-based time t (before any flash replacement).
std::vector<float> render_clean(const ClipLayout& lay, int w, int h, int t) {
    std::vector<float> img = lay.background;
    const int px = wrap(lay.start_x + (t - 1) * lay.vx, w);
    const int py = wrap(lay.start_y + (t - 1) * lay.vy, h);
    const std::vector<float>& tex = (t == 1) ? lay.neutral_texture : lay.square_texture;
    for (int ly = 0; ly < kSquareSide; ++ly) {
        const int y = wrap(py + ly, h);
        for (int lx = 0; lx < kSquareSide; ++lx) {
            const int x = wrap(px + lx, w);
            img[static_cast<std::size_t>(y) * w + x] = tex[static_cast<std::size_t>(ly) * kSquareSide + lx];
        }
    }
    return img;
}

std::vector<std::uint8_t> square_mask(const ClipLayout& lay, int w, int h, int t) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
    const int px = wrap(lay.start_x + (t - 1) * lay.vx, w);
    const int py = wrap(lay.start_y + (t - 1) * lay.vy, h);
    for (int ly = 0; ly < kSquareSide; ++ly) {
        const int y = wrap(py + ly, h);
        for (int lx = 0; lx < kSquareSide; ++lx) {
            mask[static_cast<std::size_t>(y) * w + wrap(px + lx, w)] = 1;
        }
    }
    return mask;
}

// Recursive quadtree split: a tile splits while any pixel of the provisional
// residual inside it exceeds the threshold and the side is above the minimum.
void split_tile(int x, int y, int side, int w, const std::vector<int>& res_energy,
                std::vector<Block>* out) {
    bool hot = false;
    for (int yy = y; yy < y + side && !hot; ++yy) {
        const int* row = res_energy.data() + static_cast<std::size_t>(yy) * w;
        for (int xx = x; xx < x + side; ++xx) {
            if (row[xx] > kSplitThreshold) {
                hot = true;
                break;
            }
        }
    }
    if (!hot || side == kMinBlockSide) {
        out->push_back({x, y, side});
        return;
    }
    const int half = side / 2;
    split_tile(x, y, half, w, res_energy, out);
    split_tile(x + half, y, half, w, res_energy, out);
    split_tile(x, y + half, half, w, res_energy, out);
    split_tile(x + half, y + half, half, w, res_energy, out);
}

}  // namespace

void class_velocity(int class_id, int* dx, int* dy) {
    const int speed = 2 * (1 + class_id / 4);
    switch (class_id % 4) {
        case 0: *dx = speed; *dy = 0; break;   // right
        case 1: *dx = 0; *dy = -speed; break;  // up (y axis points down)
        case 2: *dx = -speed; *dy = 0; break;  // left
        default: *dx = 0; *dy = speed; break;  // down
    }
}

std::vector<FramePacket> synthesize_clip(const SynthSpec& spec, int class_id, int clip_id) {
    if (spec.frames_per_clip < spec.gop) {
        throw ConfigError("frames_per_clip must be >= gop");
    }
    if (spec.width % 64 != 0 || spec.height % 64 != 0 || spec.width <= 0 || spec.height <= 0) {
        throw ConfigError("frame dimensions must be positive multiples of 64");
    }
    const int w = spec.width, h = spec.height;
    const std::size_t plane = static_cast<std::size_t>(w) * h;

    Rng rng(Rng::derive(spec.seed, static_cast<std::uint64_t>(class_id) * 1000003ULL +
                                       static_cast<std::uint64_t>(clip_id)));
    ClipLayout lay;
    class_velocity(class_id, &lay.vx, &lay.vy);
    lay.start_x = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(w)));
    lay.start_y = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(h)));
    lay.background = make_background(w, h, rng);
    lay.square_texture = make_square_texture(class_id, spec.num_classes, lay.vx, lay.vy);
    lay.neutral_texture.assign(static_cast<std::size_t>(kSquareSide) * kSquareSide, 128.f);

    std::vector<FramePacket> packets;
    packets.reserve(static_cast<std::size_t>(spec.frames_per_clip));
    std::vector<float> prev_img;

    for (int t = 1; t <= spec.frames_per_clip; ++t) {
        FramePacket p;
        p.index = t - 1;
        p.type = ((t - 1) % spec.gop == 0) ? FrameType::I : FrameType::P;
        std::vector<float> img = render_clean(lay, w, h, t);
        if (is_flash_frame(t)) {
            for (auto& v : img) {
                v = static_cast<float>(rng.next_below(256));
            }
        }

        p.partition.width = w;
        p.partition.height = h;
        p.residual.assign(plane, 0);

        if (p.type == FrameType::I) {
            // Self-contained frame: zero motion, zero residual, coarse blocks.
            for (int y = 0; y < h; y += kMaxBlockSide) {
                for (int x = 0; x < w; x += kMaxBlockSide) {
                    p.partition.blocks.push_back({x, y, kMaxBlockSide});
                    p.block_mvs.push_back({x, y, kMaxBlockSide, 0, 0});
                }
            }
        } else {
            // Provisional per-pixel displacement: square pixels carry the true
            // velocity, the rest predict in place.
            const std::vector<std::uint8_t> mask = square_mask(lay, w, h, t);
            std::vector<int> provisional(plane);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * w + x;
                    const int mvx = mask[i] ? lay.vx : 0;
                    const int mvy = mask[i] ? lay.vy : 0;
                    const int sx = std::clamp(x - mvx, 0, w - 1);
                    const int sy = std::clamp(y - mvy, 0, h - 1);
                    provisional[i] = static_cast<int>(
                        std::abs(img[i] - prev_img[static_cast<std::size_t>(sy) * w + sx]));
                }
            }
            for (int y = 0; y < h; y += kMaxBlockSide) {
                for (int x = 0; x < w; x += kMaxBlockSide) {
                    split_tile(x, y, kMaxBlockSide, w, provisional, &p.partition.blocks);
                }
            }
            // Final block MVs: true displacement on blocks touching the square.
            p.block_mvs.reserve(p.partition.blocks.size());
            for (const Block& b : p.partition.blocks) {
                bool moving = false;
                for (int yy = b.y; yy < b.y + b.side && !moving; ++yy) {
                    for (int xx = b.x; xx < b.x + b.side; ++xx) {
                        if (mask[static_cast<std::size_t>(yy) * w + xx]) {
                            moving = true;
                            break;
                        }
                    }
                }
                p.block_mvs.push_back({b.x, b.y, b.side, moving ? lay.vx : 0, moving ? lay.vy : 0});
            }
            // Residual is the exact motion-compensation error under block MVs.
            for (std::size_t bi = 0; bi < p.block_mvs.size(); ++bi) {
                const BlockMv& b = p.block_mvs[bi];
                for (int yy = b.y; yy < b.y + b.side; ++yy) {
                    for (int xx = b.x; xx < b.x + b.side; ++xx) {
                        const std::size_t i = static_cast<std::size_t>(yy) * w + xx;
                        const int sx = std::clamp(xx - b.dx, 0, w - 1);
                        const int sy = std::clamp(yy - b.dy, 0, h - 1);
                        const float pred = prev_img[static_cast<std::size_t>(sy) * w + sx];
                        p.residual[i] = static_cast<std::int16_t>(img[i] - pred);
                    }
                }
            }
        }

        p.image = Tensor({1, h, w}, img);
        prev_img = std::move(img);
        packets.push_back(std::move(p));
    }
    return packets;
}

DatasetManifest synthesize_dataset(const SynthSpec& spec, const std::string& out_dir) {
    if (spec.num_classes < 1 || spec.clips_per_class < 1) {
        throw ConfigError("dataset needs at least one class and one clip per class");
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());

    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.num_classes = spec.num_classes;
    manifest.width = spec.width;
    manifest.height = spec.height;
    manifest.gop = spec.gop;
    manifest.seed = spec.seed;

    for (int k = 0; k < spec.num_classes; ++k) {
        const std::string cls_dir = out_dir + "/class_" + std::to_string(k);
        fs::create_directories(cls_dir, ec);
        if (ec) throw IoError("cannot create class directory " + cls_dir + ": " + ec.message());
        for (int j = 0; j < spec.clips_per_class; ++j) {
            const std::string rel = "class_" + std::to_string(k) + "/clip_" + std::to_string(j) + ".oar";
            std::vector<FramePacket> packets = synthesize_clip(spec, k, j);
            StreamHeader h;
            h.width = spec.width;
            h.height = spec.height;
            h.channels = 1;
            h.gop = spec.gop;
            h.class_id = k;
            h.num_frames = spec.frames_per_clip;
            write_stream(out_dir + "/" + rel, h, packets);
            manifest.clips.push_back({rel, k, spec.frames_per_clip});
        }
    }

    nlohmann::json j;
    j["format_version"] = 1;
    j["num_classes"] = manifest.num_classes;
    j["width"] = manifest.width;
    j["height"] = manifest.height;
    j["gop"] = manifest.gop;
    j["seed"] = manifest.seed;
    j["frames_per_clip"] = spec.frames_per_clip;
    j["clips_per_class"] = spec.clips_per_class;
    nlohmann::json clips = nlohmann::json::array();
    for (const auto& c : manifest.clips) {
        clips.push_back({{"path", c.path}, {"label", c.label}, {"frames", c.frames}});
    }
    j["clips"] = clips;
    std::ofstream f(out_dir + "/manifest.json");
    if (!f) throw IoError("cannot write manifest in " + out_dir);
    f << j.dump(2) << "\n";
    return manifest;
}

DatasetManifest load_manifest(const std::string& dataset_dir) {
    std::ifstream f(dataset_dir + "/manifest.json");
    if (!f) throw IoError("dataset manifest not found in " + dataset_dir);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad manifest JSON: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.root = dataset_dir;
    m.num_classes = j.at("num_classes").get<int>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.gop = j.at("gop").get<int>();
    m.seed = j.value("seed", 0ULL);
    for (const auto& c : j.at("clips")) {
        m.clips.push_back({c.at("path").get<std::string>(), c.at("label").get<int>(),
                           c.at("frames").get<int>()});
    }
    return m;
}

}  // namespace oar
