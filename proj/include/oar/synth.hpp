#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oar/compressed.hpp"

namespace oar {

struct SynthSpec {
    int num_classes = 4;
    int clips_per_class = 50;
    int frames_per_clip = 60;
    int width = 64;
    int height = 64;
    int gop = 12;
    std::uint64_t seed = 0;
};

struct ManifestEntry {
    std::string path;  // relative to the dataset directory
    int label = 0;
    int frames = 0;
};

struct DatasetManifest {
    std::string root;
    int num_classes = 0;
    int width = 0;
    int height = 0;
    int gop = 0;
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> clips;
};

// Renders one clip of the synthetic motion dataset. Class k moves a textured
// square along direction k*90 degrees (y axis pointing down) at 2 px/frame,
// wrapping toroidally. The first frame shows the square untextured, and every
// third frame from t=3 on is replaced by sensor noise; both give the gates
// frames genuinely not worth running f_Main on.
std::vector<FramePacket> synthesize_clip(const SynthSpec& spec, int class_id, int clip_id);

// Writes class_<k>/clip_<j>.oar files plus manifest.json under out_dir.
DatasetManifest synthesize_dataset(const SynthSpec& spec, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dataset_dir);

// Schedule helpers shared with tests (t is 1-based). Flashes sit off the
// first three frames so the heavily TDP-weighted early frames keep a healthy
// mix of worth-running and worthless inputs.
inline bool is_flash_frame(int t) { return t >= 4 && t % 3 == 1; }

// Velocity of class k in pixels/frame.
void class_velocity(int class_id, int* dx, int* dy);

}  // namespace oar
