#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oar/tensor.hpp"

namespace oar {

// One coding block: axis-aligned square at (x, y) with the given side.
struct Block {
    int x = 0;
    int y = 0;
    int side = 0;
};

// Quadtree-style partition of a frame into power-of-two square blocks.
struct PartitionMap {
    int width = 0;
    int height = 0;
    std::vector<Block> blocks;

    // Throws FormatError unless the blocks exactly tile the frame with
    // pairwise-disjoint power-of-two squares inside [min_side, max_side].
    void validate(int min_side, int max_side) const;
};

// Per-pixel values in [0, 1], constant within each source block.
struct MbSaliencyMap {
    int width = 0;
    int height = 0;
    std::vector<float> values;  // row-major H×W

    float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Per-pixel displacement relative to the reference frame.
struct MotionField {
    int width = 0;
    int height = 0;
    std::vector<float> dx;  // row-major H×W
    std::vector<float> dy;

    MotionField() = default;
    MotionField(int w, int h)
        : width(w), height(h),
          dx(static_cast<std::size_t>(w) * h, 0.f),
          dy(static_cast<std::size_t>(w) * h, 0.f) {}
};

struct BlockMv {
    int x = 0;
    int y = 0;
    int side = 0;
    int dx = 0;
    int dy = 0;
};

// Eq-style block-area saliency: 1 - (log2 S - log2 Smin) / (log2 Smax - log2 Smin)
// with S the block area in pixels and the range fixed by [min_side, max_side].
MbSaliencyMap mb_saliency(const PartitionMap& partition, int min_side, int max_side);

// Block-constant upsampling of block MVs to a per-pixel field.
// Throws FormatError naming the first uncovered pixel.
MotionField interpolate_mv(const std::vector<BlockMv>& block_mvs, int width, int height);

enum class FrameType : std::uint8_t { I = 0, P = 1 };

// One decoded frame of the synthetic compressed-domain stream.
struct FramePacket {
    int index = 0;
    FrameType type = FrameType::I;
    Tensor image;                    // C×H×W, values 0..255
    PartitionMap partition;
    std::vector<BlockMv> block_mvs;  // same blocks as partition, with (dx, dy)
    std::vector<std::int16_t> residual;  // row-major H×W

    int width() const { return partition.width; }
    int height() const { return partition.height; }
};

// Running accumulators since the last I-frame (Coviar-style back-tracing).
struct GopState {
    int width = 0;
    int height = 0;
    int gop_length = 12;
    int frames_since_i = 0;
    int last_index = -1;
    std::vector<float> acc_dx;
    std::vector<float> acc_dy;
    std::vector<float> acc_residual;

    GopState() = default;
    GopState(int w, int h, int gop)
        : width(w), height(h), gop_length(gop),
          acc_dx(static_cast<std::size_t>(w) * h, 0.f),
          acc_dy(static_cast<std::size_t>(w) * h, 0.f),
          acc_residual(static_cast<std::size_t>(w) * h, 0.f) {}

    void reset_planes() {
        std::fill(acc_dx.begin(), acc_dx.end(), 0.f);
        std::fill(acc_dy.begin(), acc_dy.end(), 0.f);
        std::fill(acc_residual.begin(), acc_residual.end(), 0.f);
    }
};

// Advances the GOP accumulators with one packet. I-frames reset the state;
// P-frames back-trace with nearest-pixel lookup clamped to frame bounds.
void accumulate_gop(GopState& state, const FramePacket& packet);

// Stream container header fields (JSON first line of a .oar file).
struct StreamHeader {
    int version = 1;
    int width = 0;
    int height = 0;
    int channels = 1;
    int gop = 12;
    int class_id = 0;
    int num_frames = 0;
};

void write_stream(const std::string& path, const StreamHeader& header,
                  const std::vector<FramePacket>& packets);

struct DecodedStream {
    StreamHeader header;
    std::vector<FramePacket> packets;
};

// Decodes a .oar file, validating the container and FramePacket invariants.
// Format errors name the byte offset at which they were detected.
DecodedStream decode_stream(const std::string& path);

constexpr int kMinBlockSide = 4;
constexpr int kMaxBlockSide = 64;

}  // namespace oar
