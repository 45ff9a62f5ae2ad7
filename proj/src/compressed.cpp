#include "oar/compressed.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace oar {

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void PartitionMap::validate(int min_side, int max_side) const {
    if (width <= 0 || height <= 0) throw FormatError("partition map has empty frame dimensions");
    std::vector<std::uint8_t> covered(static_cast<std::size_t>(width) * height, 0);
    for (const Block& b : blocks) {
        if (!is_pow2(b.side) || b.side < min_side || b.side > max_side) {
            throw FormatError("block side " + std::to_string(b.side) + " outside allowed range [" +
                              std::to_string(min_side) + "," + std::to_string(max_side) + "]");
        }
        if (b.x < 0 || b.y < 0 || b.x + b.side > width || b.y + b.side > height) {
            throw FormatError("block at (" + std::to_string(b.x) + "," + std::to_string(b.y) +
                              ") side " + std::to_string(b.side) + " exceeds frame bounds");
        }
        for (int y = b.y; y < b.y + b.side; ++y) {
            for (int x = b.x; x < b.x + b.side; ++x) {
                std::uint8_t& c = covered[static_cast<std::size_t>(y) * width + x];
                if (c) {
                    throw FormatError("overlapping partition blocks at pixel (" + std::to_string(x) +
                                      "," + std::to_string(y) + ")");
                }
                c = 1;
            }
        }
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (!covered[static_cast<std::size_t>(y) * width + x]) {
                throw FormatError("partition does not cover pixel (" + std::to_string(x) + "," +
                                  std::to_string(y) + ")");
            }
        }
    }
}

MbSaliencyMap mb_saliency(const PartitionMap& partition, int min_side, int max_side) {
    if (min_side >= max_side) {
        throw ConfigError("degenerate saliency range: min_side " + std::to_string(min_side) +
                          " >= max_side " + std::to_string(max_side));
    }
    const double log_min = std::log2(static_cast<double>(min_side) * min_side);
    const double log_max = std::log2(static_cast<double>(max_side) * max_side);
    MbSaliencyMap map;
    map.width = partition.width;
    map.height = partition.height;
    map.values.assign(static_cast<std::size_t>(map.width) * map.height, 0.f);
    for (const Block& b : partition.blocks) {
        if (b.side < min_side || b.side > max_side) {
            throw ConfigError("block side " + std::to_string(b.side) + " outside saliency range");
        }
        const double area = static_cast<double>(b.side) * b.side;
        const double v = 1.0 - (std::log2(area) - log_min) / (log_max - log_min);
        const float fv = static_cast<float>(v);
        for (int y = b.y; y < b.y + b.side; ++y) {
            float* row = map.values.data() + static_cast<std::size_t>(y) * map.width;
            for (int x = b.x; x < b.x + b.side; ++x) row[x] = fv;
        }
    }
    return map;
}

MotionField interpolate_mv(const std::vector<BlockMv>& block_mvs, int width, int height) {
    if (width <= 0 || height <= 0) {
        throw FormatError("interpolate_mv on empty frame " + std::to_string(width) + "x" +
                          std::to_string(height));
    }
    MotionField field(width, height);
    std::vector<std::uint8_t> covered(static_cast<std::size_t>(width) * height, 0);
    for (const BlockMv& b : block_mvs) {
        for (int y = b.y; y < b.y + b.side; ++y) {
            if (y < 0 || y >= height) continue;
            for (int x = b.x; x < b.x + b.side; ++x) {
                if (x < 0 || x >= width) continue;
                const std::size_t i = static_cast<std::size_t>(y) * width + x;
                field.dx[i] = static_cast<float>(b.dx);
                field.dy[i] = static_cast<float>(b.dy);
                covered[i] = 1;
            }
        }
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (!covered[static_cast<std::size_t>(y) * width + x]) {
                throw FormatError("motion blocks leave pixel (" + std::to_string(x) + "," +
                                  std::to_string(y) + ") uncovered");
            }
        }
    }
    return field;
}

void accumulate_gop(GopState& state, const FramePacket& packet) {
    if (state.width != packet.width() || state.height != packet.height()) {
        throw ShapeError("GOP state " + std::to_string(state.width) + "x" + std::to_string(state.height) +
                         " vs packet " + std::to_string(packet.width()) + "x" + std::to_string(packet.height()));
    }
    if (state.last_index >= 0 && packet.index != state.last_index + 1) {
        throw FormatError("packet index " + std::to_string(packet.index) +
                          " is not the successor of " + std::to_string(state.last_index));
    }
    state.last_index = packet.index;
    if (packet.type == FrameType::I) {
        state.reset_planes();
        state.frames_since_i = 0;
        return;
    }
    if (state.frames_since_i + 1 >= state.gop_length) {
        throw FormatError("GOP overrun: no I-frame within " + std::to_string(state.gop_length) +
                          " frames at index " + std::to_string(packet.index));
    }
    const int w = state.width, h = state.height;
    MotionField motion = interpolate_mv(packet.block_mvs, w, h);
    std::vector<float> ndx(static_cast<std::size_t>(w) * h);
    std::vector<float> ndy(ndx.size());
    std::vector<float> nres(ndx.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const float mdx = motion.dx[i];
            const float mdy = motion.dy[i];
            // Nearest-pixel back-trace, clamped to frame bounds.
            int sx = x - static_cast<int>(std::lround(mdx));
            int sy = y - static_cast<int>(std::lround(mdy));
            sx = std::clamp(sx, 0, w - 1);
            sy = std::clamp(sy, 0, h - 1);
            const std::size_t si = static_cast<std::size_t>(sy) * w + sx;
            ndx[i] = mdx + state.acc_dx[si];
            ndy[i] = mdy + state.acc_dy[si];
            nres[i] = static_cast<float>(packet.residual[i]) + state.acc_residual[si];
        }
    }
    state.acc_dx = std::move(ndx);
    state.acc_dy = std::move(ndy);
    state.acc_residual = std::move(nres);
    state.frames_since_i += 1;
}

namespace {

constexpr const char* kStreamMagic = "OARSTRM";

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_i16(std::string& out, std::int16_t v) { put_u16(out, static_cast<std::uint16_t>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    std::size_t offset() const { return off_; }

    void need(std::size_t n, const char* what) {
        if (off_ + n > bytes_.size()) {
            throw FormatError(path_ + ": truncated while reading " + what + " at byte offset " +
                              std::to_string(off_));
        }
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes_[off_++]);
    }

    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint8_t>(bytes_[off_]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[off_ + 1])) << 8);
        off_ += 2;
        return v;
    }

    std::int16_t i16(const char* what) { return static_cast<std::int16_t>(u16(what)); }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[off_ + i])) << (8 * i);
        }
        off_ += 4;
        return v;
    }

    const char* raw(std::size_t n, const char* what) {
        need(n, what);
        const char* p = bytes_.data() + off_;
        off_ += n;
        return p;
    }

    std::string line(const char* what) {
        std::size_t end = bytes_.find('\n', off_);
        if (end == std::string::npos) {
            throw FormatError(path_ + ": missing newline for " + what + " at byte offset " +
                              std::to_string(off_));
        }
        std::string s = bytes_.substr(off_, end - off_);
        off_ = end + 1;
        return s;
    }

    bool at_end() const { return off_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t off_ = 0;
};

}  // namespace

void write_stream(const std::string& path, const StreamHeader& header,
                  const std::vector<FramePacket>& packets) {
    if (static_cast<int>(packets.size()) != header.num_frames) {
        throw ConfigError("header num_frames " + std::to_string(header.num_frames) + " vs " +
                          std::to_string(packets.size()) + " packets");
    }
    nlohmann::json j;
    j["magic"] = kStreamMagic;
    j["version"] = header.version;
    j["width"] = header.width;
    j["height"] = header.height;
    j["channels"] = header.channels;
    j["gop"] = header.gop;
    j["class_id"] = header.class_id;
    j["num_frames"] = header.num_frames;
    std::string out = j.dump();
    out.push_back('\n');

    const std::size_t plane = static_cast<std::size_t>(header.width) * header.height;
    for (const FramePacket& p : packets) {
        out.push_back(static_cast<char>(p.type));
        if (p.image.shape != std::vector<int>{header.channels, header.height, header.width}) {
            throw ShapeError("packet image shape " + shape_str(p.image.shape) + " vs header");
        }
        for (float v : p.image.data) {
            if (v < 0.f || v > 255.f || v != std::floor(v)) {
                throw FormatError("image plane value " + std::to_string(v) + " not an 8-bit integer");
            }
            out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
        }
        put_u32(out, static_cast<std::uint32_t>(p.partition.blocks.size()));
        for (const Block& b : p.partition.blocks) {
            put_u16(out, static_cast<std::uint16_t>(b.x));
            put_u16(out, static_cast<std::uint16_t>(b.y));
            put_u16(out, static_cast<std::uint16_t>(b.side));
        }
        put_u32(out, static_cast<std::uint32_t>(p.block_mvs.size()));
        for (const BlockMv& b : p.block_mvs) {
            put_u16(out, static_cast<std::uint16_t>(b.x));
            put_u16(out, static_cast<std::uint16_t>(b.y));
            put_u16(out, static_cast<std::uint16_t>(b.side));
            put_i16(out, static_cast<std::int16_t>(b.dx));
            put_i16(out, static_cast<std::int16_t>(b.dy));
        }
        if (p.residual.size() != plane) throw ShapeError("residual plane size mismatch");
        for (std::int16_t v : p.residual) put_i16(out, v);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open stream for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("stream write failed: " + path);
}

DecodedStream decode_stream(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open stream: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(bytes, path);

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(r.line("header"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad JSON header at byte offset 0: " + e.what());
    }
    if (!j.contains("magic") || j["magic"] != kStreamMagic) {
        throw FormatError(path + ": bad container magic at byte offset 0");
    }
    DecodedStream out;
    StreamHeader& h = out.header;
    h.version = j.value("version", 0);
    if (h.version != 1) throw FormatError(path + ": unsupported container version " + std::to_string(h.version));
    h.width = j.value("width", 0);
    h.height = j.value("height", 0);
    h.channels = j.value("channels", 1);
    h.gop = j.value("gop", 12);
    h.class_id = j.value("class_id", 0);
    h.num_frames = j.value("num_frames", 0);
    if (h.width <= 0 || h.height <= 0 || h.channels <= 0 || h.num_frames < 0 || h.gop <= 0) {
        throw FormatError(path + ": invalid header dimensions");
    }

    const std::size_t plane = static_cast<std::size_t>(h.width) * h.height;
    out.packets.reserve(static_cast<std::size_t>(h.num_frames));
    for (int fi = 0; fi < h.num_frames; ++fi) {
        const std::size_t frame_off = r.offset();
        FramePacket p;
        p.index = fi;
        const std::uint8_t type = r.u8("frame type");
        if (type > 1) {
            throw FormatError(path + ": frame " + std::to_string(fi) + ": unknown frame type at byte offset " +
                              std::to_string(frame_off));
        }
        p.type = static_cast<FrameType>(type);
        p.image = Tensor({h.channels, h.height, h.width});
        {
            const char* raw = r.raw(plane * static_cast<std::size_t>(h.channels), "image plane");
            for (std::size_t i = 0; i < p.image.size(); ++i) {
                p.image.data[i] = static_cast<float>(static_cast<std::uint8_t>(raw[i]));
            }
        }
        p.partition.width = h.width;
        p.partition.height = h.height;
        const std::uint32_t nblocks = r.u32("partition block count");
        p.partition.blocks.reserve(nblocks);
        for (std::uint32_t i = 0; i < nblocks; ++i) {
            Block b;
            b.x = r.u16("block x");
            b.y = r.u16("block y");
            b.side = r.u16("block side");
            p.partition.blocks.push_back(b);
        }
        try {
            p.partition.validate(kMinBlockSide, kMaxBlockSide);
        } catch (const FormatError& e) {
            throw FormatError(path + ": frame " + std::to_string(fi) + " at byte offset " +
                              std::to_string(frame_off) + ": " + e.what());
        }
        const std::uint32_t nmv = r.u32("mv block count");
        p.block_mvs.reserve(nmv);
        for (std::uint32_t i = 0; i < nmv; ++i) {
            BlockMv b;
            b.x = r.u16("mv x");
            b.y = r.u16("mv y");
            b.side = r.u16("mv side");
            b.dx = r.i16("mv dx");
            b.dy = r.i16("mv dy");
            p.block_mvs.push_back(b);
        }
        p.residual.resize(plane);
        for (std::size_t i = 0; i < plane; ++i) p.residual[i] = r.i16("residual");
        if (p.type == FrameType::I) {
            for (const BlockMv& b : p.block_mvs) {
                if (b.dx != 0 || b.dy != 0) {
                    throw FormatError(path + ": frame " + std::to_string(fi) +
                                      ": I-frame carries nonzero motion at byte offset " +
                                      std::to_string(frame_off));
                }
            }
            for (std::int16_t v : p.residual) {
                if (v != 0) {
                    throw FormatError(path + ": frame " + std::to_string(fi) +
                                      ": I-frame carries nonzero residual at byte offset " +
                                      std::to_string(frame_off));
                }
            }
        }
        out.packets.push_back(std::move(p));
    }
    if (!r.at_end()) {
        throw FormatError(path + ": trailing bytes at byte offset " + std::to_string(r.offset()));
    }
    return out;
}

}  // namespace oar
