#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rot {

struct RasterError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class RenderMode { single_line, fixed_square };

struct RenderConfig {
    // font 28 on a 32 px strip gives a 24 px advance, so the default 48 px
    // patches hold exactly two glyphs at a fixed phase (padding 0 keeps the
    // first glyph aligned too); drifting glyph/patch alignment is unreadable
    // for a small encoder
    int image_height_px = 32;
    int padding_px = 0;
    int font_px = 28;
    RenderMode mode = RenderMode::single_line;
    int square_side_px = 256;  // fixed_square only
    uint8_t foreground = 0;
    uint8_t background = 255;
    int max_width_px = 1 << 15;  // single_line overflow guard

    void validate() const;
};

struct RenderedStrip {
    int width_px = 0;
    int height_px = 0;
    std::vector<uint8_t> pixels;  // row-major, width*height
    int substitutions = 0;        // characters outside the glyph set
    int truncated_chars = 0;      // fixed_square overflow

    uint8_t at(int x, int y) const { return pixels[size_t(y) * width_px + x]; }
};

// Full-height column blocks, strictly left to right. Patch i covers pixel
// columns [i*patch_width, (i+1)*patch_width); the final patch is right-padded
// with background.
struct PatchSequence {
    int K = 0;
    int patch_width_px = 0;
    int patch_height_px = 0;
    int source_width_px = 0;
    std::vector<std::vector<uint8_t>> patches;  // each row-major, w*h
};

// Layout width of text under the config (single_line only). Unknown
// characters count with the substitution glyph's advance; *substitutions
// reports how many were hit.
int compute_width(const std::string& text, const RenderConfig& cfg,
                  int* substitutions = nullptr);

RenderedStrip render(const std::string& text, const RenderConfig& cfg);

PatchSequence patchify(const RenderedStrip& strip, int patch_width_px);

// Inverse of patchify: concatenate patches and trim right padding.
RenderedStrip reconstruct(const PatchSequence& seq);

// Binary (P5) portable graymap, bit-exact round trip.
void save_pgm(const RenderedStrip& strip, const std::string& path);
RenderedStrip load_pgm(const std::string& path);

}  // namespace rot
