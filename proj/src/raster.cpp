#include "rot/raster.hpp"

#include <fstream>

#include "rot/font.hpp"

namespace rot {

namespace {

void draw_glyph(RenderedStrip& strip, char c, int x0, int y0, const RenderConfig& cfg) {
    const uint8_t* cols = font::glyph_columns(c);
    const int gw = font::glyph_width(cfg.font_px);
    for (int ty = 0; ty < cfg.font_px; ++ty) {
        const int sr = ty * font::kBaseHeight / cfg.font_px;
        for (int tx = 0; tx < gw; ++tx) {
            const int sc = tx * font::kBaseWidth / gw;
            if ((cols[sc] >> sr) & 1) {
                const int x = x0 + tx, y = y0 + ty;
                if (x >= 0 && x < strip.width_px && y >= 0 && y < strip.height_px)
                    strip.pixels[size_t(y) * strip.width_px + x] = cfg.foreground;
            }
        }
    }
}

char substitute(char c, int& count) {
    if (font::has_glyph(c)) return c;
    ++count;
    return font::kSubstitute;
}

}  // namespace

void RenderConfig::validate() const {
    if (image_height_px <= 0 || padding_px < 0 || font_px <= 0 || square_side_px <= 0 ||
        max_width_px <= 0)
        throw RasterError("render config: all extents must be positive");
    if (mode == RenderMode::single_line && font_px + 2 * padding_px > image_height_px)
        throw RasterError("render config: font_px + 2*padding_px exceeds image height");
}

int compute_width(const std::string& text, const RenderConfig& cfg, int* substitutions) {
    cfg.validate();
    if (cfg.mode != RenderMode::single_line)
        throw RasterError("compute_width: single_line mode only");
    if (text.empty()) throw RasterError("compute_width: empty text");
    int subs = 0;
    const int adv = font::advance(cfg.font_px);
    long long w = 2LL * cfg.padding_px;
    for (char c : text) {
        substitute(c, subs);
        w += adv;
    }
    if (substitutions) *substitutions = subs;
    if (w > (1LL << 30)) throw RasterError("compute_width: width overflow");
    return int(w);
}

RenderedStrip render(const std::string& text, const RenderConfig& cfg) {
    cfg.validate();
    RenderedStrip strip;

    if (cfg.mode == RenderMode::single_line) {
        strip.width_px = compute_width(text, cfg, &strip.substitutions);
        if (strip.width_px > cfg.max_width_px)
            throw RasterError("render: text wider than max_width_px (" +
                              std::to_string(strip.width_px) + " > " +
                              std::to_string(cfg.max_width_px) + ")");
        strip.height_px = cfg.image_height_px;
        strip.pixels.assign(size_t(strip.width_px) * strip.height_px, cfg.background);
        const int y0 = cfg.padding_px + (cfg.image_height_px - 2 * cfg.padding_px - cfg.font_px) / 2;
        const int adv = font::advance(cfg.font_px);
        int x = cfg.padding_px;
        int ignored = 0;
        for (char c : text) {
            draw_glyph(strip, substitute(c, ignored), x, y0, cfg);
            x += adv;
        }
        return strip;
    }

    // fixed_square: wrap line by line, truncate on vertical overflow
    strip.width_px = strip.height_px = cfg.square_side_px;
    strip.pixels.assign(size_t(strip.width_px) * strip.height_px, cfg.background);
    const int adv = font::advance(cfg.font_px);
    const int line_h = cfg.font_px + 2;
    const int usable_w = cfg.square_side_px - 2 * cfg.padding_px;
    const int chars_per_line = usable_w > adv ? usable_w / adv : 1;
    int col = 0, y = cfg.padding_px;
    int ignored = 0;
    for (char c : text) {
        if (col == chars_per_line) {
            col = 0;
            y += line_h;
        }
        if (y + cfg.font_px > cfg.square_side_px - cfg.padding_px) {
            ++strip.truncated_chars;
            continue;
        }
        const char g = substitute(c, strip.substitutions);
        draw_glyph(strip, g, cfg.padding_px + col * adv, y, cfg);
        ++col;
    }
    return strip;
}

PatchSequence patchify(const RenderedStrip& strip, int patch_width_px) {
    if (patch_width_px <= 0) throw RasterError("patchify: patch width must be positive");
    if (strip.width_px <= 0 || strip.height_px <= 0 ||
        strip.pixels.size() != size_t(strip.width_px) * strip.height_px)
        throw RasterError("patchify: malformed strip");
    PatchSequence seq;
    seq.patch_width_px = patch_width_px;
    seq.patch_height_px = strip.height_px;
    seq.source_width_px = strip.width_px;
    seq.K = (strip.width_px + patch_width_px - 1) / patch_width_px;
    seq.patches.resize(size_t(seq.K));
    for (int i = 0; i < seq.K; ++i) {
        auto& patch = seq.patches[size_t(i)];
        patch.assign(size_t(patch_width_px) * strip.height_px, uint8_t(255));
        const int x0 = i * patch_width_px;
        for (int y = 0; y < strip.height_px; ++y)
            for (int dx = 0; dx < patch_width_px; ++dx) {
                const int x = x0 + dx;
                if (x < strip.width_px)
                    patch[size_t(y) * patch_width_px + dx] = strip.at(x, y);
            }
    }
    return seq;
}

RenderedStrip reconstruct(const PatchSequence& seq) {
    RenderedStrip strip;
    strip.width_px = seq.source_width_px;
    strip.height_px = seq.patch_height_px;
    strip.pixels.assign(size_t(strip.width_px) * strip.height_px, uint8_t(255));
    for (int i = 0; i < seq.K; ++i) {
        const auto& patch = seq.patches[size_t(i)];
        const int x0 = i * seq.patch_width_px;
        for (int y = 0; y < strip.height_px; ++y)
            for (int dx = 0; dx < seq.patch_width_px; ++dx) {
                const int x = x0 + dx;
                if (x < strip.width_px)
                    strip.pixels[size_t(y) * strip.width_px + x] =
                        patch[size_t(y) * seq.patch_width_px + dx];
            }
    }
    return strip;
}

void save_pgm(const RenderedStrip& strip, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RasterError("save_pgm: cannot open " + path);
    out << "P5\n" << strip.width_px << " " << strip.height_px << "\n255\n";
    out.write(reinterpret_cast<const char*>(strip.pixels.data()),
              std::streamsize(strip.pixels.size()));
    if (!out) throw RasterError("save_pgm: write failed for " + path);
}

RenderedStrip load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RasterError("load_pgm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
        throw RasterError("load_pgm: malformed header in " + path);
    in.get();  // single whitespace after maxval
    RenderedStrip strip;
    strip.width_px = w;
    strip.height_px = h;
    strip.pixels.resize(size_t(w) * h);
    in.read(reinterpret_cast<char*>(strip.pixels.data()), std::streamsize(strip.pixels.size()));
    if (in.gcount() != std::streamsize(strip.pixels.size()))
        throw RasterError("load_pgm: truncated payload in " + path);
    return strip;
}

}  // namespace rot
