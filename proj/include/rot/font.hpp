#pragma once

#include <cstdint>

namespace rot::font {

// Fixed 5x7 bitmap atlas for the printable 7-bit range, embedded at build
// time. Each glyph is 5 column bytes; bit r of a column is row r (top = 0).
inline constexpr int kBaseWidth = 5;
inline constexpr int kBaseHeight = 7;
inline constexpr int kBaseAdvance = 6;  // 5 columns + 1 spacing column
inline constexpr char kFirstChar = 32;
inline constexpr char kLastChar = 126;
inline constexpr char kSubstitute = '?';

bool has_glyph(char c);
// 5 column bytes; only valid for has_glyph(c).
const uint8_t* glyph_columns(char c);
// ink pixels at base resolution
int glyph_ink_count(char c);

// integer nearest-neighbor scaling rule shared by rendering and width math
inline int glyph_width(int font_px) { return font_px * kBaseWidth / kBaseHeight > 0 ? font_px * kBaseWidth / kBaseHeight : 1; }
inline int advance(int font_px) { return font_px * kBaseAdvance / kBaseHeight > 1 ? font_px * kBaseAdvance / kBaseHeight : 2; }

}  // namespace rot::font
