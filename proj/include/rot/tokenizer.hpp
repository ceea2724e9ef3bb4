#pragma once

#include <string>
#include <vector>

namespace rot {

// Character-level tokenizer over a fixed alphabet: '\n' plus the printable
// 7-bit range, followed by the two special control tokens. Ids are stable by
// construction, so no learned state is involved.
class Tokenizer {
public:
    static constexpr int kBaseVocab = 96;  // '\n' + ASCII 32..126

    int vocab_size() const { return kBaseVocab + 2; }
    int img_begin_id() const { return kBaseVocab; }
    int img_end_id() const { return kBaseVocab + 1; }

    // -1 for characters outside the alphabet
    int encode_char(char c) const;
    char decode_char(int id) const;  // base ids only

    // Unknown characters map to '?' (mirrors the rasterizer's substitution
    // policy so text and pixels stay in sync).
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    // One token per line: "<id>\t<printable name>".
    void save_manifest(const std::string& path) const;
};

}  // namespace rot
