#include "rot/tokenizer.hpp"

#include <fstream>
#include <stdexcept>

namespace rot {

int Tokenizer::encode_char(char c) const {
    if (c == '\n') return 0;
    if (c >= 32 && c <= 126) return 1 + (c - 32);
    return -1;
}

char Tokenizer::decode_char(int id) const {
    if (id == 0) return '\n';
    if (id >= 1 && id < kBaseVocab) return char(32 + id - 1);
    throw std::out_of_range("tokenizer: id " + std::to_string(id) + " is not a base token");
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
        int id = encode_char(c);
        if (id < 0) id = encode_char('?');
        ids.push_back(id);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == img_begin_id())
            out += "<|img_begin|>";
        else if (id == img_end_id())
            out += "<|img_end|>";
        else
            out.push_back(decode_char(id));
    }
    return out;
}

void Tokenizer::save_manifest(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("tokenizer: cannot write manifest " + path);
    for (int id = 0; id < kBaseVocab; ++id) {
        const char c = decode_char(id);
        out << id << '\t';
        if (c == '\n')
            out << "\\n";
        else if (c == ' ')
            out << "\\s";
        else
            out << c;
        out << '\n';
    }
    out << img_begin_id() << "\t<|img_begin|>\n";
    out << img_end_id() << "\t<|img_end|>\n";
}

}  // namespace rot
