#include "rot/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rot {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

std::string shape_str(const std::vector<int>& shape) {
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(shape[i]);
    }
    return s;
}

std::vector<int> parse_shape(const std::string& s) {
    std::vector<int> shape;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) shape.push_back(std::stoi(tok));
    if (shape.empty()) throw CheckpointError("empty shape field");
    return shape;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open for write: " + path);
    f << "rotckpt " << tensors.size() << "\n";
    size_t offset = 0;
    for (const auto& nt : tensors) {
        f << nt.name << " " << shape_str(nt.t.shape()) << " f32 " << offset << "\n";
        offset += nt.t.numel() * sizeof(float);
    }
    f << "\n";
    for (const auto& nt : tensors)
        f.write(reinterpret_cast<const char*>(nt.t.data().data()),
                std::streamsize(nt.t.numel() * sizeof(float)));
    if (!f) throw CheckpointError("write failed: " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open: " + path);
    std::string magic;
    size_t count = 0;
    f >> magic >> count;
    if (magic != "rotckpt") throw CheckpointError("bad magic in " + path);
    std::string line;
    std::getline(f, line);  // rest of header line
    struct Entry {
        std::string name;
        std::vector<int> shape;
        size_t offset;
    };
    std::vector<Entry> entries;
    for (size_t i = 0; i < count; ++i) {
        if (!std::getline(f, line)) throw CheckpointError("truncated header in " + path);
        std::stringstream ss(line);
        std::string name, shape, dtype;
        size_t off;
        if (!(ss >> name >> shape >> dtype >> off))
            throw CheckpointError("malformed header line in " + path);
        if (dtype != "f32") throw CheckpointError("unsupported dtype: " + dtype);
        entries.push_back({name, parse_shape(shape), off});
    }
    if (!std::getline(f, line) || !line.empty())
        throw CheckpointError("missing header separator in " + path);
    const std::streampos payload_start = f.tellg();
    std::vector<NamedTensor> out;
    for (const auto& e : entries) {
        Tensor t = Tensor::leaf(e.shape);
        f.seekg(payload_start + std::streamoff(e.offset));
        f.read(reinterpret_cast<char*>(t.data().data()),
               std::streamsize(t.numel() * sizeof(float)));
        if (!f) throw CheckpointError("truncated payload in " + path);
        out.push_back({e.name, t});
    }
    return out;
}

void load_checkpoint_into(const std::string& path, std::vector<NamedTensor>& dst) {
    auto loaded = load_checkpoint(path);
    for (auto& d : dst) {
        bool found = false;
        for (auto& l : loaded) {
            if (l.name != d.name) continue;
            if (l.t.shape() != d.t.shape())
                throw CheckpointError("shape mismatch for " + d.name + " in " + path);
            d.t.data() = l.t.data();
            found = true;
            break;
        }
        if (!found) throw CheckpointError("missing tensor " + d.name + " in " + path);
    }
}

uint64_t content_hash(const std::vector<NamedTensor>& tensors) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& nt : tensors) {
        mix(nt.name.data(), nt.name.size());
        mix(nt.t.data().data(), nt.t.numel() * sizeof(float));
    }
    return h;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open: " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (f.read(buf, sizeof buf) || f.gcount() > 0) {
        const auto n = size_t(f.gcount());
        for (size_t i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!f) break;
    }
    return h;
}

}  // namespace rot
