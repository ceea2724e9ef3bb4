#include "rot/model.hpp"

#include <cmath>

#include "rot/checkpoint.hpp"

namespace rot {

namespace {

void push_params(std::vector<NamedTensor>& out, const std::string& prefix, Linear& lin) {
    out.push_back({prefix + ".w", lin.w});
    if (lin.b.defined()) out.push_back({prefix + ".b", lin.b});
}

void push_block_params(std::vector<NamedTensor>& out, const std::string& prefix, Block& blk) {
    push_params(out, prefix + ".attn.q", blk.attn.q);
    push_params(out, prefix + ".attn.k", blk.attn.k);
    push_params(out, prefix + ".attn.v", blk.attn.v);
    push_params(out, prefix + ".attn.o", blk.attn.o);
    push_params(out, prefix + ".mlp.gate", blk.mlp.gate);
    push_params(out, prefix + ".mlp.val", blk.mlp.val);
    push_params(out, prefix + ".mlp.out", blk.mlp.out);
}

void init_block(Block& blk, int d, int d_mlp, Rng& rng) {
    blk.attn.q.init(d, d, false, rng);
    blk.attn.k.init(d, d, false, rng);
    blk.attn.v.init(d, d, false, rng);
    blk.attn.o.init(d, d, false, rng);
    blk.mlp.gate.init(d, d_mlp, false, rng);
    blk.mlp.val.init(d, d_mlp, false, rng);
    blk.mlp.out.init(d_mlp, d, false, rng);
}

Tensor block_forward(Block& blk, Tensor x, int n_heads, bool training, Rng* rng) {
    Tensor a = rms_normalize(x);
    Tensor q = blk.attn.q.forward(a, training, rng);
    Tensor k = blk.attn.k.forward(a, training, rng);
    Tensor v = blk.attn.v.forward(a, training, rng);
    Tensor att = causal_attention(q, k, v, n_heads);
    x = add(x, blk.attn.o.forward(att, training, rng));
    Tensor m = rms_normalize(x);
    Tensor h = mul(silu(blk.mlp.gate.forward(m, training, rng)), blk.mlp.val.forward(m, training, rng));
    return add(x, blk.mlp.out.forward(h, training, rng));
}

}  // namespace

// ---- Linear ----------------------------------------------------------------

void Linear::init(int in, int out, bool bias, Rng& rng, float stddev) {
    w = Tensor::leaf({in, out}, true);
    fill_normal(w, rng, stddev);
    if (bias) b = Tensor::leaf({out}, std::vector<float>(size_t(out), 0.0f), true);
}

Tensor Linear::forward(const Tensor& x, bool training, Rng* drop_rng) const {
    Tensor y = matmul(x, w);
    if (b.defined()) y = add(y, b);
    if (lora_attached) {
        Tensor xin = x;
        if (training && lora_dropout > 0.0f && drop_rng)
            xin = dropout(xin, lora_dropout, *drop_rng);
        y = add(y, scale(matmul(matmul(xin, lora_a), lora_b), lora_scale));
    }
    return y;
}

void Linear::attach_lora(int r, float alpha, float dropout_p, Rng& rng) {
    if (lora_attached) throw ModelError("lora already attached to this matrix");
    const int in = w.dim(0), out = w.dim(1);
    lora_a = Tensor::leaf({in, r}, true);
    fill_normal(lora_a, rng, 0.02f);
    lora_b = Tensor::leaf({r, out}, std::vector<float>(size_t(r) * out, 0.0f), true);
    lora_scale = alpha / float(r);
    lora_dropout = dropout_p;
    lora_attached = true;
}

void Linear::merge_lora() {
    if (!lora_attached) throw ModelError("merge_lora: no adapter attached");
    const int in = w.dim(0), out = w.dim(1), r = lora_a.dim(1);
    for (int i = 0; i < in; ++i)
        for (int j = 0; j < out; ++j) {
            double acc = 0.0;
            for (int t = 0; t < r; ++t)
                acc += double(lora_a.data()[size_t(i) * r + t]) * lora_b.data()[size_t(t) * out + j];
            w.data()[size_t(i) * out + j] += float(double(lora_scale) * acc);
        }
    lora_a = Tensor();
    lora_b = Tensor();
    lora_attached = false;
}

// ---- Backbone --------------------------------------------------------------

void Backbone::init(const ModelConfig& c, Rng& rng) {
    cfg = c;
    tok_emb = Tensor::leaf({cfg.vocab, cfg.d_h}, true);
    fill_normal(tok_emb, rng, 0.02f);
    special_emb = Tensor::leaf({2, cfg.d_h}, true);
    fill_normal(special_emb, rng, 0.02f);
    pos_emb = Tensor::leaf({cfg.context, cfg.d_h}, true);
    fill_normal(pos_emb, rng, 0.01f);
    blocks.resize(size_t(cfg.n_dec));
    for (auto& blk : blocks) init_block(blk, cfg.d_h, cfg.d_mlp, rng);
}

void Backbone::init_special_tokens(uint64_t seed) {
    Rng rng(seed);
    const double target = std::sqrt(double(cfg.d_h));
    for (int row = 0; row < 2; ++row) {
        std::vector<double> dir(size_t(cfg.d_h));
        double ss = 0.0;
        for (auto& v : dir) {
            v = rng.next_normal();
            ss += v * v;
        }
        const double k = target / std::sqrt(ss);
        for (int j = 0; j < cfg.d_h; ++j)
            special_emb.data()[size_t(row) * cfg.d_h + j] = float(dir[size_t(j)] * k);
    }
}

Tensor Backbone::full_embedding() const { return concat_rows({tok_emb, special_emb}); }

Tensor Backbone::embed_ids(const std::vector<int>& ids) const {
    for (int id : ids)
        if (id < 0 || id >= full_vocab()) throw ModelError("embed_ids: token id out of range");
    return gather_rows(full_embedding(), ids);
}

Tensor Backbone::forward_hidden(const Tensor& x_embed) {
    const int s = x_embed.rows();
    if (s > cfg.context) throw ModelError("forward_hidden: context overflow");
    Tensor x = add(x_embed, slice_rows(pos_emb, 0, s));
    for (auto& blk : blocks) x = block_forward(blk, x, cfg.n_heads, training, &drop_rng);
    return rms_normalize(x);
}

Tensor Backbone::forward_incremental(const Tensor& x_embed_rows, DecodeState& st) {
    if (st.layers.empty()) st.layers.resize(blocks.size());
    if (st.layers.size() != blocks.size())
        throw ModelError("forward_incremental: cache layer count mismatch");
    const int m = x_embed_rows.rows();
    const int off = st.length;
    if (off + m > cfg.context) throw ModelError("forward_incremental: context overflow");
    Tensor x = add(x_embed_rows, slice_rows(pos_emb, off, m));
    for (size_t li = 0; li < blocks.size(); ++li) {
        Block& blk = blocks[li];
        auto& cache = st.layers[li];
        Tensor a = rms_normalize(x);
        Tensor q = blk.attn.q.forward(a, training, &drop_rng);
        cache.k_parts.push_back(blk.attn.k.forward(a, training, &drop_rng));
        cache.v_parts.push_back(blk.attn.v.forward(a, training, &drop_rng));
        Tensor kc = cache.k_parts.size() == 1 ? cache.k_parts[0] : concat_rows(cache.k_parts);
        Tensor vc = cache.v_parts.size() == 1 ? cache.v_parts[0] : concat_rows(cache.v_parts);
        Tensor att = attention_with_offset(q, kc, vc, cfg.n_heads, off);
        x = add(x, blk.attn.o.forward(att, training, &drop_rng));
        Tensor mn = rms_normalize(x);
        Tensor h =
            mul(silu(blk.mlp.gate.forward(mn, training, &drop_rng)),
                blk.mlp.val.forward(mn, training, &drop_rng));
        x = add(x, blk.mlp.out.forward(h, training, &drop_rng));
    }
    st.length += m;
    return rms_normalize(x);
}

Tensor Backbone::logits_from_hidden(const Tensor& h) const {
    return matmul_nt(h, full_embedding());
}

void Backbone::attach_lora(Rng& rng) {
    for (auto& blk : blocks) {
        blk.attn.q.attach_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, rng);
        blk.attn.k.attach_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, rng);
        blk.attn.v.attach_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, rng);
        blk.attn.o.attach_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, rng);
    }
}

void Backbone::merge_lora() {
    for (auto& blk : blocks) {
        blk.attn.q.merge_lora();
        blk.attn.k.merge_lora();
        blk.attn.v.merge_lora();
        blk.attn.o.merge_lora();
    }
}

bool Backbone::lora_attached() const {
    return !blocks.empty() && blocks.front().attn.q.lora_attached;
}

std::vector<NamedTensor> Backbone::base_params() {
    std::vector<NamedTensor> out;
    out.push_back({"backbone.tok_emb", tok_emb});
    out.push_back({"backbone.pos_emb", pos_emb});
    for (size_t i = 0; i < blocks.size(); ++i)
        push_block_params(out, "backbone.blocks." + std::to_string(i), blocks[i]);
    return out;
}

std::vector<NamedTensor> Backbone::special_params() {
    return {{"backbone.special_emb", special_emb}};
}

std::vector<NamedTensor> Backbone::lora_params() {
    std::vector<NamedTensor> out;
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "backbone.blocks." + std::to_string(i) + ".attn.";
        Linear* lins[] = {&blocks[i].attn.q, &blocks[i].attn.k, &blocks[i].attn.v,
                          &blocks[i].attn.o};
        const char* names[] = {"q", "k", "v", "o"};
        for (int t = 0; t < 4; ++t) {
            if (!lins[t]->lora_attached) continue;
            out.push_back({p + names[t] + ".lora_a", lins[t]->lora_a});
            out.push_back({p + names[t] + ".lora_b", lins[t]->lora_b});
        }
    }
    return out;
}

void Backbone::set_base_trainable(bool trainable) {
    for (auto& nt : base_params()) nt.t.set_requires_grad(trainable);
}

// ---- VisionEncoder ---------------------------------------------------------

void VisionEncoder::init(const ModelConfig& c, Rng& rng) {
    cfg = c;
    patch_embed.init(cfg.patch_pixels, cfg.d_v, true, rng);
    pos_emb = Tensor::leaf({cfg.k_max_enc, cfg.d_v}, true);
    fill_normal(pos_emb, rng, 0.01f);
    blocks.resize(size_t(cfg.n_enc));
    for (auto& blk : blocks) init_block(blk, cfg.d_v, cfg.enc_mlp, rng);
}

std::vector<float> VisionEncoder::patch_to_floats(const std::vector<uint8_t>& patch) {
    std::vector<float> out(patch.size());
    for (size_t i = 0; i < patch.size(); ++i) out[i] = float(255 - patch[i]) / 255.0f;
    return out;
}

Tensor VisionEncoder::encode(const PatchSequence& patches) {
    if (patches.K == 0) throw ModelError("encode: empty patch sequence");
    std::vector<float> rows;
    rows.reserve(size_t(patches.K) * size_t(cfg.patch_pixels));
    for (const auto& p : patches.patches) {
        if (int(p.size()) != cfg.patch_pixels)
            throw ModelError("encode: patch pixel count mismatch (got " +
                             std::to_string(p.size()) + ", want " +
                             std::to_string(cfg.patch_pixels) + ")");
        const auto f = patch_to_floats(p);
        rows.insert(rows.end(), f.begin(), f.end());
    }
    return encode_rows(Tensor::leaf({patches.K, cfg.patch_pixels}, rows, false));
}

Tensor VisionEncoder::encode_rows(const Tensor& rows) {
    const int k = rows.rows();
    if (k > cfg.k_max_enc) throw ModelError("encode: K exceeds positional table");
    Tensor x = patch_embed.forward(rows);
    x = add(x, slice_rows(pos_emb, 0, k));
    for (auto& blk : blocks) x = block_forward(blk, x, cfg.enc_heads, false, nullptr);
    return rms_normalize(x);
}

std::vector<NamedTensor> VisionEncoder::params() {
    std::vector<NamedTensor> out;
    push_params(out, "encoder.patch_embed", patch_embed);
    out.push_back({"encoder.pos_emb", pos_emb});
    for (size_t i = 0; i < blocks.size(); ++i)
        push_block_params(out, "encoder.blocks." + std::to_string(i), blocks[i]);
    return out;
}

void VisionEncoder::set_trainable(bool trainable) {
    for (auto& nt : params()) nt.t.set_requires_grad(trainable);
}

// ---- ProjectionHead --------------------------------------------------------

void ProjectionHead::init(const ModelConfig& c, Rng& rng) {
    cfg = c;
    gate.init(cfg.d_h, cfg.d_p, true, rng);
    val.init(cfg.d_h, cfg.d_p, true, rng);
    out.init(cfg.d_p, cfg.d_v, true, rng);
}

Tensor ProjectionHead::forward(const Tensor& h) const {
    Tensor hidden;
    if (cfg.head_activation == "swiglu") {
        hidden = mul(silu(gate.forward(h)), val.forward(h));
    } else if (cfg.head_activation == "gelu") {
        Tensor g = val.forward(h);
        hidden = mul(g, sigmoid(scale(g, 1.702f)));  // tanh-free gelu approximation
    } else if (cfg.head_activation == "relu") {
        hidden = relu(val.forward(h));
    } else {
        throw ModelError("unknown head activation: " + cfg.head_activation);
    }
    return out.forward(hidden);
}

std::vector<NamedTensor> ProjectionHead::params() {
    std::vector<NamedTensor> p;
    push_params(p, "head.gate", gate);
    push_params(p, "head.val", val);
    push_params(p, "head.out", out);
    return p;
}

void ProjectionHead::set_trainable(bool trainable) {
    for (auto& nt : params()) nt.t.set_requires_grad(trainable);
}

// ---- ModelBundle -----------------------------------------------------------

void ModelBundle::init(const ModelConfig& c, uint64_t seed) {
    cfg = c;
    Rng root(seed);
    Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3), r4 = root.fork(4);
    backbone.init(cfg, r1);
    encoder.init(cfg, r2);
    adapter.init(cfg.d_v, cfg.d_h, false, r3, 0.05f);
    adapter_gain = Tensor::leaf({1, cfg.d_h},
                                std::vector<float>(size_t(cfg.d_h), 0.02f), true);
    head.init(cfg, r4);
    backbone.init_special_tokens(seed ^ 0x5eC1a1);
    backbone.drop_rng = root.fork(5);
}

Tensor ModelBundle::adapt(const Tensor& v_rows) const {
    return mul(rms_normalize(adapter.forward(v_rows)), adapter_gain);
}

void ModelBundle::set_adapter_trainable(bool trainable) {
    adapter.w.set_requires_grad(trainable);
    adapter_gain.set_requires_grad(trainable);
}

std::vector<NamedTensor> ModelBundle::adapter_params() {
    return {{"adapter.w", adapter.w}, {"adapter.gain", adapter_gain}};
}

std::vector<NamedTensor> ModelBundle::all_params() {
    std::vector<NamedTensor> out;
    for (auto f : {&Backbone::base_params, &Backbone::special_params, &Backbone::lora_params})
        for (auto& nt : (backbone.*f)()) out.push_back(nt);
    for (auto& nt : encoder.params()) out.push_back(nt);
    for (auto& nt : adapter_params()) out.push_back(nt);
    for (auto& nt : head.params()) out.push_back(nt);
    return out;
}

void ModelBundle::save(const std::string& path) { save_checkpoint(path, all_params()); }

void ModelBundle::load(const std::string& path) {
    auto params = all_params();
    load_checkpoint_into(path, params);
}

uint64_t params_hash(std::vector<NamedTensor> params) { return content_hash(params); }

}  // namespace rot
