#pragma once

#include <string>
#include <vector>

#include "rot/optim.hpp"
#include "rot/raster.hpp"
#include "rot/tensor.hpp"
#include "rot/tokenizer.hpp"

namespace rot {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    // decoder backbone
    int vocab = Tokenizer::kBaseVocab;  // base text tokens; +2 specials on top
    int d_h = 128;
    int n_dec = 4;
    int n_heads = 4;
    int d_mlp = 256;
    int context = 512;
    // vision encoder
    int d_v = 64;
    int n_enc = 2;
    int enc_heads = 4;
    int enc_mlp = 128;
    int patch_pixels = 32 * 48;  // patch_width * strip height
    int k_max_enc = 128;         // positional table length
    // projection head
    int d_p = 256;
    std::string head_activation = "swiglu";  // swiglu | gelu | relu
    // LoRA
    int lora_r = 16;
    float lora_alpha = 32.0f;
    float lora_dropout = 0.05f;
};

// Dense layer, optionally with an additive low-rank (LoRA) delta:
// y = x.w (+ b) + (alpha/r) * dropout(x).a.b
struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]; undefined when bias-free
    Tensor lora_a, lora_b;
    float lora_scale = 0.0f;
    float lora_dropout = 0.0f;
    bool lora_attached = false;

    void init(int in, int out, bool bias, Rng& rng, float stddev = 0.02f);
    Tensor forward(const Tensor& x, bool training = false, Rng* drop_rng = nullptr) const;
    void attach_lora(int r, float alpha, float dropout, Rng& rng);
    void merge_lora();
};

struct AttnLayer {
    Linear q, k, v, o;
};

struct MlpLayer {
    Linear gate, val, out;  // SwiGLU
};

struct Block {
    AttnLayer attn;
    MlpLayer mlp;
};

// Per-layer key/value row caches for incremental decoding. The cached parts
// are live graph tensors, so stage-II BPTT flows through them; under a
// NoGradScope the same structure acts as a plain inference KV cache.
struct DecodeState {
    struct LayerCache {
        std::vector<Tensor> k_parts, v_parts;
    };
    std::vector<LayerCache> layers;
    int length = 0;
};

struct Backbone {
    ModelConfig cfg;
    Tensor tok_emb;      // [vocab, d_h]
    Tensor special_emb;  // [2, d_h]: img_begin, img_end
    Tensor pos_emb;      // [context, d_h]
    std::vector<Block> blocks;
    bool training = false;
    Rng drop_rng{0};

    int img_begin_id() const { return cfg.vocab; }
    int img_end_id() const { return cfg.vocab + 1; }
    int full_vocab() const { return cfg.vocab + 2; }

    void init(const ModelConfig& c, Rng& rng);
    // random direction scaled to an exact norm of sqrt(d_h)
    void init_special_tokens(uint64_t seed);

    // [vocab+2, d_h] table; a graph concat so grads split correctly
    Tensor full_embedding() const;
    Tensor embed_ids(const std::vector<int>& ids) const;

    // whole-sequence forward: final-norm hidden states (S, d_h)
    Tensor forward_hidden(const Tensor& x_embed);
    // incremental forward of the next rows; positions st.length..+rows-1
    Tensor forward_incremental(const Tensor& x_embed_rows, DecodeState& st);
    // tied head over base vocab + specials: (S, vocab+2)
    Tensor logits_from_hidden(const Tensor& h) const;

    void attach_lora(Rng& rng);
    void merge_lora();
    bool lora_attached() const;

    std::vector<NamedTensor> base_params();     // embeddings, pos, blocks
    std::vector<NamedTensor> special_params();  // the 2-row special table
    std::vector<NamedTensor> lora_params();
    void set_base_trainable(bool trainable);
};

struct VisionEncoder {
    ModelConfig cfg;
    Linear patch_embed;  // patch_pixels -> d_v
    Tensor pos_emb;      // [k_max_enc, d_v]
    std::vector<Block> blocks;

    void init(const ModelConfig& c, Rng& rng);
    // pixels normalized so background = 0, full ink = 1
    static std::vector<float> patch_to_floats(const std::vector<uint8_t>& patch);
    Tensor encode(const PatchSequence& patches);
    // rows: (K, patch_pixels) already normalized
    Tensor encode_rows(const Tensor& rows);
    std::vector<NamedTensor> params();
    void set_trainable(bool trainable);
};

struct ProjectionHead {
    ModelConfig cfg;
    Linear gate, val;  // d_h -> d_p
    Linear out;        // d_p -> d_v
    void init(const ModelConfig& c, Rng& rng);
    Tensor forward(const Tensor& h) const;  // rows (N, d_h) -> (N, d_v)
    std::vector<NamedTensor> params();
    void set_trainable(bool trainable);
};

// The full pipeline: backbone + frozen vision stack + projection head.
struct ModelBundle {
    ModelConfig cfg;
    Backbone backbone;
    VisionEncoder encoder;
    Linear adapter;       // d_v -> d_h, bias-free, frozen after Stage 0
    Tensor adapter_gain;  // [1, d_h] rms-norm gain; keeps adapted rows at
                          // token-embedding scale so attention over them
                          // does not saturate
    ProjectionHead head;

    void init(const ModelConfig& c, uint64_t seed);
    Tensor adapt(const Tensor& v_rows) const;  // (N, d_v) -> (N, d_h)
    void set_adapter_trainable(bool trainable);

    std::vector<NamedTensor> adapter_params();
    std::vector<NamedTensor> all_params();  // everything, prefixed names
    void save(const std::string& path);
    void load(const std::string& path);
};

// content hash of a parameter group (freeze-contract checks)
uint64_t params_hash(std::vector<NamedTensor> params);

}  // namespace rot
