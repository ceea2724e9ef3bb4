#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "rot/model.hpp"

using namespace rot;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab = 24;
    cfg.d_h = 32;
    cfg.n_dec = 2;
    cfg.n_heads = 4;
    cfg.d_mlp = 64;
    cfg.context = 64;
    cfg.d_v = 16;
    cfg.n_enc = 2;
    cfg.enc_heads = 2;
    cfg.enc_mlp = 32;
    cfg.patch_pixels = 24;
    cfg.k_max_enc = 32;
    cfg.d_p = 48;
    return cfg;
}

PatchSequence random_patches(int k, int pixels, Rng& rng) {
    PatchSequence seq;
    seq.K = k;
    seq.patch_width_px = pixels;
    seq.patch_height_px = 1;
    seq.source_width_px = k * pixels;
    seq.patches.resize(size_t(k));
    for (auto& p : seq.patches) {
        p.resize(size_t(pixels));
        for (auto& b : p) b = uint8_t(rng.next_below(256));
    }
    return seq;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST_CASE("forward is causal and single token gives one row") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 1);
    NoGradScope ng;

    std::vector<int> ids = {1, 2, 3, 4, 5, 6};
    Tensor h1 = mb.backbone.forward_hidden(mb.backbone.embed_ids(ids));
    std::vector<int> ids2 = {1, 2, 3, 4, 6, 5};  // permute the future
    Tensor h2 = mb.backbone.forward_hidden(mb.backbone.embed_ids(ids2));
    for (int t = 0; t < 4; ++t)
        for (int c = 0; c < cfg.d_h; ++c)
            CHECK(h1.data()[size_t(t) * cfg.d_h + c] == h2.data()[size_t(t) * cfg.d_h + c]);

    Tensor single = mb.backbone.forward_hidden(mb.backbone.embed_ids({7}));
    CHECK(single.rows() == 1);
}

TEST_CASE("tied head logits are embedding inner products") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 2);
    NoGradScope ng;
    Tensor h = mb.backbone.forward_hidden(mb.backbone.embed_ids({3, 9, 1}));
    Tensor logits = mb.backbone.logits_from_hidden(h);
    REQUIRE(logits.cols() == cfg.vocab + 2);
    Tensor table = mb.backbone.full_embedding();
    for (int t = 0; t < 3; ++t)
        for (int w = 0; w < cfg.vocab + 2; ++w) {
            double dot = 0;
            for (int c = 0; c < cfg.d_h; ++c)
                dot += double(h.data()[size_t(t) * cfg.d_h + c]) *
                       table.data()[size_t(w) * cfg.d_h + c];
            CHECK(logits.data()[size_t(t) * (cfg.vocab + 2) + w] ==
                  doctest::Approx(dot).epsilon(1e-5));
        }
}

TEST_CASE("context overflow raises") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 3);
    NoGradScope ng;
    std::vector<int> ids(size_t(cfg.context) + 1, 1);
    CHECK_THROWS_AS(mb.backbone.forward_hidden(mb.backbone.embed_ids(ids)), ModelError);
}

TEST_CASE("special tokens have exact norm sqrt(d_h) and are reproducible") {
    ModelConfig cfg = tiny_config();
    cfg.d_h = 64;
    ModelBundle mb;
    mb.init(cfg, 4);
    mb.backbone.init_special_tokens(99);
    const double target = std::sqrt(64.0);
    for (int row = 0; row < 2; ++row) {
        double ss = 0;
        for (int c = 0; c < 64; ++c) {
            const double v = mb.backbone.special_emb.data()[size_t(row) * 64 + c];
            ss += v * v;
        }
        CHECK(std::sqrt(ss) == doctest::Approx(target).epsilon(1e-4 / target));
    }
    CHECK(target == 8.0);

    ModelBundle mb2;
    mb2.init(cfg, 4);
    mb2.backbone.init_special_tokens(99);
    CHECK(mb2.backbone.special_emb.data() == mb.backbone.special_emb.data());
    // the two special rows differ from each other
    bool same = true;
    for (int c = 0; c < 64; ++c)
        same = same && mb.backbone.special_emb.data()[c] == mb.backbone.special_emb.data()[64 + c];
    CHECK(!same);
}

TEST_CASE("lora zero init is exact identity and training moves logits") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 5);
    std::vector<int> ids = {2, 8, 4, 11};
    std::vector<float> base_logits;
    {
        NoGradScope ng;
        base_logits =
            mb.backbone.logits_from_hidden(mb.backbone.forward_hidden(mb.backbone.embed_ids(ids)))
                .data();
    }
    Rng lrng(6);
    mb.backbone.attach_lora(lrng);
    CHECK(mb.backbone.lora_attached());
    CHECK_THROWS_AS(mb.backbone.attach_lora(lrng), ModelError);
    {
        NoGradScope ng;
        auto adapted =
            mb.backbone.logits_from_hidden(mb.backbone.forward_hidden(mb.backbone.embed_ids(ids)))
                .data();
        CHECK(max_abs_diff(base_logits, adapted) < 1e-6);
    }

    // one optimizer step on the lora params through a toy loss
    mb.backbone.set_base_trainable(false);
    auto lora = mb.backbone.lora_params();
    AdamW::Config oc;
    oc.lr = 1e-2f;
    AdamW opt(oc);
    {
        Tape tape;
        Tensor h = mb.backbone.forward_hidden(mb.backbone.embed_ids(ids));
        Tensor loss = mean_all(squared_difference(h, Tensor::leaf(h.shape())));
        tape.backward(loss);
    }
    opt.step(lora);
    AdamW::zero_grad(lora);
    {
        NoGradScope ng;
        auto moved =
            mb.backbone.logits_from_hidden(mb.backbone.forward_hidden(mb.backbone.embed_ids(ids)))
                .data();
        CHECK(max_abs_diff(base_logits, moved) > 1e-6);

        // merging folds the delta into the base weights
        std::vector<float> adapted = moved;
        mb.backbone.merge_lora();
        CHECK(!mb.backbone.lora_attached());
        auto merged =
            mb.backbone.logits_from_hidden(mb.backbone.forward_hidden(mb.backbone.embed_ids(ids)))
                .data();
        CHECK(max_abs_diff(adapted, merged) < 1e-4);
    }
}

TEST_CASE("base weights stay untouched while lora trains") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 12);
    Rng lrng(13);
    mb.backbone.attach_lora(lrng);
    mb.backbone.set_base_trainable(false);
    const uint64_t before = params_hash(mb.backbone.base_params());
    auto lora = mb.backbone.lora_params();
    AdamW opt;
    for (int step = 0; step < 3; ++step) {
        Tape tape;
        Tensor h = mb.backbone.forward_hidden(mb.backbone.embed_ids({1, 2, 3}));
        tape.backward(mean_all(squared_difference(h, Tensor::leaf(h.shape()))));
        opt.step(lora);
        AdamW::zero_grad(lora);
    }
    CHECK(params_hash(mb.backbone.base_params()) == before);
}

TEST_CASE("encoder shape law, determinism and position sensitivity") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 7);
    NoGradScope ng;
    Rng rng(8);
    PatchSequence seq = random_patches(6, cfg.patch_pixels, rng);
    Tensor v1 = mb.encoder.encode(seq);
    CHECK(v1.rows() == 6);
    CHECK(v1.cols() == cfg.d_v);
    Tensor v2 = mb.encoder.encode(seq);
    CHECK(v1.data() == v2.data());

    // swapping two patches changes at least those two output rows
    std::swap(seq.patches[2], seq.patches[4]);
    Tensor v3 = mb.encoder.encode(seq);
    auto row_diff = [&](const Tensor& a, const Tensor& b, int r) {
        double m = 0;
        for (int c = 0; c < cfg.d_v; ++c)
            m = std::max(m, std::fabs(double(a.data()[size_t(r) * cfg.d_v + c]) -
                                      b.data()[size_t(r) * cfg.d_v + c]));
        return m;
    };
    CHECK(row_diff(v1, v3, 2) > 1e-7);
    CHECK(row_diff(v1, v3, 4) > 1e-7);

    PatchSequence empty;
    empty.K = 0;
    CHECK_THROWS_AS(mb.encoder.encode(empty), ModelError);
}

TEST_CASE("frozen encoder receives no gradients") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 9);
    mb.encoder.set_trainable(false);
    Rng rng(10);
    PatchSequence seq = random_patches(4, cfg.patch_pixels, rng);
    Tape tape;
    Tensor v = mb.encoder.encode(seq);
    tape.backward(mean_all(v));
    for (auto& nt : mb.encoder.params()) CHECK(nt.t.grad().empty());
}

TEST_CASE("adapter is linear and bias free") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 11);
    NoGradScope ng;
    Tensor zero = Tensor::leaf({1, cfg.d_v});
    Tensor out = mb.adapt(zero);
    for (float v : out.data()) CHECK(v == 0.0f);

    Rng rng(12);
    Tensor a = Tensor::leaf({1, cfg.d_v});
    Tensor b = Tensor::leaf({1, cfg.d_v});
    fill_normal(a, rng, 1.0f);
    fill_normal(b, rng, 1.0f);
    std::vector<float> sum_data(size_t(cfg.d_v));
    for (int i = 0; i < cfg.d_v; ++i) sum_data[size_t(i)] = a.data()[size_t(i)] + b.data()[size_t(i)];
    Tensor s = Tensor::leaf({1, cfg.d_v}, sum_data);
    auto lhs = mb.adapt(s).data();
    auto fa = mb.adapt(a).data(), fb = mb.adapt(b).data();
    for (int i = 0; i < cfg.d_h; ++i)
        CHECK(lhs[size_t(i)] == doctest::Approx(fa[size_t(i)] + fb[size_t(i)]).epsilon(1e-5));
}

TEST_CASE("projection head zero input maps to zero at init") {
    for (const char* act : {"swiglu", "gelu", "relu"}) {
        ModelConfig cfg = tiny_config();
        cfg.head_activation = act;
        ModelBundle mb;
        mb.init(cfg, 13);
        NoGradScope ng;
        Tensor out = mb.head.forward(Tensor::leaf({1, cfg.d_h}));
        for (float v : out.data()) CHECK(v == 0.0f);
    }
}

TEST_CASE("projection head gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 14);
    Rng rng(15);
    // inflate the weights so the gradient w.r.t. h is well above the f32
    // rounding floor of the finite-difference probe
    for (auto& nt : mb.head.params()) fill_normal(nt.t, rng, 0.3f);
    Tensor h = Tensor::leaf({2, cfg.d_h}, true);
    fill_normal(h, rng, 0.5f);
    Tensor target = Tensor::leaf({2, cfg.d_v});
    fill_normal(target, rng, 0.5f);
    auto fn = [&] { return mean_all(squared_difference(mb.head.forward(h), target)); };
    auto rep = grad_check(fn, {{"h", h}}, 1e-3);
    CHECK(rep.passed);
}

TEST_CASE("relu head variant reproduces a hand computed case") {
    ModelConfig cfg = tiny_config();
    cfg.d_h = 2;
    cfg.d_p = 2;
    cfg.d_v = 2;
    cfg.head_activation = "relu";
    ProjectionHead head;
    Rng rng(16);
    head.init(cfg, rng);
    // identity weights, zero biases
    head.val.w.data() = {1, 0, 0, 1};
    head.out.w.data() = {1, 0, 0, 1};
    NoGradScope ng;
    Tensor x = Tensor::leaf({1, 2}, {1.5f, -3.0f});
    auto y = head.forward(x).data();
    CHECK(y[0] == 1.5f);
    CHECK(y[1] == 0.0f);
}

TEST_CASE("incremental forward equals whole sequence forward") {
    ModelConfig cfg = tiny_config();
    ModelBundle mb;
    mb.init(cfg, 17);
    NoGradScope ng;
    std::vector<int> ids = {5, 1, 9, 9, 2, 0, 7};
    Tensor full = mb.backbone.forward_hidden(mb.backbone.embed_ids(ids));

    DecodeState st;
    std::vector<float> inc;
    // feed a 3-token prefix, then one token at a time
    Tensor h = mb.backbone.forward_incremental(mb.backbone.embed_ids({5, 1, 9}), st);
    inc.insert(inc.end(), h.data().begin(), h.data().end());
    for (size_t t = 3; t < ids.size(); ++t) {
        Tensor ht = mb.backbone.forward_incremental(mb.backbone.embed_ids({ids[t]}), st);
        inc.insert(inc.end(), ht.data().begin(), ht.data().end());
    }
    REQUIRE(inc.size() == full.numel());
    CHECK(max_abs_diff(inc, full.data()) < 1e-5);
    CHECK(st.length == int(ids.size()));
}

TEST_CASE("bundle save load round trip preserves every parameter") {
    ModelConfig cfg = tiny_config();
    ModelBundle a, b;
    a.init(cfg, 18);
    b.init(cfg, 19);
    CHECK(params_hash(a.all_params()) != params_hash(b.all_params()));
    const std::string path = "model_test_bundle.bin";
    a.save(path);
    b.load(path);
    CHECK(params_hash(a.all_params()) == params_hash(b.all_params()));
    std::remove(path.c_str());
}
