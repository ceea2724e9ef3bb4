#include "rot/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace rot {

int argmax_row(const std::vector<float>& v) {
    if (v.empty()) throw InferError("argmax_row: empty row");
    int best = 0;
    for (int i = 1; i < int(v.size()); ++i)
        if (v[size_t(i)] > v[size_t(best)]) best = i;
    return best;
}

namespace {

// greedy token after one hidden row; the tie-break is argmax_row's
int greedy_token(ModelBundle& mb, const Tensor& h_row) {
    Tensor logits = mb.backbone.logits_from_hidden(h_row);
    return argmax_row(logits.data());
}

std::vector<float> softmax_row(const std::vector<float>& logits, float temperature) {
    std::vector<float> p(logits.size());
    double mx = -1e30;
    for (float v : logits) mx = std::max(mx, double(v) / double(temperature));
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = float(std::exp(double(logits[i]) / double(temperature) - mx));
        z += double(p[i]);
    }
    for (float& v : p) v = float(double(v) / z);
    return p;
}

}  // namespace

bool detect_termination(ModelBundle& mb, const Tensor& h_row) {
    NoGradScope ng;
    return greedy_token(mb, h_row) == mb.backbone.img_end_id();
}

Rollout latent_rollout(ModelBundle& mb, const Tokenizer& tok, const std::string& question,
                       const RolloutStrategy& strategy) {
    if (strategy.mode == RolloutStrategy::kStatic && strategy.budget < 1)
        throw InferError("latent_rollout: static budget must be >= 1");
    if (strategy.mode == RolloutStrategy::kDynamic && strategy.k_max < 1)
        throw InferError("latent_rollout: dynamic cap must be >= 1");
    NoGradScope ng;
    Rollout roll;
    roll.trace.mode = strategy.mode;
    if (strategy.mode == RolloutStrategy::kStatic) roll.trace.budget = strategy.budget;

    std::vector<int> head_ids = tok.encode("Q:" + question);
    head_ids.push_back(mb.backbone.img_begin_id());
    const int P = int(head_ids.size()) - 1;
    Tensor h = mb.backbone.forward_incremental(mb.backbone.embed_ids(head_ids), roll.state);
    roll.h_last = slice_rows(h, P, 1);

    const int limit = strategy.mode == RolloutStrategy::kStatic ? strategy.budget : strategy.k_max;
    for (int t = 1; t <= limit; ++t) {
        if (roll.state.length + 1 > mb.cfg.context)
            throw InferError("latent_rollout: context window exhausted at step " +
                             std::to_string(t));
        Tensor vhat = mb.head.forward(roll.h_last);
        if (!all_finite(vhat.data()))
            throw InferError("latent_rollout: non-finite latent at step " + std::to_string(t));
        roll.trace.vhat.push_back(vhat.data());
        roll.h_last = mb.backbone.forward_incremental(mb.adapt(vhat), roll.state);
        const int tid = greedy_token(mb, roll.h_last);
        roll.trace.step_argmax.push_back(tid);
        if (strategy.mode == RolloutStrategy::kDynamic && tid == mb.backbone.img_end_id()) {
            roll.trace.t_end = t;
            break;
        }
    }
    roll.trace.t_lat = int(roll.trace.vhat.size());
    if (strategy.mode == RolloutStrategy::kDynamic && roll.trace.t_end == 0)
        roll.trace.truncated = true;
    return roll;
}

int sample_nucleus(const std::vector<float>& probs, float top_p, Rng& rng) {
    if (probs.empty()) throw InferError("sample_nucleus: empty distribution");
    if (!(top_p > 0.0f && top_p <= 1.0f)) throw InferError("sample_nucleus: top_p out of range");
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[size_t(a)] > probs[size_t(b)]; });
    // smallest sorted prefix reaching top_p; the top token is always in
    size_t keep = 0;
    double mass = 0.0;
    while (keep < order.size()) {
        mass += double(probs[size_t(order[keep])]);
        ++keep;
        if (mass >= double(top_p)) break;
    }
    double u = rng.next_double() * mass;
    double acc = 0.0;
    for (size_t i = 0; i < keep; ++i) {
        acc += double(probs[size_t(order[i])]);
        if (u < acc) return order[i];
    }
    return order[keep - 1];
}

std::string decode_answer(ModelBundle& mb, const Tokenizer& tok, Rollout& roll,
                          const SamplingConfig& sampling) {
    if (!(sampling.temperature > 0.0f)) throw InferError("decode_answer: temperature must be > 0");
    NoGradScope ng;
    Rng rng(sampling.seed);
    // the transition token: generated in dynamic mode, manually appended in
    // static mode — either way the answer starts from the state after it
    std::vector<int> next = {mb.backbone.img_end_id()};
    std::string out;
    const int eos = tok.encode_char('\n');
    for (int t = 0; t < sampling.max_tokens; ++t) {
        if (roll.state.length + 1 > mb.cfg.context)
            throw InferError("decode_answer: context window exhausted");
        Tensor h = mb.backbone.forward_incremental(mb.backbone.embed_ids(next), roll.state);
        Tensor logits = mb.backbone.logits_from_hidden(h);
        std::vector<float> p = softmax_row(logits.data(), sampling.temperature);
        const int tid = sample_nucleus(p, sampling.top_p, rng);
        if (tid >= Tokenizer::kBaseVocab) break;  // specials end the answer
        out.push_back(tok.decode_char(tid));
        if (tid == eos) break;
        next = {tid};
    }
    return out;
}

TextGeneration generate_text(ModelBundle& mb, const Tokenizer& tok, const std::string& prompt,
                             const SamplingConfig& sampling) {
    if (!(sampling.temperature > 0.0f)) throw InferError("generate_text: temperature must be > 0");
    const auto t0 = std::chrono::steady_clock::now();
    NoGradScope ng;
    Rng rng(sampling.seed);
    DecodeState st;
    std::vector<int> next = tok.encode(prompt);
    if (next.empty()) throw InferError("generate_text: empty prompt");
    TextGeneration res;
    const int eos = tok.encode_char('\n');
    for (int t = 0; t < sampling.max_tokens; ++t) {
        if (st.length + int(next.size()) > mb.cfg.context)
            throw InferError("generate_text: context window exhausted");
        Tensor h = mb.backbone.forward_incremental(mb.backbone.embed_ids(next), st);
        Tensor logits = mb.backbone.logits_from_hidden(slice_rows(h, h.rows() - 1, 1));
        std::vector<float> p = softmax_row(logits.data(), sampling.temperature);
        const int tid = sample_nucleus(p, sampling.top_p, rng);
        if (tid >= Tokenizer::kBaseVocab) break;
        res.text.push_back(tok.decode_char(tid));
        if (tid == eos) break;
        next = {tid};
    }
    res.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

AnswerResult answer(ModelBundle& mb, const Tokenizer& tok, const std::string& question,
                    const RolloutStrategy& strategy, const SamplingConfig& sampling) {
    const auto t0 = std::chrono::steady_clock::now();
    Rollout roll = latent_rollout(mb, tok, question, strategy);
    AnswerResult res;
    res.text = decode_answer(mb, tok, roll, sampling);
    const auto t1 = std::chrono::steady_clock::now();
    res.trace = std::move(roll.trace);
    res.wallclock_s = std::chrono::duration<double>(t1 - t0).count();
    return res;
}

}  // namespace rot
