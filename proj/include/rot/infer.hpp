#pragma once

#include <string>
#include <vector>

#include "rot/model.hpp"
#include "rot/tokenizer.hpp"

namespace rot {

struct InferError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// How the latent rollout decides to stop emitting v̂ rows.
struct RolloutStrategy {
    enum Mode { kStatic, kDynamic };
    Mode mode = kStatic;
    int budget = 32;   // static: exactly this many latent steps
    int k_max = 256;   // dynamic: hard cap when the model never terminates
};

struct SamplingConfig {
    float temperature = 1.0f;
    float top_p = 0.9f;
    int max_tokens = 48;  // answer length cap, in characters
    uint64_t seed = 0;
};

// Record of one latent rollout. step_argmax[t-1] is the greedy token after
// consuming v̂_t; in dynamic mode the first <|img_end|> there defines T_end.
struct LatentTrace {
    std::vector<std::vector<float>> vhat;  // t_lat rows of d_v
    int t_lat = 0;
    RolloutStrategy::Mode mode = RolloutStrategy::kStatic;
    int t_end = 0;   // dynamic: minimal terminating step; 0 if never reached
    int budget = 0;  // static
    std::vector<int> step_argmax;
    bool truncated = false;  // dynamic cap hit without termination
};

// Live continuation point: KV cache and last hidden row, so answer decoding
// costs one block-stack evaluation per character.
struct Rollout {
    LatentTrace trace;
    DecodeState state;
    Tensor h_last;
};

struct AnswerResult {
    std::string text;  // raw completion after <|img_end|>, e.g. "A:42\n"
    LatentTrace trace;
    double wallclock_s = 0.0;  // rollout + decode only
};

// index of the maximal element; ties break toward the lowest index
int argmax_row(const std::vector<float>& v);

// true iff <|img_end|> attains the maximal logit at this hidden row
bool detect_termination(ModelBundle& mb, const Tensor& h_row);

// Feeds "Q:<question>" + <|img_begin|>, then self-feeds v̂ through the
// adapter until the strategy stops it. Pure function of (params, question,
// strategy); sampling never enters the rollout.
Rollout latent_rollout(ModelBundle& mb, const Tokenizer& tok, const std::string& question,
                       const RolloutStrategy& strategy);

// One nucleus draw from a probability row: smallest prob-sorted prefix with
// mass >= top_p, renormalized. Exposed for the sampling oracle.
int sample_nucleus(const std::vector<float>& probs, float top_p, Rng& rng);

// Appends <|img_end|> to the finished rollout and samples characters until
// '\n' or max_tokens. Consumes the rollout's cache.
std::string decode_answer(ModelBundle& mb, const Tokenizer& tok, Rollout& roll,
                          const SamplingConfig& sampling);

// end-to-end: rollout + answer decode, timed
AnswerResult answer(ModelBundle& mb, const Tokenizer& tok, const std::string& question,
                    const RolloutStrategy& strategy, const SamplingConfig& sampling);

// Free-running text continuation of a prompt (the SFT baselines' inference
// path): nucleus-sampled characters until '\n' or max_tokens, timed.
struct TextGeneration {
    std::string text;
    double wallclock_s = 0.0;
};
TextGeneration generate_text(ModelBundle& mb, const Tokenizer& tok, const std::string& prompt,
                             const SamplingConfig& sampling);

}  // namespace rot
