#pragma once

#include <string>
#include <vector>

#include "rot/model.hpp"
#include "rot/raster.hpp"
#include "rot/taskgen.hpp"
#include "rot/tokenizer.hpp"

namespace rot {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- text protocol ---------------------------------------------------------
// One line per example: "Q:<question>R:<cot>A:<answer>\n". The latent
// pipeline replaces the "R:<cot>" segment with <|img_begin|> latents
// <|img_end|>; the no-CoT baseline drops it entirely. '\n' doubles as the
// end-of-answer token, '>' as the OCR transcription prompt.
inline constexpr char kOcrPrompt = '>';
std::string cot_text(const Example& ex);    // Q..R..A..\n
std::string nocot_text(const Example& ex);  // Q..A..\n
std::string prompt_text(const Example& ex);  // "Q:<question>"
std::string answer_text(const Example& ex);  // "A:<answer>\n"

// ---- data plumbing ---------------------------------------------------------

struct PipelineConfig {
    RenderConfig render;  // geometry for CoT strips
    int patch_width = 48;
};

// Everything a training step needs, with the frozen vision targets cached.
struct PreparedExample {
    std::vector<int> prompt_ids;  // "Q:<question>"
    std::vector<int> answer_ids;  // "A:<answer>\n"
    Tensor v;                     // (K, d_v) targets; detached constants
    int k = 0;                    // patch count after the k_max cap
    const Example* source = nullptr;
};

// Renders + encodes the CoT under a NoGradScope and caches V.
PreparedExample prepare_example(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                                const Example& ex, int k_max);
std::vector<PreparedExample> prepare_dataset(ModelBundle& mb, const Tokenizer& tok,
                                             const PipelineConfig& pc,
                                             const std::vector<Example>& examples, int k_max);

// ---- stage 0: text pretraining --------------------------------------------

struct PretrainConfig {
    int epochs = 3;
    int batch_size = 16;
    float lr = 1e-3f;
    float clip_norm = 1.0f;
    uint64_t seed = 0;
    int log_every = 50;
    bool verbose = false;
};

struct PretrainResult {
    double final_loss = 0.0;
    double val_perplexity = 0.0;  // held-out next-token ppl
    std::vector<double> loss_curve;  // per logged step
};

// Next-token training of the backbone over the plain text protocol.
PretrainResult pretrain_lm(ModelBundle& mb, const Tokenizer& tok,
                           const std::vector<Example>& train, const std::vector<Example>& val,
                           const PretrainConfig& cfg);

// ---- stage 0: OCR pretext (builds the frozen vision stack) -----------------

struct OcrConfig {
    int epochs = 2;
    int batch_size = 16;
    float lr = 1e-3f;
    float clip_norm = 1.0f;
    uint64_t seed = 0;
    double accuracy_gate = 0.95;  // abort below this on held-out strings
    double text_replay = 0.5;     // fraction of plain-text batches mixed in
    int max_chars = 40;           // strings longer than this are clipped
    bool verbose = false;
};

struct OcrResult {
    double val_token_accuracy = 0.0;
    double final_loss = 0.0;
};

// Joint encoder+adapter+backbone training on transcription of rendered
// strings; plain-text replay batches guard the LM skill. Caller freezes the
// vision stack afterwards.
OcrResult pretrain_vlm(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                       const std::vector<std::string>& train_strings,
                       const std::vector<std::string>& val_strings,
                       const std::vector<Example>& replay_text, const OcrConfig& cfg);
// held-out transcription accuracy (greedy decode, per-token)
double ocr_accuracy(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                    const std::vector<std::string>& strings);

// ---- stages I and II -------------------------------------------------------

struct StageConfig {
    int stage = 1;
    float lambda = 10.0f;  // stage I alignment weight
    int epochs = 1;        // paper: 1 for stage I, 2 for stage II
    int batch_size = 16;
    int k_max = 64;
    float lr = 1e-3f;
    float clip_norm = 1.0f;
    uint64_t seed = 0;
    int log_every = 20;
    std::string curve_csv;  // per-step loss curve (step,l_align,l_pred,l_total)
    bool verbose = false;
};

struct LossBreakdown {
    double l_align = 0.0;
    double l_pred = 0.0;
    double l_total = 0.0;
    double grad_norm = 0.0;
};

struct CurvePoint {
    int step = 0;
    double l_align = 0.0, l_pred = 0.0, l_total = 0.0;
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    double first100_mean_l_align = 0.0;
    double final_epoch_mean_l_align = 0.0;
    double final_epoch_mean_l_pred = 0.0;
};

// Teacher-forced visual alignment; builds the graph and (optionally)
// backpropagates. Only the projection head may be trainable.
LossBreakdown stage1_step(ModelBundle& mb, const std::vector<const PreparedExample*>& batch,
                          const StageConfig& cfg, bool do_backward);
// Self-feeding latent rollout with BPTT; LoRA + special embeddings train.
LossBreakdown stage2_step(ModelBundle& mb, const std::vector<const PreparedExample*>& batch,
                          const StageConfig& cfg, bool do_backward);

// Full loop with freeze-contract hash verification; throws TrainError on a
// violated freeze or non-finite loss.
TrainResult train_stage(ModelBundle& mb, const std::vector<PreparedExample>& dataset,
                        const StageConfig& cfg);

// ---- SFT baselines ---------------------------------------------------------

struct SftConfig {
    bool with_cot = true;
    int epochs = 1;
    int batch_size = 16;
    float lr = 1e-3f;
    float clip_norm = 1.0f;
    uint64_t seed = 0;
    bool verbose = false;
};

// LoRA fine-tune on the plain text protocol; loss on the completion after
// the question prompt.
double sft_train(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& train,
                 const SftConfig& cfg);

// mean next-token CE of the completion segment (diagnostic)
double text_perplexity(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& val,
                       bool with_cot);

}  // namespace rot
