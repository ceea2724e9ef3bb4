#include "rot/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "rot/checkpoint.hpp"

namespace rot {

// ---- text protocol ---------------------------------------------------------

std::string cot_text(const Example& ex) {
    return "Q:" + ex.question + "R:" + ex.cot + "A:" + std::to_string(ex.answer) + "\n";
}

std::string nocot_text(const Example& ex) {
    return "Q:" + ex.question + "A:" + std::to_string(ex.answer) + "\n";
}

std::string prompt_text(const Example& ex) { return "Q:" + ex.question; }

std::string answer_text(const Example& ex) { return "A:" + std::to_string(ex.answer) + "\n"; }

// ---- shared helpers --------------------------------------------------------

namespace {

// next-token CE over one tokenized line; loss counted from prediction row
// `loss_start_row` onward
Tensor sequence_ce(Backbone& bb, const std::vector<int>& ids, size_t loss_start_row) {
    if (ids.size() < 2) throw TrainError("sequence_ce: sequence too short");
    std::vector<int> inputs(ids.begin(), ids.end() - 1);
    std::vector<int> targets(ids.begin() + 1, ids.end());
    std::vector<float> mask(targets.size(), 1.0f);
    for (size_t i = 0; i < mask.size() && i < loss_start_row; ++i) mask[i] = 0.0f;
    Tensor h = bb.forward_hidden(bb.embed_ids(inputs));
    return cross_entropy_with_logits(bb.logits_from_hidden(h), targets, mask);
}

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_below(i)]);
    return idx;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

// OCR input embedding: adapted patch embeddings, the transcription prompt,
// then the teacher-forced string. Returns (X rows, targets, mask).
struct OcrSequence {
    Tensor x;
    std::vector<int> targets;
    std::vector<float> mask;
};

OcrSequence build_ocr_sequence(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                               const std::string& text) {
    RenderedStrip strip = render(text, pc.render);
    PatchSequence patches = patchify(strip, pc.patch_width);
    Tensor v = mb.encoder.encode(patches);
    Tensor adapted = mb.adapt(v);
    const int k = v.rows();

    std::vector<int> s_full = tok.encode(text + "\n");
    const int n = int(s_full.size());
    std::vector<int> tail_ids;
    tail_ids.push_back(tok.encode_char(kOcrPrompt));
    tail_ids.insert(tail_ids.end(), s_full.begin(), s_full.end() - 1);
    Tensor tail = mb.backbone.embed_ids(tail_ids);

    OcrSequence seq;
    seq.x = concat_rows({adapted, tail});
    const int s_len = k + n;
    seq.targets.assign(size_t(s_len), 0);
    seq.mask.assign(size_t(s_len), 0.0f);
    for (int i = 0; i < n; ++i) {
        seq.targets[size_t(k + i)] = s_full[size_t(i)];
        seq.mask[size_t(k + i)] = 1.0f;
    }
    return seq;
}

void append_hashes(std::vector<std::pair<std::string, uint64_t>>& out, const std::string& tag,
                   std::vector<NamedTensor> params) {
    out.push_back({tag, params_hash(std::move(params))});
}

}  // namespace

// ---- data plumbing ---------------------------------------------------------

PreparedExample prepare_example(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                                const Example& ex, int k_max) {
    PreparedExample out;
    out.prompt_ids = tok.encode(prompt_text(ex));
    out.answer_ids = tok.encode(answer_text(ex));
    out.source = &ex;

    PatchSequence patches = patchify(render(ex.cot, pc.render), pc.patch_width);
    if (patches.K > k_max) {  // cap the latent length; truncation is visible in k
        patches.patches.resize(size_t(k_max));
        patches.K = k_max;
    }
    NoGradScope ng;
    Tensor v = mb.encoder.encode(patches);
    // re-leaf so the cached targets are fully detached constants
    out.v = Tensor::leaf(v.shape(), v.data(), false);
    out.k = v.rows();
    return out;
}

std::vector<PreparedExample> prepare_dataset(ModelBundle& mb, const Tokenizer& tok,
                                             const PipelineConfig& pc,
                                             const std::vector<Example>& examples, int k_max) {
    std::vector<PreparedExample> out;
    out.reserve(examples.size());
    for (const Example& ex : examples) out.push_back(prepare_example(mb, tok, pc, ex, k_max));
    return out;
}

// ---- stage 0: text pretraining --------------------------------------------

PretrainResult pretrain_lm(ModelBundle& mb, const Tokenizer& tok,
                           const std::vector<Example>& train, const std::vector<Example>& val,
                           const PretrainConfig& cfg) {
    mb.backbone.set_base_trainable(true);
    mb.backbone.training = false;
    auto trainables = mb.backbone.base_params();
    AdamW::Config oc;
    oc.lr = cfg.lr;
    AdamW opt(oc);

    PretrainResult res;
    Rng order_rng(cfg.seed ^ 0x1a2b3c);
    int step = 0;
    double running = 0.0;
    int running_n = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = order_rng.fork(uint64_t(epoch));
        auto idx = shuffled_indices(train.size(), erng);
        for (size_t start = 0; start < idx.size(); start += size_t(cfg.batch_size)) {
            const size_t stop = std::min(idx.size(), start + size_t(cfg.batch_size));
            const float inv_b = 1.0f / float(stop - start);
            double batch_loss = 0.0;
            for (size_t i = start; i < stop; ++i) {
                Tape tape;
                Tensor ce = sequence_ce(mb.backbone, tok.encode(cot_text(train[idx[i]])), 0);
                batch_loss += ce.item_f64();
                tape.backward(scale(ce, inv_b));
            }
            if (!std::isfinite(batch_loss)) throw TrainError("pretrain_lm: non-finite loss");
            clip_global_norm(trainables, cfg.clip_norm);
            opt.step(trainables);
            AdamW::zero_grad(trainables);
            running += batch_loss / double(stop - start);
            ++running_n;
            ++step;
            if (step % cfg.log_every == 0) {
                res.loss_curve.push_back(running / running_n);
                if (cfg.verbose)
                    std::printf("[lm] epoch %d step %d loss %.4f\n", epoch, step,
                                running / running_n);
                running = 0.0;
                running_n = 0;
            }
        }
    }
    res.final_loss = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();

    // held-out next-token perplexity over whole lines
    NoGradScope ng;
    std::vector<double> ces;
    for (const Example& ex : val)
        ces.push_back(sequence_ce(mb.backbone, tok.encode(cot_text(ex)), 0).item_f64());
    res.val_perplexity = std::exp(mean_of(ces));
    return res;
}

// ---- stage 0: OCR pretext --------------------------------------------------

double ocr_accuracy(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                    const std::vector<std::string>& strings) {
    NoGradScope ng;
    long correct = 0, total = 0;
    for (const std::string& s : strings) {
        OcrSequence seq = build_ocr_sequence(mb, tok, pc, s);
        Tensor logits = mb.backbone.logits_from_hidden(mb.backbone.forward_hidden(seq.x));
        const int v = logits.cols();
        for (size_t row = 0; row < seq.targets.size(); ++row) {
            if (seq.mask[row] == 0.0f) continue;
            const float* lr = logits.data().data() + row * size_t(v);
            int best = 0;
            for (int j = 1; j < v; ++j)
                if (lr[j] > lr[best]) best = j;
            correct += best == seq.targets[row];
            ++total;
        }
    }
    return total ? double(correct) / double(total) : 0.0;
}

OcrResult pretrain_vlm(ModelBundle& mb, const Tokenizer& tok, const PipelineConfig& pc,
                       const std::vector<std::string>& train_strings,
                       const std::vector<std::string>& val_strings,
                       const std::vector<Example>& replay_text, const OcrConfig& cfg) {
    mb.backbone.set_base_trainable(true);
    mb.encoder.set_trainable(true);
    mb.set_adapter_trainable(true);
    mb.backbone.training = false;

    std::vector<NamedTensor> trainables = mb.backbone.base_params();
    for (auto& nt : mb.encoder.params()) trainables.push_back(nt);
    for (auto& nt : mb.adapter_params()) trainables.push_back(nt);

    // held-out strings get the same clip as the training batches: the gate
    // measures the trained transcription skill, not length extrapolation
    std::vector<std::string> val = val_strings;
    for (std::string& s : val)
        if (int(s.size()) > cfg.max_chars) s.resize(size_t(cfg.max_chars));

    AdamW::Config oc;
    oc.lr = cfg.lr;
    AdamW opt(oc);
    Rng order_rng(cfg.seed ^ 0x0c12a5);
    OcrResult res;
    double last_loss = 0.0;
    const size_t steps_per_epoch =
        (train_strings.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size);
    const double total_steps = double(steps_per_epoch) * double(std::max(1, cfg.epochs));
    long long gstep = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = order_rng.fork(uint64_t(epoch));
        auto idx = shuffled_indices(train_strings.size(), erng);
        Rng mix_rng = erng.fork(0x717);
        for (size_t start = 0; start < idx.size(); start += size_t(cfg.batch_size)) {
            const size_t stop = std::min(idx.size(), start + size_t(cfg.batch_size));
            const float inv_b = 1.0f / float(stop - start);
            const bool replay =
                !replay_text.empty() && mix_rng.next_double() < cfg.text_replay;
            double batch_loss = 0.0;
            for (size_t i = start; i < stop; ++i) {
                Tape tape;
                Tensor ce;
                if (replay) {
                    const Example& ex = replay_text[mix_rng.next_below(replay_text.size())];
                    ce = sequence_ce(mb.backbone, tok.encode(cot_text(ex)), 0);
                } else {
                    std::string s = train_strings[idx[i]];
                    if (int(s.size()) > cfg.max_chars) s.resize(size_t(cfg.max_chars));
                    OcrSequence seq = build_ocr_sequence(mb, tok, pc, s);
                    Tensor h = mb.backbone.forward_hidden(seq.x);
                    ce = cross_entropy_with_logits(mb.backbone.logits_from_hidden(h), seq.targets,
                                                   seq.mask);
                }
                batch_loss += ce.item_f64();
                tape.backward(scale(ce, inv_b));
            }
            if (!std::isfinite(batch_loss)) throw TrainError("pretrain_vlm: non-finite loss");
            clip_global_norm(trainables, cfg.clip_norm);
            // cosine decay to a 10% floor; the gate needs the tail of the
            // accuracy curve, not just the fast early descent
            const double frac = double(gstep++) / total_steps;
            opt.config().lr =
                float(cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(3.14159265358979 * frac))));
            opt.step(trainables);
            AdamW::zero_grad(trainables);
            last_loss = batch_loss / double(stop - start);
        }
        if (cfg.verbose) {
            std::printf("[ocr] epoch %d loss %.4f acc %.4f\n", epoch, last_loss,
                        ocr_accuracy(mb, tok, pc, val));
            std::fflush(stdout);
        }
    }
    res.final_loss = last_loss;
    res.val_token_accuracy = ocr_accuracy(mb, tok, pc, val);
    if (res.val_token_accuracy < cfg.accuracy_gate)
        throw TrainError("pretrain_vlm: held-out transcription accuracy " +
                         std::to_string(res.val_token_accuracy) + " below gate " +
                         std::to_string(cfg.accuracy_gate) + "; the anchor is unusable");
    return res;
}

// ---- stage I ---------------------------------------------------------------

LossBreakdown stage1_step(ModelBundle& mb, const std::vector<const PreparedExample*>& batch,
                          const StageConfig& cfg, bool do_backward) {
    LossBreakdown out;
    const float inv_b = 1.0f / float(batch.size());
    for (const PreparedExample* exp : batch) {
        const PreparedExample& ex = *exp;
        const int P = int(ex.prompt_ids.size());
        const int K = ex.k;
        const int T = int(ex.answer_ids.size());

        auto run = [&](void) -> void {
            std::vector<int> head_ids = ex.prompt_ids;
            head_ids.push_back(mb.backbone.img_begin_id());
            std::vector<int> tail_ids;
            tail_ids.push_back(mb.backbone.img_end_id());
            tail_ids.insert(tail_ids.end(), ex.answer_ids.begin(), ex.answer_ids.end() - 1);

            Tensor x = concat_rows({mb.backbone.embed_ids(head_ids), mb.adapt(ex.v),
                                    mb.backbone.embed_ids(tail_ids)});
            Tensor h = mb.backbone.forward_hidden(x);  // (P+1+K+T, d_h)
            const int S = h.rows();

            // alignment: rows P..P+K-1 predict v_1..v_K  (Eq. 1 form:
            // squared norms averaged over the K latent steps)
            Tensor vhat = mb.head.forward(slice_rows(h, P, K));
            Tensor l_align = scale(sum_all(squared_difference(vhat, ex.v)), 1.0f / float(K));

            // prediction: row P+K -> <|img_end|>, then the answer
            std::vector<int> targets(size_t(S), 0);
            std::vector<float> mask(size_t(S), 0.0f);
            targets[size_t(P + K)] = mb.backbone.img_end_id();
            mask[size_t(P + K)] = 1.0f;
            for (int j = 0; j < T; ++j) {
                targets[size_t(P + K + 1 + j)] = ex.answer_ids[size_t(j)];
                mask[size_t(P + K + 1 + j)] = 1.0f;
            }
            Tensor l_pred =
                cross_entropy_with_logits(mb.backbone.logits_from_hidden(h), targets, mask);

            Tensor l_total = add(l_pred, scale(l_align, cfg.lambda));
            out.l_align += l_align.item_f64();
            out.l_pred += l_pred.item_f64();
            out.l_total += l_total.item_f64();
            if (do_backward) Tape::current()->backward(scale(l_total, inv_b));
        };

        if (do_backward) {
            Tape tape;
            run();
        } else {
            NoGradScope ng;
            run();
        }
    }
    out.l_align /= double(batch.size());
    out.l_pred /= double(batch.size());
    out.l_total /= double(batch.size());
    if (!std::isfinite(out.l_total)) throw TrainError("stage1_step: non-finite loss");
    return out;
}

// ---- stage II --------------------------------------------------------------

LossBreakdown stage2_step(ModelBundle& mb, const std::vector<const PreparedExample*>& batch,
                          const StageConfig& cfg, bool do_backward) {
    LossBreakdown out;
    const float inv_b = 1.0f / float(batch.size());
    for (const PreparedExample* exp : batch) {
        const PreparedExample& ex = *exp;
        const int P = int(ex.prompt_ids.size());
        const int K = std::min(ex.k, cfg.k_max);
        const int T = int(ex.answer_ids.size());

        auto run = [&](void) -> void {
            DecodeState st;
            std::vector<int> head_ids = ex.prompt_ids;
            head_ids.push_back(mb.backbone.img_begin_id());
            Tensor h = mb.backbone.forward_incremental(mb.backbone.embed_ids(head_ids), st);
            Tensor h_last = slice_rows(h, P, 1);

            // self-feeding rollout; gradients flow through every step
            for (int t = 1; t <= K; ++t) {
                Tensor vhat = mb.head.forward(h_last);
                if (!all_finite(vhat.data()))
                    throw TrainError("stage2_step: non-finite latent at step " +
                                     std::to_string(t));
                h_last = mb.backbone.forward_incremental(mb.adapt(vhat), st);
            }

            std::vector<int> tail_ids;
            tail_ids.push_back(mb.backbone.img_end_id());
            tail_ids.insert(tail_ids.end(), ex.answer_ids.begin(), ex.answer_ids.end() - 1);
            Tensor h_ans = mb.backbone.forward_incremental(mb.backbone.embed_ids(tail_ids), st);

            Tensor rows = concat_rows({h_last, h_ans});  // (1 + T, d_h)
            std::vector<int> targets;
            targets.push_back(mb.backbone.img_end_id());
            targets.insert(targets.end(), ex.answer_ids.begin(), ex.answer_ids.end());
            std::vector<float> mask(targets.size(), 1.0f);
            Tensor l_pred = cross_entropy_with_logits(mb.backbone.logits_from_hidden(rows),
                                                      targets, mask);
            out.l_pred += l_pred.item_f64();
            out.l_total += l_pred.item_f64();
            if (do_backward) Tape::current()->backward(scale(l_pred, inv_b));
            (void)T;
        };

        if (do_backward) {
            Tape tape;
            run();
        } else {
            NoGradScope ng;
            run();
        }
    }
    out.l_pred /= double(batch.size());
    out.l_total /= double(batch.size());
    if (!std::isfinite(out.l_total)) throw TrainError("stage2_step: non-finite loss");
    return out;
}

// ---- stage driver ----------------------------------------------------------

TrainResult train_stage(ModelBundle& mb, const std::vector<PreparedExample>& dataset,
                        const StageConfig& cfg) {
    if (dataset.empty()) throw TrainError("train_stage: empty dataset");
    if (cfg.stage != 1 && cfg.stage != 2) throw TrainError("train_stage: stage must be 1 or 2");

    // freeze schedule + trainable set
    std::vector<std::pair<std::string, uint64_t>> frozen;
    std::vector<NamedTensor> trainables;
    mb.backbone.set_base_trainable(false);
    mb.encoder.set_trainable(false);
    mb.set_adapter_trainable(false);
    if (cfg.stage == 1) {
        mb.backbone.special_emb.set_requires_grad(false);
        mb.head.set_trainable(true);
        mb.backbone.training = false;
        trainables = mb.head.params();
        append_hashes(frozen, "backbone", mb.backbone.base_params());
        append_hashes(frozen, "special", mb.backbone.special_params());
        append_hashes(frozen, "encoder", mb.encoder.params());
        append_hashes(frozen, "adapter", mb.adapter_params());
    } else {
        mb.head.set_trainable(false);
        if (!mb.backbone.lora_attached()) {
            Rng lrng(cfg.seed ^ 0x10aa);
            mb.backbone.attach_lora(lrng);
        }
        mb.backbone.special_emb.set_requires_grad(true);
        mb.backbone.training = true;  // LoRA dropout active
        mb.backbone.drop_rng = Rng(cfg.seed ^ 0xd20b);
        trainables = mb.backbone.lora_params();
        for (auto& nt : mb.backbone.special_params()) trainables.push_back(nt);
        append_hashes(frozen, "backbone", mb.backbone.base_params());
        append_hashes(frozen, "encoder", mb.encoder.params());
        append_hashes(frozen, "adapter", mb.adapter_params());
        append_hashes(frozen, "head", mb.head.params());
    }

    AdamW::Config oc;
    oc.lr = cfg.lr;
    AdamW opt(oc);
    TrainResult res;
    Rng order_rng(cfg.seed ^ 0x57a6e);
    const size_t steps_per_epoch =
        (dataset.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size);
    const double total_steps = double(steps_per_epoch) * double(std::max(1, cfg.epochs));
    int step = 0;
    std::vector<double> final_epoch_align, final_epoch_pred;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = order_rng.fork(uint64_t(epoch));
        auto idx = shuffled_indices(dataset.size(), erng);
        const bool last_epoch = epoch == cfg.epochs - 1;
        for (size_t start = 0; start < idx.size(); start += size_t(cfg.batch_size)) {
            const size_t stop = std::min(idx.size(), start + size_t(cfg.batch_size));
            std::vector<const PreparedExample*> batch;
            for (size_t i = start; i < stop; ++i) batch.push_back(&dataset[idx[i]]);
            LossBreakdown lb = cfg.stage == 1 ? stage1_step(mb, batch, cfg, true)
                                              : stage2_step(mb, batch, cfg, true);
            lb.grad_norm = clip_global_norm(trainables, cfg.clip_norm);
            // cosine decay to a 10% floor; the plateau at constant lr is
            // gradient noise, not a capability limit
            const double frac = double(step) / total_steps;
            oc.lr = float(cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(3.14159265358979 * frac))));
            opt.config().lr = oc.lr;
            opt.step(trainables);
            AdamW::zero_grad(trainables);
            ++step;
            res.curve.push_back({step, lb.l_align, lb.l_pred, lb.l_total});
            if (last_epoch) {
                final_epoch_align.push_back(lb.l_align);
                final_epoch_pred.push_back(lb.l_pred);
            }
            if (cfg.verbose && step % cfg.log_every == 0) {
                std::printf("[stage%d] step %d align %.5f pred %.5f total %.5f\n", cfg.stage,
                            step, lb.l_align, lb.l_pred, lb.l_total);
                std::fflush(stdout);
            }
        }
    }
    mb.backbone.training = false;

    std::vector<double> first100;
    for (size_t i = 0; i < res.curve.size() && i < 100; ++i)
        first100.push_back(res.curve[i].l_align);
    res.first100_mean_l_align = mean_of(first100);
    res.final_epoch_mean_l_align = mean_of(final_epoch_align);
    res.final_epoch_mean_l_pred = mean_of(final_epoch_pred);

    if (!cfg.curve_csv.empty()) {
        std::ofstream out(cfg.curve_csv);
        if (!out) throw TrainError("train_stage: cannot write " + cfg.curve_csv);
        out << "step,l_align,l_pred,l_total\n";
        for (const CurvePoint& p : res.curve)
            out << p.step << ',' << p.l_align << ',' << p.l_pred << ',' << p.l_total << '\n';
    }

    // freeze contract verification
    for (auto& [tag, before] : frozen) {
        uint64_t after = 0;
        if (tag == "backbone")
            after = params_hash(mb.backbone.base_params());
        else if (tag == "special")
            after = params_hash(mb.backbone.special_params());
        else if (tag == "encoder")
            after = params_hash(mb.encoder.params());
        else if (tag == "adapter")
            after = params_hash(mb.adapter_params());
        else
            after = params_hash(mb.head.params());
        if (after != before)
            throw TrainError("train_stage: freeze contract violated for " + tag);
    }
    return res;
}

// ---- SFT baselines ---------------------------------------------------------

double sft_train(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& train,
                 const SftConfig& cfg) {
    mb.backbone.set_base_trainable(false);
    mb.encoder.set_trainable(false);
    mb.set_adapter_trainable(false);
    mb.head.set_trainable(false);
    mb.backbone.special_emb.set_requires_grad(false);
    if (!mb.backbone.lora_attached()) {
        Rng lrng(cfg.seed ^ 0x5f7a);
        mb.backbone.attach_lora(lrng);
    }
    mb.backbone.training = true;
    mb.backbone.drop_rng = Rng(cfg.seed ^ 0x9d01);
    auto trainables = mb.backbone.lora_params();

    AdamW::Config oc;
    oc.lr = cfg.lr;
    AdamW opt(oc);
    Rng order_rng(cfg.seed ^ 0x3f11);
    double last = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = order_rng.fork(uint64_t(epoch));
        auto idx = shuffled_indices(train.size(), erng);
        std::vector<double> losses;
        for (size_t start = 0; start < idx.size(); start += size_t(cfg.batch_size)) {
            const size_t stop = std::min(idx.size(), start + size_t(cfg.batch_size));
            const float inv_b = 1.0f / float(stop - start);
            double batch_loss = 0.0;
            for (size_t i = start; i < stop; ++i) {
                const Example& ex = train[idx[i]];
                const std::string text = cfg.with_cot ? cot_text(ex) : nocot_text(ex);
                const size_t prompt_len = prompt_text(ex).size();
                Tape tape;
                Tensor ce = sequence_ce(mb.backbone, tok.encode(text), prompt_len - 1);
                batch_loss += ce.item_f64();
                tape.backward(scale(ce, inv_b));
            }
            if (!std::isfinite(batch_loss)) throw TrainError("sft_train: non-finite loss");
            clip_global_norm(trainables, cfg.clip_norm);
            opt.step(trainables);
            AdamW::zero_grad(trainables);
            losses.push_back(batch_loss / double(stop - start));
        }
        last = mean_of(losses);
        if (cfg.verbose) {
            std::printf("[sft%s] epoch %d loss %.4f\n", cfg.with_cot ? "-cot" : "-nocot", epoch,
                        last);
            std::fflush(stdout);
        }
    }
    mb.backbone.training = false;
    return last;
}

double text_perplexity(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& val,
                       bool with_cot) {
    NoGradScope ng;
    std::vector<double> ces;
    for (const Example& ex : val) {
        const std::string text = with_cot ? cot_text(ex) : nocot_text(ex);
        const size_t prompt_len = prompt_text(ex).size();
        ces.push_back(sequence_ce(mb.backbone, tok.encode(text), prompt_len - 1).item_f64());
    }
    return std::exp(mean_of(ces));
}

}  // namespace rot
