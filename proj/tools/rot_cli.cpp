#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rot/config.hpp"
#include "rot/eval.hpp"
#include "rot/infer.hpp"
#include "rot/raster.hpp"
#include "rot/taskgen.hpp"
#include "rot/train.hpp"

using namespace rot;
namespace fs = std::filesystem;

namespace {

// missing upstream artifact (checkpoint, dataset): exit status 1
struct PrereqError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- config keys -----------------------------------------------------------
// Every tunable is a flat key=value entry; precedence defaults < --config
// file < flags/--set. The resolved config is echoed into the run directory.

RunConfig default_config() {
    ModelConfig m;
    RenderConfig r;
    StageConfig s;
    RunConfig cfg;
    // model
    cfg.set("d_h", std::to_string(m.d_h));
    cfg.set("n_dec", std::to_string(m.n_dec));
    cfg.set("n_heads", std::to_string(m.n_heads));
    cfg.set("d_mlp", std::to_string(m.d_mlp));
    cfg.set("context", std::to_string(m.context));
    cfg.set("d_v", std::to_string(m.d_v));
    cfg.set("n_enc", std::to_string(m.n_enc));
    cfg.set("enc_heads", std::to_string(m.enc_heads));
    cfg.set("enc_mlp", std::to_string(m.enc_mlp));
    cfg.set("k_max_enc", std::to_string(m.k_max_enc));
    cfg.set("d_p", std::to_string(m.d_p));
    cfg.set("head_activation", m.head_activation);
    cfg.set("lora_r", std::to_string(m.lora_r));
    cfg.set("lora_alpha", std::to_string(m.lora_alpha));
    cfg.set("lora_dropout", std::to_string(m.lora_dropout));
    cfg.set("model_seed", "1");
    // rendering
    cfg.set("img_height", std::to_string(r.image_height_px));
    cfg.set("padding", std::to_string(r.padding_px));
    cfg.set("font_size", std::to_string(r.font_px));
    cfg.set("render_mode", "single_line");
    cfg.set("square_side", std::to_string(r.square_side_px));
    cfg.set("patch_width", "48");
    // data
    cfg.set("data_size", "5000");
    cfg.set("data_seed", "7");
    cfg.set("train_ratio", "0.8");
    cfg.set("val_ratio", "0.1");
    cfg.set("test_ratio", "0.1");
    // stage 0
    cfg.set("lm_epochs", "3");
    cfg.set("lm_lr", "0.001");
    cfg.set("ocr_epochs", "2");
    cfg.set("ocr_lr", "0.001");
    cfg.set("ocr_gate", "0.95");
    // stages I/II + SFT
    cfg.set("lambda", std::to_string(s.lambda));
    cfg.set("k_max", std::to_string(s.k_max));
    cfg.set("batch_size", std::to_string(s.batch_size));
    cfg.set("clip_norm", std::to_string(s.clip_norm));
    cfg.set("stage1_epochs", "1");
    cfg.set("stage1_lr", "0.001");
    cfg.set("stage2_epochs", "2");
    cfg.set("stage2_lr", "0.001");
    cfg.set("sft_epochs", "2");
    cfg.set("sft_lr", "0.001");
    cfg.set("train_seed", "1");
    // inference + evaluation
    cfg.set("strategy", "static");
    cfg.set("budget", "32");
    cfg.set("k_max_dynamic", "256");
    cfg.set("temperature", "1");
    cfg.set("top_p", "0.9");
    cfg.set("max_tokens", "160");
    cfg.set("eval_seeds", "1,2,3");
    cfg.set("eval_limit", "0");  // 0 = whole test split
    cfg.set("budgets", "8,16,32,64,128,256");
    cfg.set("threads", "0");
    cfg.set("verbose", "true");
    return cfg;
}

ModelConfig model_config(const RunConfig& cfg) {
    ModelConfig m;
    m.d_h = int(cfg.get_int("d_h"));
    m.n_dec = int(cfg.get_int("n_dec"));
    m.n_heads = int(cfg.get_int("n_heads"));
    m.d_mlp = int(cfg.get_int("d_mlp"));
    m.context = int(cfg.get_int("context"));
    m.d_v = int(cfg.get_int("d_v"));
    m.n_enc = int(cfg.get_int("n_enc"));
    m.enc_heads = int(cfg.get_int("enc_heads"));
    m.enc_mlp = int(cfg.get_int("enc_mlp"));
    m.k_max_enc = int(cfg.get_int("k_max_enc"));
    m.d_p = int(cfg.get_int("d_p"));
    m.head_activation = cfg.get_str("head_activation");
    m.lora_r = int(cfg.get_int("lora_r"));
    m.lora_alpha = float(cfg.get_double("lora_alpha"));
    m.lora_dropout = float(cfg.get_double("lora_dropout"));
    m.patch_pixels = int(cfg.get_int("img_height") * cfg.get_int("patch_width"));
    return m;
}

PipelineConfig pipeline_config(const RunConfig& cfg) {
    PipelineConfig pc;
    pc.render.image_height_px = int(cfg.get_int("img_height"));
    pc.render.padding_px = int(cfg.get_int("padding"));
    pc.render.font_px = int(cfg.get_int("font_size"));
    const std::string mode = cfg.get_str("render_mode");
    if (mode == "single_line")
        pc.render.mode = RenderMode::single_line;
    else if (mode == "fixed_square")
        pc.render.mode = RenderMode::fixed_square;
    else
        throw ConfigError("render_mode must be single_line or fixed_square");
    pc.render.square_side_px = int(cfg.get_int("square_side"));
    pc.patch_width = int(cfg.get_int("patch_width"));
    pc.render.validate();
    return pc;
}

RolloutStrategy rollout_strategy(const RunConfig& cfg) {
    RolloutStrategy rs;
    const std::string s = cfg.get_str("strategy");
    if (s == "static")
        rs.mode = RolloutStrategy::kStatic;
    else if (s == "dynamic")
        rs.mode = RolloutStrategy::kDynamic;
    else
        throw ConfigError("strategy must be static or dynamic");
    rs.budget = int(cfg.get_int("budget"));
    rs.k_max = int(cfg.get_int("k_max_dynamic"));
    return rs;
}

SamplingConfig sampling_config(const RunConfig& cfg) {
    SamplingConfig sc;
    sc.temperature = float(cfg.get_double("temperature"));
    sc.top_p = float(cfg.get_double("top_p"));
    sc.max_tokens = int(cfg.get_int("max_tokens"));
    return sc;
}

std::vector<uint64_t> eval_seeds(const RunConfig& cfg) {
    std::vector<uint64_t> out;
    for (int s : cfg.get_int_list("eval_seeds")) out.push_back(uint64_t(s));
    return out;
}

// ---- run-dir plumbing ------------------------------------------------------

std::string g_run_dir;

std::string rpath(const std::string& name) { return g_run_dir + "/" + name; }

void require_artifact(const std::string& name, const std::string& produced_by) {
    if (!fs::exists(rpath(name)))
        throw PrereqError("missing " + name + " in " + g_run_dir + "; run `rot " + produced_by +
                          "` first (or point --run-dir at a prepared run)");
}

DatasetSplit load_split() {
    require_artifact("data_train.tsv", "gen-data");
    DatasetSplit ds;
    ds.train = load_examples(rpath("data_train.tsv"));
    ds.val = load_examples(rpath("data_val.tsv"));
    ds.test = load_examples(rpath("data_test.tsv"));
    return ds;
}

std::string dataset_id(const RunConfig& cfg) {
    return "chain-arith-s" + std::to_string(cfg.get_int("data_seed")) + "-n" +
           std::to_string(cfg.get_int("data_size"));
}

ModelBundle load_bundle(const RunConfig& cfg, const std::string& ckpt,
                        const std::string& produced_by) {
    require_artifact(ckpt, produced_by);
    ModelBundle mb;
    mb.init(model_config(cfg), uint64_t(cfg.get_int("model_seed")));
    mb.load(rpath(ckpt));
    return mb;
}

void write_hashes(ModelBundle& mb, const std::string& name) {
    std::ofstream f(rpath(name));
    f << "backbone_base=" << params_hash(mb.backbone.base_params()) << "\n"
      << "special=" << params_hash(mb.backbone.special_params()) << "\n"
      << "encoder=" << params_hash(mb.encoder.params()) << "\n"
      << "adapter=" << params_hash(mb.adapter_params()) << "\n"
      << "head=" << params_hash(mb.head.params()) << "\n";
}

std::vector<Example> limited(std::vector<Example> v, const RunConfig& cfg) {
    const size_t lim = size_t(cfg.get_int("eval_limit"));
    if (lim > 0 && v.size() > lim) v.resize(lim);
    return v;
}

void print_report(const EvalReport& rep) {
    std::printf("%-12s %9s %8s %9s %7s %9s %7s\n", "method", "pass@1", "ci", "#L", "ci",
                "wall(s)", "p1/#L");
    for (const MethodRow& r : rep.rows)
        std::printf("%-12s %9.2f %8.2f %9.2f %7.2f %9.4f %7.2f\n", r.method.c_str(),
                    r.pass1_mean, r.pass1_ci, r.lat_mean, r.lat_ci, r.wall_mean, r.efficiency);
    if (rep.compression_ratio > 0.0)
        std::printf("compression ratio #L(CoT)/#L(RoT) = %.2f\n", rep.compression_ratio);
}

// ---- verbs -----------------------------------------------------------------

int do_gen_data(const RunConfig& cfg) {
    TaskSpec spec;
    spec.seed = uint64_t(cfg.get_int("data_seed"));
    spec.size = int(cfg.get_int("data_size"));
    std::vector<Example> all = generate(spec);
    DatasetSplit ds = split(std::move(all), cfg.get_double("train_ratio"),
                            cfg.get_double("val_ratio"), cfg.get_double("test_ratio"), spec.seed);
    save_examples(rpath("data_train.tsv"), ds.train);
    save_examples(rpath("data_val.tsv"), ds.val);
    save_examples(rpath("data_test.tsv"), ds.test);
    std::printf("generated %s: %zu train / %zu val / %zu test\n", dataset_id(cfg).c_str(),
                ds.train.size(), ds.val.size(), ds.test.size());
    return 0;
}

int do_pretrain_lm(const RunConfig& cfg) {
    DatasetSplit ds = load_split();
    ModelBundle mb;
    mb.init(model_config(cfg), uint64_t(cfg.get_int("model_seed")));
    Tokenizer tok;
    PretrainConfig pt;
    pt.epochs = int(cfg.get_int("lm_epochs"));
    pt.batch_size = int(cfg.get_int("batch_size"));
    pt.lr = float(cfg.get_double("lm_lr"));
    pt.clip_norm = float(cfg.get_double("clip_norm"));
    pt.seed = uint64_t(cfg.get_int("train_seed"));
    pt.verbose = cfg.get_bool("verbose");
    PretrainResult res = pretrain_lm(mb, tok, ds.train, ds.val, pt);
    mb.save(rpath("ckpt_lm.bin"));
    write_hashes(mb, "hashes_lm.txt");
    std::printf("pretrain-lm: final loss %.4f, val ppl %.3f -> ckpt_lm.bin\n", res.final_loss,
                res.val_perplexity);
    return 0;
}

int do_pretrain_vlm(const RunConfig& cfg) {
    DatasetSplit ds = load_split();
    ModelBundle mb = load_bundle(cfg, "ckpt_lm.bin", "pretrain-lm");
    Tokenizer tok;
    PipelineConfig pc = pipeline_config(cfg);
    std::vector<std::string> train_strings, val_strings;
    for (const Example& ex : ds.train) train_strings.push_back(cot_text(ex));
    for (const Example& ex : ds.val) val_strings.push_back(cot_text(ex));
    OcrConfig oc;
    oc.epochs = int(cfg.get_int("ocr_epochs"));
    oc.batch_size = int(cfg.get_int("batch_size"));
    oc.lr = float(cfg.get_double("ocr_lr"));
    oc.clip_norm = float(cfg.get_double("clip_norm"));
    oc.seed = uint64_t(cfg.get_int("train_seed"));
    oc.accuracy_gate = cfg.get_double("ocr_gate");
    oc.verbose = cfg.get_bool("verbose");
    OcrResult res = pretrain_vlm(mb, tok, pc, train_strings, val_strings, ds.train, oc);
    mb.save(rpath("ckpt_vlm.bin"));
    write_hashes(mb, "hashes_vlm.txt");
    std::printf("pretrain-vlm: val token accuracy %.4f -> ckpt_vlm.bin\n",
                res.val_token_accuracy);
    return 0;
}

StageConfig stage_config(const RunConfig& cfg, int stage) {
    StageConfig sc;
    sc.stage = stage;
    sc.lambda = float(cfg.get_double("lambda"));
    sc.epochs = int(cfg.get_int(stage == 1 ? "stage1_epochs" : "stage2_epochs"));
    sc.batch_size = int(cfg.get_int("batch_size"));
    sc.k_max = int(cfg.get_int("k_max"));
    sc.lr = float(cfg.get_double(stage == 1 ? "stage1_lr" : "stage2_lr"));
    sc.clip_norm = float(cfg.get_double("clip_norm"));
    sc.seed = uint64_t(cfg.get_int("train_seed"));
    sc.verbose = cfg.get_bool("verbose");
    return sc;
}

int do_train(const RunConfig& cfg, const std::string& stage, const std::string& skip_stage) {
    DatasetSplit ds = load_split();
    Tokenizer tok;
    PipelineConfig pc = pipeline_config(cfg);

    if (stage == "1" || stage == "2") {
        const int st = stage == "1" ? 1 : 2;
        std::string base_ckpt = st == 1 ? "ckpt_vlm.bin" : "ckpt_stage1.bin";
        std::string base_verb = st == 1 ? "pretrain-vlm" : "train --stage 1";
        if (st == 2 && skip_stage == "1") {
            base_ckpt = "ckpt_vlm.bin";
            base_verb = "pretrain-vlm";
        }
        ModelBundle mb = load_bundle(cfg, base_ckpt, base_verb);
        StageConfig sc = stage_config(cfg, st);
        sc.curve_csv = rpath("stage" + stage + "_curve_" + cfg.get_str("render_mode") + ".csv");
        std::vector<PreparedExample> data = prepare_dataset(mb, tok, pc, ds.train, sc.k_max);
        TrainResult res = train_stage(mb, data, sc);
        if (mb.backbone.lora_attached()) mb.backbone.merge_lora();
        mb.save(rpath("ckpt_stage" + stage + ".bin"));
        write_hashes(mb, "hashes_stage" + stage + ".txt");
        std::printf("stage %s: first-100 L_align %.4f, final-epoch L_align %.4f, "
                    "final-epoch L_pred %.4f -> ckpt_stage%s.bin\n",
                    stage.c_str(), res.first100_mean_l_align, res.final_epoch_mean_l_align,
                    res.final_epoch_mean_l_pred, stage.c_str());
        return 0;
    }
    if (stage == "sft-cot" || stage == "sft-nocot") {
        ModelBundle mb = load_bundle(cfg, "ckpt_lm.bin", "pretrain-lm");
        SftConfig sc;
        sc.with_cot = stage == "sft-cot";
        sc.epochs = int(cfg.get_int("sft_epochs"));
        sc.batch_size = int(cfg.get_int("batch_size"));
        sc.lr = float(cfg.get_double("sft_lr"));
        sc.clip_norm = float(cfg.get_double("clip_norm"));
        sc.seed = uint64_t(cfg.get_int("train_seed"));
        sc.verbose = cfg.get_bool("verbose");
        const double loss = sft_train(mb, tok, ds.train, sc);
        if (mb.backbone.lora_attached()) mb.backbone.merge_lora();
        const std::string ckpt = stage == "sft-cot" ? "ckpt_sft_cot.bin" : "ckpt_sft_nocot.bin";
        mb.save(rpath(ckpt));
        std::printf("%s: final loss %.4f -> %s\n", stage.c_str(), loss, ckpt.c_str());
        return 0;
    }
    throw ConfigError("--stage must be 1, 2, sft-cot or sft-nocot");
}

int do_infer(const RunConfig& cfg, const std::string& question) {
    ModelBundle mb = load_bundle(cfg, "ckpt_stage2.bin", "train --stage 2");
    Tokenizer tok;
    SamplingConfig sc = sampling_config(cfg);
    sc.seed = uint64_t(cfg.get_int("train_seed"));
    AnswerResult res = answer(mb, tok, question, rollout_strategy(cfg), sc);
    std::string shown = res.text;
    while (!shown.empty() && shown.back() == '\n') shown.pop_back();
    std::printf("%s\n#L=%d mode=%s%s wallclock=%.4fs\n", shown.c_str(), res.trace.t_lat,
                res.trace.mode == RolloutStrategy::kStatic ? "static" : "dynamic",
                res.trace.truncated ? " (truncated)" : "", res.wallclock_s);
    return 0;
}

int do_eval(const RunConfig& cfg) {
    DatasetSplit ds = load_split();
    ModelBundle mb = load_bundle(cfg, "ckpt_stage2.bin", "train --stage 2");
    Tokenizer tok;
    EvalStrategy st;
    st.method = Method::kRot;
    st.rollout = rollout_strategy(cfg);
    st.sampling = sampling_config(cfg);
    st.threads = int(cfg.get_int("threads"));
    const std::vector<Example> test = limited(ds.test, cfg);
    const std::vector<uint64_t> seeds = eval_seeds(cfg);

    std::vector<EvalRun> runs;
    for (uint64_t s : seeds) {
        runs.push_back(evaluate_run(mb, tok, test, st, s));
        emit_trace_artifacts(runs.back(), rpath("traces"), "seed" + std::to_string(s));
    }
    EvalReport rep = evaluate(mb, tok, test, st, seeds, dataset_id(cfg));
    write_report_csv(rep, rpath("eval_report.csv"));
    print_report(rep);
    std::printf("report -> eval_report.csv, trace artifacts -> traces/\n");
    return 0;
}

int do_sweep(const RunConfig& cfg) {
    DatasetSplit ds = load_split();
    ModelBundle mb = load_bundle(cfg, "ckpt_stage2.bin", "train --stage 2");
    Tokenizer tok;
    EvalStrategy base;
    base.rollout = rollout_strategy(cfg);
    base.sampling = sampling_config(cfg);
    base.threads = int(cfg.get_int("threads"));
    base.trace_samples = 0;
    SweepTable table = budget_sweep(mb, tok, limited(ds.test, cfg), cfg.get_int_list("budgets"),
                                    base, eval_seeds(cfg), dataset_id(cfg));
    write_sweep_csv(table, rpath("sweep.csv"));
    write_sweep_svg(table, rpath("sweep.svg"));
    std::printf("%-8s %9s %8s %9s %7s\n", "budget", "pass@1", "ci", "#L", "ci");
    for (const SweepRow& r : table.rows)
        std::printf("%-8s %9.2f %8.2f %9.2f %7.2f\n",
                    r.budget < 0 ? "dynamic" : std::to_string(r.budget).c_str(),
                    r.row.pass1_mean, r.row.pass1_ci, r.row.lat_mean, r.row.lat_ci);
    std::printf("sweep -> sweep.csv, sweep.svg\n");
    return 0;
}

int do_analyze(const RunConfig& cfg, std::string question) {
    ModelBundle mb = load_bundle(cfg, "ckpt_stage2.bin", "train --stage 2");
    Tokenizer tok;
    if (question.empty()) {
        DatasetSplit ds = load_split();
        if (ds.test.empty()) throw PrereqError("empty test split; re-run gen-data");
        question = ds.test.front().question;
    }
    Rollout roll = latent_rollout(mb, tok, question, rollout_strategy(cfg));
    LatentDiagnostics d = latent_diagnostics(roll.trace);
    write_similarity_pgm(d, rpath("analyze_similarity.pgm"));
    write_diagnostics_csv(d, rpath("analyze_stats.csv"));
    int flagged = 0;
    for (size_t i = 0; i < d.zero_norm.size(); ++i) flagged += int(d.zero_norm[i]);
    std::printf("T_lat=%d tail_homogeneity=%.4f zero_norm_steps=%d\n", d.t_lat,
                d.tail_homogeneity, flagged);
    std::printf("artifacts -> analyze_similarity.pgm, analyze_stats.csv\n");
    return 0;
}

int do_compare(const RunConfig& cfg) {
    DatasetSplit ds = load_split();
    ModelBundle rot = load_bundle(cfg, "ckpt_stage2.bin", "train --stage 2");
    ModelBundle cot = load_bundle(cfg, "ckpt_sft_cot.bin", "train --stage sft-cot");
    ModelBundle nocot = load_bundle(cfg, "ckpt_sft_nocot.bin", "train --stage sft-nocot");
    Tokenizer tok;
    EvalStrategy st;
    st.rollout = rollout_strategy(cfg);
    st.sampling = sampling_config(cfg);
    st.threads = int(cfg.get_int("threads"));
    EvalReport rep = compare_methods(rot, cot, nocot, tok, limited(ds.test, cfg), st,
                                     eval_seeds(cfg), dataset_id(cfg));
    write_report_csv(rep, rpath("compare.csv"));
    print_report(rep);
    std::printf("comparison -> compare.csv\n");
    return 0;
}

int do_render(const RunConfig& cfg, const std::string& text, const std::string& out) {
    PipelineConfig pc = pipeline_config(cfg);
    RenderedStrip strip = render(text, pc.render);
    save_pgm(strip, out);
    std::printf("rendered %dx%d px (%d substitutions) -> %s\n", strip.width_px, strip.height_px,
                strip.substitutions, out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"render-of-thought: latent visual reasoning pipeline"};
    app.require_subcommand(1);

    std::string run_dir = run_dir_root("runs");
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> flag_kv;
    std::string stage, skip_stage, question, text, out = "strip.pgm";

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--run-dir", run_dir, "artifact directory (env ROT_RUN_DIR overrides)");
        sub->add_option("--config", config_file, "key=value config file");
        sub->add_option("--set", sets, "extra key=value override (repeatable)");
    };
    auto opt = [&](CLI::App* sub, const std::string& flag, const std::string& key) {
        sub->add_option_function<std::string>(
            flag, [&flag_kv, key](const std::string& v) { flag_kv.emplace_back(key, v); });
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the arithmetic dataset");
    add_common(gen);
    opt(gen, "--size", "data_size");
    opt(gen, "--seed", "data_seed");

    CLI::App* plm = app.add_subcommand("pretrain-lm", "text next-token pretraining");
    add_common(plm);
    opt(plm, "--epochs", "lm_epochs");
    opt(plm, "--lr", "lm_lr");
    opt(plm, "--seed", "train_seed");

    CLI::App* pvlm = app.add_subcommand("pretrain-vlm", "OCR pretext for the vision stack");
    add_common(pvlm);
    opt(pvlm, "--epochs", "ocr_epochs");
    opt(pvlm, "--lr", "ocr_lr");
    opt(pvlm, "--gate", "ocr_gate");
    opt(pvlm, "--seed", "train_seed");

    CLI::App* tr = app.add_subcommand("train", "stage I/II latent training or SFT baselines");
    add_common(tr);
    tr->add_option("--stage", stage, "1 | 2 | sft-cot | sft-nocot")->required();
    tr->add_option("--skip-stage", skip_stage, "start stage 2 from the stage-0 checkpoint");
    opt(tr, "--lambda", "lambda");
    opt(tr, "--k-max", "k_max");
    opt(tr, "--epochs", "stage1_epochs");  // stage-specific keys via --set
    opt(tr, "--seed", "train_seed");
    opt(tr, "--render-mode", "render_mode");

    CLI::App* inf = app.add_subcommand("infer", "answer one question with the latent rollout");
    add_common(inf);
    inf->add_option("--question", question, "question text")->required();
    opt(inf, "--strategy", "strategy");
    opt(inf, "--budget", "budget");
    opt(inf, "--temperature", "temperature");
    opt(inf, "--top-p", "top_p");

    CLI::App* ev = app.add_subcommand("eval", "Pass@1/#L evaluation on the test split");
    add_common(ev);
    opt(ev, "--strategy", "strategy");
    opt(ev, "--budget", "budget");
    opt(ev, "--seeds", "eval_seeds");
    opt(ev, "--limit", "eval_limit");
    opt(ev, "--threads", "threads");

    CLI::App* sw = app.add_subcommand("sweep", "budget sweep incl. dynamic termination");
    add_common(sw);
    sw->add_option_function<std::string>(
        "--budgets", [&flag_kv](const std::string& v) { flag_kv.emplace_back("budgets", v); });
    opt(sw, "--seeds", "eval_seeds");
    opt(sw, "--limit", "eval_limit");
    opt(sw, "--threads", "threads");

    CLI::App* an = app.add_subcommand("analyze", "latent-token diagnostics for one rollout");
    add_common(an);
    an->add_option("--question", question, "question text (default: first test example)");
    opt(an, "--strategy", "strategy");
    opt(an, "--budget", "budget");

    CLI::App* cmp = app.add_subcommand("compare", "RoT vs SFT baselines on shared seeds");
    add_common(cmp);
    opt(cmp, "--strategy", "strategy");
    opt(cmp, "--budget", "budget");
    opt(cmp, "--seeds", "eval_seeds");
    opt(cmp, "--limit", "eval_limit");
    opt(cmp, "--threads", "threads");

    CLI::App* rd = app.add_subcommand("render", "rasterize a string to PGM");
    add_common(rd);
    rd->add_option("--text", text, "string to render")->required();
    rd->add_option("--out", out, "output PGM path");
    opt(rd, "--img-height", "img_height");
    opt(rd, "--padding", "padding");
    opt(rd, "--font-size", "font_size");
    opt(rd, "--patch-width", "patch_width");
    opt(rd, "--render-mode", "render_mode");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // unknown verb/flag: usage error
    }

    try {
        RunConfig cfg = default_config();
        if (!config_file.empty()) cfg.load_file(config_file);
        for (const auto& [k, v] : flag_kv) cfg.set(k, v);
        for (const std::string& s : sets) {
            const size_t eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
            cfg.set(s.substr(0, eq), s.substr(eq + 1));
        }
        g_run_dir = run_dir_root(run_dir);
        fs::create_directories(g_run_dir);
        CLI::App* sub = app.get_subcommands().front();
        const std::string verb = sub->get_name();
        cfg.save(rpath("config." + verb + ".resolved"));

        if (verb == "gen-data") return do_gen_data(cfg);
        if (verb == "pretrain-lm") return do_pretrain_lm(cfg);
        if (verb == "pretrain-vlm") return do_pretrain_vlm(cfg);
        if (verb == "train") return do_train(cfg, stage, skip_stage);
        if (verb == "infer") return do_infer(cfg, question);
        if (verb == "eval") return do_eval(cfg);
        if (verb == "sweep") return do_sweep(cfg);
        if (verb == "analyze") return do_analyze(cfg, question);
        if (verb == "compare") return do_compare(cfg);
        if (verb == "render") return do_render(cfg, text, out);
        std::fprintf(stderr, "unknown verb %s\n", verb.c_str());
        return 2;
    } catch (const PrereqError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
