#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rot/infer.hpp"
#include "rot/taskgen.hpp"

namespace rot {

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- answer matching -------------------------------------------------------

// first signed integer after the last "A:" marker (whitespace, leading zeros
// and trailing unit words ignored); nullopt when no digits follow
std::optional<long long> extract_answer(const std::string& text);
bool answers_match(const std::string& text, long long expected);

// reasoning-segment length of a generated completion: characters strictly
// between the "R:" and "A:" markers; 0 when either is absent
int cot_token_count(const std::string& text);

// ---- evaluation ------------------------------------------------------------

enum class Method { kRot, kSftCot, kSftNoCot };
std::string method_name(Method m);

struct EvalStrategy {
    Method method = Method::kRot;
    RolloutStrategy rollout;  // RoT only
    SamplingConfig sampling;  // seed is overridden per (run seed, example)
    int trace_samples = 8;    // latent traces kept per run, from the front
    int threads = 0;          // 0 = hardware concurrency
};

// one seed's pass over the dataset
struct EvalRun {
    uint64_t seed = 0;
    double pass1 = 0.0;     // percent
    double lat_mean = 0.0;  // reasoning tokens per example
    double wall_mean = 0.0;
    std::vector<LatentTrace> sample_traces;  // RoT only
};

struct MethodRow {
    std::string method;
    double pass1_mean = 0.0, pass1_ci = 0.0;
    double lat_mean = 0.0, lat_ci = 0.0;
    double wall_mean = 0.0;
    double efficiency = 0.0;  // Pass@1 / #L; 0 when #L = 0
};

struct EvalReport {
    std::vector<MethodRow> rows;
    std::vector<uint64_t> seeds;
    std::string dataset_id;
    double compression_ratio = 0.0;  // #L(CoT) / #L(RoT); comparisons only
};

EvalRun evaluate_run(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& dataset,
                     const EvalStrategy& strategy, uint64_t seed);

// multi-seed evaluation of one method; CI = 1.96 * sample std / sqrt(n)
EvalReport evaluate(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& dataset,
                    const EvalStrategy& strategy, const std::vector<uint64_t>& seeds,
                    const std::string& dataset_id);

// the documented CI half-width (Bessel-corrected std; 0 for n <= 1)
double ci_half_width(const std::vector<double>& values);

// ---- budget sweep ----------------------------------------------------------

struct SweepRow {
    int budget = 0;  // -1 = dynamic termination
    MethodRow row;
};

struct SweepTable {
    std::vector<SweepRow> rows;
    std::vector<uint64_t> seeds;
    std::string dataset_id;
};

// one evaluate per static budget plus a dynamic-termination row
SweepTable budget_sweep(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& dataset,
                        const std::vector<int>& budgets, const EvalStrategy& base,
                        const std::vector<uint64_t>& seeds, const std::string& dataset_id);

// ---- latent diagnostics ----------------------------------------------------

struct LatentDiagnostics {
    int t_lat = 0;
    std::vector<double> cosine;  // t_lat x t_lat, row-major
    std::vector<double> step_mean, step_std, step_norm;  // per latent step
    std::vector<bool> zero_norm;  // flagged steps with undefined cosine
    double tail_homogeneity = 0.0;  // mean pairwise cosine, last quartile
};

LatentDiagnostics latent_diagnostics(const LatentTrace& trace);

// ---- comparisons -----------------------------------------------------------

// Table-style comparison of the three trained variants over shared seeds
EvalReport compare_methods(ModelBundle& rot, ModelBundle& sft_cot, ModelBundle& sft_nocot,
                           const Tokenizer& tok, const std::vector<Example>& dataset,
                           const EvalStrategy& rot_strategy, const std::vector<uint64_t>& seeds,
                           const std::string& dataset_id);

// ---- artifacts -------------------------------------------------------------
// CSV schemas (first line = header):
//   report:  method,pass1,pass1_ci,lat,lat_ci,wall,efficiency
//   sweep:   budget,pass1,pass1_ci,lat,lat_ci,wall   (budget "dynamic" allowed)
//   curve:   step,l_align,l_pred,l_total
// "# key=value" comment lines carry seeds/dataset/compression metadata.

void write_report_csv(const EvalReport& report, const std::string& path);
EvalReport read_report_csv(const std::string& path);
void write_sweep_csv(const SweepTable& table, const std::string& path);

// grayscale PGM of the cosine matrix, t_lat x t_lat, cos -1..1 -> 0..255
void write_similarity_pgm(const LatentDiagnostics& diag, const std::string& path);
// per-step stats table: step,mean,std,norm,zero_norm
void write_diagnostics_csv(const LatentDiagnostics& diag, const std::string& path);
// budget sweep as an SVG with one polyline per metric (pass1, lat)
void write_sweep_svg(const SweepTable& table, const std::string& path);
// generic curve SVG: one polyline per named series over a shared x axis
void write_curves_svg(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      const std::string& path);

// diagnostics artifacts (PGM + CSV per trace) for a run's sample traces;
// returns the number of files written
int emit_trace_artifacts(const EvalRun& run, const std::string& dir, const std::string& stem);

}  // namespace rot
