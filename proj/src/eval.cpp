#include "rot/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace rot {

// ---- answer matching -------------------------------------------------------

std::optional<long long> extract_answer(const std::string& text) {
    size_t pos = text.rfind("A:");
    size_t start = pos == std::string::npos ? 0 : pos + 2;
    // first signed integer from `start`; leading zeros fall out of strtoll
    for (size_t i = start; i < text.size(); ++i) {
        const char c = text[i];
        const bool sign = (c == '-' || c == '+') && i + 1 < text.size() &&
                          std::isdigit(uint8_t(text[i + 1]));
        if (std::isdigit(uint8_t(c)) || sign) {
            try {
                return std::stoll(text.substr(i));
            } catch (const std::exception&) {
                return std::nullopt;
            }
        }
        if (c == '\n') break;
    }
    return std::nullopt;
}

bool answers_match(const std::string& text, long long expected) {
    const auto got = extract_answer(text);
    return got.has_value() && *got == expected;
}

int cot_token_count(const std::string& text) {
    const size_t r = text.find("R:");
    if (r == std::string::npos) return 0;
    const size_t a = text.find("A:", r + 2);
    if (a == std::string::npos) return 0;
    return int(a - (r + 2));
}

// ---- evaluation ------------------------------------------------------------

std::string method_name(Method m) {
    switch (m) {
        case Method::kRot: return "RoT";
        case Method::kSftCot: return "SFT-CoT";
        case Method::kSftNoCot: return "SFT-w/o-CoT";
    }
    throw EvalError("method_name: unknown method");
}

double ci_half_width(const std::vector<double>& values) {
    const size_t n = values.size();
    if (n <= 1) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= double(n);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sample_std = std::sqrt(ss / double(n - 1));
    return 1.96 * sample_std / std::sqrt(double(n));
}

namespace {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

MethodRow summarize(const std::string& name, const std::vector<EvalRun>& runs) {
    MethodRow row;
    row.method = name;
    std::vector<double> p1, lat, wall;
    for (const EvalRun& r : runs) {
        p1.push_back(r.pass1);
        lat.push_back(r.lat_mean);
        wall.push_back(r.wall_mean);
    }
    row.pass1_mean = mean_of(p1);
    row.pass1_ci = ci_half_width(p1);
    row.lat_mean = mean_of(lat);
    row.lat_ci = ci_half_width(lat);
    row.wall_mean = mean_of(wall);
    row.efficiency = row.lat_mean > 0.0 ? row.pass1_mean / row.lat_mean : 0.0;
    return row;
}

}  // namespace

EvalRun evaluate_run(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& dataset,
                     const EvalStrategy& strategy, uint64_t seed) {
    if (dataset.empty()) throw EvalError("evaluate_run: empty dataset");
    const size_t n = dataset.size();
    std::vector<char> correct(n, 0);
    std::vector<double> lat(n, 0.0), wall(n, 0.0);
    const size_t n_traces =
        strategy.method == Method::kRot ? std::min(size_t(strategy.trace_samples), n) : 0;
    std::vector<LatentTrace> traces(n_traces);

    int n_threads = strategy.threads > 0 ? strategy.threads
                                         : int(std::thread::hardware_concurrency());
    n_threads = std::max(1, std::min(n_threads, int(n)));

    std::atomic<size_t> cursor{0};
    std::atomic<bool> failed{false};
    std::string fail_msg;
    std::mutex fail_mu;

    auto worker = [&]() {
        try {
            for (size_t i; (i = cursor.fetch_add(1)) < n;) {
                if (failed.load()) return;
                const Example& ex = dataset[i];
                SamplingConfig sc = strategy.sampling;
                sc.seed = seed ^ ((i + 1) * 0x9e3779b97f4a7c15ull);
                if (strategy.method == Method::kRot) {
                    AnswerResult ar = answer(mb, tok, ex.question, strategy.rollout, sc);
                    correct[i] = answers_match(ar.text, ex.answer) ? 1 : 0;
                    lat[i] = double(ar.trace.t_lat);
                    wall[i] = ar.wallclock_s;
                    if (i < traces.size()) traces[i] = std::move(ar.trace);
                } else {
                    TextGeneration g = generate_text(mb, tok, "Q:" + ex.question, sc);
                    correct[i] = answers_match(g.text, ex.answer) ? 1 : 0;
                    lat[i] = strategy.method == Method::kSftCot ? double(cot_token_count(g.text))
                                                                : 0.0;
                    wall[i] = g.wallclock_s;
                }
            }
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lk(fail_mu);
            if (!failed.exchange(true)) fail_msg = e.what();
        }
    };

    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failed.load()) throw EvalError("evaluate_run: " + fail_msg);

    EvalRun run;
    run.seed = seed;
    size_t hits = 0;
    for (char c : correct) hits += size_t(c);
    run.pass1 = 100.0 * double(hits) / double(n);
    run.lat_mean = mean_of(lat);
    run.wall_mean = mean_of(wall);
    run.sample_traces = std::move(traces);
    return run;
}

EvalReport evaluate(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& dataset,
                    const EvalStrategy& strategy, const std::vector<uint64_t>& seeds,
                    const std::string& dataset_id) {
    if (seeds.empty()) throw EvalError("evaluate: at least one seed required");
    std::vector<EvalRun> runs;
    for (uint64_t s : seeds) runs.push_back(evaluate_run(mb, tok, dataset, strategy, s));
    EvalReport rep;
    rep.rows.push_back(summarize(method_name(strategy.method), runs));
    rep.seeds = seeds;
    rep.dataset_id = dataset_id;
    return rep;
}

// ---- budget sweep ----------------------------------------------------------

SweepTable budget_sweep(ModelBundle& mb, const Tokenizer& tok, const std::vector<Example>& dataset,
                        const std::vector<int>& budgets, const EvalStrategy& base,
                        const std::vector<uint64_t>& seeds, const std::string& dataset_id) {
    SweepTable table;
    table.seeds = seeds;
    table.dataset_id = dataset_id;
    for (int b : budgets) {
        EvalStrategy st = base;
        st.method = Method::kRot;
        st.rollout.mode = RolloutStrategy::kStatic;
        st.rollout.budget = b;
        EvalReport rep = evaluate(mb, tok, dataset, st, seeds, dataset_id);
        rep.rows[0].method = "B=" + std::to_string(b);
        table.rows.push_back({b, rep.rows[0]});
    }
    EvalStrategy dyn = base;
    dyn.method = Method::kRot;
    dyn.rollout.mode = RolloutStrategy::kDynamic;
    EvalReport rep = evaluate(mb, tok, dataset, dyn, seeds, dataset_id);
    rep.rows[0].method = "dynamic";
    table.rows.push_back({-1, rep.rows[0]});
    return table;
}

// ---- latent diagnostics ----------------------------------------------------

LatentDiagnostics latent_diagnostics(const LatentTrace& trace) {
    if (trace.vhat.empty()) throw EvalError("latent_diagnostics: empty trace");
    const int T = int(trace.vhat.size());
    LatentDiagnostics d;
    d.t_lat = T;
    d.step_mean.resize(size_t(T));
    d.step_std.resize(size_t(T));
    d.step_norm.resize(size_t(T));
    d.zero_norm.resize(size_t(T));
    for (int i = 0; i < T; ++i) {
        const auto& v = trace.vhat[size_t(i)];
        double mean = 0.0;
        for (float x : v) mean += double(x);
        mean /= double(v.size());
        double var = 0.0, ss = 0.0;
        for (float x : v) {
            var += (double(x) - mean) * (double(x) - mean);
            ss += double(x) * double(x);
        }
        d.step_mean[size_t(i)] = mean;
        d.step_std[size_t(i)] = std::sqrt(var / double(v.size()));
        d.step_norm[size_t(i)] = std::sqrt(ss);
        d.zero_norm[size_t(i)] = d.step_norm[size_t(i)] == 0.0;
    }
    d.cosine.assign(size_t(T) * size_t(T), 0.0);
    for (int i = 0; i < T; ++i) {
        for (int j = 0; j < T; ++j) {
            if (i == j) {
                d.cosine[size_t(i * T + j)] = 1.0;  // flagged steps keep the unit diagonal
                continue;
            }
            if (d.zero_norm[size_t(i)] || d.zero_norm[size_t(j)]) continue;  // flagged: 0
            const auto& a = trace.vhat[size_t(i)];
            const auto& b = trace.vhat[size_t(j)];
            double dot = 0.0;
            for (size_t k = 0; k < a.size(); ++k) dot += double(a[k]) * double(b[k]);
            double c = dot / (d.step_norm[size_t(i)] * d.step_norm[size_t(j)]);
            d.cosine[size_t(i * T + j)] = std::clamp(c, -1.0, 1.0);
        }
    }
    // mean pairwise cosine over the last quartile of steps (at least two
    // steps whenever the trace allows a pair)
    const int q = std::min(T, std::max(2, T - (3 * T) / 4));
    const int start = T - q;
    double acc = 0.0;
    int pairs = 0;
    for (int i = start; i < T; ++i)
        for (int j = i + 1; j < T; ++j) {
            if (d.zero_norm[size_t(i)] || d.zero_norm[size_t(j)]) continue;
            acc += d.cosine[size_t(i * T + j)];
            ++pairs;
        }
    d.tail_homogeneity = pairs > 0 ? acc / double(pairs) : (T == 1 ? 1.0 : 0.0);
    return d;
}

// ---- comparisons -----------------------------------------------------------

EvalReport compare_methods(ModelBundle& rot, ModelBundle& sft_cot, ModelBundle& sft_nocot,
                           const Tokenizer& tok, const std::vector<Example>& dataset,
                           const EvalStrategy& rot_strategy, const std::vector<uint64_t>& seeds,
                           const std::string& dataset_id) {
    EvalStrategy st_nocot = rot_strategy;
    st_nocot.method = Method::kSftNoCot;
    EvalStrategy st_cot = rot_strategy;
    st_cot.method = Method::kSftCot;
    EvalStrategy st_rot = rot_strategy;
    st_rot.method = Method::kRot;

    EvalReport rep;
    rep.seeds = seeds;
    rep.dataset_id = dataset_id;
    rep.rows.push_back(evaluate(sft_nocot, tok, dataset, st_nocot, seeds, dataset_id).rows[0]);
    rep.rows.push_back(evaluate(sft_cot, tok, dataset, st_cot, seeds, dataset_id).rows[0]);
    rep.rows.push_back(evaluate(rot, tok, dataset, st_rot, seeds, dataset_id).rows[0]);
    const double lat_cot = rep.rows[1].lat_mean;
    const double lat_rot = rep.rows[2].lat_mean;
    rep.compression_ratio = lat_rot > 0.0 ? lat_cot / lat_rot : 0.0;
    return rep;
}

// ---- artifacts -------------------------------------------------------------

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw EvalError("cannot write " + path);
    return f;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void write_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream f = open_out(path);
    f << "# dataset=" << report.dataset_id << "\n# seeds=";
    for (size_t i = 0; i < report.seeds.size(); ++i)
        f << (i ? "," : "") << report.seeds[i];
    f << "\n# compression=" << fmt(report.compression_ratio) << "\n";
    f << "method,pass1,pass1_ci,lat,lat_ci,wall,efficiency\n";
    for (const MethodRow& r : report.rows)
        f << r.method << ',' << fmt(r.pass1_mean) << ',' << fmt(r.pass1_ci) << ','
          << fmt(r.lat_mean) << ',' << fmt(r.lat_ci) << ',' << fmt(r.wall_mean) << ','
          << fmt(r.efficiency) << "\n";
}

EvalReport read_report_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw EvalError("cannot read " + path);
    EvalReport rep;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(2, eq - 2);
            const std::string val = line.substr(eq + 1);
            if (key == "dataset") {
                rep.dataset_id = val;
            } else if (key == "compression") {
                rep.compression_ratio = std::stod(val);
            } else if (key == "seeds" && !val.empty()) {
                std::stringstream ss(val);
                std::string tokstr;
                while (std::getline(ss, tokstr, ',')) rep.seeds.push_back(std::stoull(tokstr));
            }
            continue;
        }
        if (line.rfind("method,", 0) == 0) continue;  // header
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 7) throw EvalError("malformed report row: " + line);
        MethodRow r;
        r.method = cells[0];
        r.pass1_mean = std::stod(cells[1]);
        r.pass1_ci = std::stod(cells[2]);
        r.lat_mean = std::stod(cells[3]);
        r.lat_ci = std::stod(cells[4]);
        r.wall_mean = std::stod(cells[5]);
        r.efficiency = std::stod(cells[6]);
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

void write_sweep_csv(const SweepTable& table, const std::string& path) {
    std::ofstream f = open_out(path);
    f << "# dataset=" << table.dataset_id << "\n# seeds=";
    for (size_t i = 0; i < table.seeds.size(); ++i)
        f << (i ? "," : "") << table.seeds[i];
    f << "\nbudget,pass1,pass1_ci,lat,lat_ci,wall\n";
    for (const SweepRow& r : table.rows) {
        if (r.budget < 0)
            f << "dynamic";
        else
            f << r.budget;
        f << ',' << fmt(r.row.pass1_mean) << ',' << fmt(r.row.pass1_ci) << ','
          << fmt(r.row.lat_mean) << ',' << fmt(r.row.lat_ci) << ',' << fmt(r.row.wall_mean)
          << "\n";
    }
}

void write_similarity_pgm(const LatentDiagnostics& diag, const std::string& path) {
    std::ofstream f = open_out(path);
    const int T = diag.t_lat;
    f << "P2\n" << T << ' ' << T << "\n255\n";
    for (int i = 0; i < T; ++i) {
        for (int j = 0; j < T; ++j) {
            const double c = diag.cosine[size_t(i * T + j)];
            const int g = int(std::lround((c + 1.0) * 0.5 * 255.0));
            f << std::clamp(g, 0, 255) << (j + 1 < T ? ' ' : '\n');
        }
    }
}

void write_diagnostics_csv(const LatentDiagnostics& diag, const std::string& path) {
    std::ofstream f = open_out(path);
    f << "# tail_homogeneity=" << fmt(diag.tail_homogeneity) << "\n";
    f << "step,mean,std,norm,zero_norm\n";
    for (int i = 0; i < diag.t_lat; ++i)
        f << i + 1 << ',' << fmt(diag.step_mean[size_t(i)]) << ','
          << fmt(diag.step_std[size_t(i)]) << ',' << fmt(diag.step_norm[size_t(i)]) << ','
          << int(diag.zero_norm[size_t(i)]) << "\n";
}

namespace {

constexpr int kSvgW = 640, kSvgH = 400, kSvgPad = 40;

void svg_polyline(std::ofstream& f, const std::vector<double>& xs, const std::vector<double>& ys,
                  const std::string& color, const std::string& label) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (double x : xs) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
    }
    for (double y : ys) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }
    if (xmax <= xmin) xmax = xmin + 1.0;
    if (ymax <= ymin) ymax = ymin + 1.0;
    f << "<polyline fill=\"none\" stroke=\"" << color << "\" data-metric=\"" << label
      << "\" points=\"";
    for (size_t i = 0; i < xs.size(); ++i) {
        const double px = kSvgPad + (xs[i] - xmin) / (xmax - xmin) * (kSvgW - 2 * kSvgPad);
        const double py = kSvgH - kSvgPad - (ys[i] - ymin) / (ymax - ymin) * (kSvgH - 2 * kSvgPad);
        f << px << ',' << py << ' ';
    }
    f << "\"/>\n";
}

}  // namespace

void write_sweep_svg(const SweepTable& table, const std::string& path) {
    std::ofstream f = open_out(path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgW << "\" height=\"" << kSvgH
      << "\">\n";
    std::vector<double> xs, pass1, lat;
    for (const SweepRow& r : table.rows) {
        if (r.budget < 0) continue;  // dynamic row has no budget coordinate
        xs.push_back(double(r.budget));
        pass1.push_back(r.row.pass1_mean);
        lat.push_back(r.row.lat_mean);
    }
    svg_polyline(f, xs, pass1, "#1f77b4", "pass1");
    svg_polyline(f, xs, lat, "#d62728", "lat");
    f << "</svg>\n";
}

void write_curves_svg(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      const std::string& path) {
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
    std::ofstream f = open_out(path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgW << "\" height=\"" << kSvgH
      << "\">\n";
    for (size_t s = 0; s < series.size(); ++s) {
        std::vector<double> xs(series[s].second.size());
        for (size_t i = 0; i < xs.size(); ++i) xs[i] = double(i);
        svg_polyline(f, xs, series[s].second, kColors[s % 4], series[s].first);
    }
    f << "</svg>\n";
}

int emit_trace_artifacts(const EvalRun& run, const std::string& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    int written = 0;
    for (size_t i = 0; i < run.sample_traces.size(); ++i) {
        if (run.sample_traces[i].vhat.empty()) continue;
        LatentDiagnostics diag = latent_diagnostics(run.sample_traces[i]);
        const std::string base = dir + "/" + stem + "_" + std::to_string(i);
        write_similarity_pgm(diag, base + ".pgm");
        write_diagnostics_csv(diag, base + ".csv");
        written += 2;
    }
    return written;
}

}  // namespace rot
