#include "rot/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "rot/rng.hpp"

namespace rot {

namespace {

const char* kStartTemplates[] = {"start with %. ", "begin with %. ", "take %. "};
const char* kAddTemplates[] = {"add %. ", "then add %. ", "now add %. "};
const char* kSubTemplates[] = {"subtract %. ", "take away %. ", "then subtract %. "};
const char* kMulTemplates[] = {"multiply by %. ", "times %. ", "then multiply by %. "};
const char* kEndTemplates[] = {"what is the total?", "what do you get?", "what is the result?"};

std::string fill(const char* tpl, long long n) {
    std::string out;
    for (const char* p = tpl; *p; ++p) {
        if (*p == '%')
            out += std::to_string(n);
        else
            out.push_back(*p);
    }
    return out;
}

template <size_t N>
const char* pick(const char* (&pool)[N], Rng& rng) {
    return pool[rng.next_below(N)];
}

struct Step {
    char op;
    long long operand;
};

// one candidate chain; false when a step has no feasible operand
bool build_chain(const TaskSpec& spec, Rng& rng, long long& start, std::vector<Step>& steps) {
    start = rng.next_int(spec.min_operand, spec.max_operand);
    long long cur = start;
    const int n_steps = rng.next_int(spec.min_steps, spec.max_steps);
    steps.clear();
    for (int s = 0; s < n_steps; ++s) {
        std::string ops = spec.ops;
        bool placed = false;
        while (!ops.empty() && !placed) {
            const size_t oi = rng.next_below(ops.size());
            const char op = ops[oi];
            ops.erase(oi, 1);
            long long lo = 0, hi = -1;
            if (op == '+') {
                lo = spec.min_operand;
                hi = std::min<long long>(spec.max_operand, spec.max_value - cur);
            } else if (op == '-') {
                lo = spec.min_operand;
                hi = std::min<long long>(spec.max_operand, cur - spec.min_value);
            } else if (op == '*') {
                lo = std::max<long long>(2, spec.min_operand);
                hi = std::min<long long>(spec.max_mul_operand,
                                         cur > 0 ? spec.max_value / cur : spec.max_mul_operand);
            }
            if (hi < lo) continue;
            const long long operand = rng.next_int(int(lo), int(hi));
            steps.push_back({op, operand});
            cur = op == '+' ? cur + operand : op == '-' ? cur - operand : cur * operand;
            placed = true;
        }
        if (!placed) return false;
    }
    return true;
}

long long eval_chain(long long start, const std::vector<Step>& steps) {
    long long cur = start;
    for (const Step& s : steps)
        cur = s.op == '+' ? cur + s.operand : s.op == '-' ? cur - s.operand : cur * s.operand;
    return cur;
}

std::string escape_tabs(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '\t' || c == '\n')
            out.push_back(' ');
        else
            out.push_back(c);
    }
    return out;
}

}  // namespace

std::vector<Example> generate(const TaskSpec& spec) {
    if (spec.min_steps < 1 || spec.max_steps < spec.min_steps || spec.size < 0 ||
        spec.min_operand < 1 || spec.max_operand < spec.min_operand || spec.ops.empty())
        throw TaskError("taskgen: invalid spec");
    Rng base(spec.seed);
    std::vector<Example> out;
    out.reserve(size_t(spec.size));
    std::unordered_set<std::string> seen;
    for (int i = 0; i < spec.size; ++i) {
        Example ex;
        bool ok = false;
        for (uint64_t attempt = 0; attempt < 256 && !ok; ++attempt) {
            Rng rng = base.fork(uint64_t(i) * 1024 + attempt);
            long long start = 0;
            std::vector<Step> steps;
            if (!build_chain(spec, rng, start, steps)) continue;

            std::string q = fill(pick(kStartTemplates, rng), start);
            std::string cot;
            long long cur = start;
            for (const Step& s : steps) {
                if (s.op == '+')
                    q += fill(pick(kAddTemplates, rng), s.operand);
                else if (s.op == '-')
                    q += fill(pick(kSubTemplates, rng), s.operand);
                else
                    q += fill(pick(kMulTemplates, rng), s.operand);
                const long long next =
                    s.op == '+' ? cur + s.operand : s.op == '-' ? cur - s.operand : cur * s.operand;
                cot += std::to_string(cur) + " " + s.op + " " + std::to_string(s.operand) + " = " +
                       std::to_string(next) + ". ";
                cur = next;
            }
            q += pick(kEndTemplates, rng);
            if (!cot.empty() && cot.back() == ' ') cot.pop_back();
            if (seen.count(q)) continue;

            ex.question = q;
            ex.cot = cot;
            ex.answer = cur;
            // independent verification of the stored answer
            if (eval_chain(start, steps) != ex.answer)
                throw TaskError("taskgen: answer verification failed");
            if (replay_cot(ex.cot) != ex.answer)
                throw TaskError("taskgen: cot replay mismatch");
            ok = true;
        }
        if (!ok) throw TaskError("taskgen: exhausted retries at example " + std::to_string(i));
        seen.insert(ex.question);
        out.push_back(std::move(ex));
    }
    return out;
}

long long replay_cot(const std::string& cot) {
    std::istringstream in(cot);
    long long a = 0, b = 0, c = 0, result = 0;
    char op = 0, eq = 0, dot = 0;
    bool first = true;
    while (in >> a >> op >> b >> eq >> c >> dot) {
        if (eq != '=' || dot != '.' || (op != '+' && op != '-' && op != '*'))
            throw TaskError("replay_cot: malformed clause");
        const long long expect = op == '+' ? a + b : op == '-' ? a - b : a * b;
        if (expect != c) throw TaskError("replay_cot: incorrect clause arithmetic");
        if (!first && a != result) throw TaskError("replay_cot: chain discontinuity");
        result = c;
        first = false;
    }
    if (first) throw TaskError("replay_cot: empty cot");
    return result;
}

DatasetSplit split(std::vector<Example> examples, double train_ratio, double val_ratio,
                   double test_ratio, uint64_t seed) {
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
        throw TaskError("split: ratios must sum to 1");
    Rng rng(seed);
    // Fisher-Yates over indices
    std::vector<size_t> idx(examples.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.next_below(i)]);
    const size_t n = examples.size();
    const size_t n_val = size_t(double(n) * val_ratio + 0.5);
    const size_t n_test = size_t(double(n) * test_ratio + 0.5);
    const size_t n_train = n - n_val - n_test;
    DatasetSplit out;
    for (size_t i = 0; i < n; ++i) {
        Example& ex = examples[idx[i]];
        if (i < n_train)
            out.train.push_back(std::move(ex));
        else if (i < n_train + n_val)
            out.val.push_back(std::move(ex));
        else
            out.test.push_back(std::move(ex));
    }
    return out;
}

void save_examples(const std::string& path, const std::vector<Example>& examples) {
    std::ofstream out(path);
    if (!out) throw TaskError("save_examples: cannot write " + path);
    out << "question\tcot\tanswer\n";
    for (const Example& ex : examples)
        out << escape_tabs(ex.question) << '\t' << escape_tabs(ex.cot) << '\t' << ex.answer << '\n';
}

std::vector<Example> load_examples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TaskError("load_examples: cannot read " + path);
    std::string line;
    if (!std::getline(in, line) || line != "question\tcot\tanswer")
        throw TaskError("load_examples: bad header in " + path);
    std::vector<Example> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw TaskError("load_examples: malformed record in " + path);
        Example ex;
        ex.question = line.substr(0, t1);
        ex.cot = line.substr(t1 + 1, t2 - t1 - 1);
        ex.answer = std::stoll(line.substr(t2 + 1));
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace rot
