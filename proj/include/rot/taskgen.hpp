#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rot {

struct TaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Chained-arithmetic word problems: a running value transformed by a few
// +/-/* steps, phrased from a small fixed template pool so the character
// alphabet stays tiny.
struct TaskSpec {
    int min_steps = 4;
    int max_steps = 6;
    int min_operand = 1;
    int max_operand = 99;
    std::string ops = "+-*";
    int max_mul_operand = 9;      // keeps products desk-sized
    long long min_value = 0;      // running-value bounds (no negative
    long long max_value = 9999;   // intermediates, bounded digit count)
    uint64_t seed = 0;
    int size = 1000;
};

struct Example {
    std::string question;
    std::string cot;     // "a OP b = c." clauses, space separated
    long long answer = 0;
};

struct DatasetSplit {
    std::vector<Example> train, val, test;
};

// Deterministic per (spec.seed, index); every answer is re-verified against
// an independent chain evaluation and all questions are distinct.
std::vector<Example> generate(const TaskSpec& spec);

// Replays the CoT clauses by parsing them; returns the final value.
long long replay_cot(const std::string& cot);

DatasetSplit split(std::vector<Example> examples, double train_ratio, double val_ratio,
                   double test_ratio, uint64_t seed);

// Tab-separated, one record per line, self-describing header row.
void save_examples(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> load_examples(const std::string& path);

}  // namespace rot
