#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <unordered_set>

#include "rot/taskgen.hpp"
#include "rot/tokenizer.hpp"

using namespace rot;

TEST_CASE("tokenizer round trips the full alphabet") {
    Tokenizer tok;
    CHECK(tok.vocab_size() == 98);
    CHECK(tok.img_begin_id() == 96);
    CHECK(tok.img_end_id() == 97);
    std::string all = "\n";
    for (char c = 32; c <= 126; ++c) all.push_back(c);
    auto ids = tok.encode(all);
    REQUIRE(ids.size() == all.size());
    CHECK(tok.decode(ids) == all);
    // ids are distinct and in range
    std::unordered_set<int> seen(ids.begin(), ids.end());
    CHECK(seen.size() == ids.size());
    for (int id : ids) CHECK(id < Tokenizer::kBaseVocab);
    // unknown byte maps to '?'
    CHECK(tok.encode("\x01")[0] == tok.encode_char('?'));
    CHECK(tok.decode({tok.img_begin_id(), tok.img_end_id()}) == "<|img_begin|><|img_end|>");
}

TEST_CASE("tokenizer manifest lists every token once") {
    Tokenizer tok;
    const std::string path = "vocab_test.tsv";
    tok.save_manifest(path);
    std::ifstream in(path);
    int lines = 0;
    std::string line, last;
    while (std::getline(in, line)) {
        ++lines;
        last = line;
    }
    CHECK(lines == tok.vocab_size());
    CHECK(last == std::to_string(tok.img_end_id()) + "\t<|img_end|>");
    std::remove(path.c_str());
}

TEST_CASE("single step addition matches the clause format") {
    CHECK(replay_cot("2 + 3 = 5.") == 5);
    TaskSpec spec;
    spec.min_steps = spec.max_steps = 1;
    spec.min_operand = 2;
    spec.max_operand = 3;
    spec.ops = "+";
    spec.size = 20;
    for (const Example& ex : generate(spec)) {
        long long a, b, c;
        char op, eq, dot;
        std::istringstream in(ex.cot);
        REQUIRE((in >> a >> op >> b >> eq >> c >> dot));
        CHECK(op == '+');
        CHECK(a + b == c);
        CHECK(c == ex.answer);
        CHECK(b >= 2);
        CHECK(b <= 3);
    }
}

TEST_CASE("generated answers verify and questions are unique") {
    TaskSpec spec;
    spec.seed = 5;
    spec.size = 1000;
    auto examples = generate(spec);
    REQUIRE(examples.size() == 1000);
    std::unordered_set<std::string> questions;
    for (const Example& ex : examples) {
        CHECK(replay_cot(ex.cot) == ex.answer);
        CHECK(ex.answer >= spec.min_value);
        CHECK(ex.answer <= spec.max_value);
        questions.insert(ex.question);
    }
    CHECK(questions.size() == 1000);
}

TEST_CASE("generation is deterministic per seed") {
    TaskSpec spec;
    spec.seed = 9;
    spec.size = 50;
    auto a = generate(spec);
    auto b = generate(spec);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].question == b[i].question);
        CHECK(a[i].cot == b[i].cot);
        CHECK(a[i].answer == b[i].answer);
    }
    spec.seed = 10;
    auto c = generate(spec);
    CHECK(c[0].question != a[0].question);
}

TEST_CASE("ood spec keeps all operands large") {
    TaskSpec spec;
    spec.min_operand = 100;
    spec.max_operand = 999;
    spec.ops = "+-";  // multiplication cannot satisfy the operand floor
    spec.min_steps = 2;
    spec.max_steps = 3;
    spec.max_value = 99999;
    spec.size = 100;
    for (const Example& ex : generate(spec)) {
        std::istringstream in(ex.cot);
        long long a, b, c;
        char op, eq, dot;
        while (in >> a >> op >> b >> eq >> c >> dot) CHECK(b >= 100);
    }
}

TEST_CASE("split sizes, determinism and partition") {
    TaskSpec spec;
    spec.seed = 3;
    spec.size = 100;
    auto examples = generate(spec);
    auto s = split(examples, 0.8, 0.1, 0.1, 42);
    CHECK(s.train.size() == 80);
    CHECK(s.val.size() == 10);
    CHECK(s.test.size() == 10);

    auto s2 = split(examples, 0.8, 0.1, 0.1, 42);
    CHECK(s2.train[0].question == s.train[0].question);
    CHECK(s2.test[9].question == s.test[9].question);

    std::unordered_set<std::string> all;
    for (auto* part : {&s.train, &s.val, &s.test})
        for (const Example& ex : *part) all.insert(ex.question);
    CHECK(all.size() == 100);
    for (const Example& tr : s.train)
        for (const Example& te : s.test) CHECK(tr.question != te.question);

    CHECK_THROWS_AS(split(examples, 0.5, 0.1, 0.1, 0), TaskError);
}

TEST_CASE("save and load round trip") {
    TaskSpec spec;
    spec.seed = 11;
    spec.size = 30;
    auto examples = generate(spec);
    const std::string path = "taskgen_test.tsv";
    save_examples(path, examples);
    auto loaded = load_examples(path);
    REQUIRE(loaded.size() == examples.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].question == examples[i].question);
        CHECK(loaded[i].cot == examples[i].cot);
        CHECK(loaded[i].answer == examples[i].answer);
    }
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_examples(path), TaskError);
}

TEST_CASE("cot text protocol stays within the context budget") {
    // mean cot length must comfortably exceed 2x the default latent budget
    // while whole sequences stay under the model context
    TaskSpec spec;
    spec.seed = 2;
    spec.size = 200;
    double total = 0;
    size_t longest = 0;
    for (const Example& ex : generate(spec)) {
        total += double(ex.cot.size());
        longest = std::max(longest, ex.question.size() + ex.cot.size() + 24);
    }
    CHECK(total / 200.0 >= 64.0);
    CHECK(longest < 400);
}
