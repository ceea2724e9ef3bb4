#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rot/optim.hpp"

using namespace rot;

namespace {

// scalar AdamW recurrence, run independently of the implementation
double adamw_scalar_oracle(double w, double g, double lr, double wd, double b1, double b2,
                           double eps, int steps) {
    double m = 0, v = 0;
    for (int t = 1; t <= steps; ++t) {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        w -= lr * wd * w;
        w -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    return w;
}

}  // namespace

TEST_CASE("zero gradient and zero decay leaves parameters unchanged") {
    Tensor p = Tensor::leaf({3}, {1.0f, -2.0f, 0.5f}, true);
    p.grad().assign(3, 0.0f);
    std::vector<NamedTensor> params = {{"p", p}};
    AdamW::Config cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(cfg);
    opt.step(params);
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == -2.0f);
    CHECK(p.data()[2] == 0.5f);
}

TEST_CASE("single scalar parameter matches the hand recurrence") {
    AdamW::Config cfg;
    cfg.lr = 0.1f;
    cfg.weight_decay = 0.0f;
    Tensor p = Tensor::leaf({1}, {2.0f}, true);
    std::vector<NamedTensor> params = {{"p", p}};
    AdamW opt(cfg);
    for (int t = 0; t < 3; ++t) {
        p.grad().assign(1, 1.0f);
        opt.step(params);
    }
    const double expect = adamw_scalar_oracle(2.0, 1.0, 0.1, 0.0, cfg.beta1, cfg.beta2, cfg.eps, 3);
    CHECK(p.data()[0] == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("decoupled decay shrinks by (1 - lr*wd) under zero gradient") {
    AdamW::Config cfg;  // defaults: lr 2e-5, wd 1e-2
    Tensor p = Tensor::leaf({1}, {1.0f}, true);
    p.grad().assign(1, 0.0f);
    std::vector<NamedTensor> params = {{"p", p}};
    AdamW opt(cfg);
    opt.step(params);
    CHECK(p.data()[0] == doctest::Approx(1.0 * (1.0 - 2e-5 * 1e-2)).epsilon(1e-6));
}

TEST_CASE("frozen parameters (no grad buffer) are untouched") {
    Tensor frozen = Tensor::leaf({2}, {3.0f, 4.0f}, false);
    Tensor live = Tensor::leaf({2}, {1.0f, 1.0f}, true);
    live.grad().assign(2, 1.0f);
    std::vector<NamedTensor> params = {{"frozen", frozen}, {"live", live}};
    AdamW opt;
    opt.step(params);
    CHECK(frozen.data()[0] == 3.0f);
    CHECK(frozen.data()[1] == 4.0f);
    CHECK(live.data()[0] != 1.0f);
}

TEST_CASE("non-finite gradient aborts the step") {
    Tensor p = Tensor::leaf({1}, {1.0f}, true);
    p.grad().assign(1, std::numeric_limits<float>::quiet_NaN());
    std::vector<NamedTensor> params = {{"p", p}};
    AdamW opt;
    CHECK_THROWS_AS(opt.step(params), TensorError);
}

TEST_CASE("step is deterministic given identical inputs") {
    auto run = [] {
        Tensor p = Tensor::leaf({4}, {0.1f, -0.5f, 2.0f, 1.5f}, true);
        std::vector<NamedTensor> params = {{"p", p}};
        AdamW::Config cfg;
        cfg.lr = 1e-2f;
        AdamW opt(cfg);
        for (int t = 0; t < 5; ++t) {
            p.grad() = {0.3f, -0.1f, 0.9f, float(t)};
            opt.step(params);
        }
        return p.data();
    };
    CHECK(run() == run());
}

TEST_CASE("global norm clipping") {
    Tensor a = Tensor::leaf({2}, {0.0f, 0.0f}, true);
    Tensor b = Tensor::leaf({1}, {0.0f}, true);
    a.grad() = {3.0f, 0.0f};
    b.grad() = {4.0f};
    std::vector<NamedTensor> params = {{"a", a}, {"b", b}};
    const double norm = clip_global_norm(params, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6f));
    CHECK(b.grad()[0] == doctest::Approx(0.8f));
}

TEST_CASE("grad_check flags a deliberately wrong gradient and a linear model is exact") {
    Tensor w = Tensor::leaf({1, 4}, {0.3f, -0.2f, 0.7f, 0.1f}, true);
    Tensor x = Tensor::leaf({4, 1}, {1.0f, 2.0f, -1.0f, 0.5f}, false);
    auto fn = [&] { return mean_all(matmul(w, x)); };
    auto rep = grad_check(fn, {{"w", w}}, 1e-3);
    CHECK(rep.passed);
    CHECK(rep.max_rel_err < 1e-4);  // linear: error near machine-epsilon scale
}

TEST_CASE("grad_check rejects non-deterministic model functions") {
    Tensor w = Tensor::leaf({1}, {1.0f}, true);
    int calls = 0;
    auto fn = [&] {
        ++calls;
        return scale(sum_all(w), float(calls));
    };
    CHECK_THROWS_AS(grad_check(fn, {{"w", w}}, 1e-3), TensorError);
}
