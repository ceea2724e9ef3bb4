#include "rot/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace rot {

AdamW::AdamW() : cfg_(Config()) {}

void AdamW::step(std::vector<NamedTensor>& params) {
    if (moments_.empty()) moments_.resize(params.size());
    if (moments_.size() != params.size())
        throw TensorError("adamw: parameter list size changed between steps");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(step_count_));
    const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(step_count_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi].t;
        if (p.grad().empty()) continue;  // frozen or unused: untouched
        if (p.grad().size() != p.numel())
            throw TensorError("adamw: grad shape mismatch for " + params[pi].name);
        if (!all_finite(p.grad()))
            throw TensorError("adamw: non-finite gradient for " + params[pi].name);
        Moments& mo = moments_[pi];
        if (mo.m.empty()) {
            mo.m.assign(p.numel(), 0.0f);
            mo.v.assign(p.numel(), 0.0f);
        }
        float* w = p.data().data();
        const float* g = p.grad().data();
        for (size_t i = 0; i < p.numel(); ++i) {
            mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0f - cfg_.beta1) * g[i];
            mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
            const double mhat = double(mo.m[i]) / bc1;
            const double vhat = double(mo.v[i]) / bc2;
            // decoupled decay: applied to the parameter, not via the gradient
            w[i] -= float(double(cfg_.lr) * cfg_.weight_decay * w[i]);
            w[i] -= float(double(cfg_.lr) * mhat / (std::sqrt(vhat) + double(cfg_.eps)));
        }
    }
}

void AdamW::zero_grad(std::vector<NamedTensor>& params) {
    for (auto& p : params) p.t.zero_grad();
}

double clip_global_norm(std::vector<NamedTensor>& params, double max_norm) {
    double ss = 0.0;
    for (auto& p : params)
        for (float g : p.t.grad()) ss += double(g) * g;
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0.0) {
        const float k = float(max_norm / norm);
        for (auto& p : params)
            for (float& g : p.t.grad()) g *= k;
    }
    return norm;
}

GradCheckReport grad_check(const std::function<Tensor()>& model_fn,
                           std::vector<NamedTensor> params, double tolerance) {
    GradCheckReport report;
    // f64-accumulating kernels: the 1e-3 probe must resolve loss differences
    // well below the f32 forward rounding floor
    PreciseScope precise;

    // determinism gate: two forward passes must agree exactly
    double l0, l1;
    {
        NoGradScope ng;
        l0 = model_fn().item_f64();
        l1 = model_fn().item_f64();
    }
    if (l0 != l1) throw TensorError("grad_check: model_fn is not deterministic");

    // analytic gradients
    std::vector<std::vector<float>> analytic(params.size());
    {
        for (auto& p : params) p.t.zero_grad();
        Tape tape;
        Tensor loss = model_fn();
        tape.backward(loss);
        for (size_t i = 0; i < params.size(); ++i) {
            analytic[i] = params[i].t.grad();
            if (analytic[i].empty()) analytic[i].assign(params[i].t.numel(), 0.0f);
        }
    }

    NoGradScope ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi].t;
        GradCheckEntry entry{params[pi].name, 0.0};
        std::vector<double> fd(p.numel());
        double gmax = 0.0;
        for (size_t i = 0; i < p.numel(); ++i) {
            const float orig = p.data()[i];
            const double h = 1e-3 * std::max(1.0, std::fabs(double(orig)));
            p.data()[i] = float(double(orig) + h);
            const double lp = model_fn().item_f64();
            p.data()[i] = float(double(orig) - h);
            const double lm = model_fn().item_f64();
            p.data()[i] = orig;
            // denominator uses the actually applied (rounded-to-f32) step
            const double happ = (double(float(double(orig) + h)) - double(float(double(orig) - h))) / 2.0;
            fd[i] = (lp - lm) / (2.0 * happ);
            gmax = std::max(gmax, std::fabs(fd[i]));
            gmax = std::max(gmax, std::fabs(double(analytic[pi][i])));
        }
        const double denom = std::max(gmax, 1e-8);
        for (size_t i = 0; i < p.numel(); ++i) {
            const double err = std::fabs(fd[i] - double(analytic[pi][i])) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, err);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.passed = report.max_rel_err < tolerance;
    return report;
}

}  // namespace rot
