#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rot/tensor.hpp"

namespace rot {

// Named parameter handle; models expose their trainable/frozen tensors as
// lists of these so the optimizer, checkpointing and hashing all agree on
// naming.
struct NamedTensor {
    std::string name;
    Tensor t;
};

// AdamW with decoupled weight decay. Moments are keyed positionally: the
// same parameter list must be passed on every step.
class AdamW {
public:
    struct Config {
        float lr = 2e-5f;
        float weight_decay = 1e-2f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float eps = 1e-8f;
    };

    AdamW();
    explicit AdamW(const Config& cfg) : cfg_(cfg) {}

    // Applies one update. Parameters without an allocated grad buffer are
    // untouched (frozen or unused this step). Throws on non-finite grads.
    void step(std::vector<NamedTensor>& params);
    static void zero_grad(std::vector<NamedTensor>& params);

    int64_t step_count() const { return step_count_; }
    Config& config() { return cfg_; }

private:
    struct Moments {
        std::vector<float> m, v;
    };
    Config cfg_;
    std::vector<Moments> moments_;
    int64_t step_count_ = 0;
};

// Rescales grads in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<NamedTensor>& params, double max_norm);

// ---- finite-difference gradient checking ----------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool passed = false;
};

// Central differences with step 1e-3 relative to parameter magnitude.
// model_fn must rebuild the forward pass from the current parameter values
// on every call; non-determinism is detected and rejected.
// Per-parameter error is max |g_fd - g_an| normalized by the largest
// gradient magnitude of that parameter.
GradCheckReport grad_check(const std::function<Tensor()>& model_fn,
                           std::vector<NamedTensor> params, double tolerance);

}  // namespace rot
