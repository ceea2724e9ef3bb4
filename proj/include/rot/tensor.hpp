#pragma once

#include <cstdint>
#include <limits>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rot/rng.hpp"

namespace rot {

// Dense row-major f32 array with an optional gradient accumulator of the same
// shape. Reductions accumulate in f64; storage stays f32.
//
// Autodiff is a define-by-run tape: every primitive applied while a Tape is
// active records a node with a backward closure. Leaves (parameters) live
// outside the tape and keep their grad buffers across steps until zeroed.

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tape;

struct Node {
    std::vector<int> shape;
    std::vector<float> x;  // values
    std::vector<float> g;  // grad accumulator; allocated lazily
    bool requires_grad = false;  // leaf flag
    bool needs_grad = false;     // this or any ancestor requires grad
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // accumulates into parents' g
    std::string op;  // primitive id, for diagnostics
    // shadow f64 value for scalar reductions; keeps finite-difference
    // oracles above the f32 rounding floor
    double scalar_f64 = std::numeric_limits<double>::quiet_NaN();
    // full f64 shadow of x, populated inside a PreciseScope so composite
    // losses stay smooth under finite-difference probes; empty otherwise
    std::vector<double> x64;

    size_t numel() const { return x.size(); }
    void ensure_grad() {
        if (g.size() != x.size()) g.assign(x.size(), 0.0f);
    }
};

// Value-semantics handle over a shared node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor leaf(std::vector<int> shape, bool requires_grad = false);
    static Tensor leaf(std::vector<int> shape, const std::vector<float>& data,
                       bool requires_grad = false);
    static Tensor scalar(float v);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    size_t numel() const { return n_->x.size(); }
    std::vector<float>& data() { return n_->x; }
    const std::vector<float>& data() const { return n_->x; }
    std::vector<float>& grad() { return n_->g; }
    const std::vector<float>& grad() const { return n_->g; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; n_->needs_grad = b; }
    float item() const;
    // scalar value at f64 precision when produced by a reduction, else item()
    double item_f64() const;
    void zero_grad() { n_->g.clear(); }
    std::shared_ptr<Node> node() const { return n_; }

    int rows() const { return n_->shape.at(0); }
    int cols() const { return n_->shape.size() > 1 ? n_->shape.at(1) : 1; }

private:
    std::shared_ptr<Node> n_;
};

// Execution graph. Nodes are appended in creation order, which is a valid
// topological order; backward walks it in reverse exactly once.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::shared_ptr<Node> n) { nodes_.push_back(std::move(n)); }
    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates grads into every needs_grad
    // leaf reachable from `loss`. A tape can be consumed only once.
    void backward(const Tensor& loss);

    static Tape* current();

private:
    std::vector<std::shared_ptr<Node>> nodes_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// Suppresses recording inside a scope (inference fast paths).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();

private:
    Tape* saved_;
};

// Routes the long dot-product chains in GEMM and attention through f64
// accumulators inside the scope (storage stays f32). Roughly 2x slower;
// finite-difference oracles need it so a 1e-3 probe of the loss sits above
// the forward rounding floor, and any caller may opt in.
class PreciseScope {
public:
    PreciseScope();
    ~PreciseScope();

private:
    bool saved_;
};

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // (M,K)x(K,N)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (M,K)x(N,K)^T -> (M,N)
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or b is a row vector
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same shape, or b is a row vector
Tensor scale(const Tensor& a, float c);
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor softmax(const Tensor& a);      // along last axis
Tensor rms_normalize(const Tensor& a, float eps = 1e-6f);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor squared_difference(const Tensor& a, const Tensor& b);
// mean over masked positions of -log softmax(logits)[target]
Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<float>& mask);
Tensor relu(const Tensor& a);
// fused multi-head causal self-attention over one sequence; q,k,v are (S,d)
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads);
// incremental-decoding form: q is (M,d) at sequence positions q_offset..,
// k/v are the full (S,d) caches; query row i attends keys <= q_offset + i
Tensor attention_with_offset(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                             int q_offset);
// inverted-dropout; identity when p == 0. Mask is drawn from rng at forward.
Tensor dropout(const Tensor& a, float p, Rng& rng);

// ---- helpers --------------------------------------------------------------

void fill_normal(Tensor& t, Rng& rng, float stddev);
void check_finite(const Tensor& t, const std::string& what);
bool all_finite(const std::vector<float>& v);

// raw GEMM kernels shared with the no-grad inference path; f32 lanes by
// default, f64 accumulation inside a PreciseScope
namespace kernels {
bool precise();
void gemm(const float* a, const float* b, float* c, int m, int k, int n);     // c += a.b
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n);  // c += a.b^T
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n);  // c += a^T.b
}  // namespace kernels

}  // namespace rot
