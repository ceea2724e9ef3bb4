#include "rot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace rot {

namespace {

thread_local Tape* g_tape = nullptr;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw TensorError("non-positive extent in shape");
        n *= size_t(d);
    }
    return n;
}

std::shared_ptr<Node> make_node(std::vector<int> shape, const char* op,
                                std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->x.assign(shape_numel(n->shape), 0.0f);
    n->op = op;
    if (g_tape) {
        for (auto& p : parents)
            if (p->needs_grad) { n->needs_grad = true; break; }
        if (n->needs_grad) {
            n->parents = std::move(parents);
            g_tape->record(n);
        }
    }
    return n;
}

void accumulate(Node& dst, const std::vector<float>& src) {
    dst.ensure_grad();
    for (size_t i = 0; i < src.size(); ++i) dst.g[i] += src[i];
}

int rows_of(const Node& n) { return n.shape.at(0); }
int cols_of(const Node& n) { return n.shape.size() > 1 ? n.shape[1] : 1; }

void require(bool cond, const char* msg) {
    if (!cond) throw TensorError(msg);
}

// f64 view of a node's values, widening from f32 storage when no shadow
// exists (leaves, primitives without a precise path)
struct ShadowView {
    const float* f = nullptr;
    const double* d = nullptr;
    double operator[](size_t i) const { return d ? d[i] : double(f[i]); }
};

ShadowView shadow_of(const std::shared_ptr<Node>& n) {
    return {n->x.data(), n->x64.empty() ? nullptr : n->x64.data()};
}

// installs the shadow and the rounded f32 storage it implies
void store_shadow(Node& n, std::vector<double> v) {
    n.x64 = std::move(v);
    for (size_t i = 0; i < n.x64.size(); ++i) n.x[i] = float(n.x64[i]);
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::leaf(std::vector<int> shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->x.assign(shape_numel(n->shape), 0.0f);
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    n->op = "leaf";
    return Tensor(n);
}

Tensor Tensor::leaf(std::vector<int> shape, const std::vector<float>& data,
                    bool requires_grad) {
    Tensor t = leaf(std::move(shape), requires_grad);
    require(t.numel() == data.size(), "leaf: data length does not match shape");
    t.data() = data;
    return t;
}

Tensor Tensor::scalar(float v) {
    Tensor t = leaf({1});
    t.data()[0] = v;
    return t;
}

float Tensor::item() const {
    require(n_->x.size() == 1, "item: tensor is not scalar");
    return n_->x[0];
}

double Tensor::item_f64() const {
    require(n_->x.size() == 1, "item_f64: tensor is not scalar");
    if (!n_->x64.empty()) return n_->x64[0];
    return std::isnan(n_->scalar_f64) ? double(n_->x[0]) : n_->scalar_f64;
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() {
    prev_ = g_tape;
    g_tape = this;
}

Tape::~Tape() { g_tape = prev_; }

Tape* Tape::current() { return g_tape; }

void Tape::backward(const Tensor& loss) {
    require(!consumed_, "backward: graph already consumed");
    require(loss.numel() == 1, "backward: loss must be scalar");
    consumed_ = true;
    Node* ln = loss.node().get();
    ln->ensure_grad();
    ln->g[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.g.empty() && n.backprop) n.backprop(n);
    }
}

NoGradScope::NoGradScope() {
    saved_ = g_tape;
    g_tape = nullptr;
}

NoGradScope::~NoGradScope() { g_tape = saved_; }

// ---- kernels --------------------------------------------------------------

namespace {
thread_local bool g_precise = false;
}

PreciseScope::PreciseScope() : saved_(g_precise) { g_precise = true; }

PreciseScope::~PreciseScope() { g_precise = saved_; }

namespace kernels {

bool precise() { return g_precise; }

void gemm(const float* a, const float* b, float* c, int m, int k, int n) {
    if (g_precise) {
        std::vector<double> row(size_t(n), 0.0);
        for (int i = 0; i < m; ++i) {
            const float* ar = a + size_t(i) * k;
            float* cr = c + size_t(i) * n;
            std::fill(row.begin(), row.end(), 0.0);
            for (int p = 0; p < k; ++p) {
                const double av = ar[p];
                const float* br = b + size_t(p) * n;
                for (int j = 0; j < n; ++j) row[size_t(j)] += av * br[j];
            }
            for (int j = 0; j < n; ++j) cr[j] += float(row[size_t(j)]);
        }
        return;
    }
    for (int i = 0; i < m; ++i) {
        const float* ar = a + size_t(i) * k;
        float* cr = c + size_t(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = ar[p];
            const float* br = b + size_t(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    if (g_precise) {
        for (int i = 0; i < m; ++i) {
            const float* ar = a + size_t(i) * k;
            float* cr = c + size_t(i) * n;
            for (int j = 0; j < n; ++j) {
                const float* br = b + size_t(j) * k;
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += double(ar[p]) * br[p];
                cr[j] += float(s);
            }
        }
        return;
    }
    // dot products over contiguous rows; 8 independent lanes so the compiler
    // may vectorize without reassociating a single chain
    for (int i = 0; i < m; ++i) {
        const float* ar = a + size_t(i) * k;
        float* cr = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* br = b + size_t(j) * k;
            float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            int p = 0;
            for (; p + 8 <= k; p += 8)
                for (int l = 0; l < 8; ++l) acc[l] += ar[p + l] * br[p + l];
            float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
                      ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            for (; p < k; ++p) s += ar[p] * br[p];
            cr[j] += s;
        }
    }
}

void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    // c(m,n) += a(k,m)^T . b(k,n)
    if (g_precise) {
        std::vector<double> acc(size_t(m) * n, 0.0);
        for (int p = 0; p < k; ++p) {
            const float* ar = a + size_t(p) * m;
            const float* br = b + size_t(p) * n;
            for (int i = 0; i < m; ++i) {
                const double av = ar[i];
                double* cr = acc.data() + size_t(i) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
        for (size_t i = 0; i < acc.size(); ++i) c[i] += float(acc[i]);
        return;
    }
    for (int p = 0; p < k; ++p) {
        const float* ar = a + size_t(p) * m;
        const float* br = b + size_t(p) * n;
        for (int i = 0; i < m; ++i) {
            const float av = ar[i];
            float* cr = c + size_t(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace kernels

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    require(k == k2, "matmul: inner extents differ");
    auto out = make_node({m, n}, "matmul", {a.node(), b.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node()), bv = shadow_of(b.node());
        std::vector<double> c(size_t(m) * n, 0.0);
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                const double x = av[size_t(i) * k + p];
                for (int j = 0; j < n; ++j) c[size_t(i) * n + j] += x * bv[size_t(p) * n + j];
            }
        store_shadow(*out, std::move(c));
    } else {
        kernels::gemm(a.data().data(), b.data().data(), out->x.data(), m, k, n);
    }
    if (out->needs_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn, m, k, n](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                kernels::gemm_nt(self.g.data(), bn->x.data(), an->g.data(), m, n, k);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                kernels::gemm_tn(an->x.data(), self.g.data(), bn->g.data(), k, m, n);
            }
        };
    }
    return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    require(k == b.cols(), "matmul_nt: inner extents differ");
    auto out = make_node({m, n}, "matmul_nt", {a.node(), b.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node()), bv = shadow_of(b.node());
        std::vector<double> c(size_t(m) * n, 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += av[size_t(i) * k + p] * bv[size_t(j) * k + p];
                c[size_t(i) * n + j] = s;
            }
        store_shadow(*out, std::move(c));
    } else {
        kernels::gemm_nt(a.data().data(), b.data().data(), out->x.data(), m, k, n);
    }
    if (out->needs_grad) {
        auto an = a.node(), bn = b.node();
        out->backprop = [an, bn, m, k, n](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                kernels::gemm(self.g.data(), bn->x.data(), an->g.data(), m, n, k);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                kernels::gemm_tn(self.g.data(), an->x.data(), bn->g.data(), n, m, k);
            }
        };
    }
    return Tensor(out);
}

namespace {

bool is_row_broadcast(const Node& a, const Node& b) {
    return b.x.size() == size_t(cols_of(a)) && a.x.size() != b.x.size();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Node& an = *a.node();
    const Node& bn = *b.node();
    const bool bc = is_row_broadcast(an, bn);
    require(bc || an.x.size() == bn.x.size(), "add: shape mismatch");
    auto out = make_node(an.shape, "add", {a.node(), b.node()});
    const int m = rows_of(an), n = cols_of(an);
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node()), bv = shadow_of(b.node());
        std::vector<double> c(an.x.size());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                c[size_t(i) * n + j] = av[size_t(i) * n + j] + bv[bc ? size_t(j) : size_t(i) * n + j];
        store_shadow(*out, std::move(c));
        if (out->x64.size() == 1) out->scalar_f64 = out->x64[0];
    } else if (bc) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out->x[size_t(i) * n + j] = an.x[size_t(i) * n + j] + bn.x[size_t(j)];
    } else {
        for (size_t i = 0; i < an.x.size(); ++i) out->x[i] = an.x[i] + bn.x[i];
        if (an.x.size() == 1 && !std::isnan(an.scalar_f64) && !std::isnan(bn.scalar_f64))
            out->scalar_f64 = an.scalar_f64 + bn.scalar_f64;
    }
    if (out->needs_grad) {
        auto ap = a.node(), bp = b.node();
        out->backprop = [ap, bp, bc, m, n](Node& self) {
            if (ap->needs_grad) accumulate(*ap, self.g);
            if (bp->needs_grad) {
                bp->ensure_grad();
                if (bc) {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) bp->g[size_t(j)] += self.g[size_t(i) * n + j];
                } else {
                    for (size_t i = 0; i < self.g.size(); ++i) bp->g[i] += self.g[i];
                }
            }
        };
    }
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "sub: shape mismatch");
    auto out = make_node(a.node()->shape, "sub", {a.node(), b.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node()), bv = shadow_of(b.node());
        std::vector<double> c(a.numel());
        for (size_t i = 0; i < c.size(); ++i) c[i] = av[i] - bv[i];
        store_shadow(*out, std::move(c));
    } else {
        for (size_t i = 0; i < a.numel(); ++i) out->x[i] = a.data()[i] - b.data()[i];
    }
    if (out->needs_grad) {
        auto ap = a.node(), bp = b.node();
        out->backprop = [ap, bp](Node& self) {
            if (ap->needs_grad) accumulate(*ap, self.g);
            if (bp->needs_grad) {
                bp->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) bp->g[i] -= self.g[i];
            }
        };
    }
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Node& an = *a.node();
    const Node& bn = *b.node();
    const bool bc = is_row_broadcast(an, bn);
    require(bc || an.x.size() == bn.x.size(), "mul: shape mismatch");
    auto out = make_node(an.shape, "mul", {a.node(), b.node()});
    const int m = rows_of(an), n = cols_of(an);
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node()), bv = shadow_of(b.node());
        std::vector<double> c(an.x.size());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                c[size_t(i) * n + j] = av[size_t(i) * n + j] * bv[bc ? size_t(j) : size_t(i) * n + j];
        store_shadow(*out, std::move(c));
    } else if (bc) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out->x[size_t(i) * n + j] = an.x[size_t(i) * n + j] * bn.x[size_t(j)];
    } else {
        for (size_t i = 0; i < an.x.size(); ++i) out->x[i] = an.x[i] * bn.x[i];
    }
    if (out->needs_grad) {
        auto ap = a.node(), bp = b.node();
        out->backprop = [ap, bp, bc, m, n](Node& self) {
            if (ap->needs_grad) {
                ap->ensure_grad();
                if (bc) {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            ap->g[size_t(i) * n + j] += self.g[size_t(i) * n + j] * bp->x[size_t(j)];
                } else {
                    for (size_t i = 0; i < self.g.size(); ++i) ap->g[i] += self.g[i] * bp->x[i];
                }
            }
            if (bp->needs_grad) {
                bp->ensure_grad();
                if (bc) {
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            bp->g[size_t(j)] += self.g[size_t(i) * n + j] * ap->x[size_t(i) * n + j];
                } else {
                    for (size_t i = 0; i < self.g.size(); ++i) bp->g[i] += self.g[i] * ap->x[i];
                }
            }
        };
    }
    return Tensor(out);
}

Tensor scale(const Tensor& a, float c) {
    auto out = make_node(a.node()->shape, "scale", {a.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> sh(a.numel());
        for (size_t i = 0; i < sh.size(); ++i) sh[i] = av[i] * double(c);
        if (sh.size() == 1 && a.node()->x64.empty() && !std::isnan(a.node()->scalar_f64))
            sh[0] = a.node()->scalar_f64 * double(c);
        store_shadow(*out, std::move(sh));
        if (out->x64.size() == 1) out->scalar_f64 = out->x64[0];
    } else {
        for (size_t i = 0; i < a.numel(); ++i) out->x[i] = a.data()[i] * c;
        if (a.numel() == 1 && !std::isnan(a.node()->scalar_f64))
            out->scalar_f64 = a.node()->scalar_f64 * double(c);
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, c](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) ap->g[i] += self.g[i] * c;
        };
    }
    return Tensor(out);
}

Tensor transpose(const Tensor& a) {
    const int m = a.rows(), n = a.cols();
    auto out = make_node({n, m}, "transpose", {a.node()});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->x[size_t(j) * m + i] = a.data()[size_t(i) * n + j];
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> c(a.numel());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) c[size_t(j) * m + i] = av[size_t(i) * n + j];
        store_shadow(*out, std::move(c));
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, m, n](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ap->g[size_t(i) * n + j] += self.g[size_t(j) * m + i];
        };
    }
    return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int start, int len) {
    const int m = a.rows(), n = a.cols();
    require(start >= 0 && len > 0 && start + len <= m, "slice_rows: out of range");
    auto out = make_node({len, n}, "slice_rows", {a.node()});
    std::memcpy(out->x.data(), a.data().data() + size_t(start) * n, size_t(len) * n * sizeof(float));
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> c(size_t(len) * n);
        for (size_t i = 0; i < c.size(); ++i) c[i] = av[size_t(start) * n + i];
        store_shadow(*out, std::move(c));
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, start, len, n](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < size_t(len) * n; ++i) ap->g[size_t(start) * n + i] += self.g[i];
        };
    }
    return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int start, int len) {
    const int m = a.rows(), n = a.cols();
    require(start >= 0 && len > 0 && start + len <= n, "slice_cols: out of range");
    auto out = make_node({m, len}, "slice_cols", {a.node()});
    for (int i = 0; i < m; ++i)
        std::memcpy(out->x.data() + size_t(i) * len, a.data().data() + size_t(i) * n + start,
                    size_t(len) * sizeof(float));
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> c(size_t(m) * len);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j) c[size_t(i) * len + j] = av[size_t(i) * n + start + j];
        store_shadow(*out, std::move(c));
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, start, len, m, n](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < len; ++j)
                    ap->g[size_t(i) * n + start + j] += self.g[size_t(i) * len + j];
        };
    }
    return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    const int n = parts[0].cols();
    int m = 0;
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& p : parts) {
        require(p.cols() == n, "concat_rows: column extents differ");
        m += p.rows();
        parents.push_back(p.node());
    }
    auto out = make_node({m, n}, "concat_rows", parents);
    size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out->x.data() + off, p.data().data(), p.numel() * sizeof(float));
        off += p.numel();
    }
    if (kernels::precise()) {
        std::vector<double> c(out->x.size());
        size_t o = 0;
        for (const auto& p : parts) {
            ShadowView pv = shadow_of(p.node());
            for (size_t i = 0; i < p.numel(); ++i) c[o + i] = pv[i];
            o += p.numel();
        }
        store_shadow(*out, std::move(c));
    }
    if (out->needs_grad) {
        std::vector<std::shared_ptr<Node>> ps = parents;
        out->backprop = [ps](Node& self) {
            size_t off = 0;
            for (auto& p : ps) {
                if (p->needs_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->x.size(); ++i) p->g[i] += self.g[off + i];
                }
                off += p->x.size();
            }
        };
    }
    return Tensor(out);
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    const int m = table.rows(), n = table.cols();
    require(!ids.empty(), "gather_rows: empty id list");
    for (int id : ids) require(id >= 0 && id < m, "gather_rows: id out of range");
    auto out = make_node({int(ids.size()), n}, "gather_rows", {table.node()});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out->x.data() + i * n, table.data().data() + size_t(ids[i]) * n,
                    size_t(n) * sizeof(float));
    if (kernels::precise()) {
        ShadowView tv = shadow_of(table.node());
        std::vector<double> c(ids.size() * size_t(n));
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < n; ++j) c[i * n + j] = tv[size_t(ids[i]) * n + j];
        store_shadow(*out, std::move(c));
    }
    if (out->needs_grad) {
        auto tp = table.node();
        auto idcopy = ids;
        out->backprop = [tp, idcopy, n](Node& self) {
            if (!tp->needs_grad) return;
            tp->ensure_grad();
            for (size_t i = 0; i < idcopy.size(); ++i)
                for (int j = 0; j < n; ++j)
                    tp->g[size_t(idcopy[i]) * n + j] += self.g[i * n + j];
        };
    }
    return Tensor(out);
}

Tensor softmax(const Tensor& a) {
    const int m = a.rows(), n = a.cols();
    auto out = make_node(a.node()->shape, "softmax", {a.node()});
    const bool precise = kernels::precise();
    ShadowView av = shadow_of(a.node());
    std::vector<double> sh(precise ? a.numel() : 0);
    for (int i = 0; i < m; ++i) {
        const float* xr = a.data().data() + size_t(i) * n;
        float* yr = out->x.data() + size_t(i) * n;
        double mx = av[size_t(i) * n];
        for (int j = 1; j < n; ++j) mx = std::max(mx, av[size_t(i) * n + j]);
        require(std::isfinite(mx), "softmax: non-finite input");
        double z = 0.0;
        std::vector<double> e(size_t(n), 0.0);
        for (int j = 0; j < n; ++j) {
            e[size_t(j)] = std::exp(av[size_t(i) * n + j] - mx);
            z += e[size_t(j)];
        }
        for (int j = 0; j < n; ++j) {
            const double p = e[size_t(j)] / z;
            yr[j] = float(p);
            if (precise) sh[size_t(i) * n + j] = p;
        }
        (void)xr;
    }
    if (precise) store_shadow(*out, std::move(sh));
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, m, n](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const float* y = self.x.data() + size_t(i) * n;
                const float* dy = self.g.data() + size_t(i) * n;
                float* dx = ap->g.data() + size_t(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += double(dy[j]) * y[j];
                for (int j = 0; j < n; ++j) dx[j] += float((double(dy[j]) - dot) * y[j]);
            }
        };
    }
    return Tensor(out);
}

Tensor rms_normalize(const Tensor& a, float eps) {
    const int m = a.rows(), n = a.cols();
    auto out = make_node(a.node()->shape, "rms_normalize", {a.node()});
    const bool precise = kernels::precise();
    ShadowView av = shadow_of(a.node());
    std::vector<double> sh(precise ? a.numel() : 0);
    std::vector<float> inv_rms(size_t(m), 0.0f);
    for (int i = 0; i < m; ++i) {
        const float* xr = a.data().data() + size_t(i) * n;
        double ss = 0.0;
        if (precise)
            for (int j = 0; j < n; ++j) ss += av[size_t(i) * n + j] * av[size_t(i) * n + j];
        else
            for (int j = 0; j < n; ++j) ss += double(xr[j]) * xr[j];
        const double inv = 1.0 / std::sqrt(ss / n + double(eps));
        inv_rms[size_t(i)] = float(inv);
        float* yr = out->x.data() + size_t(i) * n;
        if (precise) {
            for (int j = 0; j < n; ++j) {
                sh[size_t(i) * n + j] = av[size_t(i) * n + j] * inv;
                yr[j] = float(sh[size_t(i) * n + j]);
            }
        } else {
            const float invf = float(inv);
            for (int j = 0; j < n; ++j) yr[j] = xr[j] * invf;
        }
    }
    if (precise) store_shadow(*out, std::move(sh));
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, inv_rms, m, n](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const float* x = ap->x.data() + size_t(i) * n;
                const float* dy = self.g.data() + size_t(i) * n;
                float* dx = ap->g.data() + size_t(i) * n;
                const double inv = inv_rms[size_t(i)];
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += double(dy[j]) * x[j];
                const double k = dot * inv * inv * inv / n;
                for (int j = 0; j < n; ++j) dx[j] += float(double(dy[j]) * inv - k * x[j]);
            }
        };
    }
    return Tensor(out);
}

Tensor silu(const Tensor& a) {
    auto out = make_node(a.node()->shape, "silu", {a.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> c(a.numel());
        for (size_t i = 0; i < c.size(); ++i) c[i] = av[i] / (1.0 + std::exp(-av[i]));
        store_shadow(*out, std::move(c));
    } else {
        for (size_t i = 0; i < a.numel(); ++i) {
            const float x = a.data()[i];
            out->x[i] = x / (1.0f + std::exp(-x));
        }
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                const float x = ap->x[i];
                const float s = 1.0f / (1.0f + std::exp(-x));
                ap->g[i] += self.g[i] * s * (1.0f + x * (1.0f - s));
            }
        };
    }
    return Tensor(out);
}

Tensor sigmoid(const Tensor& a) {
    auto out = make_node(a.node()->shape, "sigmoid", {a.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> c(a.numel());
        for (size_t i = 0; i < c.size(); ++i) c[i] = 1.0 / (1.0 + std::exp(-av[i]));
        store_shadow(*out, std::move(c));
    } else {
        for (size_t i = 0; i < a.numel(); ++i) out->x[i] = 1.0f / (1.0f + std::exp(-a.data()[i]));
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                const float y = self.x[i];
                ap->g[i] += self.g[i] * y * (1.0f - y);
            }
        };
    }
    return Tensor(out);
}

Tensor mean_all(const Tensor& a) {
    auto out = make_node({1}, "mean", {a.node()});
    ShadowView av = shadow_of(a.node());
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) s += av[i];
    out->scalar_f64 = s / double(a.numel());
    out->x[0] = float(out->scalar_f64);
    if (kernels::precise()) out->x64.assign(1, out->scalar_f64);
    require(std::isfinite(out->x[0]), "mean: non-finite result");
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            const float k = self.g[0] / float(ap->x.size());
            for (size_t i = 0; i < ap->g.size(); ++i) ap->g[i] += k;
        };
    }
    return Tensor(out);
}

Tensor sum_all(const Tensor& a) {
    auto out = make_node({1}, "sum", {a.node()});
    ShadowView av = shadow_of(a.node());
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) s += av[i];
    out->scalar_f64 = s;
    out->x[0] = float(s);
    if (kernels::precise()) out->x64.assign(1, s);
    require(std::isfinite(out->x[0]), "sum: non-finite result");
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < ap->g.size(); ++i) ap->g[i] += self.g[0];
        };
    }
    return Tensor(out);
}

Tensor squared_difference(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "squared_difference: shape mismatch");
    auto out = make_node(a.node()->shape, "squared_difference", {a.node(), b.node()});
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node()), bv = shadow_of(b.node());
        std::vector<double> c(a.numel());
        for (size_t i = 0; i < c.size(); ++i) {
            const double d = av[i] - bv[i];
            c[i] = d * d;
        }
        store_shadow(*out, std::move(c));
    } else {
        for (size_t i = 0; i < a.numel(); ++i) {
            const float d = a.data()[i] - b.data()[i];
            out->x[i] = d * d;
        }
    }
    if (out->needs_grad) {
        auto ap = a.node(), bp = b.node();
        out->backprop = [ap, bp](Node& self) {
            for (size_t i = 0; i < self.g.size(); ++i) {
                const float d = 2.0f * (ap->x[i] - bp->x[i]) * self.g[i];
                if (ap->needs_grad) {
                    ap->ensure_grad();
                    ap->g[i] += d;
                }
                if (bp->needs_grad) {
                    bp->ensure_grad();
                    bp->g[i] -= d;
                }
            }
        };
    }
    return Tensor(out);
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<float>& mask) {
    const int m = logits.rows(), n = logits.cols();
    require(int(targets.size()) == m && int(mask.size()) == m,
            "cross_entropy: target/mask length mismatch");
    double wsum = 0.0;
    for (float w : mask) wsum += w;
    require(wsum > 0.0, "cross_entropy: empty mask");
    auto out = make_node({1}, "cross_entropy", {logits.node()});
    // probabilities saved for backward
    auto probs = std::make_shared<std::vector<float>>(size_t(m) * n);
    ShadowView lv = shadow_of(logits.node());
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        float* pr = probs->data() + size_t(i) * n;
        double mx = lv[size_t(i) * n];
        for (int j = 1; j < n; ++j) mx = std::max(mx, lv[size_t(i) * n + j]);
        require(std::isfinite(mx), "cross_entropy: non-finite logits");
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(lv[size_t(i) * n + j] - mx);
            pr[j] = float(e);
            z += e;
        }
        const float inv = float(1.0 / z);
        for (int j = 0; j < n; ++j) pr[j] *= inv;
        require(targets[size_t(i)] >= 0 && targets[size_t(i)] < n, "cross_entropy: bad target id");
        if (mask[size_t(i)] != 0.0f)
            total += double(mask[size_t(i)]) * (std::log(z) + mx - lv[size_t(i) * n + targets[size_t(i)]]);
    }
    out->scalar_f64 = total / wsum;
    out->x[0] = float(out->scalar_f64);
    if (kernels::precise()) out->x64.assign(1, out->scalar_f64);
    require(std::isfinite(out->x[0]), "cross_entropy: non-finite loss");
    if (out->needs_grad) {
        auto lp = logits.node();
        auto tg = targets;
        auto mk = mask;
        out->backprop = [lp, tg, mk, probs, wsum, m, n](Node& self) {
            if (!lp->needs_grad) return;
            lp->ensure_grad();
            const float dy = self.g[0];
            for (int i = 0; i < m; ++i) {
                const float w = mk[size_t(i)];
                if (w == 0.0f) continue;
                const float k = dy * w / float(wsum);
                const float* pr = probs->data() + size_t(i) * n;
                float* dl = lp->g.data() + size_t(i) * n;
                for (int j = 0; j < n; ++j) dl[j] += k * pr[j];
                dl[tg[size_t(i)]] -= k;
            }
        };
    }
    return Tensor(out);
}

Tensor attention_with_offset(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                             int q_offset) {
    const int m = q.rows(), d = q.cols(), s = k.rows();
    require(v.rows() == s && k.cols() == d && v.cols() == d, "attention: k/v shapes differ");
    require(n_heads > 0 && d % n_heads == 0, "attention: head count must divide width");
    require(q_offset >= 0 && q_offset + m <= s, "attention: query offset out of range");
    const int dk = d / n_heads;
    const float inv_sqrt = 1.0f / std::sqrt(float(dk));
    auto out = make_node({m, d}, "attention", {q.node(), k.node(), v.node()});
    // attention probabilities per head, causal (query row i sees key rows
    // <= q_offset + i), saved for backward
    auto probs = std::make_shared<std::vector<float>>(size_t(n_heads) * m * s, 0.0f);
    const bool precise = kernels::precise();
    ShadowView qv = shadow_of(q.node()), kv = shadow_of(k.node()), vv = shadow_of(v.node());
    std::vector<double> sh(precise ? size_t(m) * d : 0, 0.0);
    std::vector<double> prow(precise ? size_t(s) : 0);
    for (int h = 0; h < n_heads; ++h) {
        const int off = h * dk;
        float* ph = probs->data() + size_t(h) * m * s;
        for (int i = 0; i < m; ++i) {
            const float* qi = q.data().data() + size_t(i) * d + off;
            float* pri = ph + size_t(i) * s;
            const int jmax = q_offset + i;
            if (precise) {
                // full f64 path: scores, softmax, weighted values
                double mx = -1e300;
                for (int j = 0; j <= jmax; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < dk; ++c)
                        acc += qv[size_t(i) * d + off + c] * kv[size_t(j) * d + off + c];
                    acc /= std::sqrt(double(dk));
                    prow[size_t(j)] = acc;
                    mx = std::max(mx, acc);
                }
                double z = 0.0;
                for (int j = 0; j <= jmax; ++j) {
                    prow[size_t(j)] = std::exp(prow[size_t(j)] - mx);
                    z += prow[size_t(j)];
                }
                double* oi = sh.data() + size_t(i) * d + off;
                for (int j = 0; j <= jmax; ++j) {
                    const double p = prow[size_t(j)] / z;
                    pri[j] = float(p);
                    for (int c = 0; c < dk; ++c) oi[c] += p * vv[size_t(j) * d + off + c];
                }
                continue;
            }
            float mx = -1e30f;
            for (int j = 0; j <= jmax; ++j) {
                const float* kj = k.data().data() + size_t(j) * d + off;
                float sc = 0.0f;
                for (int c = 0; c < dk; ++c) sc += qi[c] * kj[c];
                sc *= inv_sqrt;
                pri[j] = sc;
                mx = std::max(mx, sc);
            }
            double z = 0.0;
            for (int j = 0; j <= jmax; ++j) {
                double e = std::exp(double(pri[j]) - mx);
                pri[j] = float(e);
                z += e;
            }
            const float inv = float(1.0 / z);
            float* oi = out->x.data() + size_t(i) * d + off;
            for (int j = 0; j <= jmax; ++j) {
                pri[j] *= inv;
                const float* vj = v.data().data() + size_t(j) * d + off;
                const float p = pri[j];
                for (int c = 0; c < dk; ++c) oi[c] += p * vj[c];
            }
        }
    }
    if (precise) store_shadow(*out, std::move(sh));
    if (out->needs_grad) {
        auto qp = q.node(), kp = k.node(), vp = v.node();
        out->backprop = [qp, kp, vp, probs, n_heads, m, s, d, dk, inv_sqrt, q_offset](Node& self) {
            if (qp->needs_grad) qp->ensure_grad();
            if (kp->needs_grad) kp->ensure_grad();
            if (vp->needs_grad) vp->ensure_grad();
            std::vector<float> dp(size_t(s), 0.0f);  // d(scores) row buffer
            for (int h = 0; h < n_heads; ++h) {
                const int off = h * dk;
                const float* ph = probs->data() + size_t(h) * m * s;
                for (int i = 0; i < m; ++i) {
                    const int jmax = q_offset + i;
                    const float* doi = self.g.data() + size_t(i) * d + off;
                    const float* pri = ph + size_t(i) * s;
                    // dP_ij = dOut_i . V_j ; dV_j += P_ij dOut_i
                    double dot = 0.0;
                    for (int j = 0; j <= jmax; ++j) {
                        const float* vj = vp->x.data() + size_t(j) * d + off;
                        float acc = 0.0f;
                        for (int c = 0; c < dk; ++c) acc += doi[c] * vj[c];
                        dp[size_t(j)] = acc;
                        dot += double(acc) * pri[j];
                        if (vp->needs_grad) {
                            float* dvj = vp->g.data() + size_t(j) * d + off;
                            const float p = pri[j];
                            for (int c = 0; c < dk; ++c) dvj[c] += p * doi[c];
                        }
                    }
                    // softmax backward then score backward
                    const float* qi = qp->x.data() + size_t(i) * d + off;
                    float* dqi = qp->needs_grad ? qp->g.data() + size_t(i) * d + off : nullptr;
                    for (int j = 0; j <= jmax; ++j) {
                        const float ds = pri[j] * float(double(dp[size_t(j)]) - dot) * inv_sqrt;
                        const float* kj = kp->x.data() + size_t(j) * d + off;
                        if (dqi)
                            for (int c = 0; c < dk; ++c) dqi[c] += ds * kj[c];
                        if (kp->needs_grad) {
                            float* dkj = kp->g.data() + size_t(j) * d + off;
                            for (int c = 0; c < dk; ++c) dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads) {
    require(k.rows() == q.rows(), "causal_attention: q/k/v shapes differ");
    return attention_with_offset(q, k, v, n_heads, 0);
}

Tensor relu(const Tensor& a) {
    auto out = make_node(a.node()->shape, "relu", {a.node()});
    for (size_t i = 0; i < a.numel(); ++i) out->x[i] = a.data()[i] > 0.0f ? a.data()[i] : 0.0f;
    if (kernels::precise()) {
        ShadowView av = shadow_of(a.node());
        std::vector<double> c(a.numel());
        for (size_t i = 0; i < c.size(); ++i) c[i] = av[i] > 0.0 ? av[i] : 0.0;
        store_shadow(*out, std::move(c));
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i)
                if (ap->x[i] > 0.0f) ap->g[i] += self.g[i];
        };
    }
    return Tensor(out);
}

Tensor dropout(const Tensor& a, float p, Rng& rng) {
    require(p >= 0.0f && p < 1.0f, "dropout: p out of range");
    if (p == 0.0f) return a;
    auto out = make_node(a.node()->shape, "dropout", {a.node()});
    auto mask = std::make_shared<std::vector<float>>(a.numel());
    const float keep_scale = 1.0f / (1.0f - p);
    for (size_t i = 0; i < a.numel(); ++i) {
        const float m = rng.next_double() < double(p) ? 0.0f : keep_scale;
        (*mask)[i] = m;
        out->x[i] = a.data()[i] * m;
    }
    if (out->needs_grad) {
        auto ap = a.node();
        out->backprop = [ap, mask](Node& self) {
            if (!ap->needs_grad) return;
            ap->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) ap->g[i] += self.g[i] * (*mask)[i];
        };
    }
    return Tensor(out);
}

// ---- helpers --------------------------------------------------------------

void fill_normal(Tensor& t, Rng& rng, float stddev) {
    for (auto& v : t.data()) v = float(rng.next_normal()) * stddev;
}

bool all_finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

void check_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t.data())) throw TensorError("non-finite values in " + what);
}

}  // namespace rot
