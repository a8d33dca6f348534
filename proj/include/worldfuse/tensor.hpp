// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle onto a graph node. Every op records its inputs
// and a backprop closure when gradients are enabled and at least one input
// requires them; otherwise it produces a detached constant. backward() walks
// the recorded graph once, in reverse topological order. The op set is closed:
// exactly what the sequence models and the composition module need.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "common.hpp"

namespace worldfuse {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw dimension_error("shape dimensions must be positive");
        n *= static_cast<size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace autodiff {
inline thread_local int no_grad_depth = 0;
inline bool grad_enabled() { return no_grad_depth == 0; }

// RAII switch: ops executed under the guard build no graph.
struct NoGradGuard {
    NoGradGuard() { ++no_grad_depth; }
    ~NoGradGuard() { --no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
}  // namespace autodiff

class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // sized during backward only
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> inputs;
        // Receives the node itself; must not capture its own shared_ptr.
        std::function<void(Node&)> backprop;
    };

    Tensor() = default;

    static Tensor zeros(const Shape& s) { return filled(s, 0.0); }

    static Tensor filled(const Shape& s, double v) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->value.assign(shape_numel(s), v);
        return t;
    }

    static Tensor from(const Shape& s, std::vector<double> data) {
        if (shape_numel(s) != data.size())
            throw dimension_error("tensor data length does not match shape " + shape_str(s));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = s;
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    // Trainable parameter: finite-checked at creation.
    static Tensor parameter(const Shape& s, std::vector<double> data) {
        for (double v : data)
            if (!std::isfinite(v)) throw argument_error("parameter tensors must be finite");
        Tensor t = from(s, std::move(data));
        t.node_->requires_grad = true;
        return t;
    }

    static Tensor parameter_randn(const Shape& s, Rng& rng, double sigma) {
        std::vector<double> d(shape_numel(s));
        for (auto& v : d) v = sigma * rng.normal();
        return parameter(s, std::move(d));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(size_t i) const { return node_->shape[i]; }
    size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }

    double value() const {
        if (size() != 1) throw contract_error("value(): tensor is not scalar");
        return node_->value[0];
    }
    double at(int r, int c) const {
        return node_->value[static_cast<size_t>(r) * static_cast<size_t>(dim(1)) +
                            static_cast<size_t>(c)];
    }

    // Value copy with no graph history.
    Tensor detached() const {
        Tensor t = from(shape(), node_->value);
        return t;
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;

    friend Tensor make_op(Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backprop);
};

using Node = Tensor::Node;

// Shared op constructor: records graph edges only when needed.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backprop) {
    Tensor out = Tensor::from(shape, std::move(value));
    bool need = false;
    if (autodiff::grad_enabled()) {
        for (const auto& in : inputs)
            if (in.requires_grad()) need = true;
    }
    if (need) {
        auto n = out.node();
        n->requires_grad = true;
        for (const auto& in : inputs) n->inputs.push_back(in.node());
        n->backprop = std::move(backprop);
    }
    return out;
}

namespace detail {

inline void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

// C(m,n) overwrite= A(m,k) * B(k,n)
inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n,
                  bool accumulate) {
    if (!accumulate)
        for (int i = 0; i < m * n; ++i) c[i] = 0.0;
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C(m,n) = A(m,k) * B(n,k)^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k, int n,
                  bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// C(k,n) = A(m,k)^T * B(m,n)
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n,
                  bool accumulate) {
    if (!accumulate)
        for (int i = 0; i < k * n; ++i) c[i] = 0.0;
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

inline void check_2d(const Tensor& t, const char* who) {
    if (t.shape().size() != 2) throw dimension_error(std::string(who) + ": expected 2-d tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "matmul");
    detail::check_2d(b, "matmul");
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw dimension_error("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n);
    detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    auto an = a.node(), bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node& o) {
        if (an->requires_grad) {
            detail::ensure_grad(*an);
            detail::mm_nt(o.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
        }
        if (bn->requires_grad) {
            detail::ensure_grad(*bn);
            detail::mm_tn(an->value.data(), o.grad.data(), bn->grad.data(), m, k, n, true);
        }
    });
}

// a(m,k) * b(n,k)^T -> (m,n); the attention score form.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "matmul_nt");
    detail::check_2d(b, "matmul_nt");
    int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1))
        throw dimension_error("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()) + "^T");
    std::vector<double> out(static_cast<size_t>(m) * n);
    detail::mm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    auto an = a.node(), bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node& o) {
        // dA = G * B ; dB = G^T * A
        if (an->requires_grad) {
            detail::ensure_grad(*an);
            detail::mm_nn(o.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
        }
        if (bn->requires_grad) {
            detail::ensure_grad(*bn);
            detail::mm_tn(o.grad.data(), an->value.data(), bn->grad.data(), m, n, k, true);
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw dimension_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](Node& o) {
        for (auto& n : {an, bn}) {
            if (!n->requires_grad) continue;
            detail::ensure_grad(*n);
            for (size_t i = 0; i < o.grad.size(); ++i) n->grad[i] += o.grad[i];
        }
    });
}

// mat(m,n) + row(1,n) broadcast over rows; the bias form.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
    detail::check_2d(a, "add_bias");
    int m = a.dim(0), n = a.dim(1);
    if (bias.size() != static_cast<size_t>(n))
        throw dimension_error("add_bias: bias length mismatch");
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] = a.at(i, j) + bias.data()[static_cast<size_t>(j)];
    auto an = a.node(), bn = bias.node();
    return make_op(a.shape(), std::move(out), {a, bias}, [an, bn, m, n](Node& o) {
        if (an->requires_grad) {
            detail::ensure_grad(*an);
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(*bn);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    bn->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i) * n + j];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw dimension_error("mul: shape mismatch");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](Node& o) {
        if (an->requires_grad) {
            detail::ensure_grad(*an);
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(*bn);
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, c](Node& o) {
        if (!an->requires_grad) return;
        detail::ensure_grad(*an);
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
    });
}

// Per-row layernorm with affine parameters; eps fixed at 1e-5 project-wide.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps = 1e-5) {
    detail::check_2d(x, "layernorm");
    int m = x.dim(0), n = x.dim(1);
    if (gamma.size() != static_cast<size_t>(n) || beta.size() != static_cast<size_t>(n))
        throw dimension_error("layernorm: affine parameter length mismatch");
    std::vector<double> out(x.size());
    std::vector<double> mean(static_cast<size_t>(m)), rstd(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* xi = x.data().data() + static_cast<size_t>(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += xi[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= n;
        double rs = 1.0 / std::sqrt(var + eps);
        mean[static_cast<size_t>(i)] = mu;
        rstd[static_cast<size_t>(i)] = rs;
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] =
                gamma.data()[static_cast<size_t>(j)] * (xi[j] - mu) * rs +
                beta.data()[static_cast<size_t>(j)];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [xn, gn, bn, m, n, mean, rstd](Node& o) {
        for (int i = 0; i < m; ++i) {
            const double* xi = xn->value.data() + static_cast<size_t>(i) * n;
            const double* gi = o.grad.data() + static_cast<size_t>(i) * n;
            double mu = mean[static_cast<size_t>(i)], rs = rstd[static_cast<size_t>(i)];
            if (gn->requires_grad) {
                detail::ensure_grad(*gn);
                for (int j = 0; j < n; ++j)
                    gn->grad[static_cast<size_t>(j)] += gi[j] * (xi[j] - mu) * rs;
            }
            if (bn->requires_grad) {
                detail::ensure_grad(*bn);
                for (int j = 0; j < n; ++j) bn->grad[static_cast<size_t>(j)] += gi[j];
            }
            if (xn->requires_grad) {
                detail::ensure_grad(*xn);
                // dL/dx = rs * (gh - mean(gh) - xhat * mean(gh*xhat)), gh = g*gamma
                double mean_gh = 0.0, mean_ghx = 0.0;
                for (int j = 0; j < n; ++j) {
                    double gh = gi[j] * gn->value[static_cast<size_t>(j)];
                    double xh = (xi[j] - mu) * rs;
                    mean_gh += gh;
                    mean_ghx += gh * xh;
                }
                mean_gh /= n;
                mean_ghx /= n;
                double* xg = xn->grad.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    double gh = gi[j] * gn->value[static_cast<size_t>(j)];
                    double xh = (xi[j] - mu) * rs;
                    xg[j] += rs * (gh - mean_gh - xh * mean_ghx);
                }
            }
        }
    });
}

// tanh-form gelu.
inline Tensor gelu(const Tensor& x) {
    constexpr double kA = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kB = 0.044715;
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kA * (v + kB * v * v * v)));
    }
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](Node& o) {
        if (!xn->requires_grad) return;
        constexpr double kA = 0.7978845608028654;
        constexpr double kB = 0.044715;
        detail::ensure_grad(*xn);
        for (size_t i = 0; i < o.grad.size(); ++i) {
            double v = xn->value[i];
            double u = kA * (v + kB * v * v * v);
            double t = std::tanh(u);
            double du = kA * (1.0 + 3.0 * kB * v * v);
            double dgelu = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            xn->grad[i] += o.grad[i] * dgelu;
        }
    });
}

// Row-wise softmax of (scale * x), max-subtracted for stability.
inline Tensor softmax_rows(const Tensor& x, double scl = 1.0) {
    detail::check_2d(x, "softmax_rows");
    if (!(scl > 0.0)) throw argument_error("softmax_rows: scale must be positive");
    int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.size());
    for (int i = 0; i < m; ++i) {
        const double* xi = x.data().data() + static_cast<size_t>(i) * n;
        double* oi = out.data() + static_cast<size_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, scl * xi[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            oi[j] = std::exp(scl * xi[j] - mx);
            z += oi[j];
        }
        for (int j = 0; j < n; ++j) oi[j] /= z;
    }
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn, m, n, scl](Node& o) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(*xn);
        for (int i = 0; i < m; ++i) {
            const double* s = o.value.data() + static_cast<size_t>(i) * n;
            const double* g = o.grad.data() + static_cast<size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += g[j] * s[j];
            double* xg = xn->grad.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) xg[j] += scl * s[j] * (g[j] - dot);
        }
    });
}

// Additive causal mask on a square score matrix: entries above the diagonal
// are forced to a large negative constant so softmax zeroes them.
inline Tensor causal_mask(const Tensor& scores) {
    detail::check_2d(scores, "causal_mask");
    int m = scores.dim(0), n = scores.dim(1);
    if (m != n) throw dimension_error("causal_mask: scores must be square");
    std::vector<double> out(scores.data().begin(), scores.data().end());
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < n; ++j) out[static_cast<size_t>(i) * n + j] = -1e30;
    auto sn = scores.node();
    return make_op(scores.shape(), std::move(out), {scores}, [sn, m, n](Node& o) {
        if (!sn->requires_grad) return;
        detail::ensure_grad(*sn);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j <= i; ++j)
                sn->grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(i) * n + j];
    });
}

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    detail::check_2d(table, "embedding");
    int v = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * static_cast<size_t>(d));
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= v)
            throw argument_error("embedding: id " + std::to_string(ids[t]) + " out of range");
        const double* row = table.data().data() + static_cast<size_t>(ids[t]) * d;
        std::copy(row, row + d, out.data() + t * static_cast<size_t>(d));
    }
    auto tn = table.node();
    std::vector<int> ids_copy = ids;
    return make_op({static_cast<int>(ids.size()), d}, std::move(out), {table},
                   [tn, d, ids_copy](Node& o) {
        if (!tn->requires_grad) return;
        detail::ensure_grad(*tn);
        for (size_t t = 0; t < ids_copy.size(); ++t) {
            double* row = tn->grad.data() + static_cast<size_t>(ids_copy[t]) * d;
            const double* g = o.grad.data() + t * static_cast<size_t>(d);
            for (int j = 0; j < d; ++j) row[j] += g[j];
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw argument_error("concat_rows: empty input");
    int n = parts[0].dim(1);
    int m = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_rows");
        if (p.dim(1) != n) throw dimension_error("concat_rows: column mismatch");
        m += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<int> rows;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        rows.push_back(p.dim(0));
    }
    return make_op({m, n}, std::move(out), parts, [nodes, rows, n](Node& o) {
        size_t off = 0;
        for (size_t k = 0; k < nodes.size(); ++k) {
            size_t len = static_cast<size_t>(rows[k]) * n;
            if (nodes[k]->requires_grad) {
                detail::ensure_grad(*nodes[k]);
                for (size_t i = 0; i < len; ++i) nodes[k]->grad[i] += o.grad[off + i];
            }
            off += len;
        }
    });
}

// Columns [begin, end) of a 2-d tensor (per-head views of packed projections).
inline Tensor slice_cols(const Tensor& x, int begin, int end) {
    detail::check_2d(x, "slice_cols");
    int m = x.dim(0), n = x.dim(1);
    if (begin < 0 || end > n || begin >= end)
        throw argument_error("slice_cols: bad range");
    int w = end - begin;
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = x.at(i, begin + j);
    auto xn = x.node();
    return make_op({m, w}, std::move(out), {x}, [xn, begin, m, n, w](Node& o) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(*xn);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                xn->grad[static_cast<size_t>(i) * n + begin + j] +=
                    o.grad[static_cast<size_t>(i) * w + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw argument_error("concat_cols: empty input");
    int m = parts[0].dim(0);
    int n = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_cols");
        if (p.dim(0) != m) throw dimension_error("concat_cols: row mismatch");
        n += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    int off = 0;
    for (const auto& p : parts) {
        int w = p.dim(1);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * n + off + j] = p.at(i, j);
        off += w;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    return make_op({m, n}, std::move(out), parts, [nodes, widths, m, n](Node& o) {
        int off = 0;
        for (size_t k = 0; k < nodes.size(); ++k) {
            int w = widths[k];
            if (nodes[k]->requires_grad) {
                detail::ensure_grad(*nodes[k]);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        nodes[k]->grad[static_cast<size_t>(i) * w + j] +=
                            o.grad[static_cast<size_t>(i) * n + off + j];
            }
            off += w;
        }
    });
}

// Rows [begin, end) of a 2-d tensor.
inline Tensor slice_rows(const Tensor& x, int begin, int end) {
    detail::check_2d(x, "slice_rows");
    int m = x.dim(0), n = x.dim(1);
    if (begin < 0 || end > m || begin >= end)
        throw argument_error("slice_rows: bad range [" + std::to_string(begin) + "," +
                             std::to_string(end) + ") of " + std::to_string(m));
    std::vector<double> out(x.data().begin() + static_cast<size_t>(begin) * n,
                            x.data().begin() + static_cast<size_t>(end) * n);
    auto xn = x.node();
    return make_op({end - begin, n}, std::move(out), {x}, [xn, begin, n](Node& o) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(*xn);
        size_t off = static_cast<size_t>(begin) * n;
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[off + i] += o.grad[i];
    });
}

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto xn = x.node();
    return make_op({1}, {acc}, {x}, [xn](Node& o) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(*xn);
        for (auto& g : xn->grad) g += o.grad[0];
    });
}

// Mean over masked positions of -log softmax(logits)[t, target_t].
// logits: (T, V); targets and mask have length T.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<char>& mask) {
    detail::check_2d(logits, "cross_entropy");
    int t_len = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != static_cast<size_t>(t_len) || mask.size() != static_cast<size_t>(t_len))
        throw dimension_error("cross_entropy: targets/mask length mismatch");
    int active = 0;
    for (char m : mask)
        if (m) ++active;
    if (active == 0) throw argument_error("cross_entropy: all positions masked out");
    for (int t = 0; t < t_len; ++t)
        if (mask[static_cast<size_t>(t)] &&
            (targets[static_cast<size_t>(t)] < 0 || targets[static_cast<size_t>(t)] >= vocab))
            throw argument_error("cross_entropy: target index out of range");

    double loss = 0.0;
    // log-softmax per active row, reused in backward via recompute-free capture
    std::vector<double> logz(static_cast<size_t>(t_len), 0.0);
    for (int t = 0; t < t_len; ++t) {
        if (!mask[static_cast<size_t>(t)]) continue;
        const double* row = logits.data().data() + static_cast<size_t>(t) * vocab;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        logz[static_cast<size_t>(t)] = mx + std::log(z);
        loss += logz[static_cast<size_t>(t)] - row[targets[static_cast<size_t>(t)]];
    }
    loss /= active;
    auto ln = logits.node();
    std::vector<int> tgt = targets;
    std::vector<char> msk = mask;
    return make_op({1}, {loss}, {logits}, [ln, tgt, msk, t_len, vocab, active, logz](Node& o) {
        if (!ln->requires_grad) return;
        detail::ensure_grad(*ln);
        double g = o.grad[0] / active;
        for (int t = 0; t < t_len; ++t) {
            if (!msk[static_cast<size_t>(t)]) continue;
            const double* row = ln->value.data() + static_cast<size_t>(t) * vocab;
            double* gr = ln->grad.data() + static_cast<size_t>(t) * vocab;
            double lz = logz[static_cast<size_t>(t)];
            for (int j = 0; j < vocab; ++j) gr[j] += g * std::exp(row[j] - lz);
            gr[tgt[static_cast<size_t>(t)]] -= g;
        }
    });
}

// ---------------------------------------------------------------------------
// Parameter store, backward pass, SGD
// ---------------------------------------------------------------------------

class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw argument_error("duplicate parameter name: " + name);
        if (!t.requires_grad()) throw contract_error("parameters must require gradients");
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw argument_error("unknown parameter: " + name);
        return items_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw argument_error("unknown parameter: " + name);
        return items_[it->second].second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(items_.size());
        for (const auto& [n, t] : items_) out.push_back(n);
        return out;
    }

    size_t count() const { return items_.size(); }

    size_t total_entries() const {
        size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    // Freezing forbids updates and detaches the tensors from future graphs:
    // ops over frozen parameters record no nodes for them.
    void freeze() {
        frozen_ = true;
        for (auto& [name, t] : items_) t.node()->requires_grad = false;
    }
    bool frozen() const { return frozen_; }

    // Digest of (sorted name, shape, raw value bits); order-independent by
    // construction so two stores with the same contents hash equal.
    uint64_t value_hash() const {
        std::vector<std::string> ns = names();
        std::sort(ns.begin(), ns.end());
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& n : ns) {
            h = fnv1a64(n, h);
            const Tensor& t = get(n);
            for (int d : t.shape()) h = fnv1a64(&d, sizeof(d), h);
            h = fnv1a64(t.data().data(), t.size() * sizeof(double), h);
        }
        return h;
    }

    // Deep copy with fresh nodes (used for inner-loop clones).
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [n, t] : items_)
            out.add(n, Tensor::parameter(t.shape(),
                                         std::vector<double>(t.data().begin(), t.data().end())));
        return out;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> index_;
    bool frozen_ = false;
};

using GradMap = std::map<std::string, Tensor>;

// Reverse-mode sweep from a scalar loss. Returns one gradient per parameter
// in `params`; parameters the loss does not reach get zeros.
inline GradMap backward(const Tensor& loss, const ParamStore& params) {
    if (loss.size() != 1) throw contract_error("backward: loss must be scalar");

    GradMap out;
    if (!loss.requires_grad()) {
        for (const auto& [name, t] : params) out.emplace(name, Tensor::zeros(t.shape()));
        return out;
    }

    // Iterative post-order over grad-requiring nodes.
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->inputs.size()) {
            Node* child = f.n->inputs[f.next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    for (Node* n : topo) n->grad.assign(n->value.size(), 0.0);
    loss.node()->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);

    for (const auto& [name, t] : params) {
        Node* pn = t.node().get();
        if (seen.count(pn) && pn->grad.size() == pn->value.size())
            out.emplace(name, Tensor::from(t.shape(), pn->grad));
        else
            out.emplace(name, Tensor::zeros(t.shape()));
    }
    return out;
}

// Adam moment buffers for one parameter store.
struct AdamState {
    std::map<std::string, std::vector<double>> m, v;
    int64_t t = 0;
};

// Standard bias-corrected Adam update (used for pretraining the sequence
// models; the meta inner loop stays plain SGD).
inline void adam_step(ParamStore& params, const GradMap& grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (!(lr > 0.0)) throw argument_error("adam_step: learning rate must be positive");
    if (params.frozen()) throw contract_error("adam_step: parameter store is frozen");
    state.t += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (auto& [name, t] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        if (g.shape() != t.shape())
            throw dimension_error("adam_step: gradient shape mismatch for " + name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != t.size()) m.assign(t.size(), 0.0);
        if (v.size() != t.size()) v.assign(t.size(), 0.0);
        auto dst = t.mutable_data();
        auto src = g.data();
        for (size_t i = 0; i < dst.size(); ++i) {
            if (std::isnan(src[i]))
                throw training_error("adam_step: NaN gradient in parameter " + name);
            m[i] = beta1 * m[i] + (1.0 - beta1) * src[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * src[i] * src[i];
            dst[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
}

// theta <- theta - lr * g, elementwise. NaN gradients abort with diagnostics.
inline void sgd_step(ParamStore& params, const GradMap& grads, double lr) {
    if (!(lr > 0.0)) throw argument_error("sgd_step: learning rate must be positive");
    if (params.frozen()) throw contract_error("sgd_step: parameter store is frozen");
    for (auto& [name, t] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        if (g.shape() != t.shape())
            throw dimension_error("sgd_step: gradient shape mismatch for " + name);
        auto dst = t.mutable_data();
        auto src = g.data();
        for (size_t i = 0; i < dst.size(); ++i) {
            if (std::isnan(src[i]))
                throw training_error("sgd_step: NaN gradient in parameter " + name);
            dst[i] -= lr * src[i];
        }
    }
}

}  // namespace worldfuse
