#include "medt/autograd.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace medt::ag {

void Parameter::zero_grad()
{
    if (!grad.same_shape(value)) {
        grad = Tensor(value.shape());
    } else {
        grad.fill(0.0);
    }
}

const Tensor& Var::value() const
{
    return tape->value(id);
}

// ---- tape ----------------------------------------------------------------

Var Tape::constant(Tensor value)
{
    Node n;
    n.kind = "constant";
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value)
{
    Node n;
    n.kind = "leaf";
    n.owned = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Parameter& p)
{
    Node n;
    n.kind = "param";
    n.external = &p.value;
    n.parameter = &p;
    n.requires_grad = mode_ == Mode::Grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(int id) const
{
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    return n.external ? *n.external : n.owned;
}

Tensor Tape::grad(int id) const
{
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad_allocated) return n.grad;
    return Tensor(value(id).shape());
}

bool Tape::has_grad(int id) const
{
    return nodes_.at(static_cast<std::size_t>(id)).grad_allocated;
}

Var Tape::record(std::string kind, Tensor value, std::vector<int> inputs, BackwardFn fn)
{
    if (!value.all_finite()) {
        throw NumericError(kind + ": non-finite output of shape " + shape_str(value.shape()));
    }
    Node n;
    n.kind = std::move(kind);
    n.owned = std::move(value);
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](int i) { return requires_grad(i); });
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_slot(int id)
{
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_allocated) {
        n.grad = Tensor(value(id).shape());
        n.grad_allocated = true;
    }
    return n.grad;
}

void Tape::backward(Var output, bool accumulate_params)
{
    if (output.tape != this) throw Error("backward: output belongs to a different tape");
    if (value(output.id).size() != 1) {
        throw ShapeError("backward: output must be scalar, got " + shape_str(value(output.id).shape()));
    }
    for (Node& n : nodes_) {
        n.grad_allocated = false;
        n.grad = Tensor();
    }
    if (!requires_grad(output.id)) throw Error("backward: output does not depend on any tracked node");
    grad_slot(output.id)[0] = 1.0;
    for (int id = output.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_allocated || !n.backward) continue;
        n.backward(*this, n.grad);
    }
    if (!accumulate_params) return;
    for (Node& n : nodes_) {
        if (!n.parameter || !n.grad_allocated) continue;
        // Parameters handed to a gradient tape are owned mutably by the caller.
        auto& p = const_cast<Parameter&>(*n.parameter);
        if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
}

// ---- helpers -------------------------------------------------------------

namespace {

[[noreturn]] void shape_fail(const std::string& kind, const Tensor& a, const Tensor& b)
{
    throw ShapeError(kind + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

void require_matrix(const std::string& kind, const Tensor& a)
{
    if (a.rank() != 2) throw ShapeError(kind + ": expected rank-2 operand, got " + shape_str(a.shape()));
}

bool needs(const Tape& t, int id)
{
    return t.requires_grad(id);
}

// The kernels below block four terms of the reduction at a time but add
// them in the same order as the plain loop, so every output element is the
// left-to-right sum over the reduction index. Terms whose multiplier is zero
// are exact no-ops and whole zero blocks are skipped.

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* __restrict c, int m, int k, int n)
{
    for (int i = 0; i < m; ++i) {
        double* __restrict ci = c + static_cast<std::size_t>(i) * n;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
            const double* b0 = b + static_cast<std::size_t>(p) * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (int j = 0; j < n; ++j) ci[j] = (((ci[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
        }
        for (; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n)
{
    std::vector<double> bt(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
    gemm_nn(a, bt.data(), c, m, k, n);
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* __restrict c, int m, int k, int n)
{
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = a + static_cast<std::size_t>(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        const double* b0 = b + static_cast<std::size_t>(i) * n;
        const double* b1 = b0 + n;
        const double* b2 = b1 + n;
        const double* b3 = b2 + n;
        for (int p = 0; p < k; ++p) {
            const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
            if (v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0) continue;
            double* __restrict cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] = (((cp[j] + v0 * b0[j]) + v1 * b1[j]) + v2 * b2[j]) + v3 * b3[j];
        }
    }
    for (; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* __restrict cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

void accumulate(Tensor& dst, const Tensor& src)
{
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace

double gelu_value(double x)
{
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// ---- kernels -------------------------------------------------------------

Var matmul(Var a, Var b)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_matrix("matmul", A);
    require_matrix("matmul", B);
    if (A.cols() != B.rows()) shape_fail("matmul", A, B);
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    gemm_nn(A.data(), B.data(), out.data(), m, k, n);
    return t.record("matmul", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, m, k, n](Tape& t, const Tensor& g) {
        if (needs(t, ai)) gemm_nt(g.data(), t.value(bi).data(), t.grad_slot(ai).data(), m, n, k);
        if (needs(t, bi)) gemm_tn(t.value(ai).data(), g.data(), t.grad_slot(bi).data(), m, k, n);
    });
}

Var matmul_nt(Var a, Var b)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_matrix("matmul_nt", A);
    require_matrix("matmul_nt", B);
    if (A.cols() != B.cols()) shape_fail("matmul_nt", A, B);
    const int m = A.rows(), k = A.cols(), n = B.rows();
    Tensor out({m, n});
    gemm_nt(A.data(), B.data(), out.data(), m, k, n);
    return t.record("matmul_nt", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id, m, k, n](Tape& t, const Tensor& g) {
        // dA = G B ; dB = G^T A
        if (needs(t, ai)) gemm_nn(g.data(), t.value(bi).data(), t.grad_slot(ai).data(), m, n, k);
        if (needs(t, bi)) gemm_tn(g.data(), t.value(ai).data(), t.grad_slot(bi).data(), m, n, k);
    });
}

Var add(Var a, Var b)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (!A.same_shape(B)) shape_fail("add", A, B);
    Tensor out = A;
    accumulate(out, B);
    return t.record("add", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& t, const Tensor& g) {
        if (needs(t, ai)) accumulate(t.grad_slot(ai), g);
        if (needs(t, bi)) accumulate(t.grad_slot(bi), g);
    });
}

Var add_bias(Var a, Var bias)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const Tensor& B = bias.value();
    require_matrix("add_bias", A);
    if (B.size() != static_cast<std::size_t>(A.cols()) || B.rows() != 1) shape_fail("add_bias", A, B);
    Tensor out = A;
    const int m = A.rows(), n = A.cols();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += B[static_cast<std::size_t>(j)];
    return t.record("add_bias", std::move(out), {a.id, bias.id}, [ai = a.id, bi = bias.id, m, n](Tape& t, const Tensor& g) {
        if (needs(t, ai)) accumulate(t.grad_slot(ai), g);
        if (needs(t, bi)) {
            Tensor& gb = t.grad_slot(bi);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g.at(i, j);
        }
    });
}

Var mul(Var a, Var b)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (!A.same_shape(B)) shape_fail("mul", A, B);
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return t.record("mul", std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& t, const Tensor& g) {
        if (needs(t, ai)) {
            Tensor& ga = t.grad_slot(ai);
            const Tensor& B = t.value(bi);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (needs(t, bi)) {
            Tensor& gb = t.grad_slot(bi);
            const Tensor& A = t.value(ai);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
    });
}

Var mul_const(Var a, const Tensor& c)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    if (!A.same_shape(c)) shape_fail("mul_const", A, c);
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
    return t.record("mul_const", std::move(out), {a.id}, [ai = a.id, c](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_slot(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
    });
}

Var scale(Var a, double s)
{
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return t.record("scale", std::move(out), {a.id}, [ai = a.id, s](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_slot(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

Var gelu(Var a)
{
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(out[i]);
    return t.record("gelu", std::move(out), {a.id}, [ai = a.id](Tape& t, const Tensor& g) {
        constexpr double c = 0.7978845608028654;
        const Tensor& x = t.value(ai);
        Tensor& ga = t.grad_slot(ai);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x[i];
            const double th = std::tanh(c * (v + 0.044715 * v * v * v));
            const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * v * v);
            ga[i] += g[i] * d;
        }
    });
}

Var softmax(Var a, const Tensor* mask)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    if (A.rank() < 1) throw ShapeError("softmax: empty operand");
    if (mask) {
        if (!mask->same_shape(A)) shape_fail("softmax", A, *mask);
        for (double v : mask->values()) {
            if (v != 0.0 && v != -std::numeric_limits<double>::infinity()) {
                throw DomainError("softmax: mask values must be 0 or -inf");
            }
        }
    }
    const int m = A.rows(), n = A.cols();
    Tensor out(A.shape());
    for (int i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (mask && mask->at(i, j) != 0.0) continue;
            mx = std::max(mx, A.at(i, j));
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue; // fully masked row
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            if (mask && mask->at(i, j) != 0.0) continue;
            const double e = std::exp(A.at(i, j) - mx);
            out.at(i, j) = e;
            s += e;
        }
        for (int j = 0; j < n; ++j) out.at(i, j) /= s;
    }
    const int self = static_cast<int>(t.size());
    return t.record("softmax", std::move(out), {a.id}, [ai = a.id, self, m, n](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_slot(ai);
        for (int i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    });
}

Var layernorm(Var x, Var gamma, Var beta, double eps)
{
    Tape& t = *x.tape;
    const Tensor& X = x.value();
    const Tensor& G = gamma.value();
    const Tensor& B = beta.value();
    require_matrix("layernorm", X);
    const int m = X.rows(), n = X.cols();
    if (G.size() != static_cast<std::size_t>(n) || B.size() != static_cast<std::size_t>(n)) shape_fail("layernorm", X, G);
    Tensor xhat(X.shape());
    std::vector<double> rstd(static_cast<std::size_t>(m));
    Tensor out(X.shape());
    for (int i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += X.at(i, j);
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = X.at(i, j) - mu;
            var += d * d;
        }
        var /= n;
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < n; ++j) {
            const double h = (X.at(i, j) - mu) * r;
            xhat.at(i, j) = h;
            out.at(i, j) = h * G[static_cast<std::size_t>(j)] + B[static_cast<std::size_t>(j)];
        }
    }
    return t.record("layernorm", std::move(out), {x.id, gamma.id, beta.id},
        [xi = x.id, gi = gamma.id, bi = beta.id, xhat = std::move(xhat), rstd = std::move(rstd), m, n](Tape& t, const Tensor& g) {
            const Tensor& G = t.value(gi);
            if (needs(t, gi)) {
                Tensor& gg = t.grad_slot(gi);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gg[static_cast<std::size_t>(j)] += g.at(i, j) * xhat.at(i, j);
            }
            if (needs(t, bi)) {
                Tensor& gb = t.grad_slot(bi);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g.at(i, j);
            }
            if (needs(t, xi)) {
                Tensor& gx = t.grad_slot(xi);
                std::vector<double> dh(static_cast<std::size_t>(n));
                for (int i = 0; i < m; ++i) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double d = g.at(i, j) * G[static_cast<std::size_t>(j)];
                        dh[static_cast<std::size_t>(j)] = d;
                        mean_dh += d;
                        mean_dh_h += d * xhat.at(i, j);
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    const double r = rstd[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n; ++j) {
                        gx.at(i, j) += r * (dh[static_cast<std::size_t>(j)] - mean_dh - xhat.at(i, j) * mean_dh_h);
                    }
                }
            }
        });
}

Var embedding(Var table, std::span<const int> indices)
{
    Tape& t = *table.tape;
    const Tensor& W = table.value();
    require_matrix("embedding", W);
    if (indices.empty()) throw ShapeError("embedding: empty index list");
    const int v = W.rows(), d = W.cols();
    std::vector<int> idx(indices.begin(), indices.end());
    Tensor out({static_cast<int>(idx.size()), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= v) {
            throw ShapeError("embedding: index " + std::to_string(idx[r]) + " outside table " + shape_str(W.shape()));
        }
        auto src = W.row(idx[r]);
        std::copy(src.begin(), src.end(), out.row(static_cast<int>(r)).begin());
    }
    return t.record("embedding", std::move(out), {table.id}, [ti = table.id, idx = std::move(idx), d](Tape& t, const Tensor& g) {
        Tensor& gw = t.grad_slot(ti);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < d; ++j) gw.at(idx[r], j) += g.at(static_cast<int>(r), j);
    });
}

Var concat_rows(std::span<const Var> parts)
{
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    Tape& t = *parts.front().tape;
    const int n = parts.front().value().cols();
    int m = 0;
    std::vector<int> ids;
    std::vector<int> offsets;
    for (const Var& p : parts) {
        const Tensor& P = p.value();
        require_matrix("concat_rows", P);
        if (P.cols() != n) shape_fail("concat_rows", parts.front().value(), P);
        offsets.push_back(m);
        m += P.rows();
        ids.push_back(p.id);
    }
    Tensor out({m, n});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& P = parts[k].value();
        std::copy(P.values().begin(), P.values().end(), out.data() + static_cast<std::size_t>(offsets[k]) * n);
    }
    std::vector<int> inputs = ids;
    return t.record("concat_rows", std::move(out), std::move(inputs), [ids, offsets, n](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!needs(t, ids[k])) continue;
            Tensor& gp = t.grad_slot(ids[k]);
            const double* src = g.data() + static_cast<std::size_t>(offsets[k]) * n;
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
        }
    });
}

Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    Tape& t = *parts.front().tape;
    const int m = parts.front().value().rows();
    int n = 0;
    std::vector<int> ids;
    std::vector<int> offsets;
    for (const Var& p : parts) {
        const Tensor& P = p.value();
        require_matrix("concat_cols", P);
        if (P.rows() != m) shape_fail("concat_cols", parts.front().value(), P);
        offsets.push_back(n);
        n += P.cols();
        ids.push_back(p.id);
    }
    Tensor out({m, n});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& P = parts[k].value();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < P.cols(); ++j) out.at(i, offsets[k] + j) = P.at(i, j);
    }
    std::vector<int> inputs = ids;
    return t.record("concat_cols", std::move(out), std::move(inputs), [ids, offsets, m](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!needs(t, ids[k])) continue;
            Tensor& gp = t.grad_slot(ids[k]);
            const int w = gp.cols();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j) gp.at(i, j) += g.at(i, offsets[k] + j);
        }
    });
}

Var slice_rows(Var a, int begin, int end)
{
    const Tensor& A = a.value();
    require_matrix("slice_rows", A);
    if (begin < 0 || end > A.rows() || begin >= end) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(A.shape()));
    }
    std::vector<int> rows;
    for (int r = begin; r < end; ++r) rows.push_back(r);
    return gather_rows(a, rows);
}

Var slice_cols(Var a, int begin, int end)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    require_matrix("slice_cols", A);
    if (begin < 0 || end > A.cols() || begin >= end) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(A.shape()));
    }
    const int m = A.rows(), w = end - begin;
    Tensor out({m, w});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = A.at(i, begin + j);
    return t.record("slice_cols", std::move(out), {a.id}, [ai = a.id, begin, m, w](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_slot(ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) ga.at(i, begin + j) += g.at(i, j);
    });
}

Var gather_rows(Var a, std::span<const int> rows)
{
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    require_matrix("gather_rows", A);
    if (rows.empty()) throw ShapeError("gather_rows: empty row list");
    const int n = A.cols();
    std::vector<int> idx(rows.begin(), rows.end());
    Tensor out({static_cast<int>(idx.size()), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= A.rows()) {
            throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " outside " + shape_str(A.shape()));
        }
        auto src = A.row(idx[r]);
        std::copy(src.begin(), src.end(), out.row(static_cast<int>(r)).begin());
    }
    return t.record("gather_rows", std::move(out), {a.id}, [ai = a.id, idx = std::move(idx), n](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_slot(ai);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < n; ++j) ga.at(idx[r], j) += g.at(static_cast<int>(r), j);
    });
}

Var sum(Var a)
{
    Tape& t = *a.tape;
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return t.record("sum", Tensor::scalar(s), {a.id}, [ai = a.id](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_slot(ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
    });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const char> valid)
{
    Tape& t = *logits.tape;
    const Tensor& L = logits.value();
    require_matrix("cross_entropy", L);
    const int m = L.rows(), c = L.cols();
    if (targets.size() != static_cast<std::size_t>(m) || valid.size() != static_cast<std::size_t>(m)) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " + std::to_string(valid.size()) +
                         " mask entries for logits " + shape_str(L.shape()));
    }
    int count = 0;
    for (char v : valid) count += v ? 1 : 0;
    if (count == 0) throw DomainError("cross_entropy: no valid positions");
    Tensor probs({m, c});
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        const int y = targets[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c) throw ShapeError("cross_entropy: target " + std::to_string(y) + " outside " + std::to_string(c) + " classes");
        double mx = L.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, L.at(i, j));
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(L.at(i, j) - mx);
        const double lse = mx + std::log(s);
        loss += lse - L.at(i, y);
        for (int j = 0; j < c; ++j) probs.at(i, j) = std::exp(L.at(i, j) - lse);
    }
    loss /= count;
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<char> vd(valid.begin(), valid.end());
    return t.record("cross_entropy", Tensor::scalar(loss), {logits.id},
        [li = logits.id, probs = std::move(probs), tg = std::move(tg), vd = std::move(vd), count, m, c](Tape& t, const Tensor& g) {
            Tensor& gl = t.grad_slot(li);
            const double s = g[0] / count;
            for (int i = 0; i < m; ++i) {
                if (!vd[static_cast<std::size_t>(i)]) continue;
                for (int j = 0; j < c; ++j) gl.at(i, j) += s * probs.at(i, j);
                gl.at(i, tg[static_cast<std::size_t>(i)]) -= s;
            }
        });
}

Var mse(Var pred, const Tensor& target, std::span<const char> valid)
{
    Tape& t = *pred.tape;
    const Tensor& P = pred.value();
    require_matrix("mse", P);
    if (!P.same_shape(target)) shape_fail("mse", P, target);
    const int m = P.rows(), n = P.cols();
    if (valid.size() != static_cast<std::size_t>(m)) throw ShapeError("mse: mask length does not match rows of " + shape_str(P.shape()));
    int count = 0;
    for (char v : valid) count += v ? 1 : 0;
    if (count == 0) throw DomainError("mse: no valid positions");
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        for (int j = 0; j < n; ++j) {
            const double d = P.at(i, j) - target.at(i, j);
            loss += d * d;
        }
    }
    const double denom = static_cast<double>(count) * n;
    loss /= denom;
    std::vector<char> vd(valid.begin(), valid.end());
    return t.record("mse", Tensor::scalar(loss), {pred.id},
        [pi = pred.id, target, vd = std::move(vd), denom, m, n](Tape& t, const Tensor& g) {
            Tensor& gp = t.grad_slot(pi);
            const Tensor& P = t.value(pi);
            const double s = 2.0 * g[0] / denom;
            for (int i = 0; i < m; ++i) {
                if (!vd[static_cast<std::size_t>(i)]) continue;
                for (int j = 0; j < n; ++j) gp.at(i, j) += s * (P.at(i, j) - target.at(i, j));
            }
        });
}

} // namespace medt::ag
