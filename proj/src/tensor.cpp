#include "cape/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cape/kernels.hpp"

namespace cape {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace {

long numel_of(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

std::shared_ptr<TensorNode> make_node(Shape shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->value.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

long last_dim(const Tensor& x) { return x.shape().back(); }
long row_count(const Tensor& x) { return x.numel() / x.shape().back(); }

// Output node for an op: requires_grad if any input does, grad buffer
// pre-zeroed so closures can accumulate freely.
Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs) {
    bool rg = false;
    for (const Tensor* t : inputs) rg = rg || t->requires_grad();
    Tensor out = Tensor::zeros(std::move(shape), rg);
    if (rg) {
        out.node()->ensure_grad();
        for (const Tensor* t : inputs)
            if (t->requires_grad()) t->node()->ensure_grad();
    }
    return out;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel_of(shape) != static_cast<long>(data.size()))
        throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                    std::to_string(numel_of(shape)) + " values, got " +
                                    std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

void Tape::backward(const Tensor& loss) {
    if (consumed_)
        throw std::runtime_error("Tape::backward: tape already consumed; re-record the forward pass");
    if (loss.numel() != 1)
        throw std::invalid_argument("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
    consumed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// --- matmul ----------------------------------------------------------------

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const long m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_output({m, n}, {&a, &b});
    kern::matmul_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        t.record([an, bn, on, m, k, n] {
            if (an->requires_grad) {
                // dA[i,p] = dot(dOut[i,:], B[p,:])
                for (long i = 0; i < m; ++i)
                    for (long p = 0; p < k; ++p)
                        an->grad[i * k + p] +=
                            kern::dot(on->grad.data() + i * n, bn->value.data() + p * n, n);
            }
            if (bn->requires_grad) {
                for (long i = 0; i < m; ++i)
                    for (long p = 0; p < k; ++p)
                        kern::axpy(an->value[i * k + p], on->grad.data() + i * n,
                                   bn->grad.data() + p * n, n);
            }
        });
    }
    return out;
}

Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const long m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = make_output({m, n}, {&a, &b});
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j)
            out.data()[i * n + j] =
                kern::dot(a.data().data() + i * k, b.data().data() + j * k, k);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        t.record([an, bn, on, m, k, n] {
            if (an->requires_grad)
                kern::matmul_acc(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            if (bn->requires_grad) {
                for (long i = 0; i < m; ++i)
                    for (long j = 0; j < n; ++j)
                        kern::axpy(on->grad[i * n + j], an->value.data() + i * k,
                                   bn->grad.data() + j * k, k);
            }
        });
    }
    return out;
}

// --- elementwise -----------------------------------------------------------

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const std::size_t n = a.data().size();
    Tensor out = make_output(a.shape(), {&a, &b});
    kern::add(a.data().data(), b.data().data(), out.data().data(), n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        t.record([an, bn, on, n] {
            if (an->requires_grad) kern::axpy(1.0, on->grad.data(), an->grad.data(), n);
            if (bn->requires_grad) kern::axpy(1.0, on->grad.data(), bn->grad.data(), n);
        });
    }
    return out;
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const std::size_t n = a.data().size();
    Tensor out = make_output(a.shape(), {&a, &b});
    kern::sub(a.data().data(), b.data().data(), out.data().data(), n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        t.record([an, bn, on, n] {
            if (an->requires_grad) kern::axpy(1.0, on->grad.data(), an->grad.data(), n);
            if (bn->requires_grad) kern::axpy(-1.0, on->grad.data(), bn->grad.data(), n);
        });
    }
    return out;
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const std::size_t n = a.data().size();
    Tensor out = make_output(a.shape(), {&a, &b});
    kern::mul(a.data().data(), b.data().data(), out.data().data(), n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        t.record([an, bn, on, n] {
            if (an->requires_grad)
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
        });
    }
    return out;
}

Tensor scale(Tape& t, const Tensor& a, double alpha) {
    const std::size_t n = a.data().size();
    Tensor out = make_output(a.shape(), {&a});
    kern::scale(a.data().data(), alpha, out.data().data(), n);
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        t.record([an, on, alpha, n] { kern::axpy(alpha, on->grad.data(), an->grad.data(), n); });
    }
    return out;
}

Tensor add_scalar(Tape& t, const Tensor& a, double c) {
    const std::size_t n = a.data().size();
    Tensor out = make_output(a.shape(), {&a});
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        t.record([an, on, n] { kern::axpy(1.0, on->grad.data(), an->grad.data(), n); });
    }
    return out;
}

Tensor add_rowbias(Tape& t, const Tensor& x, const Tensor& bias) {
    const long n = last_dim(x);
    if (bias.numel() != n)
        throw std::invalid_argument("add_rowbias: bias " + shape_str(bias.shape()) +
                                    " does not match last dim of " + shape_str(x.shape()));
    const long rows = row_count(x);
    Tensor out = make_output(x.shape(), {&x, &bias});
    for (long r = 0; r < rows; ++r)
        kern::add(x.data().data() + r * n, bias.data().data(), out.data().data() + r * n, n);
    if (out.requires_grad()) {
        auto xn = x.node(), bn = bias.node(), on = out.node();
        t.record([xn, bn, on, rows, n] {
            if (xn->requires_grad)
                kern::axpy(1.0, on->grad.data(), xn->grad.data(), rows * n);
            if (bn->requires_grad)
                for (long r = 0; r < rows; ++r)
                    kern::axpy(1.0, on->grad.data() + r * n, bn->grad.data(), n);
        });
    }
    return out;
}

// --- activations -----------------------------------------------------------

Tensor sigmoid(Tape& t, const Tensor& x) {
    const std::size_t n = x.data().size();
    Tensor out = make_output(x.shape(), {&x});
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, n] {
            for (std::size_t i = 0; i < n; ++i) {
                const double s = on->value[i];
                xn->grad[i] += on->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

Tensor silu(Tape& t, const Tensor& x) {
    const std::size_t n = x.data().size();
    Tensor out = make_output(x.shape(), {&x});
    for (std::size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x.data()[i]));
        out.data()[i] = x.data()[i] * s;
    }
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, n] {
            for (std::size_t i = 0; i < n; ++i) {
                const double v = xn->value[i];
                const double s = 1.0 / (1.0 + std::exp(-v));
                xn->grad[i] += on->grad[i] * (s + v * s * (1.0 - s));
            }
        });
    }
    return out;
}

// --- softmax ---------------------------------------------------------------

Tensor softmax_lastdim(Tape& t, const Tensor& x, const std::vector<std::uint8_t>* mask) {
    const long n = last_dim(x);
    const long rows = row_count(x);
    if (mask && static_cast<long>(mask->size()) != x.numel())
        throw std::invalid_argument("softmax_lastdim: mask size " + std::to_string(mask->size()) +
                                    " does not match tensor " + shape_str(x.shape()));
    Tensor out = make_output(x.shape(), {&x});
    std::vector<std::uint8_t> keep;
    if (mask) keep = *mask;
    for (long r = 0; r < rows; ++r) {
        const double* xin = x.data().data() + r * n;
        double* o = out.data().data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (long j = 0; j < n; ++j)
            if (!mask || keep[r * n + j]) mx = std::max(mx, xin[j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw std::invalid_argument("softmax_lastdim: fully masked row " + std::to_string(r));
        double denom = 0.0;
        for (long j = 0; j < n; ++j) {
            if (!mask || keep[r * n + j]) {
                o[j] = std::exp(xin[j] - mx);
                denom += o[j];
            } else {
                o[j] = 0.0;
            }
        }
        for (long j = 0; j < n; ++j) o[j] /= denom;
    }
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, rows, n] {
            for (long r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * n;
                const double* g = on->grad.data() + r * n;
                const double inner = kern::dot(y, g, n);
                for (long j = 0; j < n; ++j) xn->grad[r * n + j] += y[j] * (g[j] - inner);
            }
        });
    }
    return out;
}

// --- reverse cumsum --------------------------------------------------------

Tensor reverse_cumsum(Tape& t, const Tensor& x) {
    const long n = last_dim(x);
    const long rows = row_count(x);
    Tensor out = make_output(x.shape(), {&x});
    for (long r = 0; r < rows; ++r) {
        const double* xin = x.data().data() + r * n;
        double* o = out.data().data() + r * n;
        o[n - 1] = xin[n - 1];
        for (long j = n - 2; j >= 0; --j) o[j] = o[j + 1] + xin[j];
    }
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, rows, n] {
            for (long r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (long j = 0; j < n; ++j) {
                    acc += on->grad[r * n + j];
                    xn->grad[r * n + j] += acc;
                }
            }
        });
    }
    return out;
}

// --- gather / concat / tiling ----------------------------------------------

Tensor gather_rows(Tape& t, const Tensor& table, const std::vector<long>& ids) {
    if (table.shape().size() != 2)
        throw std::invalid_argument("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
    const long V = table.dim(0), d = table.dim(1);
    for (long id : ids)
        if (id < 0 || id >= V)
            throw std::out_of_range("gather_rows: id " + std::to_string(id) +
                                    " outside table of " + std::to_string(V) + " rows");
    const long m = static_cast<long>(ids.size());
    Tensor out = make_output({m, d}, {&table});
    for (long i = 0; i < m; ++i)
        kern::scale(table.data().data() + ids[i] * d, 1.0, out.data().data() + i * d, d);
    if (out.requires_grad()) {
        auto tn = table.node(), on = out.node();
        t.record([tn, on, ids, m, d] {
            for (long i = 0; i < m; ++i)
                kern::axpy(1.0, on->grad.data() + i * d, tn->grad.data() + ids[i] * d, d);
        });
    }
    return out;
}

Tensor concat_lastdim(Tape& t, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_lastdim: no parts");
    const long rows = row_count(parts[0]);
    long total = 0;
    for (const Tensor& p : parts) {
        if (row_count(p) != rows)
            throw std::invalid_argument("concat_lastdim: leading shape mismatch " +
                                        shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += last_dim(p);
    }
    Shape oshape = parts[0].shape();
    oshape.back() = total;
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
    Tensor out = Tensor::zeros(oshape, rg);
    if (rg) {
        out.node()->ensure_grad();
        for (const Tensor& p : parts)
            if (p.requires_grad()) p.node()->ensure_grad();
    }
    long off = 0;
    for (const Tensor& p : parts) {
        const long d = last_dim(p);
        for (long r = 0; r < rows; ++r)
            kern::scale(p.data().data() + r * d, 1.0, out.data().data() + r * total + off, d);
        off += d;
    }
    if (rg) {
        std::vector<std::shared_ptr<TensorNode>> pn;
        for (const Tensor& p : parts) pn.push_back(p.node());
        auto on = out.node();
        t.record([pn, on, rows, total] {
            long off2 = 0;
            for (const auto& p : pn) {
                const long d = p->shape.back();
                if (p->requires_grad)
                    for (long r = 0; r < rows; ++r)
                        kern::axpy(1.0, on->grad.data() + r * total + off2,
                                   p->grad.data() + r * d, d);
                off2 += d;
            }
        });
    }
    return out;
}

Tensor tile_rows(Tape& t, const Tensor& x, long reps) {
    const long d = last_dim(x);
    const long m = row_count(x);
    Tensor out = make_output({m * reps, d}, {&x});
    for (long i = 0; i < m; ++i)
        for (long r = 0; r < reps; ++r)
            kern::scale(x.data().data() + i * d, 1.0, out.data().data() + (i * reps + r) * d, d);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, m, reps, d] {
            for (long i = 0; i < m; ++i)
                for (long r = 0; r < reps; ++r)
                    kern::axpy(1.0, on->grad.data() + (i * reps + r) * d, xn->grad.data() + i * d, d);
        });
    }
    return out;
}

Tensor rowwise_dot(Tape& t, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "rowwise_dot");
    const long d = last_dim(a);
    const long m = row_count(a);
    Tensor out = make_output({m}, {&a, &b});
    for (long i = 0; i < m; ++i)
        out.data()[i] = kern::dot(a.data().data() + i * d, b.data().data() + i * d, d);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        t.record([an, bn, on, m, d] {
            for (long i = 0; i < m; ++i) {
                const double g = on->grad[i];
                if (an->requires_grad) kern::axpy(g, bn->value.data() + i * d, an->grad.data() + i * d, d);
                if (bn->requires_grad) kern::axpy(g, an->value.data() + i * d, bn->grad.data() + i * d, d);
            }
        });
    }
    return out;
}

Tensor weighted_pool(Tape& t, const Tensor& w, const Tensor& ctx) {
    const long n = last_dim(w);
    const long m = row_count(w);
    const long d = last_dim(ctx);
    if (row_count(ctx) != m * n)
        throw std::invalid_argument("weighted_pool: ctx rows " + std::to_string(row_count(ctx)) +
                                    " != " + std::to_string(m * n));
    Tensor out = make_output({m, d}, {&w, &ctx});
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j)
            kern::axpy(w.data()[i * n + j], ctx.data().data() + (i * n + j) * d,
                       out.data().data() + i * d, d);
    if (out.requires_grad()) {
        auto wn = w.node(), cn = ctx.node(), on = out.node();
        t.record([wn, cn, on, m, n, d] {
            for (long i = 0; i < m; ++i)
                for (long j = 0; j < n; ++j) {
                    if (wn->requires_grad)
                        wn->grad[i * n + j] += kern::dot(on->grad.data() + i * d,
                                                         cn->value.data() + (i * n + j) * d, d);
                    if (cn->requires_grad)
                        kern::axpy(wn->value[i * n + j], on->grad.data() + i * d,
                                   cn->grad.data() + (i * n + j) * d, d);
                }
        });
    }
    return out;
}

Tensor interp_lastdim(Tape& t, const Tensor& z, const Tensor& p) {
    const long P = last_dim(z);
    const long m = row_count(z);
    if (m == 0 || p.numel() % m != 0)
        throw std::invalid_argument("interp_lastdim: p " + shape_str(p.shape()) +
                                    " not divisible into " + std::to_string(m) + " rows");
    const long n = p.numel() / m;
    Tensor out = make_output(p.shape(), {&z, &p});
    for (long i = 0; i < m; ++i) {
        for (long j = 0; j < n; ++j) {
            double pv = p.data()[i * n + j];
            pv = std::min(std::max(pv, 0.0), static_cast<double>(P - 1));
            const long lo = static_cast<long>(std::floor(pv));
            const long hi = static_cast<long>(std::ceil(pv));
            const double frac = pv - static_cast<double>(lo);
            out.data()[i * n + j] = (1.0 - frac) * z.data()[i * P + lo] + frac * z.data()[i * P + hi];
        }
    }
    if (out.requires_grad()) {
        auto zn = z.node(), pn = p.node(), on = out.node();
        t.record([zn, pn, on, m, n, P] {
            for (long i = 0; i < m; ++i)
                for (long j = 0; j < n; ++j) {
                    const double g = on->grad[i * n + j];
                    double pv = pn->value[i * n + j];
                    const bool clamped = pv < 0.0 || pv > static_cast<double>(P - 1);
                    pv = std::min(std::max(pv, 0.0), static_cast<double>(P - 1));
                    const long lo = static_cast<long>(std::floor(pv));
                    const long hi = static_cast<long>(std::ceil(pv));
                    const double frac = pv - static_cast<double>(lo);
                    if (zn->requires_grad) {
                        zn->grad[i * P + lo] += g * (1.0 - frac);
                        zn->grad[i * P + hi] += g * frac;
                    }
                    if (pn->requires_grad && !clamped)
                        pn->grad[i * n + j] += g * (zn->value[i * P + hi] - zn->value[i * P + lo]);
                }
        });
    }
    return out;
}

// --- shape / misc ----------------------------------------------------------

Tensor reshape(Tape& t, const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " +
                                    shape_str(shape) + " changes element count");
    const std::size_t n = x.data().size();
    Tensor out = make_output(std::move(shape), {&x});
    out.data() = x.data();
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, n] { kern::axpy(1.0, on->grad.data(), xn->grad.data(), n); });
    }
    return out;
}

Tensor clamp(Tape& t, const Tensor& x, double lo, double hi) {
    const std::size_t n = x.data().size();
    Tensor out = make_output(x.shape(), {&x});
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::min(std::max(x.data()[i], lo), hi);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, lo, hi, n] {
            for (std::size_t i = 0; i < n; ++i)
                if (xn->value[i] > lo && xn->value[i] < hi) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

Tensor layer_norm(Tape& t, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const long n = last_dim(x);
    if (gamma.numel() != n || beta.numel() != n)
        throw std::invalid_argument("layer_norm: gain/shift must match last dim " + std::to_string(n));
    const long rows = row_count(x);
    Tensor out = make_output(x.shape(), {&x, &gamma, &beta});
    std::vector<double> inv_std(rows), means(rows);
    for (long r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double mu = 0.0;
        for (long j = 0; j < n; ++j) mu += xr[j];
        mu /= n;
        double var = 0.0;
        for (long j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        means[r] = mu;
        inv_std[r] = is;
        for (long j = 0; j < n; ++j)
            out.data()[r * n + j] = (xr[j] - mu) * is * gamma.data()[j] + beta.data()[j];
    }
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        t.record([xn, gn, bn, on, means = std::move(means), inv_std = std::move(inv_std), rows, n] {
            for (long r = 0; r < rows; ++r) {
                const double mu = means[r], is = inv_std[r];
                const double* xr = xn->value.data() + r * n;
                const double* g = on->grad.data() + r * n;
                double sum_gy = 0.0, sum_gyx = 0.0;
                for (long j = 0; j < n; ++j) {
                    const double xhat = (xr[j] - mu) * is;
                    const double gy = g[j] * gn->value[j];
                    sum_gy += gy;
                    sum_gyx += gy * xhat;
                    if (gn->requires_grad) gn->grad[j] += g[j] * xhat;
                    if (bn->requires_grad) bn->grad[j] += g[j];
                }
                if (xn->requires_grad)
                    for (long j = 0; j < n; ++j) {
                        const double xhat = (xr[j] - mu) * is;
                        const double gy = g[j] * gn->value[j];
                        xn->grad[r * n + j] += is * (gy - sum_gy / n - xhat * sum_gyx / n);
                    }
            }
        });
    }
    return out;
}

Tensor slice_rows(Tape& t, const Tensor& x, long start, long count) {
    const long d = last_dim(x);
    const long rows = row_count(x);
    if (start < 0 || start + count > rows)
        throw std::invalid_argument("slice_rows: [" + std::to_string(start) + ", " +
                                    std::to_string(start + count) + ") outside " +
                                    std::to_string(rows) + " rows");
    Tensor out = make_output({count, d}, {&x});
    std::copy_n(x.data().data() + start * d, count * d, out.data().data());
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, start, count, d] {
            kern::axpy(1.0, on->grad.data(), xn->grad.data() + start * d, count * d);
        });
    }
    return out;
}

Tensor stack_rows(Tape& t, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_rows: no parts");
    const long d = last_dim(parts[0]);
    long rows = 0;
    for (const Tensor& p : parts) {
        if (last_dim(p) != d)
            throw std::invalid_argument("stack_rows: last-dim mismatch " +
                                        shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        rows += row_count(p);
    }
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
    Tensor out = Tensor::zeros({rows, d}, rg);
    if (rg) {
        out.node()->ensure_grad();
        for (const Tensor& p : parts)
            if (p.requires_grad()) p.node()->ensure_grad();
    }
    long off = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.data().data(), p.data().size(), out.data().data() + off);
        off += static_cast<long>(p.data().size());
    }
    if (rg) {
        std::vector<std::shared_ptr<TensorNode>> pn;
        for (const Tensor& p : parts) pn.push_back(p.node());
        auto on = out.node();
        t.record([pn, on] {
            long off2 = 0;
            for (const auto& p : pn) {
                const long sz = static_cast<long>(p->value.size());
                if (p->requires_grad) kern::axpy(1.0, on->grad.data() + off2, p->grad.data(), sz);
                off2 += sz;
            }
        });
    }
    return out;
}

// --- reductions ------------------------------------------------------------

Tensor sum(Tape& t, const Tensor& x) {
    const std::size_t n = x.data().size();
    Tensor out = make_output({1}, {&x});
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x.data()[i];
    out.data()[0] = s;
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        t.record([xn, on, n] {
            const double g = on->grad[0];
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
        });
    }
    return out;
}

Tensor mean(Tape& t, const Tensor& x) {
    return scale(t, sum(t, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor bce_loss(Tape& t, const Tensor& p, const Tensor& y, double eps) {
    check_same_shape(p, y, "bce_loss");
    const std::size_t n = p.data().size();
    Tensor out = make_output({1}, {&p});
    double acc = 0.0;
    std::vector<double> pc(n);
    for (std::size_t i = 0; i < n; ++i) {
        pc[i] = std::min(std::max(p.data()[i], eps), 1.0 - eps);
        acc -= y.data()[i] * std::log(pc[i]) + (1.0 - y.data()[i]) * std::log(1.0 - pc[i]);
    }
    out.data()[0] = acc / static_cast<double>(n);
    if (out.requires_grad()) {
        auto pn = p.node(), on = out.node();
        auto yv = y.data();
        t.record([pn, on, yv, pc = std::move(pc), n] {
            const double g = on->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (pn->value[i] != pc[i]) continue;  // clamped: flat
                pn->grad[i] += g * (pc[i] - yv[i]) / (pc[i] * (1.0 - pc[i]));
            }
        });
    }
    return out;
}

}  // namespace cape
