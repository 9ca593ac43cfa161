#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cape {

using Shape = std::vector<long>;

std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value handle into the gradient graph. Copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    long dim(std::size_t i) const { return node_->shape[i]; }
    long numel() const { return static_cast<long>(node_->value.size()); }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& grad() { return node_->grad; }
    const std::vector<double>& grad() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    double item() const;

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

// Record-then-reverse tape. Each forward op pushes one closure; backward
// runs them in reverse and is single-shot per recording.
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    void backward(const Tensor& loss);
    std::size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
};

// --- primitives ------------------------------------------------------------

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ

Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double alpha);
Tensor add_scalar(Tape& t, const Tensor& a, double c);
Tensor add_rowbias(Tape& t, const Tensor& x, const Tensor& bias);  // [m,n]+[n]

Tensor sigmoid(Tape& t, const Tensor& x);
Tensor silu(Tape& t, const Tensor& x);

// Stable softmax over the last dimension. mask, when given, matches the
// element count; masked entries get weight exactly 0. A fully masked row
// throws.
Tensor softmax_lastdim(Tape& t, const Tensor& x,
                       const std::vector<std::uint8_t>* mask = nullptr);

// out[..., j] = sum_{k>=j} x[..., k]
Tensor reverse_cumsum(Tape& t, const Tensor& x);

Tensor gather_rows(Tape& t, const Tensor& table, const std::vector<long>& ids);
Tensor concat_lastdim(Tape& t, const std::vector<Tensor>& parts);

// each row of x repeated `reps` times consecutively: [m,d] -> [m*reps,d]
Tensor tile_rows(Tape& t, const Tensor& x, long reps);

Tensor rowwise_dot(Tape& t, const Tensor& a, const Tensor& b);  // [m,d]x2 -> [m]

// o[i] = sum_j w[i,j] * ctx[i*n + j, :]; w is [m,n], ctx is [m*n,d]
Tensor weighted_pool(Tape& t, const Tensor& w, const Tensor& ctx);

// Linear interpolation of per-row tables z[m,P] at fractional indices
// p[m,n], clamped to [0, P-1]. Differentiable in both z and p.
Tensor interp_lastdim(Tape& t, const Tensor& z, const Tensor& p);

// same data, new shape (element count must match)
Tensor reshape(Tape& t, const Tensor& x, Shape shape);

Tensor clamp(Tape& t, const Tensor& x, double lo, double hi);

// per-row normalization over the last dimension with learnable gain/shift
Tensor layer_norm(Tape& t, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

Tensor slice_rows(Tape& t, const Tensor& x, long start, long count);
Tensor stack_rows(Tape& t, const std::vector<Tensor>& parts);

Tensor sum(Tape& t, const Tensor& x);
Tensor mean(Tape& t, const Tensor& x);

// mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps]
Tensor bce_loss(Tape& t, const Tensor& p, const Tensor& y, double eps = 1e-7);

}  // namespace cape
