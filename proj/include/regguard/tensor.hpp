#pragma once

// Reverse-mode autodiff over flat Eigen arrays. Shapes are explicit vectors;
// images travel as [N, C, H, W], matrices as [rows, cols].

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace regguard {

using Arr = Eigen::ArrayXd;

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    Arr value;
    Arr grad;
    std::vector<int> shape;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad = Arr::Zero(value.size());
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor leaf(std::vector<int> shape, Arr value, bool requires_grad = false);
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Arr& value() const { return node_->value; }
    Arr& value() { return node_->value; }
    Arr& grad() { return node_->grad; }
    const Arr& grad() const { return node_->grad; }
    const std::vector<int>& shape() const { return node_->shape; }
    Eigen::Index size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    NodePtr node() const { return node_; }

    Tensor reshape(std::vector<int> shape) const;
    Tensor detach() const;  // leaf with a copy of the value, no grad

    // Seeds the gradient of this (scalar) node with 1 and runs the tape.
    void backward() const;

private:
    NodePtr node_;
};

// Elementwise binary ops (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Scalar ops.
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// Elementwise unary ops.
Tensor relu(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs_op(const Tensor& a);  // subgradient 0 at the origin
Tensor square(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor exp_op(const Tensor& a);
// arccos with the argument clamped to [-1+eps, 1-eps]; zero gradient in the
// clamped region.
Tensor acos_clamped(const Tensor& a, double eps = 1e-9);
// Clamp to [0,1] with pass-through gradient inside the range.
Tensor clamp01(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis0(const Tensor& x);   // [N,d] -> [d]
Tensor mean_axis0(const Tensor& x);  // [N,d] -> [d]
Tensor sum_axis1(const Tensor& x);   // [N,d] -> [N]

// Row/column broadcasts against a [N,d] matrix.
Tensor bcast_add_row(const Tensor& x, const Tensor& v);  // v: [d]
Tensor bcast_sub_row(const Tensor& x, const Tensor& v);
Tensor bcast_mul_row(const Tensor& x, const Tensor& v);
Tensor bcast_mul_col(const Tensor& x, const Tensor& c);  // c: [N]
Tensor bcast_div_col(const Tensor& x, const Tensor& c);

Tensor tile(const Tensor& v, int times);  // [len] -> [times*len]

Tensor matmul(const Tensor& a, const Tensor& b);  // [p,q] x [q,r] -> [p,r]
Tensor softmax_rows(const Tensor& x);             // [N,d] -> [N,d]

// Composite helpers (built from the primitives above, fully differentiable).
Tensor variance_axis0(const Tensor& x);  // population variance per column
Tensor row_l2_norms(const Tensor& x);    // [N,m] -> [N]

// Convolution with stride 1 and same padding (odd k). x: [N,C,H,W],
// w: [out_c, C*k*k], b: [out_c]. Returns [N,out_c,H,W].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int k);
Tensor avgpool2(const Tensor& x);         // [N,C,H,W] -> [N,C,H/2,W/2]
Tensor global_avgpool(const Tensor& x);   // [N,C,H,W] -> [N,C]

}  // namespace regguard
