#include "regguard/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace regguard {

namespace {

Eigen::Index shape_size(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int s : shape) n *= s;
    return n;
}

NodePtr make_node(std::vector<int> shape, Arr value, std::vector<NodePtr> parents,
                  std::function<void(TensorNode&)> backprop) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

void check_same_shape(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("tensor shape mismatch");
}

}  // namespace

Tensor Tensor::leaf(std::vector<int> shape, Arr value, bool requires_grad) {
    if (value.size() != shape_size(shape)) throw std::invalid_argument("leaf value/shape mismatch");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Arr v = Arr::Zero(shape_size(shape));
    return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double v) {
    Arr a(1);
    a[0] = v;
    return leaf({1}, std::move(a));
}

Tensor Tensor::reshape(std::vector<int> shape) const {
    if (shape_size(shape) != size()) throw std::invalid_argument("reshape size mismatch");
    return Tensor(make_node(std::move(shape), node_->value, {node_}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad;
    }));
}

Tensor Tensor::detach() const {
    return leaf(shape(), node_->value, false);
}

void Tensor::backward() const {
    if (size() != 1) throw std::logic_error("backward() requires a scalar root");
    // Topological order by DFS over parents.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            TensorNode* p = n->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (TensorNode* n : order) n->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b);
    return Tensor(make_node(a.shape(), a.value() + b.value(), {a.node(), b.node()}, [](TensorNode& n) {
        for (int i = 0; i < 2; ++i)
            if (n.parents[i]->requires_grad) {
                n.parents[i]->ensure_grad();
                n.parents[i]->grad += n.grad;
            }
    }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b);
    return Tensor(make_node(a.shape(), a.value() - b.value(), {a.node(), b.node()}, [](TensorNode& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad -= n.grad;
        }
    }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b);
    return Tensor(make_node(a.shape(), a.value() * b.value(), {a.node(), b.node()}, [](TensorNode& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad * n.parents[1]->value;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad += n.grad * n.parents[0]->value;
        }
    }));
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b);
    return Tensor(make_node(a.shape(), a.value() / b.value(), {a.node(), b.node()}, [](TensorNode& n) {
        const Arr& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad / bv;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad -= n.grad * n.value / bv;
        }
    }));
}

Tensor add_scalar(const Tensor& a, double s) {
    return Tensor(make_node(a.shape(), a.value() + s, {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad;
    }));
}

Tensor mul_scalar(const Tensor& a, double s) {
    return Tensor(make_node(a.shape(), a.value() * s, {a.node()}, [s](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * s;
    }));
}

Tensor relu(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.value().max(0.0), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * (n.parents[0]->value > 0.0).cast<double>();
    }));
}

Tensor tanh_op(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.value().tanh(), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * (1.0 - n.value.square());
    }));
}

Tensor sigmoid(const Tensor& a) {
    Arr v = 1.0 / (1.0 + (-a.value()).exp());
    return Tensor(make_node(a.shape(), std::move(v), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * n.value * (1.0 - n.value);
    }));
}

Tensor abs_op(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.value().abs(), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * n.parents[0]->value.sign();
    }));
}

Tensor square(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.value().square(), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * 2.0 * n.parents[0]->value;
    }));
}

Tensor sqrt_op(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.value().sqrt(), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * 0.5 / n.value.max(1e-300);
    }));
}

Tensor exp_op(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.value().exp(), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * n.value;
    }));
}

Tensor acos_clamped(const Tensor& a, double eps) {
    Arr clamped = a.value().min(1.0 - eps).max(-1.0 + eps);
    Arr inside = ((a.value() < 1.0 - eps) && (a.value() > -1.0 + eps)).cast<double>();
    Arr v = clamped.acos();
    return Tensor(make_node(a.shape(), std::move(v), {a.node()},
                            [clamped, inside](TensorNode& n) {
                                n.parents[0]->ensure_grad();
                                n.parents[0]->grad +=
                                    n.grad * inside * (-1.0 / (1.0 - clamped.square()).sqrt());
                            }));
}

Tensor clamp01(const Tensor& a) {
    Arr inside = ((a.value() >= 0.0) && (a.value() <= 1.0)).cast<double>();
    return Tensor(make_node(a.shape(), a.value().min(1.0).max(0.0), {a.node()},
                            [inside](TensorNode& n) {
                                n.parents[0]->ensure_grad();
                                n.parents[0]->grad += n.grad * inside;
                            }));
}

Tensor sum(const Tensor& a) {
    Arr v(1);
    v[0] = a.value().sum();
    return Tensor(make_node({1}, std::move(v), {a.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad[0];
    }));
}

Tensor mean(const Tensor& a) {
    double inv = 1.0 / static_cast<double>(a.size());
    Arr v(1);
    v[0] = a.value().mean();
    return Tensor(make_node({1}, std::move(v), {a.node()}, [inv](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad[0] * inv;
    }));
}

Tensor sum_axis0(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("sum_axis0 expects a matrix");
    int rows = x.shape()[0], cols = x.shape()[1];
    CMapM m(x.value().data(), rows, cols);
    Arr v = m.colwise().sum().transpose().array();
    return Tensor(make_node({cols}, std::move(v), {x.node()}, [rows, cols](TensorNode& n) {
        n.parents[0]->ensure_grad();
        MapM g(n.parents[0]->grad.data(), rows, cols);
        g.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(n.grad.data(), cols);
    }));
}

Tensor mean_axis0(const Tensor& x) {
    return mul_scalar(sum_axis0(x), 1.0 / x.shape()[0]);
}

Tensor sum_axis1(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("sum_axis1 expects a matrix");
    int rows = x.shape()[0], cols = x.shape()[1];
    CMapM m(x.value().data(), rows, cols);
    Arr v = m.rowwise().sum().array();
    return Tensor(make_node({rows}, std::move(v), {x.node()}, [rows, cols](TensorNode& n) {
        n.parents[0]->ensure_grad();
        MapM g(n.parents[0]->grad.data(), rows, cols);
        g.colwise() += Eigen::Map<const Eigen::VectorXd>(n.grad.data(), rows);
    }));
}

namespace {

enum class RowOp { Add, Sub, Mul };

Tensor bcast_row_op(const Tensor& x, const Tensor& v, RowOp op) {
    if (x.shape().size() != 2 || v.shape().size() != 1 || v.shape()[0] != x.shape()[1])
        throw std::invalid_argument("row broadcast shape mismatch");
    int rows = x.shape()[0], cols = x.shape()[1];
    CMapM xm(x.value().data(), rows, cols);
    Eigen::Map<const Eigen::RowVectorXd> vv(v.value().data(), cols);
    MatRM out;
    switch (op) {
        case RowOp::Add: out = xm.rowwise() + vv; break;
        case RowOp::Sub: out = xm.rowwise() - vv; break;
        case RowOp::Mul: out = xm.array().rowwise() * vv.array(); break;
    }
    Arr val = Eigen::Map<Arr>(out.data(), out.size());
    return Tensor(make_node(x.shape(), std::move(val), {x.node(), v.node()},
                            [rows, cols, op](TensorNode& n) {
        CMapM g(n.grad.data(), rows, cols);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            MapM gx(n.parents[0]->grad.data(), rows, cols);
            if (op == RowOp::Mul) {
                Eigen::Map<const Eigen::RowVectorXd> vv(n.parents[1]->value.data(), cols);
                gx.array() += g.array().rowwise() * vv.array();
            } else {
                gx += g;
            }
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            Eigen::Map<Eigen::RowVectorXd> gv(n.parents[1]->grad.data(), cols);
            if (op == RowOp::Mul) {
                CMapM xm(n.parents[0]->value.data(), rows, cols);
                gv.array() += (g.array() * xm.array()).colwise().sum();
            } else if (op == RowOp::Add) {
                gv += g.colwise().sum();
            } else {
                gv -= g.colwise().sum();
            }
        }
    }));
}

}  // namespace

Tensor bcast_add_row(const Tensor& x, const Tensor& v) { return bcast_row_op(x, v, RowOp::Add); }
Tensor bcast_sub_row(const Tensor& x, const Tensor& v) { return bcast_row_op(x, v, RowOp::Sub); }
Tensor bcast_mul_row(const Tensor& x, const Tensor& v) { return bcast_row_op(x, v, RowOp::Mul); }

Tensor bcast_mul_col(const Tensor& x, const Tensor& c) {
    if (x.shape().size() != 2 || c.shape().size() != 1 || c.shape()[0] != x.shape()[0])
        throw std::invalid_argument("col broadcast shape mismatch");
    int rows = x.shape()[0], cols = x.shape()[1];
    CMapM xm(x.value().data(), rows, cols);
    Eigen::Map<const Eigen::VectorXd> cv(c.value().data(), rows);
    MatRM out = xm.array().colwise() * cv.array();
    Arr val = Eigen::Map<Arr>(out.data(), out.size());
    return Tensor(make_node(x.shape(), std::move(val), {x.node(), c.node()},
                            [rows, cols](TensorNode& n) {
        CMapM g(n.grad.data(), rows, cols);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            MapM gx(n.parents[0]->grad.data(), rows, cols);
            Eigen::Map<const Eigen::VectorXd> cv(n.parents[1]->value.data(), rows);
            gx.array() += g.array().colwise() * cv.array();
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            CMapM xm(n.parents[0]->value.data(), rows, cols);
            Eigen::Map<Eigen::VectorXd> gc(n.parents[1]->grad.data(), rows);
            gc.array() += (g.array() * xm.array()).rowwise().sum();
        }
    }));
}

Tensor bcast_div_col(const Tensor& x, const Tensor& c) {
    Arr inv = 1.0 / c.value();
    // d/dc of x/c needs the chain through 1/c; route through mul for simplicity.
    Tensor cinv = Tensor(make_node(c.shape(), std::move(inv), {c.node()}, [](TensorNode& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad -= n.grad * n.value.square();
    }));
    return bcast_mul_col(x, cinv);
}

Tensor tile(const Tensor& v, int times) {
    if (v.shape().size() != 1 || times < 1) throw std::invalid_argument("tile expects a vector");
    const int len = v.shape()[0];
    Arr out(static_cast<Eigen::Index>(times) * len);
    for (int t = 0; t < times; ++t) out.segment(static_cast<Eigen::Index>(t) * len, len) = v.value();
    return Tensor(make_node({times * len}, std::move(out), {v.node()}, [times, len](TensorNode& n) {
        n.parents[0]->ensure_grad();
        for (int t = 0; t < times; ++t)
            n.parents[0]->grad += n.grad.segment(static_cast<Eigen::Index>(t) * len, len);
    }));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul shape mismatch");
    int p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
    CMapM am(a.value().data(), p, q);
    CMapM bm(b.value().data(), q, r);
    MatRM out = am * bm;
    Arr val = Eigen::Map<Arr>(out.data(), out.size());
    return Tensor(make_node({p, r}, std::move(val), {a.node(), b.node()},
                            [p, q, r](TensorNode& n) {
        CMapM g(n.grad.data(), p, r);
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            MapM ga(n.parents[0]->grad.data(), p, q);
            CMapM bm(n.parents[1]->value.data(), q, r);
            ga.noalias() += g * bm.transpose();
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            MapM gb(n.parents[1]->grad.data(), q, r);
            CMapM am(n.parents[0]->value.data(), p, q);
            gb.noalias() += am.transpose() * g;
        }
    }));
}

Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows expects a matrix");
    int rows = x.shape()[0], cols = x.shape()[1];
    CMapM xm(x.value().data(), rows, cols);
    MatRM out(rows, cols);
    for (int i = 0; i < rows; ++i) {
        Eigen::ArrayXd row = xm.row(i).array();
        row -= row.maxCoeff();
        row = row.exp();
        out.row(i) = (row / row.sum()).matrix();
    }
    Arr val = Eigen::Map<Arr>(out.data(), out.size());
    return Tensor(make_node(x.shape(), std::move(val), {x.node()}, [rows, cols](TensorNode& n) {
        n.parents[0]->ensure_grad();
        CMapM s(n.value.data(), rows, cols);
        CMapM g(n.grad.data(), rows, cols);
        MapM gx(n.parents[0]->grad.data(), rows, cols);
        for (int i = 0; i < rows; ++i) {
            double dot = (g.row(i).array() * s.row(i).array()).sum();
            gx.row(i).array() += s.row(i).array() * (g.row(i).array() - dot);
        }
    }));
}

Tensor variance_axis0(const Tensor& x) {
    Tensor mu = mean_axis0(x);
    Tensor centered = bcast_sub_row(x, mu);
    return mean_axis0(square(centered));
}

Tensor row_l2_norms(const Tensor& x) {
    return sqrt_op(sum_axis1(square(x)));
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int k) {
    if (x.shape().size() != 4) throw std::invalid_argument("conv2d expects [N,C,H,W]");
    if (k % 2 == 0) throw std::invalid_argument("conv2d requires odd kernel size");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wdt = x.shape()[3];
    const int out_c = w.shape()[0];
    const int patch = c * k * k;
    if (w.shape()[1] != patch) throw std::invalid_argument("conv2d weight shape mismatch");
    const int pad = k / 2;

    // im2col per sample; cached for the backward pass.
    auto cols = std::make_shared<std::vector<MatRM>>();
    cols->reserve(n);
    CMapM wm(w.value().data(), out_c, patch);
    Arr val(static_cast<Eigen::Index>(n) * out_c * h * wdt);
    Eigen::Map<const Eigen::VectorXd> bv(b.value().data(), out_c);
    for (int s = 0; s < n; ++s) {
        const double* img = x.value().data() + static_cast<Eigen::Index>(s) * c * h * wdt;
        MatRM col = MatRM::Zero(h * wdt, patch);
        for (int ch = 0; ch < c; ++ch) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const int pc = (ch * k + ky) * k + kx;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        const int x0 = std::max(0, pad - kx);
                        const int x1 = std::min(wdt, wdt + pad - kx);
                        for (int xx = x0; xx < x1; ++xx) {
                            col(y * wdt + xx, pc) = img[(ch * h + sy) * wdt + (xx + kx - pad)];
                        }
                    }
                }
            }
        }
        MatRM out = col * wm.transpose();  // [H*W, out_c]
        out.rowwise() += bv.transpose();
        // Transpose into [out_c, H, W] layout.
        MapM dst(val.data() + static_cast<Eigen::Index>(s) * out_c * h * wdt, out_c, h * wdt);
        dst = out.transpose();
        cols->push_back(std::move(col));
    }
    return Tensor(make_node({n, out_c, h, wdt}, std::move(val), {x.node(), w.node(), b.node()},
                            [n, c, h, wdt, out_c, k, pad, patch, cols](TensorNode& nd) {
        const bool need_x = nd.parents[0]->requires_grad;
        const bool need_w = nd.parents[1]->requires_grad;
        const bool need_b = nd.parents[2]->requires_grad;
        if (need_x) nd.parents[0]->ensure_grad();
        if (need_w) nd.parents[1]->ensure_grad();
        if (need_b) nd.parents[2]->ensure_grad();
        CMapM wm(nd.parents[1]->value.data(), out_c, patch);
        for (int s = 0; s < n; ++s) {
            CMapM go(nd.grad.data() + static_cast<Eigen::Index>(s) * out_c * h * wdt, out_c, h * wdt);
            MatRM gout = go.transpose();  // [H*W, out_c]
            if (need_b) {
                Eigen::Map<Eigen::VectorXd> gb(nd.parents[2]->grad.data(), out_c);
                gb += gout.colwise().sum().transpose();
            }
            if (need_w) {
                MapM gw(nd.parents[1]->grad.data(), out_c, patch);
                gw.noalias() += gout.transpose() * (*cols)[s];
            }
            if (need_x) {
                MatRM gcol = gout * wm;  // [H*W, patch]
                double* gx = nd.parents[0]->grad.data() + static_cast<Eigen::Index>(s) * c * h * wdt;
                for (int ch = 0; ch < c; ++ch) {
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const int pc = (ch * k + ky) * k + kx;
                            for (int y = 0; y < h; ++y) {
                                const int sy = y + ky - pad;
                                if (sy < 0 || sy >= h) continue;
                                const int x0 = std::max(0, pad - kx);
                                const int x1 = std::min(wdt, wdt + pad - kx);
                                for (int xx = x0; xx < x1; ++xx) {
                                    gx[(ch * h + sy) * wdt + (xx + kx - pad)] += gcol(y * wdt + xx, pc);
                                }
                            }
                        }
                    }
                }
            }
        }
    }));
}

Tensor avgpool2(const Tensor& x) {
    if (x.shape().size() != 4) throw std::invalid_argument("avgpool2 expects [N,C,H,W]");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (h % 2 || w % 2) throw std::invalid_argument("avgpool2 requires even spatial dims");
    const int oh = h / 2, ow = w / 2;
    Arr val(static_cast<Eigen::Index>(n) * c * oh * ow);
    const double* src = x.value().data();
    for (int sc = 0; sc < n * c; ++sc) {
        const double* in = src + static_cast<Eigen::Index>(sc) * h * w;
        double* out = val.data() + static_cast<Eigen::Index>(sc) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                out[y * ow + xx] = 0.25 * (in[(2 * y) * w + 2 * xx] + in[(2 * y) * w + 2 * xx + 1] +
                                           in[(2 * y + 1) * w + 2 * xx] + in[(2 * y + 1) * w + 2 * xx + 1]);
    }
    return Tensor(make_node({n, c, oh, ow}, std::move(val), {x.node()},
                            [n, c, h, w, oh, ow](TensorNode& nd) {
        nd.parents[0]->ensure_grad();
        for (int sc = 0; sc < n * c; ++sc) {
            const double* g = nd.grad.data() + static_cast<Eigen::Index>(sc) * oh * ow;
            double* gx = nd.parents[0]->grad.data() + static_cast<Eigen::Index>(sc) * h * w;
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    const double v = 0.25 * g[y * ow + xx];
                    gx[(2 * y) * w + 2 * xx] += v;
                    gx[(2 * y) * w + 2 * xx + 1] += v;
                    gx[(2 * y + 1) * w + 2 * xx] += v;
                    gx[(2 * y + 1) * w + 2 * xx + 1] += v;
                }
        }
    }));
}

Tensor global_avgpool(const Tensor& x) {
    if (x.shape().size() != 4) throw std::invalid_argument("global_avgpool expects [N,C,H,W]");
    const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    return mul_scalar(sum_axis1(x.reshape({n * c, hw})), 1.0 / hw).reshape({n, c});
}

}  // namespace regguard
