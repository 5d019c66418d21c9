#include "regguard/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace regguard::nn {

namespace {

Arr random_arr(Eigen::Index n, Rng& rng, double scale) {
    Arr a(n);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = rng.normal(0.0, scale);
    return a;
}

}  // namespace

Conv2d::Conv2d(int in_c_, int out_c_, int k_, Rng& rng, double init_scale)
    : in_c(in_c_), out_c(out_c_), k(k_) {
    const int patch = in_c * k * k;
    const double scale = init_scale >= 0.0 ? init_scale : std::sqrt(2.0 / patch);
    w = Tensor::leaf({out_c, patch}, random_arr(static_cast<Eigen::Index>(out_c) * patch, rng, scale), true);
    b = Tensor::leaf({out_c}, Arr::Zero(out_c), true);
}

Dense::Dense(int in_dim_, int out_dim_, Rng& rng, double init_scale)
    : in_dim(in_dim_), out_dim(out_dim_) {
    const double scale = init_scale >= 0.0 ? init_scale : std::sqrt(2.0 / in_dim);
    w = Tensor::leaf({in_dim, out_dim},
                     random_arr(static_cast<Eigen::Index>(in_dim) * out_dim, rng, scale), true);
    b = Tensor::leaf({out_dim}, Arr::Zero(out_dim), true);
}

Adam::Adam(std::vector<Tensor> params, double lr_, double beta1, double beta2, double eps)
    : lr(lr_), params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
        m_.push_back(Arr::Zero(p.size()));
        v_.push_back(Arr::Zero(p.size()));
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.node()->grad = Arr::Zero(p.size());
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (p.node()->grad.size() != p.size()) continue;  // never touched this step
        const Arr& g = p.grad();
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.square();
        p.value() -= lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
    }
}

std::vector<double> dump_params(const std::vector<Tensor>& params) {
    std::vector<double> flat;
    for (const auto& p : params)
        flat.insert(flat.end(), p.value().data(), p.value().data() + p.size());
    return flat;
}

void load_params(std::vector<Tensor>& params, const std::vector<double>& flat) {
    size_t off = 0;
    for (auto& p : params) {
        if (off + p.size() > flat.size()) throw std::invalid_argument("parameter blob too short");
        p.value() = Eigen::Map<const Arr>(flat.data() + off, p.size());
        off += p.size();
    }
    if (off != flat.size()) throw std::invalid_argument("parameter blob size mismatch");
}

}  // namespace regguard::nn
