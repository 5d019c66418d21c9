#pragma once

// Small layer zoo and Adam optimizer on top of the autodiff tensors.

#include "regguard/tensor.hpp"

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace regguard::nn {

// Deterministic RNG wrapper; every stochastic component takes one explicitly.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(eng_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(eng_);
    }
    std::uint64_t next() { return eng_(); }
    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, eng_);
    }
    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

struct Layer {
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x) const = 0;
    virtual std::vector<Tensor> params() { return {}; }
};
using LayerPtr = std::shared_ptr<Layer>;

struct Conv2d final : Layer {
    int in_c, out_c, k;
    Tensor w, b;  // w: [out_c, in_c*k*k]
    Conv2d(int in_c, int out_c, int k, Rng& rng, double init_scale = -1.0);
    Tensor forward(const Tensor& x) const override { return conv2d(x, w, b, k); }
    std::vector<Tensor> params() override { return {w, b}; }
};

struct Dense final : Layer {
    int in_dim, out_dim;
    Tensor w, b;  // w: [in_dim, out_dim]
    Dense(int in_dim, int out_dim, Rng& rng, double init_scale = -1.0);
    Tensor forward(const Tensor& x) const override {
        return bcast_add_row(matmul(x, w), b);
    }
    std::vector<Tensor> params() override { return {w, b}; }
};

struct ReLU final : Layer {
    Tensor forward(const Tensor& x) const override { return relu(x); }
};

struct Tanh final : Layer {
    Tensor forward(const Tensor& x) const override { return tanh_op(x); }
};

struct AvgPool2 final : Layer {
    Tensor forward(const Tensor& x) const override { return avgpool2(x); }
};

struct GlobalAvgPool final : Layer {
    Tensor forward(const Tensor& x) const override { return global_avgpool(x); }
};

struct Sequential {
    std::vector<LayerPtr> layers;
    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (const auto& l : layers) h = l->forward(h);
        return h;
    }
    std::vector<Tensor> params() const {
        std::vector<Tensor> ps;
        for (const auto& l : layers)
            for (auto& p : l->params()) ps.push_back(p);
        return ps;
    }
};

class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);
    void zero_grad();
    void step();
    double lr;

private:
    std::vector<Tensor> params_;
    std::vector<Arr> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

// Parameter (de)serialization in declaration order.
std::vector<double> dump_params(const std::vector<Tensor>& params);
void load_params(std::vector<Tensor>& params, const std::vector<double>& flat);

}  // namespace regguard::nn
