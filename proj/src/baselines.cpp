#include "regguard/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace regguard::baselines {

Arr apply_input_trigger(const InputSpaceTrigger& trig, const Arr& x, int c, int h, int w) {
    if (trig.mask.rows() != h || trig.mask.cols() != w ||
        x.size() != static_cast<Eigen::Index>(c) * h * w || trig.pattern.size() != x.size())
        throw std::invalid_argument("apply_input_trigger: shape mismatch");
    Arr out(x.size());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const long i = (static_cast<long>(ch) * h + y) * w + xx;
                const double m = trig.mask(y, xx);
                out[i] = (1.0 - m) * x[i] + m * trig.pattern[i];
            }
    return out;
}

double mask_iou(const Eigen::MatrixXd& mask, const Eigen::MatrixXd& footprint,
                double rel_threshold) {
    if (mask.rows() != footprint.rows() || mask.cols() != footprint.cols())
        throw std::invalid_argument("mask_iou: shape mismatch");
    const double cut = rel_threshold * mask.maxCoeff();
    long inter = 0, uni = 0;
    for (long y = 0; y < mask.rows(); ++y)
        for (long x = 0; x < mask.cols(); ++x) {
            const bool a = mask(y, x) >= cut && mask(y, x) > 0.0;
            const bool b = footprint(y, x) > 0.5;
            inter += a && b;
            uni += a || b;
        }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

struct Drawer {
    std::vector<long> order;
    size_t cursor;
    nn::Rng rng;
    Drawer(long n, std::uint64_t seed) : cursor(static_cast<size_t>(n)), rng(seed) {
        order.resize(n);
        for (long i = 0; i < n; ++i) order[i] = i;
    }
    std::vector<long> draw(int batch) {
        std::vector<long> idx;
        for (int k = 0; k < batch; ++k) {
            if (cursor >= order.size()) {
                rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        return idx;
    }
};

struct FreezeModel {
    std::vector<Tensor> params;
    explicit FreezeModel(const RegressionModel& model) : params(model.all_params()) {
        for (auto& p : params) p.node()->requires_grad = false;
    }
    ~FreezeModel() {
        for (auto& p : params) p.node()->requires_grad = true;
    }
};

}  // namespace

std::pair<InputSpaceTrigger, double> neural_cleanse_regression(
    const RegressionModel& model, const LabeledDataset& d_be, double lambda,
    const InversionConfig& config, const std::optional<Eigen::VectorXd>& fixed_target) {
    if (d_be.n() == 0) throw std::invalid_argument("neural_cleanse_regression: empty dataset");
    if (lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
    const int c = d_be.c, h = d_be.h, w = d_be.w, plane = h * w;
    const int chw = c * plane;

    FreezeModel freeze(model);

    // Unconstrained parameterization: mask = sigmoid(um), pattern = sigmoid(up).
    Tensor um = Tensor::leaf({plane}, Arr::Constant(plane, -3.0), /*requires_grad=*/true);
    Tensor up = Tensor::leaf({chw}, Arr::Zero(chw), /*requires_grad=*/true);
    // Classifier NC scans candidate target labels and optimizes mask/pattern
    // per candidate; the regression analog takes the candidate vector as an
    // input. Without one, the target joins the optimization.
    Eigen::VectorXd init_target =
        fixed_target ? *fixed_target
                     : Eigen::VectorXd(model
                                           .predict(std::vector<Arr>(
                                               d_be.images.begin(),
                                               d_be.images.begin() + std::min<long>(d_be.n(), 32)))
                                           .colwise()
                                           .mean());
    if (fixed_target && fixed_target->size() != model.d)
        throw std::invalid_argument("fixed target dimension mismatch");
    Arr yt0(model.d);
    for (int j = 0; j < model.d; ++j) yt0[j] = init_target[j];
    Tensor yt = Tensor::leaf({model.d}, yt0, /*requires_grad=*/!fixed_target.has_value());

    std::vector<Tensor> params{um, up};
    if (!fixed_target) params.push_back(yt);
    nn::Adam opt(params, config.lr);
    Drawer drawer(d_be.n(), config.seed ^ 0x9cc1ull);
    const int batch = std::min<int>(config.batch, static_cast<int>(d_be.n()));

    for (int step = 0; step < config.steps; ++step) {
        const auto idx = drawer.draw(batch);
        std::vector<Arr> imgs;
        for (long i : idx) imgs.push_back(d_be.images[i]);
        Tensor x = make_batch(imgs, c, h, w).reshape({batch, chw});
        Tensor m = tile(sigmoid(um), c);                       // [chw]
        Tensor one_minus_m = sub(Tensor::leaf({chw}, Arr::Ones(chw)), m);
        Tensor xa = bcast_add_row(bcast_mul_row(x, one_minus_m), mul(m, sigmoid(up)));
        Tensor out = model.forward_t(xa.reshape({batch, c, h, w}));
        Tensor fit = mean(sum_axis1(square(bcast_sub_row(out, yt))));
        Tensor loss = add(fit, mul_scalar(sum(sigmoid(um)), lambda));
        if (!std::isfinite(loss.value()[0]))
            throw std::runtime_error("trigger inversion diverged at step " + std::to_string(step));
        opt.zero_grad();
        loss.backward();
        opt.step();
    }

    InputSpaceTrigger trig;
    trig.mask.resize(h, w);
    const Arr m_final = 1.0 / (1.0 + (-um.value()).exp());
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) trig.mask(y, xx) = m_final[static_cast<long>(y) * w + xx];
    trig.pattern = 1.0 / (1.0 + (-up.value()).exp());
    trig.target.resize(model.d);
    for (int j = 0; j < model.d; ++j) trig.target[j] = yt.value()[j];
    trig.mask_mass = static_cast<double>(c) * m_final.sum();
    return {std::move(trig), trig.mask_mass};
}

std::pair<FeatureSpaceTrigger, double> feature_re_regression(const RegressionModel& model,
                                                             const LabeledDataset& d_be,
                                                             double lambda3, double tau1,
                                                             double tau2,
                                                             const InversionConfig& config) {
    if (d_be.n() == 0) throw std::invalid_argument("feature_re_regression: empty dataset");
    if (tau1 <= 0.0 || tau2 < 0.0) throw std::invalid_argument("constraint thresholds must be positive");
    const int c = d_be.c, h = d_be.h, w = d_be.w, chw = c * h * w, mdim = model.m;

    FreezeModel freeze(model);
    FeatureSpaceTrigger trig;
    trig.generator = std::make_shared<reverse::TriggerGenerator>(config.generator_arch, c, h, w,
                                                                 config.seed);

    Tensor vm = Tensor::leaf({mdim}, Arr::Constant(mdim, -1.0), /*requires_grad=*/true);
    Eigen::VectorXd init_target =
        model.predict(std::vector<Arr>(d_be.images.begin(),
                                       d_be.images.begin() + std::min<long>(d_be.n(), 32)))
            .colwise()
            .mean();
    Arr yt0(model.d);
    for (int j = 0; j < model.d; ++j) yt0[j] = init_target[j];
    Tensor yt = Tensor::leaf({model.d}, yt0, /*requires_grad=*/true);

    std::vector<Tensor> params = trig.generator->params();
    params.push_back(vm);
    params.push_back(yt);
    nn::Adam opt(params, config.lr > 0.01 ? 0.01 : config.lr);
    Drawer drawer(d_be.n(), config.seed ^ 0xfea7ull);
    const int batch = std::min<int>(config.batch, static_cast<int>(d_be.n()));

    double mu = 1.0;
    double last_std = 0.0, last_norm = 0.0;
    for (int round = 0; round <= config.max_escalations; ++round) {
        for (int step = 0; step < config.steps; ++step) {
            const auto idx = drawer.draw(batch);
            std::vector<Arr> imgs;
            for (long i : idx) imgs.push_back(d_be.images[i]);
            Tensor x = make_batch(imgs, c, h, w);
            Tensor gx = trig.generator->transform_t(x);
            Tensor m = sigmoid(vm);                                  // [mdim]
            Tensor one_minus_m = sub(Tensor::leaf({mdim}, Arr::Ones(mdim)), m);
            Tensor a = model.features_t(x);                          // benign features
            Tensor hg = model.features_t(gx);                        // transformed features
            Tensor masked = bcast_mul_row(hg, m);                    // m .* F(G(x))
            Tensor t = mean_axis0(masked);                           // [mdim]
            Tensor blended = bcast_add_row(bcast_mul_row(a, one_minus_m), mul(m, t));
            Tensor out = model.head_t(blended);
            Tensor fit = mean(sum_axis1(square(bcast_sub_row(out, yt))));
            Tensor l1 = mul_scalar(sum(abs_op(sub(gx.reshape({batch, chw}),
                                                  x.reshape({batch, chw})))),
                                   lambda3 / batch);
            Tensor std_term = mean(sqrt_op(add_scalar(variance_axis0(masked), 1e-12)));
            Tensor norm_term = sum(m);
            last_std = std_term.value()[0];
            last_norm = norm_term.value()[0];
            Tensor std_viol = relu(add_scalar(std_term, -tau1));
            Tensor norm_viol = relu(add_scalar(norm_term, -tau2));
            Tensor loss = add(add(fit, l1),
                              mul_scalar(add(square(std_viol), square(norm_viol)), mu));
            if (!std::isfinite(loss.value()[0]))
                throw std::runtime_error("feature-space inversion diverged");
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
        if (last_std <= tau1 && last_norm <= tau2) {
            trig.feasible = true;
            break;
        }
        mu *= 10.0;
    }

    trig.feature_mask = 1.0 / (1.0 + (-vm.value()).exp());
    trig.target.resize(model.d);
    for (int j = 0; j < model.d; ++j) trig.target[j] = yt.value()[j];
    trig.std_residual = last_std;
    trig.mask_norm = last_norm;

    // Score: mean per-image L1 perturbation of the generator over d_be.
    double total = 0.0;
    for (long start = 0; start < d_be.n(); start += batch) {
        const long end = std::min<long>(d_be.n(), start + batch);
        std::vector<Arr> imgs(d_be.images.begin() + start, d_be.images.begin() + end);
        Tensor x = make_batch(imgs, c, h, w);
        Arr gx = trig.generator->transform_t(x).value();
        for (long i = start; i < end; ++i)
            total += (gx.segment((i - start) * chw, chw) - d_be.images[i]).abs().sum();
    }
    return {std::move(trig), total / static_cast<double>(d_be.n())};
}

RegressionModel fine_pruning(const RegressionModel& model, const LabeledDataset& d_be,
                             double prune_fraction, const mitigate::MitigateConfig& config) {
    if (prune_fraction < 0.0 || prune_fraction >= 1.0)
        throw std::invalid_argument("prune_fraction must be in [0,1)");
    RegressionModel pruned = mitigate::clone_model(model);
    const int n_prune = static_cast<int>(prune_fraction * model.m);
    if (n_prune > 0) {
        const Eigen::MatrixXd feats = model.forward_features(d_be.images);
        const Eigen::VectorXd mean_act = feats.cwiseAbs().colwise().mean();
        std::vector<int> units(model.m);
        std::iota(units.begin(), units.end(), 0);
        std::sort(units.begin(), units.end(),
                  [&](int a, int b) { return mean_act[a] < mean_act[b]; });
        Arr mask = pruned.feature_mask ? *pruned.feature_mask : Arr::Ones(model.m);
        for (int i = 0; i < n_prune; ++i) mask[units[i]] = 0.0;
        pruned.feature_mask = mask;
    }
    if (config.steps == 0) return pruned;
    return mitigate::fine_tune(pruned, d_be, config);
}

}  // namespace regguard::baselines
