#include "regguard/mitigate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace regguard::mitigate {

RegressionModel clone_model(const RegressionModel& model) {
    RegressionModel copy = build_model(model.arch_id, model.in_c, model.in_h, model.in_w, model.d,
                                       model.seed);
    auto src = model.all_params();
    auto dst = copy.all_params();
    nn::load_params(dst, nn::dump_params(src));
    copy.omega = model.omega;
    copy.feature_mask = model.feature_mask;
    return copy;
}

LabeledDataset build_reversed_poisoned(const reverse::TriggerGenerator& gen,
                                       const LabeledDataset& d_be, const RegressionModel& model) {
    if (gen.c != d_be.c || gen.h != d_be.h || gen.w != d_be.w || model.in_w != d_be.w ||
        model.in_h != d_be.h || model.in_c != d_be.c)
        throw std::invalid_argument("build_reversed_poisoned: shape mismatch");
    LabeledDataset out = d_be;
    auto attention = reverse::cache_attention_maps(model, d_be.images);
    for (long i = 0; i < d_be.n(); ++i) {
        Tensor x = make_batch({d_be.images[i]}, d_be.c, d_be.h, d_be.w);
        Arr gx = gen.transform_t(x).value();
        const Arr& t = attention[i];
        Arr xp(gx.size());
        for (int ch = 0; ch < d_be.c; ++ch)
            for (long p = 0; p < t.size(); ++p) {
                const long k = ch * t.size() + p;
                xp[k] = gx[k] * (1.0 - t[p]) + d_be.images[i][k] * t[p];
            }
        out.images[i] = xp;
        // annotations stay exactly as in d_be
    }
    return out;
}

namespace {

struct Sampler {
    const LabeledDataset* ds;
    std::vector<long> order;
    size_t cursor;
    explicit Sampler(const LabeledDataset& d) : ds(&d), cursor(d.n()) {
        order.resize(d.n());
        for (long i = 0; i < d.n(); ++i) order[i] = i;
    }
    void fill(std::vector<Arr>& imgs, Eigen::MatrixXd& labels, long row, int count, nn::Rng& rng) {
        for (int k = 0; k < count; ++k) {
            if (cursor >= order.size()) {
                rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            const long i = order[cursor++];
            imgs.push_back(ds->images[i]);
            labels.row(row++) = ds->labels.row(i);
        }
    }
};

}  // namespace

RegressionModel unlearn(const RegressionModel& model, const LabeledDataset& d_be,
                        const LabeledDataset& d_rp, const MitigateConfig& config) {
    if (d_be.n() == 0) throw std::invalid_argument("unlearn: empty benign dataset");
    RegressionModel tuned = clone_model(model);
    if (config.steps == 0) return tuned;

    auto params = tuned.all_params();
    nn::Adam opt(params, config.lr);
    nn::Rng rng(config.seed ^ 0x5d17ull);
    Sampler be(d_be), rp(d_rp);
    const int batch = std::min<int>(config.batch, static_cast<int>(d_be.n() + d_rp.n()));
    const int n_rp = d_rp.n() == 0 ? 0 : static_cast<int>(config.rp_fraction * batch);
    const int n_be = batch - n_rp;

    for (int step = 0; step < config.steps; ++step) {
        std::vector<Arr> imgs;
        Eigen::MatrixXd labels(batch, d_be.d);
        be.fill(imgs, labels, 0, n_be, rng);
        rp.fill(imgs, labels, n_be, n_rp, rng);
        Tensor x = make_batch(imgs, d_be.c, d_be.h, d_be.w);
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> lr = labels;
        Tensor y = Tensor::leaf({batch, d_be.d}, Eigen::Map<Arr>(lr.data(), lr.size()));
        Tensor loss = mean(square(sub(tuned.forward_t(x), y)));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv) || lv > config.divergence_limit)
            throw std::runtime_error("unlearning diverged at step " + std::to_string(step));
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    return tuned;
}

RegressionModel fine_tune(const RegressionModel& model, const LabeledDataset& d_be,
                          const MitigateConfig& config) {
    LabeledDataset empty;
    empty.w = d_be.w;
    empty.h = d_be.h;
    empty.c = d_be.c;
    empty.d = d_be.d;
    return unlearn(model, d_be, empty, config);
}

double defending_attack_error(const RegressionModel& model, const LabeledDataset& pd_te,
                              Metric metric) {
    if (pd_te.n() == 0) throw std::invalid_argument("defending_attack_error: empty set");
    const Eigen::MatrixXd pred = model.predict(pd_te.images);
    double total = 0.0;
    for (long i = 0; i < pred.rows(); ++i)
        total += regression_error(metric, pred.row(i), pd_te.labels.row(i));
    return total / static_cast<double>(pred.rows());
}

}  // namespace regguard::mitigate
