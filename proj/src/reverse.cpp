#include "regguard/reverse.hpp"

#include "regguard/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace regguard::reverse {

namespace fs = std::filesystem;

TriggerGenerator::TriggerGenerator(const std::string& arch_, int c_, int h_, int w_,
                                   std::uint64_t seed_, bool identity_init)
    : arch(arch_), c(c_), h(h_), w(w_), seed(seed_) {
    nn::Rng rng(seed ^ 0x6e47ull);
    if (arch == "conv3") {
        net.layers.push_back(std::make_shared<nn::Conv2d>(c, 8, 3, rng));
        net.layers.push_back(std::make_shared<nn::ReLU>());
        net.layers.push_back(std::make_shared<nn::Conv2d>(8, 8, 3, rng));
        net.layers.push_back(std::make_shared<nn::ReLU>());
        net.layers.push_back(std::make_shared<nn::Conv2d>(8, c, 3, rng, 0.05));
    } else if (arch == "micro") {
        net.layers.push_back(std::make_shared<nn::Conv2d>(c, c, 3, rng, 0.05));
    } else {
        throw std::invalid_argument("unknown generator arch: " + arch);
    }
    if (identity_init) {
        auto last = std::dynamic_pointer_cast<nn::Conv2d>(net.layers.back());
        last->w.value().setZero();
        last->b.value().setZero();
    }
}

Tensor TriggerGenerator::transform_t(const Tensor& x) const {
    return clamp01(add(x, tanh_op(net.forward(x))));
}

Arr TriggerGenerator::transform(const Arr& x) const {
    return transform_t(make_batch({x}, c, h, w)).value();
}

void TriggerGenerator::save(const std::string& dir) const {
    fs::create_directories(dir);
    std::ofstream meta(dir + "/meta.txt");
    meta << "arch=" << arch << "\nc=" << c << "\nh=" << h << "\nw=" << w << "\nseed=" << seed
         << "\n";
    auto ps = params();
    std::vector<double> flat = nn::dump_params(ps);
    std::ofstream blob(dir + "/params.bin", std::ios::binary);
    const std::uint64_t count = flat.size();
    blob.write(reinterpret_cast<const char*>(&count), sizeof(count));
    blob.write(reinterpret_cast<const char*>(flat.data()),
               static_cast<std::streamsize>(flat.size() * sizeof(double)));
}

TriggerGenerator TriggerGenerator::load(const std::string& dir) {
    std::ifstream meta(dir + "/meta.txt");
    if (!meta) throw std::runtime_error("cannot read " + dir + "/meta.txt");
    std::string arch, line;
    int c = 0, h = 0, w = 0;
    std::uint64_t seed = 0;
    while (std::getline(meta, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "arch") arch = val;
        else if (key == "c") c = std::stoi(val);
        else if (key == "h") h = std::stoi(val);
        else if (key == "w") w = std::stoi(val);
        else if (key == "seed") seed = std::stoull(val);
    }
    TriggerGenerator gen(arch, c, h, w, seed);
    std::ifstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot read " + dir + "/params.bin");
    std::uint64_t count = 0;
    blob.read(reinterpret_cast<char*>(&count), sizeof(count));
    std::vector<double> flat(count);
    blob.read(reinterpret_cast<char*>(flat.data()),
              static_cast<std::streamsize>(count * sizeof(double)));
    auto ps = gen.params();
    nn::load_params(ps, flat);
    return gen;
}

double output_variance_term(const Eigen::MatrixXd& outputs) {
    if (outputs.rows() < 2) throw std::invalid_argument("output variance needs at least 2 samples");
    double total = 0.0;
    for (long j = 0; j < outputs.cols(); ++j)
        total += diagnostics::population_variance(outputs.col(j));
    return total / static_cast<double>(outputs.cols());
}

double feature_reg(const Eigen::MatrixXd& h_transformed, const Eigen::MatrixXd& h_benign,
                   const LinearHead& head) {
    return diagnostics::rav(h_benign, h_transformed, head);
}

Arr momentum_blend(const Arr& gx, const Arr& x, const Eigen::MatrixXd& attention, int c) {
    const long plane = attention.size();
    if (gx.size() != x.size() || gx.size() != c * plane)
        throw std::invalid_argument("momentum_blend: shape mismatch");
    if ((attention.array() < 0.0).any() || (attention.array() >= 1.0).any())
        throw std::invalid_argument("attention map must lie in [0,1)");
    Arr out(gx.size());
    const Eigen::Map<const Arr> t(attention.data(), plane);  // row-major h*w? see below
    // Eigen matrices are column-major; flatten in pixel order (y,x) explicitly.
    for (int ch = 0; ch < c; ++ch)
        for (long yy = 0; yy < attention.rows(); ++yy)
            for (long xx = 0; xx < attention.cols(); ++xx) {
                const long i = (ch * attention.rows() + yy) * attention.cols() + xx;
                const double tv = attention(yy, xx);
                // x + (gx - x)(1 - T) rather than gx(1-T) + xT: identical
                // algebra, but exact (no rounding residue) when gx == x.
                out[i] = x[i] + (gx[i] - x[i]) * (1.0 - tv);
            }
    return out;
}

namespace {

// Per-pixel attention as a flat [h*w] array in the image's pixel order.
Arr flatten_attention(const Eigen::MatrixXd& t) {
    Arr flat(t.size());
    for (long y = 0; y < t.rows(); ++y)
        for (long x = 0; x < t.cols(); ++x) flat[y * t.cols() + x] = t(y, x);
    return flat;
}

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

void pretrain_identity(TriggerGenerator& gen, const std::vector<Arr>& images,
                       const ReverseConfig& config) {
    if (config.pretrain_steps <= 0) return;
    auto params = gen.params();
    nn::Adam opt(params, config.lr);
    Drawer drawer(static_cast<long>(images.size()), config.seed ^ 0x94e7ull);
    const int batch = std::min<int>(config.batch, static_cast<int>(images.size()));
    for (int step = 0; step < config.pretrain_steps; ++step) {
        const auto idx = drawer.draw(batch);
        std::vector<Arr> imgs;
        for (long i : idx) imgs.push_back(images[i]);
        Tensor x = make_batch(imgs, gen.c, gen.h, gen.w);
        Tensor loss = mean(square(sub(gen.transform_t(x), x)));
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
}

// Mean per-image L1 perturbation over the whole set (with or without blend).
double perturbation_score(const TriggerGenerator& gen, const std::vector<Arr>& images,
                          const std::vector<Arr>* attention, int batch) {
    double total = 0.0;
    const int chw = gen.c * gen.h * gen.w;
    for (size_t start = 0; start < images.size(); start += static_cast<size_t>(batch)) {
        const size_t end = std::min(images.size(), start + static_cast<size_t>(batch));
        std::vector<Arr> imgs(images.begin() + static_cast<long>(start),
                              images.begin() + static_cast<long>(end));
        Tensor x = make_batch(imgs, gen.c, gen.h, gen.w);
        Arr gx = gen.transform_t(x).value();
        for (size_t i = start; i < end; ++i) {
            Arr gxi = gx.segment(static_cast<long>(i - start) * chw, chw);
            if (attention) {
                const Arr& t = (*attention)[i];
                for (int ch = 0; ch < gen.c; ++ch)
                    for (long p = 0; p < t.size(); ++p) {
                        const long k = ch * t.size() + p;
                        gxi[k] = images[i][k] + (gxi[k] - images[i][k]) * (1.0 - t[p]);
                    }
            }
            total += (gxi - images[i]).abs().sum();
        }
    }
    return total / static_cast<double>(images.size());
}

ReverseResult run_reverse(const RegressionModel& model, const LabeledDataset& d_be,
                          const ReverseConfig& config, bool classifier_mode) {
    if (d_be.n() == 0) throw std::invalid_argument("reverse engineering needs a benign dataset");
    if (config.batch < 2) throw std::invalid_argument("reverse batch size must be at least 2");
    if (config.lambda1 < 0.0 || config.lambda2 < 0.0)
        throw std::invalid_argument("objective weights must be nonnegative");

    ReverseResult res;
    res.generator = std::make_shared<TriggerGenerator>(config.generator_arch, d_be.c, d_be.h,
                                                       d_be.w, config.seed, config.identity_init);
    TriggerGenerator& gen = *res.generator;
    const int chw = d_be.c * d_be.h * d_be.w;
    const int batch = std::min<int>(config.batch, static_cast<int>(d_be.n()));

    FreezeModel freeze(model);
    pretrain_identity(gen, d_be.images, config);

    // The attention maps and the benign-batch angle variances depend only on
    // the frozen model and the fixed benign images; cache them up front.
    const bool momentum = !classifier_mode && config.use_momentum;
    std::vector<Arr> attention;
    Eigen::MatrixXd benign_angles;  // n x d
    if (momentum) attention = cache_attention_maps(model, d_be.images);
    if (!classifier_mode) {
        Eigen::MatrixXd h_all = model.forward_features(d_be.images);
        benign_angles = diagnostics::angle_matrix(h_all, model.linear_head());
    }

    auto params = gen.params();
    nn::Adam opt(params, config.lr);
    Drawer drawer(d_be.n(), config.seed ^ 0x2e70ull);
    res.target_trajectory.resize(config.steps, model.d);

    for (int step = 0; step < config.steps; ++step) {
        const auto idx = drawer.draw(batch);
        std::vector<Arr> imgs;
        for (long i : idx) imgs.push_back(d_be.images[i]);
        Tensor x = make_batch(imgs, d_be.c, d_be.h, d_be.w);
        Tensor gx = gen.transform_t(x);

        Tensor xp;  // what the model sees
        if (!momentum) {
            xp = gx;
        } else {
            Arr omt(static_cast<Eigen::Index>(batch) * chw), xv(static_cast<Eigen::Index>(batch) * chw);
            for (int k = 0; k < batch; ++k) {
                const Arr& t = attention[idx[k]];
                for (int ch = 0; ch < d_be.c; ++ch)
                    for (long p = 0; p < t.size(); ++p) {
                        const long pos = (static_cast<long>(k) * d_be.c + ch) * t.size() + p;
                        omt[pos] = 1.0 - t[p];
                        xv[pos] = d_be.images[idx[k]][ch * t.size() + p];
                    }
            }
            // x + (gx - x)(1 - T): same blend, exact when the generator is
            // the identity (see momentum_blend).
            Tensor x_leaf = Tensor::leaf({batch, chw}, xv);
            xp = add(x_leaf, mul(sub(gx.reshape({batch, chw}), x_leaf),
                                 Tensor::leaf({batch, chw}, omt)));
            xp = xp.reshape({batch, d_be.c, d_be.h, d_be.w});
        }

        Tensor h = model.features_t(xp);
        Tensor out = model.head_t(h);
        Tensor var_term = classifier_mode ? mean(variance_axis0(softmax_rows(out)))
                                          : mean(variance_axis0(out));
        Tensor l1_term = mul_scalar(sum(abs_op(sub(xp.reshape({batch, chw}), x.reshape({batch, chw})))),
                                    1.0 / batch);

        // The per-pixel L1 subgradient has constant magnitude, so under a
        // normalizing optimizer it pins the generator near the identity until
        // the variance gradient beats it. Dropping the L1 term for a short
        // warmup makes the escape deterministic for backdoored and benign
        // models alike; the full objective then decides where to settle.
        const double l1_weight = step < config.l1_warmup ? 0.0 : 1.0;
        Tensor loss = add(mul_scalar(var_term, config.lambda1), mul_scalar(l1_term, l1_weight));
        double rf_value = 0.0;
        if (!classifier_mode && config.lambda2 > 0.0) {
            Eigen::VectorXd denom(model.d);
            bool degenerate = false;
            for (int j = 0; j < model.d; ++j) {
                Eigen::VectorXd col(batch);
                for (int k = 0; k < batch; ++k) col[k] = benign_angles(idx[k], j);
                denom[j] = diagnostics::population_variance(col);
                if (denom[j] <= 1e-15) degenerate = true;
            }
            if (degenerate) {
                ++res.skipped_batches;
            } else {
                const LinearHead head = model.linear_head();
                Arr winv(model.d);
                for (int j = 0; j < model.d; ++j) winv[j] = 1.0 / head.W.col(j).norm();
                Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wr = head.W;
                Tensor w_t = Tensor::leaf({model.m, model.d}, Eigen::Map<Arr>(wr.data(), wr.size()));
                Tensor cosines = bcast_mul_row(bcast_div_col(matmul(h, w_t), row_l2_norms(h)),
                                               Tensor::leaf({model.d}, winv));
                Tensor angles = acos_clamped(cosines, 1e-7);
                Arr dinv(model.d);
                for (int j = 0; j < model.d; ++j) dinv[j] = 1.0 / denom[j];
                Tensor rf = mean(bcast_mul_row(variance_axis0(angles).reshape({1, model.d}),
                                               Tensor::leaf({model.d}, dinv)));
                rf_value = rf.value()[0];
                loss = add(loss, mul_scalar(rf, config.lambda2));
            }
        }

        const double lv = loss.value()[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("reverse engineering diverged at step " + std::to_string(step));

        res.variance_trace.push_back(var_term.value()[0]);
        res.l1_trace.push_back(l1_term.value()[0]);
        res.rf_trace.push_back(rf_value);
        res.total_trace.push_back(lv);
        const Arr& ov = out.value();
        for (int j = 0; j < model.d; ++j) {
            double s = 0.0;
            for (int k = 0; k < batch; ++k) s += ov[static_cast<long>(k) * model.d + j];
            res.target_trajectory(step, j) = s / batch;
        }

        opt.zero_grad();
        loss.backward();
        opt.step();
    }

    res.target_estimate = res.target_trajectory.rows() > 0
                              ? Eigen::VectorXd(res.target_trajectory.row(config.steps - 1))
                              : Eigen::VectorXd::Zero(model.d);
    res.perturbation_score =
        perturbation_score(gen, d_be.images, momentum ? &attention : nullptr, batch);
    return res;
}

void write_ppm_grid(const std::string& path, const std::vector<Arr>& images, int c, int h, int w) {
    const int n = static_cast<int>(images.size());
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << w * n << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int i = 0; i < n; ++i)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < 3; ++ch) {
                    const int src = c == 3 ? ch : 0;
                    const double v = images[i][(static_cast<long>(src) * h + y) * w + x];
                    out.put(static_cast<char>(std::clamp(v, 0.0, 1.0) * 255.0));
                }
}

}  // namespace

std::vector<Arr> cache_attention_maps(const RegressionModel& model, const std::vector<Arr>& images) {
    std::vector<Arr> maps;
    maps.reserve(images.size());
    for (const auto& img : images)
        maps.push_back(flatten_attention(diagnostics::attention_map(model, img)));
    return maps;
}

ReverseResult reverse_engineer(const RegressionModel& model, const LabeledDataset& d_be,
                               const ReverseConfig& config) {
    return run_reverse(model, d_be, config, /*classifier_mode=*/false);
}

ReverseResult reverse_engineer_classifier(const RegressionModel& classifier,
                                          const LabeledDataset& d_be, const ReverseConfig& config) {
    return run_reverse(classifier, d_be, config, /*classifier_mode=*/true);
}

Eigen::VectorXd estimate_target_vector(const RegressionModel& model, const TriggerGenerator& gen,
                                       const LabeledDataset& d_be) {
    if (d_be.n() == 0) throw std::invalid_argument("estimate_target_vector: empty input set");
    auto attention = cache_attention_maps(model, d_be.images);
    std::vector<Arr> blended;
    const int chw = d_be.c * d_be.h * d_be.w;
    for (long i = 0; i < d_be.n(); ++i) {
        Tensor x = make_batch({d_be.images[i]}, d_be.c, d_be.h, d_be.w);
        Arr gx = gen.transform_t(x).value();
        Arr xp(chw);
        const Arr& t = attention[i];
        for (int ch = 0; ch < d_be.c; ++ch)
            for (long p = 0; p < t.size(); ++p) {
                const long k = ch * t.size() + p;
                xp[k] = gx[k] * (1.0 - t[p]) + d_be.images[i][k] * t[p];
            }
        blended.push_back(xp);
    }
    const Eigen::MatrixXd preds = model.predict(blended);
    return preds.colwise().mean();
}

void ReverseResult::save(const std::string& dir, const RegressionModel& model,
                         const LabeledDataset& d_be) const {
    fs::create_directories(dir);
    generator->save(dir + "/generator");

    std::ofstream trace(dir + "/loss_trace.csv");
    trace.precision(17);
    trace << "step,variance_term,l1_term,rf_term,total\n";
    for (size_t i = 0; i < total_trace.size(); ++i)
        trace << i << "," << variance_trace[i] << "," << l1_trace[i] << "," << rf_trace[i] << ","
              << total_trace[i] << "\n";

    std::ofstream traj(dir + "/target_trajectory.csv");
    traj.precision(17);
    traj << "step";
    for (long j = 0; j < target_trajectory.cols(); ++j) traj << ",y" << j;
    traj << "\n";
    for (long i = 0; i < target_trajectory.rows(); ++i) {
        traj << i;
        for (long j = 0; j < target_trajectory.cols(); ++j) traj << "," << target_trajectory(i, j);
        traj << "\n";
    }

    std::ofstream meta(dir + "/summary.txt");
    meta.precision(17);
    meta << "perturbation_score=" << perturbation_score << "\nskipped_batches=" << skipped_batches
         << "\ntarget_estimate=";
    for (long j = 0; j < target_estimate.size(); ++j) meta << (j ? ";" : "") << target_estimate[j];
    meta << "\n";

    const int n_show = static_cast<int>(std::min<long>(8, d_be.n()));
    std::vector<Arr> before, after, residual;
    auto attention = cache_attention_maps(
        model, std::vector<Arr>(d_be.images.begin(), d_be.images.begin() + n_show));
    for (int i = 0; i < n_show; ++i) {
        Tensor x = make_batch({d_be.images[i]}, d_be.c, d_be.h, d_be.w);
        Arr gx = generator->transform_t(x).value();
        Arr xp(gx.size());
        const Arr& t = attention[i];
        for (int ch = 0; ch < d_be.c; ++ch)
            for (long p = 0; p < t.size(); ++p) {
                const long k = ch * t.size() + p;
                xp[k] = gx[k] * (1.0 - t[p]) + d_be.images[i][k] * t[p];
            }
        Arr diff = (xp - d_be.images[i]).abs();
        const double dmax = diff.maxCoeff();
        if (dmax > 0.0) diff /= dmax;
        before.push_back(d_be.images[i]);
        after.push_back(xp);
        residual.push_back(diff);
    }
    write_ppm_grid(dir + "/before.ppm", before, d_be.c, d_be.h, d_be.w);
    write_ppm_grid(dir + "/after.ppm", after, d_be.c, d_be.h, d_be.w);
    write_ppm_grid(dir + "/residual.ppm", residual, d_be.c, d_be.h, d_be.w);
}

}  // namespace regguard::reverse
