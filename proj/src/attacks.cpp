#include "regguard/attacks.hpp"

#include "regguard/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace regguard::attacks {

namespace fs = std::filesystem;

std::string kind_name(TriggerKind k) {
    switch (k) {
        case TriggerKind::BadNets: return "badnets";
        case TriggerKind::CleanLabel: return "clean_label";
        case TriggerKind::WaNet: return "wanet";
        case TriggerKind::InputAware: return "input_aware";
        case TriggerKind::Blend: return "blend";
        case TriggerKind::Sig: return "sig";
    }
    throw std::logic_error("unreachable");
}

TriggerKind kind_from_name(const std::string& name) {
    if (name == "badnets") return TriggerKind::BadNets;
    if (name == "clean_label") return TriggerKind::CleanLabel;
    if (name == "wanet") return TriggerKind::WaNet;
    if (name == "input_aware") return TriggerKind::InputAware;
    if (name == "blend") return TriggerKind::Blend;
    if (name == "sig") return TriggerKind::Sig;
    throw std::invalid_argument("unknown trigger kind: " + name);
}

IaGenerator::IaGenerator(int c_, int h_, int w_, std::uint64_t seed_)
    : c(c_), h(h_), w(w_), seed(seed_) {
    nn::Rng rng(seed ^ 0x1da1full);
    net.layers.push_back(std::make_shared<nn::Conv2d>(c, 8, 3, rng));
    net.layers.push_back(std::make_shared<nn::ReLU>());
    net.layers.push_back(std::make_shared<nn::Conv2d>(8, 8, 3, rng));
    net.layers.push_back(std::make_shared<nn::ReLU>());
    net.layers.push_back(std::make_shared<nn::Conv2d>(8, c, 3, rng, 0.05));
}

Tensor IaGenerator::pattern_t(const Tensor& x) const {
    return mul_scalar(tanh_op(net.forward(x)), 0.3);
}

Tensor IaGenerator::apply_t(const Tensor& x) const {
    return clamp01(add(x, pattern_t(x)));
}

Arr IaGenerator::apply(const Arr& x) const {
    Tensor xt = make_batch({x}, c, h, w);
    return apply_t(xt).value();
}

void IaGenerator::set_trainable(bool trainable) const {
    for (auto& p : net.params()) p.node()->requires_grad = trainable;
}

int TriggerSpec::effective_patch(int img_w) const {
    return patch_size > 0 ? patch_size : static_cast<int>(std::ceil(0.18 * img_w));
}

int TriggerSpec::effective_grid(int img_w) const {
    return warp_grid > 0 ? warp_grid : std::max(2, img_w / 4);
}

void TriggerSpec::save(const std::string& path) const {
    if (!fs::path(path).parent_path().empty())
        fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    out.precision(17);
    out << "kind=" << kind_name(kind) << "\nrate=" << rate << "\nseed=" << seed << "\n";
    out << "target=";
    for (long i = 0; i < target.size(); ++i) out << (i ? ";" : "") << target[i];
    out << "\npatch_size=" << patch_size << "\npatch_color=" << patch_color[0] << ";"
        << patch_color[1] << ";" << patch_color[2] << "\nwarp_grid=" << warp_grid
        << "\nwarp_strength=" << warp_strength << "\nblend_alpha=" << blend_alpha
        << "\nsig_amplitude=" << sig_amplitude << "\nsig_freq=" << sig_freq << "\n";
    if (ia_generator) {
        out << "ia_params=" << fs::path(path).filename().string() << ".gen.bin\n";
        auto params = ia_generator->params();
        std::vector<double> flat = nn::dump_params(params);
        std::ofstream blob(path + ".gen.bin", std::ios::binary);
        blob.write(reinterpret_cast<const char*>(flat.data()),
                   static_cast<std::streamsize>(flat.size() * sizeof(double)));
    }
}

TriggerSpec TriggerSpec::load(const std::string& path, int c, int h, int w) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read trigger spec " + path);
    TriggerSpec spec;
    std::string line, ia_file;
    auto parse_vec = [](const std::string& s) {
        std::vector<double> vals;
        size_t pos = 0;
        while (pos <= s.size()) {
            size_t semi = s.find(';', pos);
            if (semi == std::string::npos) semi = s.size();
            vals.push_back(std::stod(s.substr(pos, semi - pos)));
            pos = semi + 1;
        }
        return vals;
    };
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "kind") spec.kind = kind_from_name(val);
        else if (key == "rate") spec.rate = std::stod(val);
        else if (key == "seed") spec.seed = std::stoull(val);
        else if (key == "target") {
            auto v = parse_vec(val);
            spec.target = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
        } else if (key == "patch_size") spec.patch_size = std::stoi(val);
        else if (key == "patch_color") {
            auto v = parse_vec(val);
            for (int i = 0; i < 3; ++i) spec.patch_color[i] = v[i];
        } else if (key == "warp_grid") spec.warp_grid = std::stoi(val);
        else if (key == "warp_strength") spec.warp_strength = std::stod(val);
        else if (key == "blend_alpha") spec.blend_alpha = std::stod(val);
        else if (key == "sig_amplitude") spec.sig_amplitude = std::stod(val);
        else if (key == "sig_freq") spec.sig_freq = std::stod(val);
        else if (key == "ia_params") ia_file = val;
    }
    if (spec.kind == TriggerKind::InputAware && !ia_file.empty()) {
        spec.ia_generator = std::make_shared<IaGenerator>(c, h, w, spec.seed);
        const std::string blob_path = (fs::path(path).parent_path() / ia_file).string();
        std::ifstream blob(blob_path, std::ios::binary);
        if (!blob) throw std::runtime_error("cannot read " + blob_path);
        auto params = spec.ia_generator->params();
        size_t total = 0;
        for (auto& p : params) total += p.size();
        std::vector<double> flat(total);
        blob.read(reinterpret_cast<char*>(flat.data()),
                  static_cast<std::streamsize>(total * sizeof(double)));
        nn::load_params(params, flat);
    }
    return spec;
}

void PoisonPlan::save_csv(const std::string& path) const {
    if (!fs::path(path).parent_path().empty())
        fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    out << "id,trigger_id,pgd,original,poisoned\n";
    out.precision(17);
    for (const auto& e : entries) {
        out << e.id << "," << e.trigger_id << "," << (e.pgd_perturbed ? 1 : 0) << ",";
        for (long i = 0; i < e.original.size(); ++i) out << (i ? ";" : "") << e.original[i];
        out << ",";
        for (long i = 0; i < e.poisoned.size(); ++i) out << (i ? ";" : "") << e.poisoned[i];
        out << "\n";
    }
}

namespace {

void paste_patch(Arr& img, const TriggerSpec& spec, int c, int h, int w) {
    const int p = spec.effective_patch(w);
    if (p > w || p > h) throw std::invalid_argument("patch exceeds image bounds");
    for (int ch = 0; ch < c; ++ch)
        for (int y = h - p; y < h; ++y)
            for (int x = w - p; x < w; ++x)
                img[(static_cast<Eigen::Index>(ch) * h + y) * w + x] =
                    std::clamp(spec.patch_color[ch % 3], 0.0, 1.0);
}

double bilinear(const double* plane, int h, int w, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - y0, fx = x - x0;
    return plane[y0 * w + x0] * (1 - fy) * (1 - fx) + plane[y0 * w + x1] * (1 - fy) * fx +
           plane[y1 * w + x0] * fy * (1 - fx) + plane[y1 * w + x1] * fy * fx;
}

}  // namespace

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> wanet_flow(std::uint64_t seed, int grid, double strength,
                                                       int h, int w) {
    nn::Rng rng(seed ^ 0x3a3eull);
    Eigen::MatrixXd gx(grid, grid), gy(grid, grid);
    double mean_abs = 0.0;
    for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) {
            gx(y, x) = rng.uniform(-1.0, 1.0);
            gy(y, x) = rng.uniform(-1.0, 1.0);
            mean_abs += std::abs(gx(y, x)) + std::abs(gy(y, x));
        }
    mean_abs /= 2.0 * grid * grid;
    if (mean_abs > 0.0) {
        gx /= mean_abs;
        gy /= mean_abs;
    }
    // Displacement scale: half a grid cell at strength 1.
    const double scale = strength * 0.5 * static_cast<double>(w) / grid;
    Eigen::MatrixXd fx(h, w), fy(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double gyc = (y + 0.5) / h * grid - 0.5;
            const double gxc = (x + 0.5) / w * grid - 0.5;
            fx(y, x) = scale * bilinear(gx.data(), grid, grid, gxc, gyc);
            fy(y, x) = scale * bilinear(gy.data(), grid, grid, gxc, gyc);
        }
    return {fx, fy};
}

Arr apply_trigger(const TriggerSpec& spec, const Arr& x, int c, int h, int w) {
    if (x.size() != static_cast<Eigen::Index>(c) * h * w)
        throw std::invalid_argument("apply_trigger: input shape mismatch");
    Arr out = x;
    switch (spec.kind) {
        case TriggerKind::BadNets:
        case TriggerKind::CleanLabel:
            paste_patch(out, spec, c, h, w);
            break;
        case TriggerKind::WaNet: {
            if (spec.warp_strength == 0.0) break;
            const int grid = spec.effective_grid(w);
            auto [fx, fy] = wanet_flow(spec.seed, grid, spec.warp_strength, h, w);
            for (int ch = 0; ch < c; ++ch) {
                const double* src = x.data() + static_cast<Eigen::Index>(ch) * h * w;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        out[(static_cast<Eigen::Index>(ch) * h + y) * w + xx] =
                            bilinear(src, h, w, y + fy(y, xx), xx + fx(y, xx));
            }
            break;
        }
        case TriggerKind::InputAware: {
            if (!spec.ia_generator)
                throw std::invalid_argument("input-aware spec has no trained generator");
            out = spec.ia_generator->apply(x);
            break;
        }
        case TriggerKind::Blend: {
            nn::Rng rng(spec.seed ^ 0xb1e4dull);
            Arr blend_img(x.size());
            for (Eigen::Index i = 0; i < x.size(); ++i) blend_img[i] = rng.uniform(0.0, 1.0);
            out = (1.0 - spec.blend_alpha) * x + spec.blend_alpha * blend_img;
            break;
        }
        case TriggerKind::Sig: {
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        out[(static_cast<Eigen::Index>(ch) * h + y) * w + xx] +=
                            spec.sig_amplitude *
                            std::sin(2.0 * std::numbers::pi * spec.sig_freq * xx / w);
            break;
        }
    }
    return out.min(1.0).max(0.0);
}

std::pair<LabeledDataset, PoisonPlan> poison_dataset(const LabeledDataset& dataset,
                                                     const TriggerSpec& spec) {
    if (spec.rate < 0.0 || spec.rate > 1.0)
        throw std::invalid_argument("poisoning rate must be in [0,1]");
    LabeledDataset out = dataset;
    PoisonPlan plan;
    auto tr = dataset.indices_of(Split::Train);
    const long k = static_cast<long>(spec.rate * static_cast<double>(tr.size()));
    nn::Rng rng(spec.seed ^ 0x90150full);
    rng.shuffle(tr.begin(), tr.end());
    for (long i = 0; i < k; ++i) {
        const long idx = tr[i];
        PoisonPlan::Entry e;
        e.id = dataset.ids[idx];
        e.original = dataset.labels.row(idx);
        e.poisoned = spec.target;
        plan.entries.push_back(e);
        out.images[idx] = apply_trigger(spec, dataset.images[idx], dataset.c, dataset.h, dataset.w);
        out.labels.row(idx) = spec.target;
    }
    return {std::move(out), std::move(plan)};
}

double default_clean_label_delta(const LabeledDataset& dataset, const Eigen::VectorXd& target) {
    auto tr = dataset.indices_of(Split::Train);
    std::vector<double> dist;
    dist.reserve(tr.size());
    for (long idx : tr) dist.push_back((dataset.labels.row(idx).transpose() - target).norm());
    std::sort(dist.begin(), dist.end());
    return dist[dist.size() / 10];
}

Arr pgd_perturb(const RegressionModel& model, const Arr& x, const Eigen::VectorXd& y_true,
                const PgdConfig& cfg) {
    Arr adv = x;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> yr(1, y_true.size());
    yr.row(0) = y_true;
    Tensor target = Tensor::leaf({1, static_cast<int>(y_true.size())},
                                 Eigen::Map<Arr>(yr.data(), yr.size()));
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor xt = make_batch({adv}, model.in_c, model.in_h, model.in_w, /*requires_grad=*/true);
        Tensor loss = mean(square(sub(model.forward_t(xt), target)));
        loss.backward();
        adv += cfg.step * xt.grad().sign();
        adv = adv.min(x + cfg.eps).max(x - cfg.eps).min(1.0).max(0.0);
    }
    return adv;
}

std::pair<LabeledDataset, PoisonPlan> clean_label_poison(const LabeledDataset& dataset,
                                                         const TriggerSpec& spec, double delta,
                                                         const PgdConfig& pgd,
                                                         const RegressionModel& surrogate) {
    if (delta <= 0.0) throw std::invalid_argument("clean label delta must be positive");
    auto tr = dataset.indices_of(Split::Train);
    std::vector<long> group;
    for (long idx : tr)
        if ((dataset.labels.row(idx).transpose() - spec.target).norm() <= delta) group.push_back(idx);
    if (group.empty())
        throw std::invalid_argument("clean label target group empty for delta=" + std::to_string(delta));

    LabeledDataset out = dataset;
    PoisonPlan plan;
    nn::Rng rng(spec.seed ^ 0xc1ea7ull);
    rng.shuffle(group.begin(), group.end());
    const long n_pgd = static_cast<long>((group.size() + 1) / 2);
    for (size_t i = 0; i < group.size(); ++i) {
        const long idx = group[i];
        PoisonPlan::Entry e;
        e.id = dataset.ids[idx];
        e.original = dataset.labels.row(idx);
        e.poisoned = spec.target;
        Arr img = dataset.images[idx];
        if (static_cast<long>(i) < n_pgd && pgd.steps > 0) {
            img = pgd_perturb(surrogate, img, dataset.labels.row(idx), pgd);
            e.pgd_perturbed = true;
        }
        paste_patch(img, spec, dataset.c, dataset.h, dataset.w);
        out.images[idx] = img.min(1.0).max(0.0);
        out.labels.row(idx) = spec.target;
        plan.entries.push_back(e);
    }
    return {std::move(out), std::move(plan)};
}

std::vector<std::pair<int, int>> partition_minibatch(int batch, const std::vector<double>& fractions) {
    double total = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw std::invalid_argument("negative poisoning fraction");
        total += f;
    }
    if (total > 1.0 + 1e-12) throw std::invalid_argument("poisoning fractions exceed 100%");
    std::vector<std::pair<int, int>> ranges;
    int start = 0;
    for (double f : fractions) {
        const int count = static_cast<int>(f * batch);
        ranges.emplace_back(start, start + count);
        start += count;
    }
    return ranges;
}

std::pair<LabeledDataset, PoisonPlan> multi_target_poison(const LabeledDataset& dataset,
                                                          const std::vector<TriggerSpec>& specs) {
    std::vector<double> fractions;
    for (const auto& s : specs) fractions.push_back(s.rate);
    auto tr = dataset.indices_of(Split::Train);
    auto ranges = partition_minibatch(static_cast<int>(tr.size()), fractions);
    nn::Rng rng(specs.front().seed ^ 0x3117ull);
    rng.shuffle(tr.begin(), tr.end());
    LabeledDataset out = dataset;
    PoisonPlan plan;
    for (size_t t = 0; t < specs.size(); ++t) {
        for (int i = ranges[t].first; i < ranges[t].second; ++i) {
            const long idx = tr[i];
            PoisonPlan::Entry e;
            e.id = dataset.ids[idx];
            e.trigger_id = static_cast<int>(t);
            e.original = dataset.labels.row(idx);
            e.poisoned = specs[t].target;
            plan.entries.push_back(e);
            out.images[idx] =
                apply_trigger(specs[t], dataset.images[idx], dataset.c, dataset.h, dataset.w);
            out.labels.row(idx) = specs[t].target;
        }
    }
    return {std::move(out), std::move(plan)};
}

Tensor rav_tensor(const Tensor& h_poisoned, const Tensor& h_benign, const Tensor& head_w) {
    const int m = head_w.shape()[0], d = head_w.shape()[1];
    Arr winv(d);
    for (int j = 0; j < d; ++j) {
        double norm2 = 0.0;
        for (int i = 0; i < m; ++i) {
            const double v = head_w.value()[static_cast<Eigen::Index>(i) * d + j];
            norm2 += v * v;
        }
        winv[j] = 1.0 / std::sqrt(norm2);
    }
    Tensor winv_t = Tensor::leaf({d}, winv);
    auto angles = [&](const Tensor& h) {
        Tensor cosines = bcast_mul_row(bcast_div_col(matmul(h, head_w), row_l2_norms(h)), winv_t);
        return acos_clamped(cosines, 1e-7);
    };
    Tensor var_p = variance_axis0(angles(h_poisoned));
    Tensor var_b = variance_axis0(angles(h_benign));
    return mean(div(var_p, var_b));
}

double adaptive_loss(const Eigen::MatrixXd& f_poisoned, const Eigen::MatrixXd& f_benign,
                     const LinearHead& head) {
    return std::abs(1.0 - diagnostics::rav(f_benign, f_poisoned, head));
}

double attack_error(const RegressionModel& model, const std::vector<Arr>& poisoned_images,
                    const Eigen::VectorXd& target, Metric metric) {
    if (poisoned_images.empty()) throw std::invalid_argument("attack_error: empty set");
    Eigen::MatrixXd pred = model.predict(poisoned_images);
    double total = 0.0;
    for (long i = 0; i < pred.rows(); ++i)
        total += regression_error(metric, pred.row(i), target);
    return total / static_cast<double>(pred.rows());
}

namespace {

Tensor label_tensor(const Eigen::MatrixXd& rows) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = rows;
    return Tensor::leaf({static_cast<int>(rows.rows()), static_cast<int>(rows.cols())},
                        Eigen::Map<Arr>(r.data(), r.size()));
}

struct BatchDrawer {
    std::vector<long> order;
    size_t cursor;
    nn::Rng rng;
    BatchDrawer(std::vector<long> idx, std::uint64_t seed)
        : order(std::move(idx)), cursor(order.size()), rng(seed ^ 0x9e3779b97f4a7c15ull) {}
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

// Training loop for the training-process-modifying attacks (WaNet, IA,
// multi-target) and for the adaptive variant of any attack. Per minibatch the
// leading fraction of the (already shuffled) draw is poisoned.
AttackTrainResult train_batch_level(const LabeledDataset& dataset,
                                    const std::vector<TriggerSpec>& specs,
                                    const BackdoorTrainConfig& config,
                                    std::optional<double> lambda_adp) {
    const auto tr_idx = dataset.indices_of(Split::Train);
    if (tr_idx.empty()) throw std::invalid_argument("empty training split");

    AttackTrainResult res;
    res.model = build_model("cnn4", dataset.c, dataset.h, dataset.w, dataset.d, config.seed);
    res.all_specs = specs;

    const bool input_aware = specs.size() == 1 && specs[0].kind == TriggerKind::InputAware;
    std::shared_ptr<IaGenerator> gen;
    if (input_aware) {
        gen = std::make_shared<IaGenerator>(dataset.c, dataset.h, dataset.w, specs[0].seed);
        res.all_specs[0].ia_generator = gen;
    }

    std::vector<Tensor> params = res.model.all_params();
    if (gen)
        for (auto& p : gen->params()) params.push_back(p);
    nn::Adam opt(params, config.lr);
    BatchDrawer drawer(tr_idx, config.seed);
    const int batch = std::min<int>(config.batch, static_cast<int>(tr_idx.size()));
    std::vector<double> fractions;
    for (const auto& s : specs) fractions.push_back(s.rate);
    const auto ranges = partition_minibatch(batch, fractions);
    const int total_poisoned = ranges.empty() ? 0 : ranges.back().second;

    double rav_sum = 0.0;
    long rav_count = 0;

    for (int step = 0; step < config.steps; ++step) {
        const auto idx = drawer.draw(batch);
        std::vector<Tensor> losses;
        std::vector<double> weights;
        Tensor h_pois, h_ben;

        // Benign remainder of the batch.
        const int nb = batch - total_poisoned;
        if (nb > 0) {
            std::vector<long> bidx(idx.begin() + total_poisoned, idx.end());
            Tensor x = make_batch(dataset, bidx);
            Eigen::MatrixXd yb(nb, dataset.d);
            for (int k = 0; k < nb; ++k) yb.row(k) = dataset.labels.row(bidx[k]);
            Tensor h = res.model.features_t(x);
            losses.push_back(mean(square(sub(res.model.head_t(h), label_tensor(yb)))));
            weights.push_back(static_cast<double>(nb) / batch);
            h_ben = h;
        }

        // Poisoned slices, one per trigger.
        for (size_t t = 0; t < specs.size(); ++t) {
            const int np = ranges[t].second - ranges[t].first;
            if (np == 0) continue;
            std::vector<long> pidx(idx.begin() + ranges[t].first, idx.begin() + ranges[t].second);
            Tensor xp;
            if (input_aware) {
                xp = gen->apply_t(make_batch(dataset, pidx));
            } else {
                std::vector<Arr> imgs;
                for (long i : pidx)
                    imgs.push_back(apply_trigger(specs[t], dataset.images[i], dataset.c, dataset.h,
                                                 dataset.w));
                xp = make_batch(imgs, dataset.c, dataset.h, dataset.w);
            }
            Eigen::MatrixXd yt(np, dataset.d);
            for (int k = 0; k < np; ++k) yt.row(k) = specs[t].target;
            Tensor h = res.model.features_t(xp);
            losses.push_back(mean(square(sub(res.model.head_t(h), label_tensor(yt)))));
            weights.push_back(static_cast<double>(np) / batch);
            if (t == 0) h_pois = h;
        }

        // Cross-trigger non-reusability: a pattern from one input applied to
        // another must not drive the output toward the target.
        if (input_aware && total_poisoned > 0 && nb >= total_poisoned) {
            std::vector<long> src(idx.begin(), idx.begin() + total_poisoned);
            std::vector<long> dst(idx.begin() + total_poisoned,
                                  idx.begin() + 2 * total_poisoned);
            Tensor pattern = gen->pattern_t(make_batch(dataset, src));
            Tensor xc = clamp01(add(make_batch(dataset, dst), pattern));
            Eigen::MatrixXd yc(total_poisoned, dataset.d);
            for (int k = 0; k < total_poisoned; ++k) yc.row(k) = dataset.labels.row(dst[k]);
            losses.push_back(mean(square(sub(res.model.forward_t(xc), label_tensor(yc)))));
            weights.push_back(0.5 * total_poisoned / batch);
        }

        Tensor loss = mul_scalar(losses[0], weights[0]);
        for (size_t i = 1; i < losses.size(); ++i)
            loss = add(loss, mul_scalar(losses[i], weights[i]));

        if (h_pois.defined() && h_ben.defined() && total_poisoned >= 2 && nb >= 2) {
            Tensor rav = rav_tensor(h_pois, h_ben, res.model.head->w);
            if (std::isfinite(rav.value()[0])) {
                rav_sum += rav.value()[0];
                ++rav_count;
                if (lambda_adp && *lambda_adp != 0.0)
                    loss = add(loss, mul_scalar(abs_op(sub(Tensor::scalar(1.0), rav)), *lambda_adp));
            }
        }

        const double lv = loss.value()[0];
        if (!std::isfinite(lv) || lv > config.divergence_limit)
            throw std::runtime_error("backdoored training diverged at step " + std::to_string(step));
        opt.zero_grad();
        loss.backward();
        opt.step();
    }

    res.mean_batch_rav = rav_count ? rav_sum / rav_count : 0.0;
    res.spec = res.all_specs[0];
    return res;
}

void evaluate_attack(AttackTrainResult& res, const LabeledDataset& dataset,
                     const BackdoorTrainConfig& config) {
    const LabeledDataset be = dataset.subset(Split::Benign);
    const Metric metric = metric_for_dim(dataset.d);
    res.re = evaluate_re(res.model, be, metric);
    std::vector<Arr> triggered;
    for (const auto& img : be.images)
        triggered.push_back(apply_trigger(res.spec, img, dataset.c, dataset.h, dataset.w));
    res.ae = attack_error(res.model, triggered, res.spec.target, metric);
    if (res.spec.rate > 0.0 && res.ae > config.attack_fail_ae) res.attack_failed = true;
}

}  // namespace

AttackTrainResult train_backdoored(const LabeledDataset& dataset, const TriggerSpec& spec,
                                   const BackdoorTrainConfig& config,
                                   std::optional<double> lambda_adp) {
    AttackTrainResult res;
    switch (spec.kind) {
        case TriggerKind::BadNets:
        case TriggerKind::Blend:
        case TriggerKind::Sig: {
            if (lambda_adp && *lambda_adp != 0.0) {
                res = train_batch_level(dataset, {spec}, config, lambda_adp);
            } else {
                auto [poisoned, plan] = poison_dataset(dataset, spec);
                res.model = train_benign(poisoned, config);
                res.spec = spec;
                res.all_specs = {spec};
            }
            break;
        }
        case TriggerKind::CleanLabel: {
            TrainConfig surrogate_cfg = config;
            surrogate_cfg.steps = config.surrogate_steps > 0 ? config.surrogate_steps
                                                             : std::max(1, config.steps / 2);
            surrogate_cfg.seed = config.seed + 7919;
            RegressionModel surrogate = train_benign(dataset, surrogate_cfg);
            const double delta = default_clean_label_delta(dataset, spec.target);
            auto [poisoned, plan] = clean_label_poison(dataset, spec, delta, config.pgd, surrogate);
            res.model = train_benign(poisoned, config);
            res.spec = spec;
            res.all_specs = {spec};
            break;
        }
        case TriggerKind::WaNet:
        case TriggerKind::InputAware:
            res = train_batch_level(dataset, {spec}, config, lambda_adp);
            break;
    }
    evaluate_attack(res, dataset, config);
    return res;
}

AttackTrainResult train_backdoored_multi(const LabeledDataset& dataset,
                                         const std::vector<TriggerSpec>& specs,
                                         const BackdoorTrainConfig& config) {
    AttackTrainResult res = train_batch_level(dataset, specs, config, std::nullopt);
    evaluate_attack(res, dataset, config);
    return res;
}

}  // namespace regguard::attacks
