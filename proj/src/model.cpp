#include "regguard/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace regguard {

namespace fs = std::filesystem;

Tensor RegressionModel::features_t(const Tensor& x) const {
    Tensor h = feature_net.forward(x);
    if (feature_mask) {
        Tensor mask = Tensor::leaf({m}, *feature_mask);
        h = bcast_mul_row(h, mask);
    }
    return h;
}

Tensor RegressionModel::head_t(const Tensor& h) const {
    Tensor out = head->forward(h);
    if (omega == Activation::Tanh) out = tanh_op(out);
    return out;
}

void RegressionModel::check_input(const std::vector<Arr>& batch) const {
    const Eigen::Index px = static_cast<Eigen::Index>(in_c) * in_h * in_w;
    for (const auto& img : batch)
        if (img.size() != px) throw std::invalid_argument("input shape mismatch");
}

Eigen::MatrixXd RegressionModel::forward_features(const std::vector<Arr>& batch) const {
    check_input(batch);
    Tensor x = make_batch(batch, in_c, in_h, in_w);
    Tensor h = features_t(x);
    const int n = static_cast<int>(batch.size());
    Eigen::MatrixXd out(n, m);
    for (int i = 0; i < n; ++i)
        out.row(i) = Eigen::Map<const Eigen::VectorXd>(h.value().data() + static_cast<Eigen::Index>(i) * m, m);
    return out;
}

Eigen::MatrixXd RegressionModel::predict(const std::vector<Arr>& batch) const {
    check_input(batch);
    Tensor x = make_batch(batch, in_c, in_h, in_w);
    Tensor y = forward_t(x);
    const int n = static_cast<int>(batch.size());
    Eigen::MatrixXd out(n, d);
    for (int i = 0; i < n; ++i)
        out.row(i) = Eigen::Map<const Eigen::VectorXd>(y.value().data() + static_cast<Eigen::Index>(i) * d, d);
    return out;
}

Eigen::VectorXd RegressionModel::predict_one(const Arr& image) const {
    return predict({image}).row(0);
}

Arr RegressionModel::input_gradient(const Arr& image) const {
    check_input({image});
    Tensor x = make_batch({image}, in_c, in_h, in_w, /*requires_grad=*/true);
    Tensor total = sum(forward_t(x));
    total.backward();
    if (!x.grad().allFinite()) throw std::runtime_error("non-finite input gradient");
    return x.grad();
}

LinearHead RegressionModel::linear_head() const {
    LinearHead lh;
    lh.W.resize(m, d);
    lh.W = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        head->w.value().data(), m, d);
    lh.b = Eigen::Map<const Eigen::VectorXd>(head->b.value().data(), d);
    return lh;
}

std::vector<Tensor> RegressionModel::all_params() const {
    std::vector<Tensor> ps = feature_net.params();
    for (auto& p : head->params()) ps.push_back(p);
    return ps;
}

RegressionModel build_model(const std::string& arch_id, int in_c, int in_h, int in_w, int d,
                            std::uint64_t seed) {
    RegressionModel model;
    model.arch_id = arch_id;
    model.in_c = in_c; model.in_h = in_h; model.in_w = in_w; model.d = d;
    model.seed = seed;
    nn::Rng rng(seed);
    auto& L = model.feature_net.layers;
    if (arch_id == "cnn4") {
        if (in_h % 8 || in_w % 8) throw std::invalid_argument("cnn4 needs spatial dims divisible by 8");
        L.push_back(std::make_shared<nn::Conv2d>(in_c, 8, 3, rng));
        L.push_back(std::make_shared<nn::ReLU>());
        L.push_back(std::make_shared<nn::AvgPool2>());
        L.push_back(std::make_shared<nn::Conv2d>(8, 16, 3, rng));
        L.push_back(std::make_shared<nn::ReLU>());
        L.push_back(std::make_shared<nn::AvgPool2>());
        L.push_back(std::make_shared<nn::Conv2d>(16, 32, 3, rng));
        L.push_back(std::make_shared<nn::ReLU>());
        L.push_back(std::make_shared<nn::AvgPool2>());
        L.push_back(std::make_shared<nn::Conv2d>(32, 128, 3, rng));
        L.push_back(std::make_shared<nn::ReLU>());
        L.push_back(std::make_shared<nn::GlobalAvgPool>());
        model.m = 128;
    } else if (arch_id == "micro-tanh") {
        // Tiny smooth model for finite-difference gradient checks.
        L.push_back(std::make_shared<nn::Conv2d>(in_c, 3, 3, rng));
        L.push_back(std::make_shared<nn::Tanh>());
        L.push_back(std::make_shared<nn::GlobalAvgPool>());
        model.m = 3;
    } else {
        throw std::invalid_argument("unknown architecture: " + arch_id);
    }
    model.head = std::make_shared<nn::Dense>(model.m, d, rng);
    return model;
}

RegressionModel train_benign(const LabeledDataset& dataset, const TrainConfig& config) {
    const auto tr_idx = dataset.indices_of(Split::Train);
    if (tr_idx.empty()) throw std::invalid_argument("empty training split");
    RegressionModel model = build_model("cnn4", dataset.c, dataset.h, dataset.w, dataset.d, config.seed);

    nn::Rng rng(config.seed ^ 0x9e3779b97f4a7c15ull);
    nn::Adam opt(model.all_params(), config.lr);
    std::vector<long> order = tr_idx;
    size_t cursor = order.size();
    const int batch = std::min<int>(config.batch, static_cast<int>(order.size()));

    for (int step = 0; step < config.steps; ++step) {
        std::vector<long> idx;
        for (int k = 0; k < batch; ++k) {
            if (cursor >= order.size()) {
                rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        Tensor x = make_batch(dataset, idx);
        Eigen::MatrixXd yb(batch, dataset.d);
        for (int k = 0; k < batch; ++k) yb.row(k) = dataset.labels.row(idx[k]);
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> ybr = yb;
        Tensor target = Tensor::leaf({batch, dataset.d}, Eigen::Map<Arr>(ybr.data(), ybr.size()));

        Tensor loss = mean(square(sub(model.forward_t(x), target)));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv) || lv > config.divergence_limit)
            throw std::runtime_error("training diverged at step " + std::to_string(step));
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    return model;
}

double evaluate_re(const RegressionModel& model, const LabeledDataset& ds, Metric metric) {
    if (ds.n() == 0) throw std::invalid_argument("empty evaluation set");
    Eigen::MatrixXd pred = model.predict(ds.images);
    double total = 0.0;
    for (long i = 0; i < ds.n(); ++i)
        total += regression_error(metric, pred.row(i), ds.labels.row(i));
    return total / static_cast<double>(ds.n());
}

void save_model(const RegressionModel& model, const std::string& dir,
                const std::vector<std::pair<std::string, std::string>>& extra_manifest) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    manifest << "arch=" << model.arch_id << "\n"
             << "in_c=" << model.in_c << "\nin_h=" << model.in_h << "\nin_w=" << model.in_w << "\n"
             << "m=" << model.m << "\nd=" << model.d << "\nseed=" << model.seed << "\n"
             << "omega=" << (model.omega == Activation::Identity ? "identity" : "tanh") << "\n"
             << "has_feature_mask=" << (model.feature_mask ? 1 : 0) << "\n";
    for (const auto& [k, v] : extra_manifest) manifest << k << "=" << v << "\n";

    auto params = model.all_params();
    std::vector<double> flat = nn::dump_params(params);
    if (model.feature_mask)
        flat.insert(flat.end(), model.feature_mask->data(), model.feature_mask->data() + model.m);
    std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
    const std::uint64_t count = flat.size();
    blob.write(reinterpret_cast<const char*>(&count), sizeof(count));
    blob.write(reinterpret_cast<const char*>(flat.data()),
               static_cast<std::streamsize>(flat.size() * sizeof(double)));
}

bool checkpoint_exists(const std::string& dir) {
    return fs::exists(fs::path(dir) / "manifest.txt") && fs::exists(fs::path(dir) / "params.bin");
}

std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot read manifest in " + dir);
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    while (std::getline(manifest, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

RegressionModel load_model(const std::string& dir) {
    auto kv = read_manifest(dir);
    auto get = [&](const std::string& key) -> std::string {
        for (const auto& [k, v] : kv)
            if (k == key) return v;
        throw std::runtime_error("manifest missing key " + key + " in " + dir);
    };
    RegressionModel model = build_model(get("arch"), std::stoi(get("in_c")), std::stoi(get("in_h")),
                                        std::stoi(get("in_w")), std::stoi(get("d")),
                                        std::stoull(get("seed")));
    model.omega = get("omega") == "tanh" ? Activation::Tanh : Activation::Identity;

    std::ifstream blob(fs::path(dir) / "params.bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot read params.bin in " + dir);
    std::uint64_t count = 0;
    blob.read(reinterpret_cast<char*>(&count), sizeof(count));
    std::vector<double> flat(count);
    blob.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!blob) throw std::runtime_error("params.bin truncated in " + dir);

    const bool has_mask = get("has_feature_mask") == "1";
    auto params = model.all_params();
    size_t base = 0;
    for (const auto& p : params) base += p.size();
    if (has_mask) {
        if (flat.size() != base + static_cast<size_t>(model.m))
            throw std::runtime_error("params.bin size mismatch in " + dir);
        model.feature_mask = Eigen::Map<const Arr>(flat.data() + base, model.m);
        flat.resize(base);
    }
    nn::load_params(params, flat);
    return model;
}

}  // namespace regguard
