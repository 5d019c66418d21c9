#include "regguard/data.hpp"

#include "regguard/nn.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace regguard {

namespace fs = std::filesystem;

std::vector<long> LabeledDataset::indices_of(Split s) const {
    std::vector<long> idx;
    for (long i = 0; i < n(); ++i)
        if (split[i] == static_cast<int>(s)) idx.push_back(i);
    return idx;
}

LabeledDataset LabeledDataset::subset(Split s) const { return subset(indices_of(s)); }

LabeledDataset LabeledDataset::subset(const std::vector<long>& idx) const {
    LabeledDataset out;
    out.w = w; out.h = h; out.c = c; out.d = d;
    out.labels.resize(static_cast<long>(idx.size()), d);
    for (size_t k = 0; k < idx.size(); ++k) {
        out.images.push_back(images[idx[k]]);
        out.labels.row(static_cast<long>(k)) = labels.row(idx[k]);
        out.split.push_back(split[idx[k]]);
        out.ids.push_back(ids[idx[k]]);
    }
    return out;
}

int SyntheticTaskSpec::label_dim() const {
    if (kind == "gaze-2d") return 2;
    if (kind == "pose-3d") return 3;
    throw std::invalid_argument("unknown task kind: " + kind);
}

LabeledDataset generate_dataset(const SyntheticTaskSpec& spec) {
    if (spec.count < 1) throw std::invalid_argument("sample count must be >= 1");
    if (spec.w < 16 || spec.h < 16) throw std::invalid_argument("image size must be >= 16x16");
    const int d = spec.label_dim();
    const double range = std::numbers::pi / 3.0;

    LabeledDataset ds;
    ds.w = spec.w; ds.h = spec.h; ds.c = spec.c; ds.d = d;
    ds.labels.resize(spec.count, d);
    nn::Rng rng(spec.seed);

    for (long i = 0; i < spec.count; ++i) {
        Eigen::VectorXd y(d);
        for (int j = 0; j < d; ++j) y[j] = rng.uniform(-range, range);
        ds.labels.row(i) = y;

        Arr img(static_cast<Eigen::Index>(spec.c) * spec.h * spec.w);
        // Per-image exposure offset: overall brightness varies between
        // images the way it does across real captures, so the benign set
        // contains both dark and bright samples.
        const double exposure = rng.uniform(0.0, spec.exposure_max);
        for (Eigen::Index p = 0; p < img.size(); ++p)
            img[p] = std::min(1.0, rng.uniform(0.0, spec.noise_level) + exposure);

        // Oriented marker: a bright anisotropic Gaussian blob. Position encodes
        // (yaw, pitch); the major-axis angle encodes roll for pose-3d and
        // tracks yaw for gaze-2d so annotation (0,...,0) renders centered and
        // axis-aligned.
        const double cx = 0.5 * spec.w + (y[0] / range) * 0.30 * spec.w;
        const double cy = 0.5 * spec.h + (y[1] / range) * 0.30 * spec.h;
        const double phi = (d == 3) ? y[2] : y[0];
        const double s = rng.uniform(spec.marker_min, spec.marker_max);
        const double sx = s * 1.8, sy = s / 1.8;
        const double cphi = std::cos(phi), sphi = std::sin(phi);
        const double color[3] = {0.95, 0.85, 0.70};
        const int r = static_cast<int>(std::ceil(3.0 * sx));
        const int y0 = std::max(0, static_cast<int>(cy) - r), y1 = std::min(spec.h - 1, static_cast<int>(cy) + r);
        const int x0 = std::max(0, static_cast<int>(cx) - r), x1 = std::min(spec.w - 1, static_cast<int>(cx) + r);
        for (int py = y0; py <= y1; ++py) {
            for (int px = x0; px <= x1; ++px) {
                const double dx = px - cx, dy = py - cy;
                const double u = cphi * dx + sphi * dy;
                const double v = -sphi * dx + cphi * dy;
                const double g = std::exp(-0.5 * (u * u / (sx * sx) + v * v / (sy * sy)));
                if (g < 1e-4) continue;
                for (int ch = 0; ch < spec.c; ++ch) {
                    double& pix = img[(static_cast<Eigen::Index>(ch) * spec.h + py) * spec.w + px];
                    pix = std::min(1.0, pix + color[ch % 3] * g);
                }
            }
        }
        ds.images.push_back(std::move(img));
        ds.ids.push_back(i);
    }

    // 80/10/10 split by shuffled ids.
    std::vector<long> order(spec.count);
    for (long i = 0; i < spec.count; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    const long n_tr = static_cast<long>(spec.count * 0.8);
    const long n_be = static_cast<long>(spec.count * 0.1);
    ds.split.assign(spec.count, static_cast<int>(Split::Test));
    for (long i = 0; i < n_tr; ++i) ds.split[order[i]] = static_cast<int>(Split::Train);
    for (long i = n_tr; i < n_tr + n_be; ++i) ds.split[order[i]] = static_cast<int>(Split::Benign);
    return ds;
}

namespace {

Eigen::Vector3d gaze_direction(double yaw, double pitch) {
    return {std::cos(pitch) * std::sin(yaw), std::sin(pitch), std::cos(pitch) * std::cos(yaw)};
}

}  // namespace

double angular_error_deg(const Eigen::Vector2d& pred, const Eigen::Vector2d& truth) {
    if (!pred.allFinite() || !truth.allFinite())
        throw std::invalid_argument("angular_error: non-finite input");
    const Eigen::Vector3d a = gaze_direction(pred[0], pred[1]);
    const Eigen::Vector3d b = gaze_direction(truth[0], truth[1]);
    const double cosv = std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
    return std::acos(cosv) * 180.0 / std::numbers::pi;
}

double l1_error(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
    if (pred.size() != truth.size()) throw std::invalid_argument("l1_error: dimension mismatch");
    return (pred - truth).cwiseAbs().mean();
}

double regression_error(Metric m, const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
    if (m == Metric::AngularDeg) {
        if (pred.size() != 2) throw std::invalid_argument("angular metric requires d=2");
        return angular_error_deg(pred.head<2>(), truth.head<2>());
    }
    return l1_error(pred, truth);
}

Metric metric_for_dim(int d) { return d == 2 ? Metric::AngularDeg : Metric::L1; }

void save_dataset(const LabeledDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream blob(fs::path(dir) / "images.bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot write " + dir + "/images.bin");
    for (const auto& img : ds.images)
        blob.write(reinterpret_cast<const char*>(img.data()),
                   static_cast<std::streamsize>(img.size() * sizeof(double)));
    std::ofstream idx(fs::path(dir) / "index.csv");
    idx << "id,split";
    for (int j = 0; j < ds.d; ++j) idx << ",y" << j;
    idx << "\n";
    idx.precision(17);
    for (long i = 0; i < ds.n(); ++i) {
        idx << ds.ids[i] << "," << ds.split[i];
        for (int j = 0; j < ds.d; ++j) idx << "," << ds.labels(i, j);
        idx << "\n";
    }
    std::ofstream meta(fs::path(dir) / "meta.txt");
    meta << "w=" << ds.w << "\nh=" << ds.h << "\nc=" << ds.c << "\nd=" << ds.d << "\n";
}

LabeledDataset load_dataset(const std::string& dir) {
    LabeledDataset ds;
    std::ifstream meta(fs::path(dir) / "meta.txt");
    if (!meta) throw std::runtime_error("cannot read " + dir + "/meta.txt");
    std::string line;
    while (std::getline(meta, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const int val = std::stoi(line.substr(eq + 1));
        if (key == "w") ds.w = val;
        else if (key == "h") ds.h = val;
        else if (key == "c") ds.c = val;
        else if (key == "d") ds.d = val;
    }
    std::ifstream idx(fs::path(dir) / "index.csv");
    if (!idx) throw std::runtime_error("cannot read " + dir + "/index.csv");
    std::getline(idx, line);  // header
    std::vector<Eigen::VectorXd> rows;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        ds.ids.push_back(std::stol(tok));
        std::getline(ss, tok, ',');
        ds.split.push_back(std::stoi(tok));
        Eigen::VectorXd y(ds.d);
        for (int j = 0; j < ds.d; ++j) {
            std::getline(ss, tok, ',');
            y[j] = std::stod(tok);
        }
        rows.push_back(y);
    }
    ds.labels.resize(static_cast<long>(rows.size()), ds.d);
    for (size_t i = 0; i < rows.size(); ++i) ds.labels.row(static_cast<long>(i)) = rows[i];
    std::ifstream blob(fs::path(dir) / "images.bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot read " + dir + "/images.bin");
    const Eigen::Index px = static_cast<Eigen::Index>(ds.c) * ds.h * ds.w;
    for (size_t i = 0; i < rows.size(); ++i) {
        Arr img(px);
        blob.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(px * sizeof(double)));
        if (!blob) throw std::runtime_error("images.bin truncated");
        ds.images.push_back(std::move(img));
    }
    return ds;
}

Tensor make_batch(const LabeledDataset& ds, const std::vector<long>& idx, bool requires_grad) {
    std::vector<Arr> imgs;
    imgs.reserve(idx.size());
    for (long i : idx) imgs.push_back(ds.images[i]);
    return make_batch(imgs, ds.c, ds.h, ds.w, requires_grad);
}

Tensor make_batch(const std::vector<Arr>& images, int c, int h, int w, bool requires_grad) {
    const int n = static_cast<int>(images.size());
    const Eigen::Index px = static_cast<Eigen::Index>(c) * h * w;
    Arr flat(px * n);
    for (int i = 0; i < n; ++i) {
        if (images[i].size() != px) throw std::invalid_argument("batch image shape mismatch");
        flat.segment(static_cast<Eigen::Index>(i) * px, px) = images[i];
    }
    return Tensor::leaf({n, c, h, w}, std::move(flat), requires_grad);
}

}  // namespace regguard
