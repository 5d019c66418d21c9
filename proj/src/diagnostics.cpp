#include "regguard/diagnostics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace regguard::diagnostics {

double angle(const Eigen::VectorXd& v1, const Eigen::VectorXd& v2) {
    const double n1 = v1.norm(), n2 = v2.norm();
    if (n1 == 0.0 || n2 == 0.0) throw std::invalid_argument("angle: zero vector");
    const double cosv = std::clamp(v1.dot(v2) / (n1 * n2), -1.0, 1.0);
    return std::acos(cosv);
}

Eigen::MatrixXd angle_matrix(const Eigen::MatrixXd& features, const LinearHead& head) {
    const long n = features.rows();
    const long d = head.W.cols();
    Eigen::MatrixXd angles(n, d);
    for (long j = 0; j < d; ++j) {
        const Eigen::VectorXd wj = head.W.col(j);
        const double wn = wj.norm();
        if (wn == 0.0) throw std::invalid_argument("angle_matrix: zero head row");
        for (long i = 0; i < n; ++i) {
            const double hn = features.row(i).norm();
            if (hn == 0.0) throw std::invalid_argument("angle_matrix: zero feature vector");
            const double cosv = std::clamp(features.row(i).dot(wj) / (hn * wn), -1.0, 1.0);
            angles(i, j) = std::acos(cosv);
        }
    }
    return angles;
}

double population_variance(const Eigen::VectorXd& samples) {
    const double mu = samples.mean();
    return (samples.array() - mu).square().mean();
}

double rnv(const Eigen::MatrixXd& h_benign, const Eigen::MatrixXd& h_poisoned) {
    if (h_benign.rows() < 2 || h_poisoned.rows() < 2)
        throw std::invalid_argument("rnv: need at least 2 vectors per set");
    const double denom = population_variance(h_benign.rowwise().norm());
    if (denom <= 0.0) throw std::invalid_argument("rnv: degenerate benign set (zero norm variance)");
    return population_variance(h_poisoned.rowwise().norm()) / denom;
}

double rav(const Eigen::MatrixXd& h_benign, const Eigen::MatrixXd& h_poisoned,
           const LinearHead& head) {
    if (h_benign.rows() < 2 || h_poisoned.rows() < 2)
        throw std::invalid_argument("rav: need at least 2 vectors per set");
    const Eigen::MatrixXd ab = angle_matrix(h_benign, head);
    const Eigen::MatrixXd ap = angle_matrix(h_poisoned, head);
    const long d = head.W.cols();
    double total = 0.0;
    for (long j = 0; j < d; ++j) {
        const double denom = population_variance(ab.col(j));
        if (denom <= 0.0)
            throw std::invalid_argument("rav: zero benign angle variance in dimension " +
                                        std::to_string(j));
        total += population_variance(ap.col(j)) / denom;
    }
    return total / static_cast<double>(d);
}

Eigen::MatrixXd attention_map(const RegressionModel& model, const Arr& image, double delta_r) {
    const Arr g = model.input_gradient(image);
    const int h = model.in_h, w = model.in_w, c = model.in_c;
    Eigen::MatrixXd map = Eigen::MatrixXd::Zero(h, w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                map(y, x) += std::abs(g[(static_cast<Eigen::Index>(ch) * h + y) * w + x]);
    const double mx = map.maxCoeff();
    if (mx > 0.0) map /= (1.0 + delta_r) * mx;
    return map;
}

std::vector<std::string> export_angle_scatter(const AngleSamples& samples,
                                              const std::string& csv_path, bool render_plot) {
    namespace fs = std::filesystem;
    if (!fs::path(csv_path).parent_path().empty())
        fs::create_directories(fs::path(csv_path).parent_path());
    const long d = std::max(samples.benign.cols(), samples.poisoned.cols());
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    csv << "population";
    for (long j = 0; j < d; ++j) csv << ",angle_deg_" << (j + 1);
    csv << "\n";
    csv.precision(10);
    const double to_deg = 180.0 / std::numbers::pi;
    auto write_rows = [&](const Eigen::MatrixXd& m, const char* tag) {
        for (long i = 0; i < m.rows(); ++i) {
            csv << tag;
            for (long j = 0; j < m.cols(); ++j) csv << "," << m(i, j) * to_deg;
            csv << "\n";
        }
    };
    write_rows(samples.benign, "benign");
    write_rows(samples.poisoned, "poisoned");
    csv.close();
    std::vector<std::string> paths{csv_path};

    const bool both = samples.benign.rows() > 0 && samples.poisoned.rows() > 0;
    if (render_plot && d == 2 && both) {
        // Minimal PPM scatter: benign blue, poisoned red, over [0,180]^2 degrees.
        const int size = 256;
        std::vector<unsigned char> pix(static_cast<size_t>(size) * size * 3, 255);
        auto plot = [&](const Eigen::MatrixXd& m, unsigned char r, unsigned char g,
                        unsigned char b) {
            for (long i = 0; i < m.rows(); ++i) {
                const int px = std::clamp(static_cast<int>(m(i, 0) * to_deg / 180.0 * (size - 1)), 0, size - 1);
                const int py = std::clamp(static_cast<int>(m(i, 1) * to_deg / 180.0 * (size - 1)), 0, size - 1);
                const size_t o = (static_cast<size_t>(size - 1 - py) * size + px) * 3;
                pix[o] = r; pix[o + 1] = g; pix[o + 2] = b;
            }
        };
        plot(samples.benign, 40, 80, 220);
        plot(samples.poisoned, 220, 50, 40);
        const std::string ppm = csv_path + ".ppm";
        std::ofstream img(ppm, std::ios::binary);
        img << "P6\n" << size << " " << size << "\n255\n";
        img.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
        paths.push_back(ppm);
    }
    return paths;
}

}  // namespace regguard::diagnostics
