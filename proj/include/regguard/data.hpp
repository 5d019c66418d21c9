#pragma once

// Synthetic image-regression datasets and the regression-error metrics.
// Images are flat [C,H,W] arrays with pixels in [0,1]; annotations are
// radians internally, converted to degrees only at report time.

#include "regguard/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace regguard {

enum class Split : int { Train = 0, Benign = 1, Test = 2 };

struct LabeledDataset {
    int w = 0, h = 0, c = 0, d = 0;
    std::vector<Arr> images;             // each [c*h*w]
    Eigen::MatrixXd labels;              // n x d
    std::vector<int> split;              // Split as int
    std::vector<long> ids;

    long n() const { return static_cast<long>(images.size()); }
    std::vector<long> indices_of(Split s) const;
    LabeledDataset subset(Split s) const;
    LabeledDataset subset(const std::vector<long>& idx) const;
};

struct SyntheticTaskSpec {
    std::string kind = "gaze-2d";  // or "pose-3d"
    int w = 32, h = 32, c = 3;
    long count = 2000;
    std::uint64_t seed = 1;
    double noise_level = 0.55;      // background: uniform [0, noise_level] + exposure
    double exposure_max = 0.40;     // per-image brightness offset: uniform [0, exposure_max]
    double marker_min = 2.2, marker_max = 3.4;  // marker radius range, pixels
    int label_dim() const;
};

LabeledDataset generate_dataset(const SyntheticTaskSpec& spec);

// Angle in degrees between the 3D gaze directions given by (yaw, pitch)
// radians. Range [0, 180].
double angular_error_deg(const Eigen::Vector2d& pred, const Eigen::Vector2d& truth);

// Mean absolute componentwise difference.
double l1_error(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth);

enum class Metric { AngularDeg, L1 };
double regression_error(Metric m, const Eigen::VectorXd& pred, const Eigen::VectorXd& truth);
Metric metric_for_dim(int d);  // angular for d=2, L1 otherwise

// Directory serialization: images.bin (raw doubles) + index.csv.
void save_dataset(const LabeledDataset& ds, const std::string& dir);
LabeledDataset load_dataset(const std::string& dir);

// Batch helper: stacks images into a [N,C,H,W] tensor.
Tensor make_batch(const LabeledDataset& ds, const std::vector<long>& idx,
                  bool requires_grad = false);
Tensor make_batch(const std::vector<Arr>& images, int c, int h, int w,
                  bool requires_grad = false);

}  // namespace regguard
