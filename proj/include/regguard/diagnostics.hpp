#pragma once

// Feature-space diagnostics: angles between feature vectors and head rows,
// the RNV/RAV variance ratios, and gradient attention maps.

#include "regguard/model.hpp"

#include <string>
#include <vector>

namespace regguard::diagnostics {

// arccos of the clamped cosine between two nonzero vectors, in [0, pi].
double angle(const Eigen::VectorXd& v1, const Eigen::VectorXd& v2);

// Per-sample angles to every head row: element (i,j) is the angle between
// feature row i and w_j.
Eigen::MatrixXd angle_matrix(const Eigen::MatrixXd& features, const LinearHead& head);

// Population variance (divide by N).
double population_variance(const Eigen::VectorXd& samples);

// sigma^2(||h_p||) / sigma^2(||h||). Rows of each matrix are feature vectors.
double rnv(const Eigen::MatrixXd& h_benign, const Eigen::MatrixXd& h_poisoned);

// (1/d) sum_j sigma^2(alpha_p[:,j]) / sigma^2(alpha[:,j]).
double rav(const Eigen::MatrixXd& h_benign, const Eigen::MatrixXd& h_poisoned,
           const LinearHead& head);

// Channel-summed absolute input gradient rescaled into [0,1) by dividing by
// (1 + delta_r) * max. All-zero when the gradient vanishes identically.
Eigen::MatrixXd attention_map(const RegressionModel& model, const Arr& image,
                              double delta_r = 1e-3);

struct AngleSamples {
    Eigen::MatrixXd benign;    // N x d, radians
    Eigen::MatrixXd poisoned;  // N x d, radians
};

// CSV of (population, angle components in degrees); optionally a PPM scatter
// for d == 2. Returns the paths written.
std::vector<std::string> export_angle_scatter(const AngleSamples& samples,
                                              const std::string& csv_path,
                                              bool render_plot = false);

}  // namespace regguard::diagnostics
