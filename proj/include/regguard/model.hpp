#pragma once

// Regression-model abstraction: f = H(F(x)) with a linear head. Covers
// benign training, feature/gradient access, and checkpoint I/O.

#include "regguard/data.hpp"
#include "regguard/nn.hpp"

#include <optional>
#include <string>

namespace regguard {

enum class Activation { Identity, Tanh };

// Head weights as the defender sees them: column j of W is w_j in R^m.
struct LinearHead {
    Eigen::MatrixXd W;  // m x d
    Eigen::VectorXd b;  // d
};

struct TrainConfig {
    int steps = 800;
    int batch = 32;
    double lr = 1.5e-3;
    std::uint64_t seed = 7;
    double target_re = 0.15;          // sanity bound, radians-scale L1
    double divergence_limit = 1e8;    // abort when the loss exceeds this
};

class RegressionModel {
public:
    nn::Sequential feature_net;  // F
    std::shared_ptr<nn::Dense> head;  // H
    Activation omega = Activation::Identity;
    std::optional<Arr> feature_mask;  // fine-pruning support, size m
    int in_c = 0, in_h = 0, in_w = 0, m = 0, d = 0;
    std::string arch_id;
    std::uint64_t seed = 0;

    // Graph-building forward passes over a [N,C,H,W] batch tensor.
    Tensor features_t(const Tensor& x) const;          // [N,m]
    Tensor head_t(const Tensor& h) const;              // [N,d]
    Tensor forward_t(const Tensor& x) const { return head_t(features_t(x)); }

    // Evaluation conveniences (no gradient bookkeeping needed by callers).
    Eigen::MatrixXd forward_features(const std::vector<Arr>& batch) const;  // N x m
    Eigen::MatrixXd predict(const std::vector<Arr>& batch) const;           // N x d
    Eigen::VectorXd predict_one(const Arr& image) const;

    // Gradient of sum_j f_j(x) w.r.t. the input pixels.
    Arr input_gradient(const Arr& image) const;

    LinearHead linear_head() const;
    std::vector<Tensor> all_params() const;

    void check_input(const std::vector<Arr>& batch) const;
};

// Architecture registry. "cnn4" is the standard desk-scale extractor
// (4 conv blocks, m = 128); "micro-tanh" is a tiny smooth model for
// finite-difference checks.
RegressionModel build_model(const std::string& arch_id, int in_c, int in_h, int in_w, int d,
                            std::uint64_t seed);

RegressionModel train_benign(const LabeledDataset& dataset, const TrainConfig& config);

// Mean regression error of the model on the given samples.
double evaluate_re(const RegressionModel& model, const LabeledDataset& ds, Metric metric);

// Checkpoint directory: manifest.txt (flat key=value) + params.bin.
void save_model(const RegressionModel& model, const std::string& dir,
                const std::vector<std::pair<std::string, std::string>>& extra_manifest = {});
RegressionModel load_model(const std::string& dir);
bool checkpoint_exists(const std::string& dir);
std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& dir);

}  // namespace regguard
