#pragma once

// Trigger reverse engineering: a generative image-to-image model trained to
// minimize output variance + input perturbation + the feature-space angle
// variance ratio, with an attention-weighted momentum blend, plus the
// softmax-variance variant for classifiers.

#include "regguard/model.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace regguard::reverse {

// G_theta. "conv3": three 3x3 conv layers with a tanh-residual output,
// G(x) = clamp01(x + tanh(net(x))). "micro": a single conv layer (< 100
// parameters) for finite-difference checks. identity_init zeroes the last
// layer so G is exactly the identity at construction.
class TriggerGenerator {
public:
    TriggerGenerator(const std::string& arch, int c, int h, int w, std::uint64_t seed,
                     bool identity_init = false);
    Tensor transform_t(const Tensor& x) const;
    Arr transform(const Arr& x) const;
    std::vector<Tensor> params() const { return net.params(); }
    void save(const std::string& dir) const;
    static TriggerGenerator load(const std::string& dir);

    std::string arch;
    int c, h, w;
    std::uint64_t seed;
    nn::Sequential net;
};

// Desk-scale defaults. The loss weights are recalibrated for the small
// synthetic task: much heavier output-variance pressure (lambda1) is needed
// before a benign model's generator leaves the identity, while the feature
// regularizer weight scales down with it. Starting the generator at the
// exact identity replaces the reconstruction pretraining stage and avoids
// a residual-L1 floor that otherwise dominates the perturbation score.
struct ReverseConfig {
    double lambda1 = 600.0;
    double lambda2 = 60.0;
    int steps = 800;
    int batch = 50;
    double lr = 1.5e-3;
    int pretrain_steps = 0;     // used only when identity_init is off
    int l1_warmup = 150;        // steps with the L1 term disabled (escape phase)
    std::uint64_t seed = 7;
    std::string generator_arch = "conv3";
    bool use_momentum = true;   // ablation switch for the attention blend
    bool identity_init = true;  // start G at the exact identity (zeroed last layer)
};

struct ReverseResult {
    std::shared_ptr<TriggerGenerator> generator;
    // Per-step traces, all of length steps.
    std::vector<double> variance_trace, l1_trace, rf_trace, total_trace;
    Eigen::MatrixXd target_trajectory;  // steps x d
    Eigen::VectorXd target_estimate;    // final-step estimate
    double perturbation_score = 0.0;    // mean per-image L1 over the full benign set
    long skipped_batches = 0;           // zero-benign-variance batches (rf skipped)

    // Persists generator checkpoint, loss_trace.csv, target_trajectory.csv,
    // and before/after/residual image grids.
    void save(const std::string& dir, const RegressionModel& model,
              const LabeledDataset& d_be) const;
};

// Mean over output dimensions of the population variance across the batch.
double output_variance_term(const Eigen::MatrixXd& outputs);

// The feature-space regularizer r_f: the RAV of the transformed batch
// against the benign batch.
double feature_reg(const Eigen::MatrixXd& h_transformed, const Eigen::MatrixXd& h_benign,
                   const LinearHead& head);

// x' = gx (1 - T) + x T, with the 2D map broadcast across channels.
Arr momentum_blend(const Arr& gx, const Arr& x, const Eigen::MatrixXd& attention, int c);

// Attention maps for a set of images, flattened per pixel (row-major h*w).
std::vector<Arr> cache_attention_maps(const RegressionModel& model, const std::vector<Arr>& images);

ReverseResult reverse_engineer(const RegressionModel& model, const LabeledDataset& d_be,
                               const ReverseConfig& config);

// Mean model output over momentum-blended transformed inputs.
Eigen::VectorXd estimate_target_vector(const RegressionModel& model, const TriggerGenerator& gen,
                                       const LabeledDataset& d_be);

// Classifier variant: softmax-variance objective, no feature regularizer and
// no momentum blend.
ReverseResult reverse_engineer_classifier(const RegressionModel& classifier,
                                          const LabeledDataset& d_be, const ReverseConfig& config);

}  // namespace regguard::reverse
