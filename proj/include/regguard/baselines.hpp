#pragma once

// Comparison defenses: input-space trigger inversion (mask + pattern),
// feature-space trigger inversion with constraint penalties, and
// fine-pruning of feature units.

#include "regguard/mitigate.hpp"
#include "regguard/model.hpp"
#include "regguard/reverse.hpp"

#include <memory>
#include <optional>
#include <utility>

namespace regguard::baselines {

struct InputSpaceTrigger {
    Eigen::MatrixXd mask;     // h x w in [0,1], broadcast across channels
    Arr pattern;              // c*h*w in [0,1]
    Eigen::VectorXd target;   // recovered y_t
    double mask_mass = 0.0;   // L1 mass of the mask
};

// A(x) = (1 - m) .* x + m .* pattern, mask broadcast across channels.
Arr apply_input_trigger(const InputSpaceTrigger& trig, const Arr& x, int c, int h, int w);

// IoU between {mask >= rel_threshold * max(mask)} and a reference footprint.
double mask_iou(const Eigen::MatrixXd& mask, const Eigen::MatrixXd& footprint,
                double rel_threshold = 0.5);

struct InversionConfig {
    int steps = 400;
    int batch = 32;
    double lr = 0.05;
    std::uint64_t seed = 7;
    int max_escalations = 5;     // feature-space constraint penalty rounds
    std::string generator_arch = "conv3";
};

// Jointly optimizes mask, pattern, and (unless a candidate is supplied)
// target to minimize mean l(y_t, f(A(x))) + lambda |m|. Classifier-style
// Neural Cleanse scans candidate targets; pass one via `fixed_target` to get
// that behavior for a known or hypothesized y_t. Returns the trigger and the
// final mask mass (the ranking score).
std::pair<InputSpaceTrigger, double> neural_cleanse_regression(
    const RegressionModel& model, const LabeledDataset& d_be, double lambda,
    const InversionConfig& config,
    const std::optional<Eigen::VectorXd>& fixed_target = std::nullopt);

struct FeatureSpaceTrigger {
    Arr feature_mask;  // m values in [0,1]
    std::shared_ptr<reverse::TriggerGenerator> generator;
    Eigen::VectorXd target;
    double std_residual = 0.0;   // std(m .* F(G(x))) at the last step
    double mask_norm = 0.0;      // ||m||_1 at the last step
    bool feasible = false;       // constraints met within max_escalations
};

// Optimizes generator, feature mask, and target for
// mean l(H((1-m).*a + m.*t), y_t) + lambda3 * mean ||G(x) - x||_1, subject to
// std(m .* F(G(x))) <= tau1 and ||m||_1 <= tau2, enforced by escalating
// quadratic penalties. Returns the trigger and the mean input perturbation.
std::pair<FeatureSpaceTrigger, double> feature_re_regression(const RegressionModel& model,
                                                             const LabeledDataset& d_be,
                                                             double lambda3, double tau1,
                                                             double tau2,
                                                             const InversionConfig& config);

// Zeroes the prune_fraction of feature units with the lowest mean activation
// on d_be, then fine-tunes.
RegressionModel fine_pruning(const RegressionModel& model, const LabeledDataset& d_be,
                             double prune_fraction, const mitigate::MitigateConfig& config);

}  // namespace regguard::baselines
