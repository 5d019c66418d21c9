#pragma once

// Backdoor mitigation: unlearning with the reversed poisoned dataset, the
// plain fine-tuning baseline, and the defending-attack-error metric.

#include "regguard/model.hpp"
#include "regguard/reverse.hpp"

#include <string>

namespace regguard::mitigate {

struct MitigateConfig {
    int steps = 160;         // 20% of the default training schedule
    int batch = 32;
    double lr = 1.5e-4;      // 0.1x the default training rate
    std::uint64_t seed = 7;
    double rp_fraction = 0.5;  // share of each minibatch drawn from D_rp (1:1)
    double divergence_limit = 1e8;
};

struct MitigationReport {
    std::string method;
    double pre_ae = 0.0, post_ae = 0.0;
    double pre_dae = 0.0, post_dae = 0.0;
    double pre_re = 0.0, post_re = 0.0;
};

// Deep copy (the fine-tuning loops must not mutate the input model).
RegressionModel clone_model(const RegressionModel& model);

// D_rp: momentum-blended generator images with the original annotations.
LabeledDataset build_reversed_poisoned(const reverse::TriggerGenerator& gen,
                                       const LabeledDataset& d_be, const RegressionModel& model);

// Fine-tunes a copy of the model on minibatches mixed from D_be and D_rp.
// An empty D_rp degenerates to fine_tune.
RegressionModel unlearn(const RegressionModel& model, const LabeledDataset& d_be,
                        const LabeledDataset& d_rp, const MitigateConfig& config);

RegressionModel fine_tune(const RegressionModel& model, const LabeledDataset& d_be,
                          const MitigateConfig& config);

// Mean metric between predictions on the (already triggered) images and the
// correct annotations carried by pd_te.
double defending_attack_error(const RegressionModel& model, const LabeledDataset& pd_te,
                              Metric metric);

}  // namespace regguard::mitigate
