#pragma once

// Experiment orchestration: builds a model zoo (benign + backdoored), runs
// reverse engineering and identification on every model, optionally runs
// mitigation, and emits a JSON report. Every stage checkpoints to the output
// directory and is skipped on resume.

#include "regguard/attacks.hpp"
#include "regguard/identify.hpp"
#include "regguard/mitigate.hpp"
#include "regguard/model.hpp"
#include "regguard/reverse.hpp"
#include "regguard/config.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace regguard::experiment {

struct ExperimentConfig {
    SyntheticTaskSpec task;
    std::vector<std::string> attack_kinds{"badnets"};
    int n_benign = 4;
    int n_backdoored = 4;  // per attack kind
    Eigen::VectorXd target;  // defaults to 0.9 radians per dimension
    double attack_rate = 0.05;
    attacks::BackdoorTrainConfig train;
    reverse::ReverseConfig rev;
    double epsilon = 0.03;
    bool run_mitigation = false;
    bool plots = false;
    std::string out_dir = "out";
    std::uint64_t seed = 1;

    static ExperimentConfig from_kv(const config::KV& kv);
    config::KV to_kv() const;
    Eigen::VectorXd effective_target() const;
};

struct ExperimentRecord {
    nlohmann::json doc;
};

// Trains/loads the zoo, reverse engineers every model, identifies, and
// (optionally) mitigates the first backdoored model. Completed stages are
// skipped when resume is true. Per-model failures are recorded in the
// document under "failures" and do not stop the run.
ExperimentRecord run_experiment(const ExperimentConfig& config, bool resume = true);

void emit_report(const ExperimentRecord& record, const std::string& path);

// Structural check against docs/report-schema.json: required keys and types.
bool validate_report(const nlohmann::json& doc, std::string* error = nullptr);

}  // namespace regguard::experiment
