#pragma once

// Backdoor identification: the epsilon-threshold verdict rule on the mean L1
// perturbation score, plus set-level confusion statistics and ROC-AUC.

#include "regguard/data.hpp"
#include "regguard/reverse.hpp"

#include <string>
#include <utility>
#include <vector>

namespace regguard::identify {

struct Verdict {
    std::string model_id;
    double score = 0.0;      // mean per-image L1 perturbation
    double threshold = 0.0;  // epsilon * max per-image L1 norm over D_be
    bool backdoored = false;
    double epsilon = 0.03;
};

// Maximum per-image L1 norm over the benign dataset (||x_hat||_1).
double max_l1_norm(const LabeledDataset& d_be);

// Strict rule: backdoored iff score < epsilon * ||x_hat||_1; ties are benign.
Verdict identify_score(double score, const LabeledDataset& d_be, double epsilon = 0.03,
                       const std::string& model_id = "");

Verdict identify(const reverse::ReverseResult& result, const LabeledDataset& d_be,
                 double epsilon = 0.03, const std::string& model_id = "");

struct ConfusionStats {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    double accuracy = 0.0;
};

// Ground truth flag: true = actually backdoored.
ConfusionStats confusion_stats(const std::vector<std::pair<Verdict, bool>>& labeled);

// Probability that a random backdoored score ranks below a random benign
// score (lower = more backdoored); ties count half.
double roc_auc(const std::vector<double>& scores_backdoored,
               const std::vector<double>& scores_benign);

}  // namespace regguard::identify
