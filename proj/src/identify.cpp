#include "regguard/identify.hpp"

#include <stdexcept>

namespace regguard::identify {

double max_l1_norm(const LabeledDataset& d_be) {
    if (d_be.n() == 0) throw std::invalid_argument("max_l1_norm: empty dataset");
    double best = 0.0;
    for (const auto& img : d_be.images) best = std::max(best, img.abs().sum());
    return best;
}

Verdict identify_score(double score, const LabeledDataset& d_be, double epsilon,
                       const std::string& model_id) {
    Verdict v;
    v.model_id = model_id;
    v.score = score;
    v.epsilon = epsilon;
    v.threshold = epsilon * max_l1_norm(d_be);
    v.backdoored = score < v.threshold;
    return v;
}

Verdict identify(const reverse::ReverseResult& result, const LabeledDataset& d_be, double epsilon,
                 const std::string& model_id) {
    return identify_score(result.perturbation_score, d_be, epsilon, model_id);
}

ConfusionStats confusion_stats(const std::vector<std::pair<Verdict, bool>>& labeled) {
    if (labeled.empty()) throw std::invalid_argument("confusion_stats: empty input");
    ConfusionStats s;
    for (const auto& [verdict, truth] : labeled) {
        if (truth)
            (verdict.backdoored ? s.tp : s.fn)++;
        else
            (verdict.backdoored ? s.fp : s.tn)++;
    }
    s.accuracy = static_cast<double>(s.tp + s.tn) / static_cast<double>(labeled.size());
    return s;
}

double roc_auc(const std::vector<double>& scores_backdoored,
               const std::vector<double>& scores_benign) {
    if (scores_backdoored.empty() || scores_benign.empty())
        throw std::invalid_argument("roc_auc: empty score list");
    double wins = 0.0;
    for (double b : scores_backdoored)
        for (double s : scores_benign) {
            if (b < s) wins += 1.0;
            else if (b == s) wins += 0.5;
        }
    return wins / (static_cast<double>(scores_backdoored.size()) *
                   static_cast<double>(scores_benign.size()));
}

}  // namespace regguard::identify
