#pragma once

// Backdoor attacks on regression models: trigger functions, dataset
// poisoning, backdoored training (including the training-process attacks,
// the adaptive RAV attack, and multi-target), and the AE metric.

#include "regguard/model.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace regguard::attacks {

enum class TriggerKind { BadNets, CleanLabel, WaNet, InputAware, Blend, Sig };

std::string kind_name(TriggerKind k);
TriggerKind kind_from_name(const std::string& name);

struct PgdConfig {
    int steps = 10;
    double eps = 8.0 / 255.0;   // L-inf budget
    double step = 2.0 / 255.0;  // per-step size
};

// Input-aware trigger generator: a small residual conv net emitting an
// additive per-input pattern; frozen into the spec after co-training.
class IaGenerator {
public:
    IaGenerator(int c, int h, int w, std::uint64_t seed);
    Tensor apply_t(const Tensor& x) const;  // clamp01(x + 0.3*tanh(net(x)))
    Tensor pattern_t(const Tensor& x) const;
    Arr apply(const Arr& x) const;
    std::vector<Tensor> params() const { return net.params(); }
    void set_trainable(bool trainable) const;
    int c, h, w;
    std::uint64_t seed;
    nn::Sequential net;
};

struct TriggerSpec {
    TriggerKind kind = TriggerKind::BadNets;
    Eigen::VectorXd target;  // y_T
    double rate = 0.05;      // poisoning rate rho
    std::uint64_t seed = 1;

    // Patch attacks (BadNets / Clean Label). patch_size < 0 means
    // ceil(0.18 * image width); patch sits at the bottom-right corner.
    int patch_size = -1;
    Eigen::Vector3d patch_color{1.0, 0.0, 0.0};

    // WaNet. warp_grid < 0 means image width / 4.
    int warp_grid = -1;
    double warp_strength = 1.0;

    // Blend / SIG.
    double blend_alpha = 0.1;
    double sig_amplitude = 0.08;
    double sig_freq = 6.0;

    std::shared_ptr<IaGenerator> ia_generator;  // set by input-aware training

    int effective_patch(int img_w) const;
    int effective_grid(int img_w) const;

    // Flat key=value serialization (generator parameters go to a side blob
    // next to `path` for input-aware specs).
    void save(const std::string& path) const;
    static TriggerSpec load(const std::string& path, int c, int h, int w);
};

struct PoisonPlan {
    struct Entry {
        long id = 0;
        int trigger_id = 0;
        Eigen::VectorXd original;
        Eigen::VectorXd poisoned;
        bool pgd_perturbed = false;
    };
    std::vector<Entry> entries;
    void save_csv(const std::string& path) const;
};

// A(x): applies the trigger, clipped to [0,1].
Arr apply_trigger(const TriggerSpec& spec, const Arr& x, int c, int h, int w);

// WaNet flow field as a pure function of (seed, k, s): per-pixel (dx, dy).
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> wanet_flow(std::uint64_t seed, int grid, double strength,
                                                       int h, int w);

// Static poisoning: a uniformly random rho-fraction of the training split
// gets the trigger and the target annotation.
std::pair<LabeledDataset, PoisonPlan> poison_dataset(const LabeledDataset& dataset,
                                                     const TriggerSpec& spec);

// Clean Label: PGD-perturb ceil(|G|/2) of the target group (annotations
// within delta of y_T under the surrogate model), patch all of G, set
// annotations to y_T.
std::pair<LabeledDataset, PoisonPlan> clean_label_poison(const LabeledDataset& dataset,
                                                         const TriggerSpec& spec, double delta,
                                                         const PgdConfig& pgd,
                                                         const RegressionModel& surrogate);

// 10th percentile of ||y - y_T|| over the training split.
double default_clean_label_delta(const LabeledDataset& dataset, const Eigen::VectorXd& target);

// PGD maximizing the l2 regression loss within an L-inf ball, clipped to [0,1].
Arr pgd_perturb(const RegressionModel& model, const Arr& x, const Eigen::VectorXd& y_true,
                const PgdConfig& cfg);

// Disjoint per-minibatch partition for multi-target training: returns, for a
// minibatch of `batch` elements, the index ranges claimed by each trigger.
// Throws when the fractions exceed 100%.
std::vector<std::pair<int, int>> partition_minibatch(int batch, const std::vector<double>& fractions);

// Static multi-target poisoning of the training split (each trigger claims a
// disjoint `rate` fraction); the training loop applies the same protocol per
// minibatch.
std::pair<LabeledDataset, PoisonPlan> multi_target_poison(const LabeledDataset& dataset,
                                                          const std::vector<TriggerSpec>& specs);

struct AttackTrainResult {
    RegressionModel model;
    TriggerSpec spec;               // with any co-trained generator frozen in
    std::vector<TriggerSpec> all_specs;  // multi-target
    double ae = 0.0;                // on the triggered benign split vs y_T
    double re = 0.0;                // on the benign split
    bool attack_failed = false;
    double mean_batch_rav = 0.0;    // mean differentiable batch RAV (batch-level attacks)
};

struct BackdoorTrainConfig : TrainConfig {
    double attack_fail_ae = 20.0;   // degrees for d=2 tasks, L1 otherwise
    PgdConfig pgd;                  // clean label
    int surrogate_steps = -1;       // clean label; -1 means steps/2
};

AttackTrainResult train_backdoored(const LabeledDataset& dataset, const TriggerSpec& spec,
                                   const BackdoorTrainConfig& config,
                                   std::optional<double> lambda_adp = std::nullopt);

AttackTrainResult train_backdoored_multi(const LabeledDataset& dataset,
                                         const std::vector<TriggerSpec>& specs,
                                         const BackdoorTrainConfig& config);

// |1 - RAV| over feature batches, as added to the adaptive training loss.
double adaptive_loss(const Eigen::MatrixXd& f_poisoned, const Eigen::MatrixXd& f_benign,
                     const LinearHead& head);

// Differentiable batch RAV: mean_j var(angles(h_p, w_j)) / var(angles(h_b, w_j)).
// `head_w` is the [m,d] weight tensor.
Tensor rav_tensor(const Tensor& h_poisoned, const Tensor& h_benign, const Tensor& head_w);

// Mean metric(f(x), y_T) over an already-triggered set.
double attack_error(const RegressionModel& model, const std::vector<Arr>& poisoned_images,
                    const Eigen::VectorXd& target, Metric metric);

}  // namespace regguard::attacks
