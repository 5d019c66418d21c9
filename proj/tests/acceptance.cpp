// Acceptance harness: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 4/5/6/9 share the experiment output directories under
// ./acceptance_out so reruns resume from checkpoints.

#include "regguard/attacks.hpp"
#include "regguard/baselines.hpp"
#include "regguard/diagnostics.hpp"
#include "regguard/experiment.hpp"
#include "regguard/identify.hpp"
#include "regguard/mitigate.hpp"
#include "regguard/reverse.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace regguard;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;
};

#define EXPECT(out, cond)                                             \
    do {                                                              \
        if (!(cond)) {                                                \
            (out).pass = false;                                       \
            (out).detail << " [failed: " << #cond << "]";             \
        }                                                             \
    } while (0)

// ---- shared configuration -------------------------------------------------

SyntheticTaskSpec acceptance_task() {
    SyntheticTaskSpec spec;
    spec.kind = "gaze-2d";
    spec.w = spec.h = 32;
    spec.count = 3000;
    spec.seed = 101;
    return spec;  // noise / exposure at library defaults
}

attacks::BackdoorTrainConfig attack_train_config() {
    attacks::BackdoorTrainConfig tc;
    tc.steps = 800;
    tc.seed = 7;
    return tc;
}

reverse::ReverseConfig reverse_config() {
    reverse::ReverseConfig rc;  // calibrated defaults live in ReverseConfig
    return rc;
}

experiment::ExperimentConfig zoo_config(const std::string& out_dir) {
    experiment::ExperimentConfig c;
    c.task = acceptance_task();
    c.attack_kinds = {"badnets"};
    c.n_benign = 4;
    c.n_backdoored = 4;
    c.attack_rate = 0.10;
    c.train = attack_train_config();
    c.rev = reverse_config();
    c.epsilon = 0.03;
    c.run_mitigation = true;
    c.out_dir = out_dir;
    c.seed = 1;
    return c;
}

Eigen::VectorXd default_target(int d) {
    return Eigen::VectorXd::Constant(d, 0.9);
}

LabeledDataset triggered_copy(const LabeledDataset& ds, const attacks::TriggerSpec& spec) {
    LabeledDataset out = ds;
    for (auto& img : out.images) img = attacks::apply_trigger(spec, img, ds.c, ds.h, ds.w);
    return out;
}

// ---- criterion 1: math-unit oracles ---------------------------------------

Outcome criterion1() {
    Outcome out;
    // Angle oracles.
    Eigen::VectorXd e1(2), diag(2);
    e1 << 1, 0;
    diag << 1, 1;
    EXPECT(out, std::abs(diagnostics::angle(e1, diag) - M_PI / 4.0) < 1e-12);
    EXPECT(out, std::abs(diagnostics::angle(diag, diag)) < 1e-6);
    EXPECT(out, std::abs(diagnostics::angle(diag, Eigen::VectorXd(-diag)) - M_PI) < 1e-6);

    // Population variance of {0, 2} is 1.
    Eigen::VectorXd two(2);
    two << 0, 2;
    EXPECT(out, std::abs(diagnostics::population_variance(two) - 1.0) < 1e-12);

    // RNV/RAV of identical benign and poisoned sets are exactly 1; a
    // collinear blow-up of the features leaves the angles (hence RAV) at 0
    // poisoned variance over a non-degenerate benign set.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss;
    Eigen::MatrixXd h(6, 4);
    for (long i = 0; i < h.size(); ++i) h.data()[i] = gauss(rng);
    LinearHead head;
    head.W = Eigen::MatrixXd(4, 2);
    for (long i = 0; i < head.W.size(); ++i) head.W.data()[i] = gauss(rng);
    head.b = Eigen::VectorXd::Zero(2);
    EXPECT(out, std::abs(diagnostics::rnv(h, h) - 1.0) < 1e-12);
    EXPECT(out, std::abs(diagnostics::rav(h, h, head) - 1.0) < 1e-12);
    Eigen::MatrixXd collinear = h.row(0).replicate(6, 1);
    for (int i = 0; i < 6; ++i) collinear.row(i) *= (1.0 + i);
    EXPECT(out, std::abs(diagnostics::rav(h, collinear, head)) < 1e-12);

    // Output-variance term: columns {0,2} and {1,1} average to 0.5.
    Eigen::MatrixXd outs(2, 2);
    outs << 0, 1, 2, 1;
    EXPECT(out, std::abs(reverse::output_variance_term(outs) - 0.5) < 1e-12);
    EXPECT(out, std::abs(reverse::output_variance_term(Eigen::MatrixXd::Ones(3, 2))) < 1e-12);

    // Momentum blend: T = 0 returns gx, T = 0.5 the midpoint, gx = x is exact.
    const int c = 3, hh = 2, ww = 2;
    Arr x(c * hh * ww), gx(c * hh * ww);
    for (long i = 0; i < x.size(); ++i) {
        x[i] = 0.1 * static_cast<double>(i);
        gx[i] = 1.0 - 0.05 * static_cast<double>(i);
    }
    Eigen::MatrixXd t0 = Eigen::MatrixXd::Zero(hh, ww);
    Eigen::MatrixXd t5 = Eigen::MatrixXd::Constant(hh, ww, 0.5);
    EXPECT(out, ((reverse::momentum_blend(gx, x, t0, c) - gx).abs().maxCoeff() < 1e-15));
    EXPECT(out,
           ((reverse::momentum_blend(gx, x, t5, c) - 0.5 * (gx + x)).abs().maxCoeff() < 1e-12));
    EXPECT(out, ((reverse::momentum_blend(x, x, t5, c) - x).abs().maxCoeff() == 0.0));

    // feature_reg == diagnostics::rav on 1000 random instances.
    double max_gap = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 3 + static_cast<int>(rng() % 6);
        const int m = 2 + static_cast<int>(rng() % 5);
        const int d = 1 + static_cast<int>(rng() % 3);
        Eigen::MatrixXd hb(n, m), hp(n, m);
        for (long i = 0; i < hb.size(); ++i) {
            hb.data()[i] = gauss(rng);
            hp.data()[i] = gauss(rng);
        }
        LinearHead lh;
        lh.W = Eigen::MatrixXd(m, d);
        for (long i = 0; i < lh.W.size(); ++i) lh.W.data()[i] = gauss(rng);
        lh.b = Eigen::VectorXd::Zero(d);
        const double a = reverse::feature_reg(hp, hb, lh);
        const double b = diagnostics::rav(hb, hp, lh);
        max_gap = std::max(max_gap, std::abs(a - b));
    }
    EXPECT(out, max_gap <= 1e-9);
    out.detail << "feature_reg vs rav max gap " << max_gap;
    return out;
}

// ---- criterion 2: gradient checks ------------------------------------------

Outcome criterion2() {
    Outcome out;
    SyntheticTaskSpec spec;
    spec.count = 12;
    spec.w = spec.h = 16;
    spec.seed = 5;
    LabeledDataset ds = generate_dataset(spec);
    RegressionModel model = build_model("micro-tanh", ds.c, ds.h, ds.w, ds.d, 2);

    // input_gradient vs central differences.
    const Arr& img = ds.images[0];
    Arr analytic = model.input_gradient(img);
    std::mt19937_64 rng(11);
    double worst_rel = 0.0;
    for (int probe = 0; probe < 24; ++probe) {
        const long j = static_cast<long>(rng() % static_cast<std::uint64_t>(img.size()));
        Arr perturbed = img;
        const double eps = 1e-5;
        perturbed[j] = img[j] + eps;
        const double up = model.predict_one(perturbed).sum();
        perturbed[j] = img[j] - eps;
        const double dn = model.predict_one(perturbed).sum();
        const double numeric = (up - dn) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-6});
        worst_rel = std::max(worst_rel, std::abs(analytic[j] - numeric) / denom);
    }
    EXPECT(out, worst_rel < 1e-3);

    // Full objective (variance + L1 + feature regularizer) gradient on a
    // micro generator, matching the production graph construction.
    reverse::TriggerGenerator gen("micro", ds.c, ds.h, ds.w, 3);
    auto idx = ds.indices_of(Split::Train);
    idx.resize(4);
    Tensor x = make_batch(ds, idx);
    const long n = static_cast<long>(idx.size());
    Eigen::MatrixXd hb = model.forward_features(ds.subset(idx).images);
    double benign_denoms = 0.0;
    {
        LinearHead head = model.linear_head();
        Eigen::MatrixXd angles = diagnostics::angle_matrix(hb, head);
        for (int j = 0; j < model.d; ++j)
            benign_denoms += diagnostics::population_variance(angles.col(j));
    }
    EXPECT(out, benign_denoms > 0.0);
    auto objective = [&]() -> Tensor {
        Tensor gx = gen.transform_t(x);
        Tensor o = model.forward_t(gx);
        Tensor var_term = mean(variance_axis0(o));
        Tensor l1 = mul(sum(abs_op(sub(gx, x))), Tensor::scalar(1.0 / static_cast<double>(n)));
        Tensor h = model.features_t(gx);
        Tensor w = model.head->w;
        Tensor ang = acos_clamped(
            bcast_mul_row(bcast_div_col(matmul(h, w), row_l2_norms(h)),
                          Tensor::leaf({model.d},
                                       Arr(1.0 / model.linear_head().W.colwise().norm().array()))),
            1e-7);
        Tensor rf = mul(sum(variance_axis0(ang)), Tensor::scalar(1.0 / benign_denoms));
        return add(add(mul(Tensor::scalar(20.0), var_term), l1), mul(Tensor::scalar(800.0), rf));
    };
    Tensor loss = objective();
    for (auto& p : gen.params()) p.grad().setZero();
    loss.backward();
    double worst_obj = 0.0;
    auto params = gen.params();
    for (auto& p : params) {
        for (int probe = 0; probe < 3; ++probe) {
            const long j = static_cast<long>(rng() % static_cast<std::uint64_t>(p.value().size()));
            const double analytic_g = p.grad()[j];
            const double eps = 1e-5;
            const double orig = p.value()[j];
            p.value()[j] = orig + eps;
            const double up = objective().value()[0];
            p.value()[j] = orig - eps;
            const double dn = objective().value()[0];
            p.value()[j] = orig;
            const double numeric = (up - dn) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic_g), std::abs(numeric), 1e-6});
            worst_obj = std::max(worst_obj, std::abs(analytic_g - numeric) / denom);
        }
    }
    EXPECT(out, worst_obj < 1e-3);
    out.detail << "input-grad rel " << worst_rel << ", objective rel " << worst_obj;
    return out;
}

// ---- criterion 3: RAV < 0.1 for all four attack kinds ----------------------

Outcome criterion3(const LabeledDataset& ds) {
    Outcome out;
    const char* kinds[] = {"badnets", "blend", "sig", "wanet"};
    attacks::BackdoorTrainConfig tc = attack_train_config();
    LabeledDataset d_be = ds.subset(Split::Benign);
    int kind_index = 0;
    for (const char* kind : kinds) {
        attacks::TriggerSpec spec;
        spec.kind = attacks::kind_from_name(kind);
        spec.target = default_target(ds.d);
        spec.rate = 0.10;
        spec.seed = 31 + static_cast<std::uint64_t>(kind_index);
        tc.seed = 41 + static_cast<std::uint64_t>(kind_index);
        ++kind_index;
        auto result = attacks::train_backdoored(ds, spec, tc);
        LabeledDataset poisoned = triggered_copy(d_be, result.spec);
        Eigen::MatrixXd hb = result.model.forward_features(d_be.images);
        Eigen::MatrixXd hp = result.model.forward_features(poisoned.images);
        const double rav = diagnostics::rav(hb, hp, result.model.linear_head());
        out.detail << kind << " rav " << rav << " (ae " << result.ae << ") ";
        EXPECT(out, rav < 0.1);
    }
    return out;
}

// ---- criterion 4/5/9: the badnets zoo experiment ----------------------------

Outcome criterion4(const nlohmann::json& doc) {
    Outcome out;
    EXPECT(out, doc.contains("roc_auc") && doc["roc_auc"].contains("overall"));
    EXPECT(out, doc.contains("confusion") && doc["confusion"].contains("overall"));
    if (!out.pass) return out;
    const double auc = doc["roc_auc"]["overall"].get<double>();
    const double acc = doc["confusion"]["overall"]["accuracy"].get<double>();
    out.detail << "roc-auc " << auc << ", accuracy " << acc;
    EXPECT(out, auc >= 0.9);
    EXPECT(out, acc >= 0.75);
    return out;
}

Outcome criterion5(const nlohmann::json& doc) {
    Outcome out;
    EXPECT(out, doc.contains("mitigation") && doc["mitigation"].is_object());
    if (!out.pass) return out;
    const auto& mit = doc["mitigation"];
    double benign_re_sum = 0.0;
    long benign_count = 0;
    for (const auto& z : doc["zoo"]) {
        if (z["role"].get<std::string>() == "benign") {
            benign_re_sum += z["re"].get<double>();
            ++benign_count;
        }
    }
    EXPECT(out, benign_count > 0);
    const double benign_re = benign_re_sum / std::max(benign_count, 1L);
    const double pre_ae = mit["pre_ae"].get<double>();
    const double post_ae = mit["post_ae"].get<double>();
    const double post_dae = mit["post_dae"].get<double>();
    const double pre_re = mit["pre_re"].get<double>();
    const double post_re = mit["post_re"].get<double>();
    out.detail << "post-dae " << post_dae << " vs 2x benign-re " << 2.0 * benign_re << "; ae "
               << pre_ae << " -> " << post_ae << "; re " << pre_re << " -> " << post_re;
    EXPECT(out, post_dae <= 2.0 * benign_re);
    EXPECT(out, post_ae >= 3.0 * pre_ae);
    EXPECT(out, post_re <= 1.5 * pre_re);
    return out;
}

// ---- criterion 6: ablation flips a benign model -----------------------------

Outcome criterion6(const std::string& zoo_dir, const experiment::ExperimentConfig& config) {
    Outcome out;
    LabeledDataset data = load_dataset(zoo_dir + "/data");
    LabeledDataset d_be = data.subset(Split::Benign);
    bool flipped = false;
    for (int i = 0; i < config.n_benign && !flipped; ++i) {
        const std::string id = "benign_" + std::to_string(i);
        RegressionModel model = load_model(zoo_dir + "/models/" + id);
        reverse::ReverseConfig rc = config.rev;
        rc.lambda2 = 0.0;  // drop the feature regularizer
        auto result = reverse::reverse_engineer(model, d_be, rc);
        auto verdict = identify::identify(result, d_be, config.epsilon, id);
        out.detail << id << " score " << verdict.score << "/" << verdict.threshold << " ";
        flipped = verdict.backdoored;
    }
    EXPECT(out, flipped);
    return out;
}

// ---- criterion 7: adaptive attack raises AE and pushes batch RAV to 1 -------

Outcome criterion7(const LabeledDataset& ds) {
    Outcome out;
    attacks::TriggerSpec spec;
    spec.kind = attacks::TriggerKind::WaNet;
    spec.target = default_target(ds.d);
    spec.rate = 0.10;
    spec.seed = 51;
    attacks::BackdoorTrainConfig tc = attack_train_config();
    tc.seed = 53;
    tc.attack_fail_ae = 1e9;  // both runs must finish; AE itself is compared
    auto plain = attacks::train_backdoored(ds, spec, tc);
    auto adaptive = attacks::train_backdoored(ds, spec, tc, 0.02);
    out.detail << "batch-rav " << plain.mean_batch_rav << " -> " << adaptive.mean_batch_rav
               << "; ae " << plain.ae << " -> " << adaptive.ae;
    EXPECT(out, std::abs(1.0 - adaptive.mean_batch_rav) < std::abs(1.0 - plain.mean_batch_rav));
    EXPECT(out, adaptive.ae > plain.ae);
    return out;
}

// ---- criterion 8: baseline plumbing -----------------------------------------

Outcome criterion8(const std::string& zoo_dir) {
    Outcome out;
    LabeledDataset data = load_dataset(zoo_dir + "/data");
    LabeledDataset d_be = data.subset(Split::Benign);
    RegressionModel victim = load_model(zoo_dir + "/models/badnets_0");
    attacks::TriggerSpec spec =
        attacks::TriggerSpec::load(zoo_dir + "/models/badnets_0/trigger.txt", data.c, data.h,
                                   data.w);

    baselines::InversionConfig ic;
    auto [trigger, mass] = baselines::neural_cleanse_regression(victim, d_be, 0.05, ic);
    Eigen::MatrixXd footprint = Eigen::MatrixXd::Zero(data.h, data.w);
    const int patch = spec.effective_patch(data.w);
    for (int y = data.h - patch; y < data.h; ++y)
        for (int x = data.w - patch; x < data.w; ++x) footprint(y, x) = 1.0;
    const double iou = baselines::mask_iou(trigger.mask, footprint);
    out.detail << "nc mask iou " << iou << " (mass " << mass << ")";
    EXPECT(out, iou >= 0.5);

    // Fine-pruning invariants.
    mitigate::MitigateConfig mc;
    mc.steps = 0;
    RegressionModel same = baselines::fine_pruning(victim, d_be, 0.0, mc);
    Eigen::MatrixXd p0 = victim.predict({d_be.images[0], d_be.images[1]});
    Eigen::MatrixXd p1 = same.predict({d_be.images[0], d_be.images[1]});
    EXPECT(out, (p0 - p1).cwiseAbs().maxCoeff() == 0.0);
    RegressionModel pruned = baselines::fine_pruning(victim, d_be, 0.25, mc);
    EXPECT(out, pruned.feature_mask.has_value());
    if (pruned.feature_mask) {
        const long zeroed = (pruned.feature_mask->abs() < 1e-12).count();
        out.detail << "; pruned units " << zeroed;
        EXPECT(out, zeroed == static_cast<long>(0.25 * victim.m));
    }
    return out;
}

// ---- criterion 9: determinism + schema --------------------------------------

Outcome criterion9(const nlohmann::json& a, const nlohmann::json& b) {
    Outcome out;
    std::string err;
    EXPECT(out, experiment::validate_report(a, &err));
    if (!err.empty()) out.detail << "schema: " << err << " ";
    for (const char* key : {"zoo", "verdicts", "confusion", "roc_auc", "mitigation"}) {
        const bool same = a.contains(key) && b.contains(key) && a[key].dump() == b[key].dump();
        if (!same) out.detail << "mismatch in " << key << " ";
        EXPECT(out, same);
    }
    if (out.pass) out.detail << "metric fields byte-identical, schema valid";
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
    auto wanted = [&](int k) {
        return only.empty() || std::find(only.begin(), only.end(), k) != only.end();
    };

    struct Row {
        int id;
        std::string name;
        Outcome outcome;
        double seconds;
    };
    std::vector<Row> rows;
    auto run = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        if (!wanted(id)) return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rows.push_back({id, name, std::move(o), secs});
        const Row& r = rows.back();
        std::printf("CRITERION %d (%s): %s - %s [%.1fs]\n", r.id, r.name.c_str(),
                    r.outcome.pass ? "PASS" : "FAIL", r.outcome.detail.str().c_str(), r.seconds);
        std::fflush(stdout);
    };

    run(1, "math-unit oracles", criterion1);
    run(2, "gradient checks", criterion2);

    LabeledDataset shared;
    if (wanted(3) || wanted(7)) shared = generate_dataset(acceptance_task());
    run(3, "feature-space RAV under four attacks", [&] { return criterion3(shared); });

    nlohmann::json report_a, report_b;
    const std::string dir_a = "acceptance_out/zoo_a";
    const std::string dir_b = "acceptance_out/zoo_b";
    if (wanted(4) || wanted(5) || wanted(6) || wanted(8) || wanted(9)) {
        const auto config = zoo_config(dir_a);
        report_a = experiment::run_experiment(config).doc;
    }
    run(4, "identification separation", [&] { return criterion4(report_a); });
    run(5, "mitigation effect", [&] { return criterion5(report_a); });
    run(6, "ablation flips a benign verdict", [&] { return criterion6(dir_a, zoo_config(dir_a)); });
    run(7, "adaptive attack direction", [&] { return criterion7(shared); });
    run(8, "baseline plumbing", [&] { return criterion8(dir_a); });
    run(9, "determinism and report schema", [&] {
        report_b = experiment::run_experiment(zoo_config(dir_b)).doc;
        return criterion9(report_a, report_b);
    });

    int failures = 0;
    for (const auto& r : rows) failures += r.outcome.pass ? 0 : 1;
    std::printf("%zu criteria run, %d failed\n", rows.size(), failures);
    return failures == 0 ? 0 : 1;
}
