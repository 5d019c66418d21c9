#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "regguard/baselines.hpp"

using namespace regguard;
using namespace regguard::baselines;

namespace {

LabeledDataset tiny_dataset(long count = 60, int wh = 16, std::uint64_t seed = 3) {
    SyntheticTaskSpec spec;
    spec.count = count;
    spec.w = spec.h = wh;
    spec.seed = seed;
    return generate_dataset(spec);
}

RegressionModel quick_model(const LabeledDataset& ds, int steps = 25) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch = 10;
    return train_benign(ds, tc);
}

}  // namespace

TEST_CASE("a zero mask leaves the image bit-identical") {
    LabeledDataset ds = tiny_dataset(2);
    InputSpaceTrigger trig;
    trig.mask = Eigen::MatrixXd::Zero(ds.h, ds.w);
    trig.pattern = Arr::Constant(static_cast<long>(ds.c) * ds.h * ds.w, 0.9);
    Arr out = apply_input_trigger(trig, ds.images[0], ds.c, ds.h, ds.w);
    for (long i = 0; i < out.size(); ++i) CHECK(out[i] == ds.images[0][i]);
}

TEST_CASE("a unit mask replaces the image with the pattern") {
    LabeledDataset ds = tiny_dataset(2);
    InputSpaceTrigger trig;
    trig.mask = Eigen::MatrixXd::Ones(ds.h, ds.w);
    trig.pattern = Arr::Constant(static_cast<long>(ds.c) * ds.h * ds.w, 0.9);
    Arr out = apply_input_trigger(trig, ds.images[0], ds.c, ds.h, ds.w);
    CHECK((out - 0.9).abs().maxCoeff() < 1e-15);
}

TEST_CASE("the mask broadcasts the same weight to every channel") {
    LabeledDataset ds = tiny_dataset(2);
    InputSpaceTrigger trig;
    trig.mask = Eigen::MatrixXd::Zero(ds.h, ds.w);
    trig.mask(3, 5) = 0.5;
    trig.pattern = Arr::Ones(static_cast<long>(ds.c) * ds.h * ds.w);
    Arr out = apply_input_trigger(trig, ds.images[0], ds.c, ds.h, ds.w);
    const Arr& x = ds.images[0];
    for (int c = 0; c < ds.c; ++c) {
        long i = (static_cast<long>(c) * ds.h + 3) * ds.w + 5;
        CHECK(out[i] == doctest::Approx(0.5 * x[i] + 0.5).epsilon(1e-15));
    }
}

TEST_CASE("mask iou oracles") {
    Eigen::MatrixXd fp = Eigen::MatrixXd::Zero(4, 4);
    fp.block(2, 2, 2, 2).setOnes();  // 4-pixel footprint

    // Identical footprint: IoU 1.
    CHECK(mask_iou(fp, fp) == doctest::Approx(1.0).epsilon(1e-15));

    // Disjoint: IoU 0.
    Eigen::MatrixXd other = Eigen::MatrixXd::Zero(4, 4);
    other(0, 0) = 1.0;
    CHECK(mask_iou(other, fp) == doctest::Approx(0.0).epsilon(1e-15));

    // Half-overlap: mask covers the footprint plus 4 extra pixels -> 4/8.
    Eigen::MatrixXd wide = Eigen::MatrixXd::Zero(4, 4);
    wide.block(2, 0, 2, 4).setOnes();
    CHECK(mask_iou(wide, fp) == doctest::Approx(0.5).epsilon(1e-15));

    // Relative threshold: entries below rel_threshold * max do not count.
    Eigen::MatrixXd soft = Eigen::MatrixXd::Zero(4, 4);
    soft.block(2, 2, 2, 2).setConstant(1.0);
    soft(0, 0) = 0.3;  // below 0.5 * max -> ignored
    CHECK(mask_iou(soft, fp, 0.5) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(mask_iou(soft, fp, 0.2) == doctest::Approx(4.0 / 5.0).epsilon(1e-15));
}

TEST_CASE("input-space inversion returns a valid trigger and is deterministic") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = quick_model(ds);
    InversionConfig cfg;
    cfg.steps = 10;
    cfg.batch = 10;
    auto [trig, score] = neural_cleanse_regression(model, ds.subset(Split::Benign), 0.01, cfg);
    CHECK(trig.mask.minCoeff() >= 0.0);
    CHECK(trig.mask.maxCoeff() <= 1.0);
    CHECK(trig.pattern.minCoeff() >= 0.0);
    CHECK(trig.pattern.maxCoeff() <= 1.0);
    CHECK(trig.target.size() == ds.d);
    CHECK(score == doctest::Approx(trig.mask_mass).epsilon(1e-12));
    auto [trig2, score2] = neural_cleanse_regression(model, ds.subset(Split::Benign), 0.01, cfg);
    CHECK(score == score2);
}

TEST_CASE("feature-space inversion respects the constraint bookkeeping") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = quick_model(ds);
    InversionConfig cfg;
    cfg.steps = 8;
    cfg.batch = 10;
    cfg.max_escalations = 2;
    auto [trig, score] = feature_re_regression(model, ds.subset(Split::Benign), 1.0, 1e9, 1e9, cfg);
    // With vacuous constraints the result must be feasible immediately.
    CHECK(trig.feasible);
    CHECK(trig.feature_mask.size() == model.m);
    CHECK(trig.feature_mask.minCoeff() >= 0.0);
    CHECK(trig.feature_mask.maxCoeff() <= 1.0);
    CHECK(trig.target.size() == ds.d);
    CHECK(score >= 0.0);
    REQUIRE(trig.generator != nullptr);
}

TEST_CASE("fine pruning zeroes exactly the requested unit count") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = quick_model(ds);
    mitigate::MitigateConfig mc;
    mc.steps = 0;  // isolate the pruning itself
    RegressionModel pruned = fine_pruning(model, ds.subset(Split::Benign), 0.25, mc);
    REQUIRE(pruned.feature_mask.has_value());
    long zeros = 0;
    for (long i = 0; i < pruned.feature_mask->size(); ++i)
        if ((*pruned.feature_mask)[i] == 0.0) ++zeros;
    CHECK(zeros == static_cast<long>(0.25 * model.m));

    // Pruned units are exactly zero in the feature output.
    Eigen::MatrixXd f = pruned.forward_features({ds.images[0]});
    for (long i = 0; i < pruned.feature_mask->size(); ++i)
        if ((*pruned.feature_mask)[i] == 0.0) CHECK(f(0, i) == 0.0);

    // The lowest-activation units are the ones pruned.
    Eigen::MatrixXd acts = model.forward_features(ds.subset(Split::Benign).images);
    Eigen::VectorXd mean_abs = acts.cwiseAbs().colwise().mean();
    double max_pruned = 0.0, min_kept = 1e300;
    for (long i = 0; i < pruned.feature_mask->size(); ++i) {
        if ((*pruned.feature_mask)[i] == 0.0)
            max_pruned = std::max(max_pruned, mean_abs[i]);
        else
            min_kept = std::min(min_kept, mean_abs[i]);
    }
    CHECK(max_pruned <= min_kept);
}

TEST_CASE("zero prune fraction with zero steps is the identity") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = quick_model(ds);
    mitigate::MitigateConfig mc;
    mc.steps = 0;
    RegressionModel out = fine_pruning(model, ds.subset(Split::Benign), 0.0, mc);
    Eigen::MatrixXd a = model.predict(ds.subset(Split::Benign).images);
    Eigen::MatrixXd b = out.predict(ds.subset(Split::Benign).images);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("out-of-range prune fractions are rejected") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = quick_model(ds);
    mitigate::MitigateConfig mc;
    CHECK_THROWS_AS(fine_pruning(model, ds.subset(Split::Benign), 1.0, mc), std::invalid_argument);
    CHECK_THROWS_AS(fine_pruning(model, ds.subset(Split::Benign), -0.1, mc), std::invalid_argument);
}
