#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "regguard/attacks.hpp"
#include "regguard/mitigate.hpp"
#include "regguard/reverse.hpp"

using namespace regguard;
using namespace regguard::mitigate;

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

TEST_CASE("clone is a deep copy") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = quick_model(ds);
    RegressionModel copy = clone_model(model);
    auto pa = model.all_params();
    auto pb = copy.all_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (long j = 0; j < pa[i].value().size(); ++j)
            CHECK(pa[i].value()[j] == pb[i].value()[j]);
    // Mutating the copy leaves the original untouched.
    pb[0].value()[0] += 1.0;
    CHECK(pa[0].value()[0] != pb[0].value()[0]);
}

TEST_CASE("reversed-poisoned dataset keeps annotations and blends pixels") {
    LabeledDataset ds = tiny_dataset();
    LabeledDataset d_be = ds.subset(Split::Benign);
    RegressionModel model = quick_model(ds);

    // An identity generator makes D_rp pixel-identical to D_be regardless of
    // the attention blend.
    reverse::TriggerGenerator identity("conv3", ds.c, ds.h, ds.w, 5, /*identity_init=*/true);
    LabeledDataset d_rp = build_reversed_poisoned(identity, d_be, model);
    REQUIRE(d_rp.n() == d_be.n());
    CHECK((d_rp.labels - d_be.labels).cwiseAbs().maxCoeff() == 0.0);
    for (long i = 0; i < d_rp.n(); ++i)
        CHECK((d_rp.images[i] - d_be.images[i]).abs().maxCoeff() < 1e-12);

    // A non-identity generator changes pixels but never the annotations, and
    // keeps every pixel within [0,1].
    reverse::TriggerGenerator gen("conv3", ds.c, ds.h, ds.w, 6);
    LabeledDataset d_rp2 = build_reversed_poisoned(gen, d_be, model);
    CHECK((d_rp2.labels - d_be.labels).cwiseAbs().maxCoeff() == 0.0);
    for (long i = 0; i < d_rp2.n(); ++i) {
        CHECK(d_rp2.images[i].minCoeff() >= 0.0);
        CHECK(d_rp2.images[i].maxCoeff() <= 1.0);
    }
}

TEST_CASE("zero mitigation steps returns the model unchanged") {
    LabeledDataset ds = tiny_dataset();
    LabeledDataset d_be = ds.subset(Split::Benign);
    RegressionModel model = quick_model(ds);
    reverse::TriggerGenerator gen("conv3", ds.c, ds.h, ds.w, 6);
    LabeledDataset d_rp = build_reversed_poisoned(gen, d_be, model);

    MitigateConfig mc;
    mc.steps = 0;
    RegressionModel out = unlearn(model, d_be, d_rp, mc);
    auto pa = model.all_params();
    auto pb = out.all_params();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (long j = 0; j < pa[i].value().size(); ++j)
            CHECK(pa[i].value()[j] == pb[i].value()[j]);
}

TEST_CASE("unlearning with an empty reversed set equals plain fine-tuning") {
    LabeledDataset ds = tiny_dataset();
    LabeledDataset d_be = ds.subset(Split::Benign);
    RegressionModel model = quick_model(ds);
    LabeledDataset empty;
    empty.c = ds.c;
    empty.h = ds.h;
    empty.w = ds.w;
    empty.d = ds.d;
    empty.labels = Eigen::MatrixXd::Zero(0, ds.d);

    MitigateConfig mc;
    mc.steps = 8;
    mc.batch = 10;
    RegressionModel a = unlearn(model, d_be, empty, mc);
    RegressionModel b = fine_tune(model, d_be, mc);
    auto pa = a.all_params();
    auto pb = b.all_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (long j = 0; j < pa[i].value().size(); ++j)
            CHECK(pa[i].value()[j] == pb[i].value()[j]);
}

TEST_CASE("unlearning does not mutate its input model") {
    LabeledDataset ds = tiny_dataset();
    LabeledDataset d_be = ds.subset(Split::Benign);
    RegressionModel model = quick_model(ds);
    reverse::TriggerGenerator gen("conv3", ds.c, ds.h, ds.w, 6);
    LabeledDataset d_rp = build_reversed_poisoned(gen, d_be, model);
    Eigen::MatrixXd before = model.predict(d_be.images);

    MitigateConfig mc;
    mc.steps = 6;
    mc.batch = 10;
    unlearn(model, d_be, d_rp, mc);
    Eigen::MatrixXd after = model.predict(d_be.images);
    CHECK((before - after).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unlearning is deterministic in the seed") {
    LabeledDataset ds = tiny_dataset();
    LabeledDataset d_be = ds.subset(Split::Benign);
    RegressionModel model = quick_model(ds);
    reverse::TriggerGenerator gen("conv3", ds.c, ds.h, ds.w, 6);
    LabeledDataset d_rp = build_reversed_poisoned(gen, d_be, model);

    MitigateConfig mc;
    mc.steps = 6;
    mc.batch = 10;
    RegressionModel a = unlearn(model, d_be, d_rp, mc);
    RegressionModel b = unlearn(model, d_be, d_rp, mc);
    auto pa = a.all_params();
    auto pb = b.all_params();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (long j = 0; j < pa[i].value().size(); ++j)
            CHECK(pa[i].value()[j] == pb[i].value()[j]);
}

TEST_CASE("defending attack error matches the direct computation") {
    LabeledDataset ds = tiny_dataset(30);
    RegressionModel model = quick_model(ds, 10);
    LabeledDataset pd = ds.subset(Split::Test);
    double got = defending_attack_error(model, pd, metric_for_dim(ds.d));
    double want = 0.0;
    for (long i = 0; i < pd.n(); ++i)
        want += regression_error(metric_for_dim(ds.d), model.predict_one(pd.images[i]),
                                 pd.labels.row(i));
    want /= static_cast<double>(pd.n());
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("unlearning with the true trigger lowers the defending attack error") {
    // Train a backdoored model, then unlearn with a reversed-poisoned set
    // built from the *true* trigger: the attack error on triggered images
    // must drop relative to the backdoored model.
    LabeledDataset ds = tiny_dataset(220, 16, 9);
    attacks::TriggerSpec spec;
    spec.kind = attacks::TriggerKind::BadNets;
    spec.target = Eigen::Vector2d(0.9, 0.9);
    spec.rate = 0.10;
    spec.seed = 4;
    attacks::BackdoorTrainConfig tc;
    tc.steps = 120;
    tc.batch = 16;
    tc.attack_fail_ae = 1e9;  // tiny run: never abort
    attacks::AttackTrainResult attacked = attacks::train_backdoored(ds, spec, tc);

    LabeledDataset d_be = ds.subset(Split::Benign);
    // D_rp from the true trigger with correct annotations.
    LabeledDataset d_rp = d_be;
    for (long i = 0; i < d_rp.n(); ++i)
        d_rp.images[i] = attacks::apply_trigger(spec, d_rp.images[i], ds.c, ds.h, ds.w);

    LabeledDataset pd_te = ds.subset(Split::Test);
    for (long i = 0; i < pd_te.n(); ++i)
        pd_te.images[i] = attacks::apply_trigger(spec, pd_te.images[i], ds.c, ds.h, ds.w);

    MitigateConfig mc;
    mc.steps = 60;
    mc.batch = 16;
    double pre = defending_attack_error(attacked.model, pd_te, metric_for_dim(ds.d));
    RegressionModel cured = unlearn(attacked.model, d_be, d_rp, mc);
    double post = defending_attack_error(cured, pd_te, metric_for_dim(ds.d));
    CHECK(post < pre);
}
