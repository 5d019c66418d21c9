#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "regguard/model.hpp"

#include <filesystem>

using namespace regguard;

namespace {

LabeledDataset tiny_dataset(long count = 60, std::uint64_t seed = 3) {
    SyntheticTaskSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.w = spec.h = 16;
    return generate_dataset(spec);
}

}  // namespace

TEST_CASE("feature and output shapes match the declared dimensions") {
    LabeledDataset ds = tiny_dataset();
    RegressionModel model = build_model("cnn4", ds.c, ds.h, ds.w, ds.d, 5);
    CHECK(model.m == 128);
    std::vector<Arr> batch(ds.images.begin(), ds.images.begin() + 4);
    Eigen::MatrixXd h = model.forward_features(batch);
    CHECK(h.rows() == 4);
    CHECK(h.cols() == model.m);
    Eigen::MatrixXd y = model.predict(batch);
    CHECK(y.rows() == 4);
    CHECK(y.cols() == ds.d);
    // Head consistency: predict == features * W + b.
    Eigen::MatrixXd manual = (h * model.linear_head().W).rowwise() +
                             model.linear_head().b.transpose();
    CHECK((y - manual).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("training with the same seed is bitwise deterministic") {
    LabeledDataset ds = tiny_dataset();
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.seed = 17;
    RegressionModel a = train_benign(ds, cfg);
    RegressionModel b = train_benign(ds, cfg);
    const auto pa = nn::dump_params(a.all_params());
    const auto pb = nn::dump_params(b.all_params());
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("training reduces the loss against an untrained model") {
    LabeledDataset ds = tiny_dataset(200);
    const Metric metric = metric_for_dim(ds.d);
    RegressionModel untrained = build_model("cnn4", ds.c, ds.h, ds.w, ds.d, 17);
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.seed = 17;
    RegressionModel trained = train_benign(ds, cfg);
    const LabeledDataset test = ds.subset(Split::Test);
    CHECK(evaluate_re(trained, test, metric) < evaluate_re(untrained, test, metric));
}

TEST_CASE("a trained model beats the mean-annotation predictor") {
    LabeledDataset ds = tiny_dataset(300);
    TrainConfig cfg;
    cfg.steps = 250;
    cfg.seed = 23;
    RegressionModel model = train_benign(ds, cfg);
    const LabeledDataset test = ds.subset(Split::Test);
    const Eigen::VectorXd mean_label = ds.subset(Split::Train).labels.colwise().mean();
    const Metric metric = metric_for_dim(ds.d);
    double mean_err = 0.0;
    for (long i = 0; i < test.n(); ++i)
        mean_err += regression_error(metric, mean_label, test.labels.row(i));
    mean_err /= static_cast<double>(test.n());
    CHECK(evaluate_re(model, test, metric) < mean_err);
}

TEST_CASE("input_gradient matches finite differences on a smooth micro model") {
    LabeledDataset ds = tiny_dataset(10);
    RegressionModel model = build_model("micro-tanh", ds.c, ds.h, ds.w, ds.d, 3);
    const Arr& x = ds.images[0];
    Arr grad = model.input_gradient(x);
    REQUIRE(grad.size() == x.size());
    auto sum_outputs = [&](const Arr& img) { return model.predict_one(img).sum(); };
    const double step = 1e-5;
    for (Eigen::Index i : {0L, 101L, 517L, x.size() - 1}) {
        Arr up = x, dn = x;
        up[i] += step;
        dn[i] -= step;
        const double fd = (sum_outputs(up) - sum_outputs(dn)) / (2 * step);
        const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
        CHECK(std::abs(fd - grad[i]) / denom < 1e-3);
    }
}

TEST_CASE("checkpoints round-trip bitwise") {
    LabeledDataset ds = tiny_dataset();
    TrainConfig cfg;
    cfg.steps = 10;
    RegressionModel model = train_benign(ds, cfg);
    model.feature_mask = Arr::Ones(model.m);
    (*model.feature_mask)[5] = 0.0;
    const std::string dir = "test_model_roundtrip";
    save_model(model, dir, {{"note", "unit"}});
    REQUIRE(checkpoint_exists(dir));
    RegressionModel loaded = load_model(dir);
    const auto pa = nn::dump_params(model.all_params());
    const auto pb = nn::dump_params(loaded.all_params());
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
    REQUIRE(loaded.feature_mask.has_value());
    CHECK((*loaded.feature_mask == *model.feature_mask).all());
    bool found_note = false;
    for (const auto& [k, v] : read_manifest(dir))
        if (k == "note" && v == "unit") found_note = true;
    CHECK(found_note);
    std::filesystem::remove_all(dir);
}

TEST_CASE("feature mask zeroes the masked units") {
    LabeledDataset ds = tiny_dataset(10);
    RegressionModel model = build_model("cnn4", ds.c, ds.h, ds.w, ds.d, 5);
    Arr mask = Arr::Ones(model.m);
    mask[0] = mask[64] = 0.0;
    model.feature_mask = mask;
    Eigen::MatrixXd h = model.forward_features({ds.images[0], ds.images[1]});
    CHECK(h.col(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(h.col(64).cwiseAbs().maxCoeff() == 0.0);
    CHECK(h.col(1).cwiseAbs().maxCoeff() > 0.0);
}
