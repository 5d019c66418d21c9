#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "regguard/experiment.hpp"

#include <filesystem>
#include <fstream>

using namespace regguard;
using namespace regguard::experiment;

namespace {

ExperimentConfig tiny_config(const std::string& out) {
    ExperimentConfig c;
    c.task.count = 140;
    c.task.w = c.task.h = 16;
    c.task.seed = 5;
    c.n_benign = 1;
    c.n_backdoored = 1;
    c.train.steps = 40;
    c.train.batch = 10;
    c.train.attack_fail_ae = 1e9;
    c.rev.steps = 5;
    c.rev.pretrain_steps = 5;
    c.rev.batch = 8;
    c.out_dir = out;
    return c;
}

}  // namespace

TEST_CASE("config round-trips through the key-value form") {
    ExperimentConfig c;
    c.task.kind = "pose-3d";
    c.task.count = 123;
    c.task.w = c.task.h = 24;
    c.attack_kinds = {"badnets", "sig"};
    c.n_benign = 2;
    c.n_backdoored = 3;
    c.attack_rate = 0.07;
    c.train.steps = 99;
    c.rev.lambda1 = 11.0;
    c.rev.lambda2 = 222.0;
    c.rev.use_momentum = false;
    c.epsilon = 0.05;
    c.run_mitigation = true;
    c.out_dir = "somewhere";
    c.seed = 42;

    ExperimentConfig back = ExperimentConfig::from_kv(c.to_kv());
    CHECK(back.task.kind == "pose-3d");
    CHECK(back.task.count == 123);
    CHECK(back.task.w == 24);
    CHECK(back.attack_kinds == c.attack_kinds);
    CHECK(back.n_benign == 2);
    CHECK(back.n_backdoored == 3);
    CHECK(back.attack_rate == 0.07);
    CHECK(back.train.steps == 99);
    CHECK(back.rev.lambda1 == 11.0);
    CHECK(back.rev.lambda2 == 222.0);
    CHECK(back.rev.use_momentum == false);
    CHECK(back.epsilon == 0.05);
    CHECK(back.run_mitigation == true);
    CHECK(back.out_dir == "somewhere");
    CHECK(back.seed == 42);
}

TEST_CASE("the default target is 0.9 per output dimension") {
    ExperimentConfig c;
    c.task.kind = "pose-3d";
    Eigen::VectorXd t = c.effective_target();
    REQUIRE(t.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(t[i] == 0.9);
}

TEST_CASE("malformed config values are rejected with context") {
    config::KV kv = config::KV::parse_string("task.count = notanumber\n");
    CHECK_THROWS(ExperimentConfig::from_kv(kv));
}

TEST_CASE("unknown attack kinds fail early") {
    config::KV kv = config::KV::parse_string("attacks = sideways\n");
    CHECK_THROWS(ExperimentConfig::from_kv(kv));
}

TEST_CASE("a small experiment produces a valid report with the right cardinality") {
    std::string out = "test_exp_out";
    std::filesystem::remove_all(out);
    ExperimentConfig c = tiny_config(out);
    ExperimentRecord rec = run_experiment(c, /*resume=*/false);

    std::string err;
    CHECK(validate_report(rec.doc, &err));
    INFO(err);
    CHECK(rec.doc["zoo"].size() == 2);       // 1 benign + 1 backdoored
    CHECK(rec.doc["verdicts"].size() == 2);
    CHECK(rec.doc["failures"].empty());
    CHECK(rec.doc["confusion"].contains("overall"));
    CHECK(rec.doc["roc_auc"].contains("overall"));
    double auc = rec.doc["roc_auc"]["overall"].get<double>();
    CHECK(auc >= 0.0);
    CHECK(auc <= 1.0);

    emit_report(rec, out + "/report.json");
    CHECK(std::filesystem::exists(out + "/report.json"));

    // Resuming reuses every checkpoint and reproduces the metrics exactly.
    ExperimentRecord rec2 = run_experiment(c, /*resume=*/true);
    CHECK(rec.doc["verdicts"] == rec2.doc["verdicts"]);
    CHECK(rec.doc["roc_auc"] == rec2.doc["roc_auc"]);
    CHECK(rec.doc["confusion"] == rec2.doc["confusion"]);
    std::filesystem::remove_all(out);
}

TEST_CASE("report validation rejects structural damage") {
    nlohmann::json doc;
    std::string err;
    CHECK(!validate_report(doc, &err));
    CHECK(!err.empty());

    doc["config"] = nlohmann::json::object();
    doc["confusion"] = nlohmann::json::object();
    doc["roc_auc"] = nlohmann::json::object();
    doc["zoo"] = nlohmann::json::array();
    doc["verdicts"] = nlohmann::json::array();
    doc["artifacts"] = nlohmann::json::array();
    doc["failures"] = nlohmann::json::array();
    doc["mitigation"] = nullptr;
    CHECK(validate_report(doc, &err));

    nlohmann::json bad = doc;
    bad["roc_auc"]["overall"] = 1.5;  // out of range
    CHECK(!validate_report(bad, &err));

    bad = doc;
    bad.erase("verdicts");
    CHECK(!validate_report(bad, &err));

    bad = doc;
    bad["mitigation"] = 3;  // neither object nor null
    CHECK(!validate_report(bad, &err));
}
