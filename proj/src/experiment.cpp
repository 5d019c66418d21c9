#include "regguard/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace regguard::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

std::string vec_str(const Eigen::VectorXd& v) {
    std::ostringstream out;
    out.precision(17);
    for (long i = 0; i < v.size(); ++i) out << (i ? ";" : "") << v[i];
    return out.str();
}

Eigen::VectorXd parse_vec(const std::string& s) {
    std::vector<double> vals;
    size_t pos = 0;
    while (pos <= s.size() && !s.empty()) {
        size_t semi = s.find(';', pos);
        if (semi == std::string::npos) semi = s.size();
        vals.push_back(std::stod(s.substr(pos, semi - pos)));
        pos = semi + 1;
    }
    return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<long>(vals.size()));
}

}  // namespace

Eigen::VectorXd ExperimentConfig::effective_target() const {
    if (target.size() > 0) return target;
    return Eigen::VectorXd::Constant(task.label_dim(), 0.9);
}

ExperimentConfig ExperimentConfig::from_kv(const config::KV& kv) {
    ExperimentConfig c;
    c.task.kind = kv.get_str("task.kind", c.task.kind);
    c.task.count = kv.get_int("task.count", static_cast<int>(c.task.count));
    c.task.w = c.task.h = kv.get_int("task.image", c.task.w);
    c.task.seed = kv.get_u64("task.seed", c.task.seed);
    c.task.noise_level = kv.get_double("task.noise", c.task.noise_level);
    c.task.exposure_max = kv.get_double("task.exposure", c.task.exposure_max);
    if (kv.has("attacks")) c.attack_kinds = kv.get_list("attacks");
    c.n_benign = kv.get_int("zoo.benign", c.n_benign);
    c.n_backdoored = kv.get_int("zoo.backdoored", c.n_backdoored);
    if (kv.has("attack.target")) c.target = parse_vec(kv.get_str("attack.target"));
    c.attack_rate = kv.get_double("attack.rate", c.attack_rate);
    c.train.steps = kv.get_int("train.steps", c.train.steps);
    c.train.batch = kv.get_int("train.batch", c.train.batch);
    c.train.lr = kv.get_double("train.lr", c.train.lr);
    c.rev.lambda1 = kv.get_double("reverse.lambda1", c.rev.lambda1);
    c.rev.lambda2 = kv.get_double("reverse.lambda2", c.rev.lambda2);
    c.rev.steps = kv.get_int("reverse.steps", c.rev.steps);
    c.rev.pretrain_steps = kv.get_int("reverse.pretrain", c.rev.pretrain_steps);
    c.rev.batch = kv.get_int("reverse.batch", c.rev.batch);
    c.rev.lr = kv.get_double("reverse.lr", c.rev.lr);
    c.rev.use_momentum = kv.get_bool("reverse.momentum", c.rev.use_momentum);
    c.rev.identity_init = kv.get_bool("reverse.identity_init", c.rev.identity_init);
    c.epsilon = kv.get_double("identify.epsilon", c.epsilon);
    c.run_mitigation = kv.get_bool("mitigate.enabled", c.run_mitigation);
    c.plots = kv.get_bool("plots", c.plots);
    c.out_dir = kv.get_str("out", c.out_dir);
    c.seed = kv.get_u64("seed", c.seed);
    for (const auto& kind : c.attack_kinds) attacks::kind_from_name(kind);  // validate early
    if (c.n_benign < 0 || c.n_backdoored < 0)
        throw std::runtime_error("zoo sizes must be nonnegative");
    return c;
}

config::KV ExperimentConfig::to_kv() const {
    config::KV kv;
    kv.set("task.kind", task.kind);
    kv.set("task.count", std::to_string(task.count));
    kv.set("task.image", std::to_string(task.w));
    kv.set("task.seed", std::to_string(task.seed));
    kv.set("task.noise", fmt(task.noise_level));
    kv.set("task.exposure", fmt(task.exposure_max));
    std::string kinds;
    for (const auto& k : attack_kinds) kinds += (kinds.empty() ? "" : ",") + k;
    kv.set("attacks", kinds);
    kv.set("zoo.benign", std::to_string(n_benign));
    kv.set("zoo.backdoored", std::to_string(n_backdoored));
    if (target.size() > 0) kv.set("attack.target", vec_str(target));
    kv.set("attack.rate", fmt(attack_rate));
    kv.set("train.steps", std::to_string(train.steps));
    kv.set("train.batch", std::to_string(train.batch));
    kv.set("train.lr", fmt(train.lr));
    kv.set("reverse.lambda1", fmt(rev.lambda1));
    kv.set("reverse.lambda2", fmt(rev.lambda2));
    kv.set("reverse.steps", std::to_string(rev.steps));
    kv.set("reverse.pretrain", std::to_string(rev.pretrain_steps));
    kv.set("reverse.batch", std::to_string(rev.batch));
    kv.set("reverse.lr", fmt(rev.lr));
    kv.set("reverse.momentum", rev.use_momentum ? "1" : "0");
    kv.set("reverse.identity_init", rev.identity_init ? "1" : "0");
    kv.set("identify.epsilon", fmt(epsilon));
    kv.set("mitigate.enabled", run_mitigation ? "1" : "0");
    kv.set("plots", plots ? "1" : "0");
    kv.set("out", out_dir);
    kv.set("seed", std::to_string(seed));
    return kv;
}

namespace {

struct ZooEntry {
    std::string id;
    std::string attack;  // empty = benign
    std::uint64_t seed = 0;
};

std::vector<ZooEntry> plan_zoo(const ExperimentConfig& c) {
    std::vector<ZooEntry> zoo;
    for (int i = 0; i < c.n_benign; ++i)
        zoo.push_back({"benign_" + std::to_string(i), "", c.seed + 100 + static_cast<unsigned>(i)});
    for (size_t a = 0; a < c.attack_kinds.size(); ++a)
        for (int i = 0; i < c.n_backdoored; ++i)
            zoo.push_back({c.attack_kinds[a] + "_" + std::to_string(i), c.attack_kinds[a],
                           c.seed + 1000 * (a + 1) + static_cast<unsigned>(i)});
    return zoo;
}

double manifest_double(const std::vector<std::pair<std::string, std::string>>& manifest,
                       const std::string& key, double fallback) {
    for (const auto& [k, v] : manifest)
        if (k == key) return std::stod(v);
    return fallback;
}

}  // namespace

ExperimentRecord run_experiment(const ExperimentConfig& config, bool resume) {
    fs::create_directories(config.out_dir);
    ExperimentRecord record;
    json& doc = record.doc;
    const config::KV config_kv = config.to_kv();
    for (const auto& [k, v] : config_kv.values()) doc["config"][k] = v;
    doc["zoo"] = json::array();
    doc["verdicts"] = json::array();
    doc["confusion"] = json::object();
    doc["roc_auc"] = json::object();
    doc["mitigation"] = nullptr;
    doc["artifacts"] = json::array();
    doc["failures"] = json::array();
    auto artifact = [&](const std::string& path) { doc["artifacts"].push_back(path); };

    // Dataset (generation is deterministic, so load-vs-generate is identical).
    const std::string data_dir = config.out_dir + "/data";
    LabeledDataset dataset;
    if (resume && fs::exists(data_dir + "/index.csv")) {
        dataset = load_dataset(data_dir);
    } else {
        dataset = generate_dataset(config.task);
        save_dataset(dataset, data_dir);
    }
    artifact(data_dir);
    const LabeledDataset d_be = dataset.subset(Split::Benign);
    const Metric metric = metric_for_dim(dataset.d);
    const Eigen::VectorXd y_t = config.effective_target();

    const auto zoo = plan_zoo(config);
    std::vector<std::string> score_attacks;  // parallel to scores
    std::vector<double> scores;
    std::vector<bool> truths;
    std::vector<identify::Verdict> verdicts;

    for (const auto& entry : zoo) {
        const std::string model_dir = config.out_dir + "/models/" + entry.id;
        const std::string reverse_dir = config.out_dir + "/reverse/" + entry.id;
        json zj;
        zj["id"] = entry.id;
        zj["role"] = entry.attack.empty() ? "benign" : "backdoored";
        zj["attack"] = entry.attack;
        zj["seed"] = entry.seed;
        try {
            RegressionModel model;
            double re = 0.0, ae = 0.0;
            if (resume && checkpoint_exists(model_dir)) {
                model = load_model(model_dir);
                const auto manifest = read_manifest(model_dir);
                re = manifest_double(manifest, "re", 0.0);
                ae = manifest_double(manifest, "ae", 0.0);
            } else {
                attacks::BackdoorTrainConfig tc = config.train;
                tc.seed = entry.seed;
                if (entry.attack.empty()) {
                    model = train_benign(dataset, tc);
                    re = evaluate_re(model, dataset.subset(Split::Benign), metric);
                } else {
                    attacks::TriggerSpec spec;
                    spec.kind = attacks::kind_from_name(entry.attack);
                    spec.target = y_t;
                    spec.rate = config.attack_rate;
                    spec.seed = entry.seed;
                    auto result = attacks::train_backdoored(dataset, spec, tc);
                    model = result.model;
                    re = result.re;
                    ae = result.ae;
                    result.spec.save(model_dir + "/trigger.txt");
                }
                save_model(model, model_dir, {{"re", fmt(re)}, {"ae", fmt(ae)}});
            }
            zj["re"] = re;
            zj["ae"] = ae;
            artifact(model_dir);

            double score;
            const std::string summary_path = reverse_dir + "/summary.txt";
            if (resume && fs::exists(summary_path)) {
                score = config::KV::parse_file(summary_path).get_double("perturbation_score", -1.0);
            } else {
                reverse::ReverseConfig rc = config.rev;
                rc.seed = config.rev.seed ^ (entry.seed * 0x100000001b3ull);
                reverse::ReverseResult rr = reverse::reverse_engineer(model, d_be, rc);
                rr.save(reverse_dir, model, d_be);
                score = rr.perturbation_score;
            }
            artifact(reverse_dir);

            identify::Verdict v = identify::identify_score(score, d_be, config.epsilon, entry.id);
            verdicts.push_back(v);
            scores.push_back(score);
            truths.push_back(!entry.attack.empty());
            score_attacks.push_back(entry.attack);

            json vj;
            vj["model"] = v.model_id;
            vj["score"] = v.score;
            vj["threshold"] = v.threshold;
            vj["epsilon"] = v.epsilon;
            vj["backdoored"] = v.backdoored;
            vj["truth"] = !entry.attack.empty();
            doc["verdicts"].push_back(vj);
        } catch (const std::exception& e) {
            doc["failures"].push_back({{"model", entry.id}, {"error", e.what()}});
        }
        doc["zoo"].push_back(zj);
    }

    // Confusion and ROC-AUC, overall and per attack kind.
    auto confusion_json = [&](const std::vector<std::pair<identify::Verdict, bool>>& labeled) {
        const auto s = identify::confusion_stats(labeled);
        return json{{"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}, {"tn", s.tn},
                    {"accuracy", s.accuracy}};
    };
    std::vector<std::pair<identify::Verdict, bool>> all_labeled;
    std::vector<double> benign_scores, backdoored_scores;
    for (size_t i = 0; i < verdicts.size(); ++i) {
        all_labeled.emplace_back(verdicts[i], truths[i]);
        (truths[i] ? backdoored_scores : benign_scores).push_back(scores[i]);
    }
    if (!all_labeled.empty()) doc["confusion"]["overall"] = confusion_json(all_labeled);
    if (!benign_scores.empty() && !backdoored_scores.empty())
        doc["roc_auc"]["overall"] = identify::roc_auc(backdoored_scores, benign_scores);
    for (const auto& kind : config.attack_kinds) {
        std::vector<std::pair<identify::Verdict, bool>> labeled;
        std::vector<double> attack_scores;
        for (size_t i = 0; i < verdicts.size(); ++i) {
            if (score_attacks[i].empty())
                labeled.emplace_back(verdicts[i], false);
            else if (score_attacks[i] == kind) {
                labeled.emplace_back(verdicts[i], true);
                attack_scores.push_back(scores[i]);
            }
        }
        if (!labeled.empty()) doc["confusion"][kind] = confusion_json(labeled);
        if (!attack_scores.empty() && !benign_scores.empty())
            doc["roc_auc"][kind] = identify::roc_auc(attack_scores, benign_scores);
    }

    // Mitigation on the first backdoored model of the first attack kind.
    if (config.run_mitigation && !config.attack_kinds.empty() && config.n_backdoored > 0) {
        const std::string id = config.attack_kinds[0] + "_0";
        try {
            const std::string model_dir = config.out_dir + "/models/" + id;
            const std::string reverse_dir = config.out_dir + "/reverse/" + id;
            RegressionModel model = load_model(model_dir);
            attacks::TriggerSpec spec = attacks::TriggerSpec::load(model_dir + "/trigger.txt",
                                                                   dataset.c, dataset.h, dataset.w);
            reverse::TriggerGenerator gen =
                reverse::TriggerGenerator::load(reverse_dir + "/generator");

            // Held-out poisoned sets: triggered test images with the target
            // (for AE) and with the correct annotations (for DAE).
            LabeledDataset pd_te = dataset.subset(Split::Test);
            for (auto& img : pd_te.images)
                img = attacks::apply_trigger(spec, img, dataset.c, dataset.h, dataset.w);
            const LabeledDataset d_te = dataset.subset(Split::Test);

            mitigate::MitigateConfig mc;
            mc.seed = config.seed + 77;
            mc.steps = std::max(1, config.train.steps / 5);
            mc.lr = config.train.lr * 0.1;
            const LabeledDataset d_rp = mitigate::build_reversed_poisoned(gen, d_be, model);
            RegressionModel tuned = mitigate::unlearn(model, d_be, d_rp, mc);

            mitigate::MitigationReport rep;
            rep.method = "unlearn";
            rep.pre_ae = attacks::attack_error(model, pd_te.images, spec.target, metric);
            rep.post_ae = attacks::attack_error(tuned, pd_te.images, spec.target, metric);
            rep.pre_dae = mitigate::defending_attack_error(model, pd_te, metric);
            rep.post_dae = mitigate::defending_attack_error(tuned, pd_te, metric);
            rep.pre_re = evaluate_re(model, d_te, metric);
            rep.post_re = evaluate_re(tuned, d_te, metric);
            const std::string tuned_dir = config.out_dir + "/models/" + id + "_unlearned";
            save_model(tuned, tuned_dir);
            artifact(tuned_dir);
            doc["mitigation"] = {{"model", id},          {"method", rep.method},
                                 {"pre_ae", rep.pre_ae}, {"post_ae", rep.post_ae},
                                 {"pre_dae", rep.pre_dae}, {"post_dae", rep.post_dae},
                                 {"pre_re", rep.pre_re}, {"post_re", rep.post_re}};
        } catch (const std::exception& e) {
            doc["failures"].push_back({{"model", id}, {"error", e.what()}});
        }
    }

    emit_report(record, config.out_dir + "/report.json");
    return record;
}

void emit_report(const ExperimentRecord& record, const std::string& path) {
    if (!fs::path(path).parent_path().empty())
        fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    out << record.doc.dump(2) << "\n";
}

bool validate_report(const nlohmann::json& doc, std::string* error) {
    auto fail = [&](const std::string& msg) {
        if (error) *error = msg;
        return false;
    };
    const char* object_keys[] = {"config", "confusion", "roc_auc"};
    for (const char* key : object_keys) {
        if (!doc.contains(key) || !doc[key].is_object())
            return fail(std::string("missing or non-object key: ") + key);
    }
    const char* array_keys[] = {"zoo", "verdicts", "artifacts", "failures"};
    for (const char* key : array_keys) {
        if (!doc.contains(key) || !doc[key].is_array())
            return fail(std::string("missing or non-array key: ") + key);
    }
    if (!doc.contains("mitigation") || !(doc["mitigation"].is_object() || doc["mitigation"].is_null()))
        return fail("mitigation must be an object or null");
    for (const auto& z : doc["zoo"]) {
        if (!z.contains("id") || !z["id"].is_string()) return fail("zoo entry missing id");
        if (!z.contains("role") || !z["role"].is_string()) return fail("zoo entry missing role");
        if (!z.contains("seed") || !z["seed"].is_number()) return fail("zoo entry missing seed");
    }
    for (const auto& v : doc["verdicts"]) {
        for (const char* key : {"score", "threshold", "epsilon"})
            if (!v.contains(key) || !v[key].is_number())
                return fail(std::string("verdict missing numeric ") + key);
        for (const char* key : {"backdoored", "truth"})
            if (!v.contains(key) || !v[key].is_boolean())
                return fail(std::string("verdict missing boolean ") + key);
        if (!v.contains("model") || !v["model"].is_string()) return fail("verdict missing model");
    }
    for (const auto& [name, c] : doc["confusion"].items()) {
        for (const char* key : {"tp", "fp", "fn", "tn", "accuracy"})
            if (!c.contains(key) || !c[key].is_number())
                return fail("confusion '" + name + "' missing " + key);
    }
    for (const auto& [name, v] : doc["roc_auc"].items()) {
        if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0)
            return fail("roc_auc '" + name + "' out of range");
    }
    for (const auto& a : doc["artifacts"])
        if (!a.is_string()) return fail("artifact entries must be strings");
    return true;
}

}  // namespace regguard::experiment
