// Command-line harness: dataset generation, model training, attacks,
// diagnostics, trigger reverse engineering, identification, mitigation,
// baselines, and end-to-end experiment runs.
//
// Exit codes: 0 success, 1 configuration error, 2 partial failure.

#include <CLI11.hpp>

#include "regguard/attacks.hpp"
#include "regguard/baselines.hpp"
#include "regguard/diagnostics.hpp"
#include "regguard/experiment.hpp"
#include "regguard/identify.hpp"
#include "regguard/mitigate.hpp"
#include "regguard/reverse.hpp"

#include <filesystem>
#include <iostream>

namespace {

using namespace regguard;

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

attacks::TriggerSpec make_spec(const std::string& kind, const std::string& target, double rate,
                               std::uint64_t seed, int d) {
    attacks::TriggerSpec spec;
    spec.kind = attacks::kind_from_name(kind);
    spec.target = target.empty() ? Eigen::VectorXd::Constant(d, 0.9) : parse_vec(target);
    spec.rate = rate;
    spec.seed = seed;
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Backdoor defense workbench for deep regression models"};
    app.require_subcommand(1);

    // generate-data
    auto* gen_cmd = app.add_subcommand("generate-data", "Generate a synthetic dataset");
    std::string gen_out = "out/data", gen_kind = "gaze-2d";
    int gen_count = 2000, gen_image = 32;
    std::uint64_t gen_seed = 1;
    double gen_noise = 0.55;
    double gen_exposure = 0.40;
    gen_cmd->add_option("--out", gen_out, "Output directory");
    gen_cmd->add_option("--kind", gen_kind, "Task kind: gaze-2d or pose-3d");
    gen_cmd->add_option("--count", gen_count, "Sample count");
    gen_cmd->add_option("--image", gen_image, "Image side length");
    gen_cmd->add_option("--seed", gen_seed, "Generation seed");
    gen_cmd->add_option("--noise", gen_noise, "Background noise level");
    gen_cmd->add_option("--exposure", gen_exposure, "Max per-image brightness offset");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a benign model");
    std::string train_data = "out/data", train_out = "out/models/benign_0";
    TrainConfig train_cfg;
    train_cmd->add_option("--data", train_data, "Dataset directory");
    train_cmd->add_option("--out", train_out, "Model checkpoint directory");
    train_cmd->add_option("--steps", train_cfg.steps, "Training steps");
    train_cmd->add_option("--batch", train_cfg.batch, "Batch size");
    train_cmd->add_option("--lr", train_cfg.lr, "Learning rate");
    train_cmd->add_option("--seed", train_cfg.seed, "Training seed");

    // attack
    auto* attack_cmd = app.add_subcommand("attack", "Train a backdoored model");
    std::string atk_data = "out/data", atk_out = "out/models/badnets_0", atk_kind = "badnets";
    std::string atk_target;
    double atk_rate = 0.05, atk_adaptive = 0.0;
    attacks::BackdoorTrainConfig atk_cfg;
    attack_cmd->add_option("--data", atk_data, "Dataset directory");
    attack_cmd->add_option("--out", atk_out, "Model checkpoint directory");
    attack_cmd->add_option("--kind", atk_kind,
                           "Trigger kind: badnets, clean_label, wanet, input_aware, blend, sig");
    attack_cmd->add_option("--target", atk_target, "Target vector, semicolon separated");
    attack_cmd->add_option("--rate", atk_rate, "Poisoning rate");
    attack_cmd->add_option("--adaptive", atk_adaptive, "Adaptive loss weight (0 disables)");
    attack_cmd->add_option("--steps", atk_cfg.steps, "Training steps");
    attack_cmd->add_option("--batch", atk_cfg.batch, "Batch size");
    attack_cmd->add_option("--lr", atk_cfg.lr, "Learning rate");
    attack_cmd->add_option("--seed", atk_cfg.seed, "Training seed");

    // diagnose
    auto* diag_cmd = app.add_subcommand("diagnose", "Feature-space diagnostics for a model");
    std::string diag_data = "out/data", diag_model, diag_trigger, diag_out = "out/diagnostics";
    bool diag_plots = false;
    diag_cmd->add_option("--data", diag_data, "Dataset directory");
    diag_cmd->add_option("--model", diag_model, "Model checkpoint directory")->required();
    diag_cmd->add_option("--trigger", diag_trigger, "Trigger spec file (trigger.txt)")->required();
    diag_cmd->add_option("--out", diag_out, "Output directory for the angle scatter");
    diag_cmd->add_flag("--plots", diag_plots, "Also render a scatter image");

    // reverse
    auto* rev_cmd = app.add_subcommand("reverse", "Reverse engineer the trigger function");
    std::string rev_data = "out/data", rev_model, rev_out = "out/reverse/model";
    reverse::ReverseConfig rev_cfg;
    bool rev_no_momentum = false;
    rev_cmd->add_option("--data", rev_data, "Dataset directory");
    rev_cmd->add_option("--model", rev_model, "Model checkpoint directory")->required();
    rev_cmd->add_option("--out", rev_out, "Output directory");
    rev_cmd->add_option("--lambda1", rev_cfg.lambda1, "Output-variance weight");
    rev_cmd->add_option("--lambda2", rev_cfg.lambda2, "Feature-regularizer weight");
    rev_cmd->add_option("--steps", rev_cfg.steps, "Optimization steps");
    rev_cmd->add_option("--pretrain", rev_cfg.pretrain_steps, "Generator pretraining steps");
    rev_cmd->add_option("--identity-init", rev_cfg.identity_init,
                        "Start the generator at the exact identity (1/0)");
    rev_cmd->add_option("--batch", rev_cfg.batch, "Batch size");
    rev_cmd->add_option("--lr", rev_cfg.lr, "Learning rate");
    rev_cmd->add_option("--seed", rev_cfg.seed, "Seed");
    rev_cmd->add_flag("--no-momentum", rev_no_momentum, "Disable the attention blend");

    // identify
    auto* id_cmd = app.add_subcommand("identify", "Apply the threshold rule to a reverse run");
    std::string id_data = "out/data", id_reverse;
    double id_epsilon = 0.03;
    id_cmd->add_option("--data", id_data, "Dataset directory");
    id_cmd->add_option("--reverse", id_reverse, "Reverse-run output directory")->required();
    id_cmd->add_option("--epsilon", id_epsilon, "Threshold fraction");

    // mitigate
    auto* mit_cmd = app.add_subcommand("mitigate", "Unlearn a backdoor with the reversed trigger");
    std::string mit_data = "out/data", mit_model, mit_reverse, mit_trigger, mit_out;
    mitigate::MitigateConfig mit_cfg;
    mit_cmd->add_option("--data", mit_data, "Dataset directory");
    mit_cmd->add_option("--model", mit_model, "Model checkpoint directory")->required();
    mit_cmd->add_option("--reverse", mit_reverse, "Reverse-run output directory")->required();
    mit_cmd->add_option("--trigger", mit_trigger, "True trigger spec for evaluation")->required();
    mit_cmd->add_option("--out", mit_out, "Tuned model output directory")->required();
    mit_cmd->add_option("--steps", mit_cfg.steps, "Fine-tuning steps");
    mit_cmd->add_option("--lr", mit_cfg.lr, "Fine-tuning learning rate");
    mit_cmd->add_option("--seed", mit_cfg.seed, "Seed");

    // baseline
    auto* base_cmd = app.add_subcommand("baseline", "Run a comparison defense");
    std::string base_data = "out/data", base_model, base_method = "neural-cleanse", base_out;
    double base_lambda = 1e-3, base_prune = 0.2;
    baselines::InversionConfig base_cfg;
    base_cmd->add_option("--data", base_data, "Dataset directory");
    base_cmd->add_option("--model", base_model, "Model checkpoint directory")->required();
    base_cmd->add_option("--method", base_method,
                         "neural-cleanse, feature-re, or fine-pruning");
    base_cmd->add_option("--out", base_out, "Output directory");
    base_cmd->add_option("--lambda", base_lambda, "Mask mass weight (neural-cleanse)");
    base_cmd->add_option("--prune-fraction", base_prune, "Pruned unit fraction (fine-pruning)");
    base_cmd->add_option("--steps", base_cfg.steps, "Optimization steps");
    base_cmd->add_option("--seed", base_cfg.seed, "Seed");

    // report
    auto* rep_cmd = app.add_subcommand("report", "Validate and summarize an experiment report");
    std::string rep_in = "out/report.json";
    rep_cmd->add_option("--in", rep_in, "Report JSON path");

    // run
    auto* run_cmd = app.add_subcommand("run", "End-to-end experiment from a config file");
    std::string run_config, run_out, run_seed;
    int run_workers = 1;
    bool run_resume = false, run_plots = false;
    run_cmd->add_option("--config", run_config, "Flat key=value config file")->required();
    run_cmd->add_option("--out", run_out, "Output directory override");
    run_cmd->add_option("--seed", run_seed, "Global seed override");
    run_cmd->add_option("--workers", run_workers, "Worker count (model pipelines run sequentially)");
    run_cmd->add_flag("--resume", run_resume, "Skip completed stages");
    run_cmd->add_flag("--plots", run_plots, "Emit plot artifacts");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen_cmd) {
            SyntheticTaskSpec spec;
            spec.kind = gen_kind;
            spec.count = gen_count;
            spec.w = spec.h = gen_image;
            spec.seed = gen_seed;
            spec.noise_level = gen_noise;
            spec.exposure_max = gen_exposure;
            save_dataset(generate_dataset(spec), gen_out);
            std::cout << "wrote " << gen_count << " samples to " << gen_out << "\n";
        } else if (*train_cmd) {
            LabeledDataset ds = load_dataset(train_data);
            RegressionModel model = train_benign(ds, train_cfg);
            const double re = evaluate_re(model, ds.subset(Split::Benign), metric_for_dim(ds.d));
            save_model(model, train_out, {{"re", std::to_string(re)}});
            std::cout << "benign model saved to " << train_out << " (RE " << re << ")\n";
        } else if (*attack_cmd) {
            LabeledDataset ds = load_dataset(atk_data);
            auto spec = make_spec(atk_kind, atk_target, atk_rate, atk_cfg.seed, ds.d);
            std::optional<double> adp;
            if (atk_adaptive != 0.0) adp = atk_adaptive;
            auto result = attacks::train_backdoored(ds, spec, atk_cfg, adp);
            save_model(result.model, atk_out,
                       {{"re", std::to_string(result.re)}, {"ae", std::to_string(result.ae)}});
            result.spec.save(atk_out + "/trigger.txt");
            std::cout << "backdoored model saved to " << atk_out << " (AE " << result.ae << ", RE "
                      << result.re << (result.attack_failed ? ", ATTACK FAILED" : "") << ")\n";
            if (result.attack_failed) return 2;
        } else if (*diag_cmd) {
            LabeledDataset ds = load_dataset(diag_data);
            RegressionModel model = load_model(diag_model);
            auto spec = attacks::TriggerSpec::load(diag_trigger, ds.c, ds.h, ds.w);
            LabeledDataset d_be = ds.subset(Split::Benign);
            std::vector<Arr> triggered;
            for (const auto& img : d_be.images)
                triggered.push_back(attacks::apply_trigger(spec, img, ds.c, ds.h, ds.w));
            const Eigen::MatrixXd hb = model.forward_features(d_be.images);
            const Eigen::MatrixXd hp = model.forward_features(triggered);
            const LinearHead head = model.linear_head();
            std::cout << "RNV " << diagnostics::rnv(hb, hp) << "\nRAV "
                      << diagnostics::rav(hb, hp, head) << "\n";
            diagnostics::AngleSamples samples;
            samples.benign = diagnostics::angle_matrix(hb, head);
            samples.poisoned = diagnostics::angle_matrix(hp, head);
            for (const auto& p : diagnostics::export_angle_scatter(
                     samples, diag_out + "/angles.csv", diag_plots))
                std::cout << "wrote " << p << "\n";
        } else if (*rev_cmd) {
            LabeledDataset ds = load_dataset(rev_data);
            RegressionModel model = load_model(rev_model);
            rev_cfg.use_momentum = !rev_no_momentum;
            auto result = reverse::reverse_engineer(model, ds.subset(Split::Benign), rev_cfg);
            result.save(rev_out, model, ds.subset(Split::Benign));
            std::cout << "perturbation score " << result.perturbation_score << ", target estimate ";
            for (long j = 0; j < result.target_estimate.size(); ++j)
                std::cout << (j ? ";" : "") << result.target_estimate[j];
            std::cout << "\n";
        } else if (*id_cmd) {
            LabeledDataset ds = load_dataset(id_data);
            const double score =
                config::KV::parse_file(id_reverse + "/summary.txt").get_double("perturbation_score",
                                                                               -1.0);
            auto v = identify::identify_score(score, ds.subset(Split::Benign), id_epsilon);
            std::cout << "score " << v.score << " threshold " << v.threshold << " -> "
                      << (v.backdoored ? "backdoored" : "benign") << "\n";
        } else if (*mit_cmd) {
            LabeledDataset ds = load_dataset(mit_data);
            RegressionModel model = load_model(mit_model);
            auto gen = reverse::TriggerGenerator::load(mit_reverse + "/generator");
            auto spec = attacks::TriggerSpec::load(mit_trigger, ds.c, ds.h, ds.w);
            LabeledDataset d_be = ds.subset(Split::Benign);
            LabeledDataset pd_te = ds.subset(Split::Test);
            for (auto& img : pd_te.images)
                img = attacks::apply_trigger(spec, img, ds.c, ds.h, ds.w);
            const Metric metric = metric_for_dim(ds.d);
            LabeledDataset d_rp = mitigate::build_reversed_poisoned(gen, d_be, model);
            RegressionModel tuned = mitigate::unlearn(model, d_be, d_rp, mit_cfg);
            save_model(tuned, mit_out);
            std::cout << "AE " << attacks::attack_error(model, pd_te.images, spec.target, metric)
                      << " -> " << attacks::attack_error(tuned, pd_te.images, spec.target, metric)
                      << "\nDAE " << mitigate::defending_attack_error(model, pd_te, metric)
                      << " -> " << mitigate::defending_attack_error(tuned, pd_te, metric)
                      << "\nRE " << evaluate_re(model, ds.subset(Split::Test), metric) << " -> "
                      << evaluate_re(tuned, ds.subset(Split::Test), metric) << "\n";
        } else if (*base_cmd) {
            LabeledDataset ds = load_dataset(base_data);
            RegressionModel model = load_model(base_model);
            LabeledDataset d_be = ds.subset(Split::Benign);
            if (base_method == "neural-cleanse") {
                auto [trig, score] =
                    baselines::neural_cleanse_regression(model, d_be, base_lambda, base_cfg);
                std::cout << "mask mass " << score << ", target ";
                for (long j = 0; j < trig.target.size(); ++j)
                    std::cout << (j ? ";" : "") << trig.target[j];
                std::cout << "\n";
            } else if (base_method == "feature-re") {
                auto [trig, score] = baselines::feature_re_regression(
                    model, d_be, 1.0, 1.0, 0.5 * model.m, base_cfg);
                std::cout << "perturbation score " << score
                          << (trig.feasible ? "" : " (constraints not met)") << "\n";
            } else if (base_method == "fine-pruning") {
                mitigate::MitigateConfig mc;
                mc.seed = base_cfg.seed;
                RegressionModel pruned = baselines::fine_pruning(model, d_be, base_prune, mc);
                if (!base_out.empty()) save_model(pruned, base_out);
                std::cout << "RE after pruning "
                          << evaluate_re(pruned, ds.subset(Split::Test), metric_for_dim(ds.d))
                          << "\n";
            } else {
                std::cerr << "unknown baseline method: " << base_method << "\n";
                return 1;
            }
        } else if (*rep_cmd) {
            std::ifstream in(rep_in);
            if (!in) {
                std::cerr << "cannot read " << rep_in << "\n";
                return 1;
            }
            nlohmann::json doc = nlohmann::json::parse(in);
            std::string error;
            if (!experiment::validate_report(doc, &error)) {
                std::cerr << "report invalid: " << error << "\n";
                return 1;
            }
            for (const auto& [name, c] : doc["confusion"].items())
                std::cout << name << ": TP " << c["tp"] << " FP " << c["fp"] << " FN " << c["fn"]
                          << " TN " << c["tn"] << " acc " << c["accuracy"] << "\n";
            for (const auto& [name, v] : doc["roc_auc"].items())
                std::cout << "roc_auc[" << name << "] = " << v << "\n";
            if (doc["mitigation"].is_object()) {
                const auto& m = doc["mitigation"];
                std::cout << "mitigation " << m["model"] << ": AE " << m["pre_ae"] << " -> "
                          << m["post_ae"] << ", DAE " << m["pre_dae"] << " -> " << m["post_dae"]
                          << ", RE " << m["pre_re"] << " -> " << m["post_re"] << "\n";
            }
            std::cout << "report valid\n";
        } else if (*run_cmd) {
            experiment::ExperimentConfig cfg;
            try {
                config::KV kv = config::KV::parse_file(run_config);
                if (!run_out.empty()) kv.set("out", run_out);
                if (!run_seed.empty()) kv.set("seed", run_seed);
                if (run_plots) kv.set("plots", "1");
                cfg = experiment::ExperimentConfig::from_kv(kv);
            } catch (const std::exception& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return 1;
            }
            auto record = experiment::run_experiment(cfg, run_resume);
            std::cout << "report written to " << cfg.out_dir << "/report.json\n";
            if (!record.doc["failures"].empty()) {
                std::cerr << record.doc["failures"].size() << " stage(s) failed\n";
                return 2;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
