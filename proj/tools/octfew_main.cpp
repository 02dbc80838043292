// octfew: few-shot OCT classification pipeline driver.
//
// Exit codes: 0 success, 1 validation/config error, 2 stage failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "octfew/balance.hpp"
#include "octfew/embed.hpp"
#include "octfew/pipeline.hpp"
#include "octfew/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace octfew;

namespace {

// Errors of this type exit with code 1; everything else exits 2.
struct ValidationFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ordered_json read_json(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw ValidationFailure("cannot open " + p.string());
    ordered_json j;
    f >> j;
    return j;
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
}

void write_predictions(const std::vector<Prediction>& preds, const fs::path& path) {
    ordered_json j;
    j["schema_version"] = "1";
    ordered_json arr = ordered_json::array();
    for (const auto& p : preds) {
        ordered_json e;
        e["id"] = p.id;
        e["predicted"] = p.predicted;
        e["probs"] = p.probs;
        arr.push_back(std::move(e));
    }
    j["predictions"] = std::move(arr);
    write_text(path, j.dump(2) + "\n");
}

BackboneConfig backbone_from_file(const ordered_json& j) {
    if (j.contains("backbone")) return backbone_config_from_json(j.at("backbone"));
    return BackboneConfig{};
}

TrainConfig train_from_file(const ordered_json& j) {
    if (j.contains("train")) return train_config_from_json(j.at("train"));
    return TrainConfig{};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"octfew: few-shot retinal OCT classification pipeline"};
    app.require_subcommand(1);

    // ---- ingest -------------------------------------------------------------
    auto* ingest = app.add_subcommand("ingest", "Scan a directory-per-class image tree");
    std::string in_root, in_out;
    std::vector<std::string> in_ignore;
    uint64_t in_seed = 0;
    ingest->add_option("--root", in_root, "Corpus root directory")->required();
    ingest->add_option("--out", in_out, "Output manifest path")->required();
    ingest->add_option("--ignore", in_ignore, "Subdirectory names to skip");
    ingest->add_option("--seed", in_seed, "Global seed recorded in the manifest");

    // ---- augment ------------------------------------------------------------
    auto* augment = app.add_subcommand("augment", "Expand one class by linear augmentation");
    std::string au_manifest, au_class, au_out, au_imgdir, au_spec;
    int64_t au_target = 0;
    uint64_t au_seed = 0;
    augment->add_option("--manifest", au_manifest, "Input manifest")->required();
    augment->add_option("--class", au_class, "Class to expand")->required();
    augment->add_option("--target", au_target, "Total count after expansion")->required();
    augment->add_option("--seed", au_seed, "Seed")->required();
    augment->add_option("--out", au_out, "Output manifest (the expanded class)")->required();
    augment->add_option("--img-dir", au_imgdir, "Directory for augmented images")->required();
    augment->add_option("--spec", au_spec, "Optional AugmentationSpec JSON file");

    // ---- gan-train ------------------------------------------------------------
    auto* gtrain = app.add_subcommand("gan-train", "Train one unpaired translation model");
    std::string gt_a, gt_b, gt_cfg, gt_out;
    gtrain->add_option("--domain-a", gt_a, "Domain A manifest (normals)")->required();
    gtrain->add_option("--domain-b", gt_b, "Domain B manifest (single rare class)")->required();
    gtrain->add_option("--config", gt_cfg, "TranslationConfig JSON file")->required();
    gtrain->add_option("--out", gt_out, "Checkpoint directory")->required();

    // ---- gan-generate -----------------------------------------------------------
    auto* ggen = app.add_subcommand("gan-generate", "Translate normals through a checkpoint");
    std::string gg_ckpt, gg_src, gg_out, gg_imgdir;
    int64_t gg_count = 0;
    uint64_t gg_seed = 0;
    ggen->add_option("--ckpt", gg_ckpt, "Checkpoint directory")->required();
    ggen->add_option("--source", gg_src, "Domain A source manifest")->required();
    ggen->add_option("--count", gg_count, "Number of images to generate")->required();
    ggen->add_option("--seed", gg_seed, "Seed")->required();
    ggen->add_option("--out", gg_out, "Output manifest")->required();
    ggen->add_option("--img-dir", gg_imgdir, "Directory for generated images")->required();

    // ---- balance ---------------------------------------------------------------
    auto* balance = app.add_subcommand("balance", "Compose a dataset per a balance strategy");
    std::string ba_strategy, ba_real, ba_ckpts, ba_out, ba_imgdir, ba_spec;
    uint64_t ba_seed = 0;
    balance->add_option("--strategy", ba_strategy, "imb_5000 | bal_5000 | bal_10000 | bal_500_desk")
        ->required();
    balance->add_option("--real", ba_real, "Real corpus manifest")->required();
    balance->add_option("--ckpts", ba_ckpts, "JSON map class -> checkpoint dir");
    balance->add_option("--seed", ba_seed, "Seed")->required();
    balance->add_option("--out", ba_out, "Output manifest")->required();
    balance->add_option("--img-dir", ba_imgdir, "Directory for synthesized images")->required();
    balance->add_option("--spec", ba_spec, "Optional AugmentationSpec JSON file");

    // ---- train -----------------------------------------------------------------
    auto* train = app.add_subcommand("train", "Train a classifier on a manifest");
    std::string tr_manifest, tr_cfg, tr_out, tr_eval, tr_predout;
    train->add_option("--manifest", tr_manifest, "Training manifest")->required();
    train->add_option("--config", tr_cfg, "JSON file with {backbone:{...}, train:{...}}")->required();
    train->add_option("--out", tr_out, "Model output directory")->required();
    train->add_option("--eval-manifest", tr_eval, "Optional manifest to predict after training");
    train->add_option("--pred-out", tr_predout, "Predictions JSON path (with --eval-manifest)");

    // ---- crossval ----------------------------------------------------------------
    auto* crossval = app.add_subcommand("crossval", "k-fold cross-validation");
    std::string cv_manifest, cv_cfg, cv_out;
    int cv_k = 5;
    crossval->add_option("--manifest", cv_manifest, "Manifest")->required();
    crossval->add_option("--k", cv_k, "Fold count")->required();
    crossval->add_option("--config", cv_cfg, "JSON file with {backbone:{...}, train:{...}}")
        ->required();
    crossval->add_option("--out", cv_out, "Report output directory")->required();

    // ---- evaluate ------------------------------------------------------------------
    auto* evaluate = app.add_subcommand("evaluate", "Score predictions against a truth manifest");
    std::string ev_pred, ev_truth, ev_out, ev_table, ev_csv;
    evaluate->add_option("--pred", ev_pred, "Predictions JSON")->required();
    evaluate->add_option("--truth", ev_truth, "Truth manifest")->required();
    evaluate->add_option("--out", ev_out, "Metric report JSON")->required();
    evaluate->add_option("--table", ev_table, "Fixed-width table output");
    evaluate->add_option("--csv", ev_csv, "CSV output");

    // ---- embed -------------------------------------------------------------------
    auto* embed = app.add_subcommand("embed", "Penultimate features + 3-D t-SNE export");
    std::string em_model, em_manifest, em_out, em_plot;
    double em_perp = 30.0;
    int em_iters = 1000;
    uint64_t em_seed = 0;
    embed->add_option("--model", em_model, "Trained model directory")->required();
    embed->add_option("--manifest", em_manifest, "Manifest to embed")->required();
    embed->add_option("--perplexity", em_perp, "t-SNE perplexity");
    embed->add_option("--iters", em_iters, "t-SNE iterations");
    embed->add_option("--seed", em_seed, "Seed")->required();
    embed->add_option("--out", em_out, "Embedding CSV path")->required();
    embed->add_option("--plot", em_plot, "Scatter plot PNG path")->required();

    // ---- run --------------------------------------------------------------------
    auto* run = app.add_subcommand("run", "Run the experiment pipeline from a config file");
    std::string rn_cfg;
    std::vector<std::string> rn_stages;
    bool rn_force = false, rn_parallel = false;
    run->add_option("--config", rn_cfg, "Experiment config JSON")->required();
    run->add_option("--stages", rn_stages, "Subset of stages to run")->delimiter(',');
    run->add_flag("--force", rn_force, "Ignore the stage cache");
    run->add_flag("--parallel", rn_parallel, "Per-class GAN training as parallel subprocesses");

    // ---- report -----------------------------------------------------------------
    auto* report = app.add_subcommand("report", "Aggregate fold reports into tables");
    std::vector<std::string> rp_folds;
    std::string rp_name = "run", rp_table, rp_csv;
    report->add_option("--folds", rp_folds, "Fold report JSON files")->required();
    report->add_option("--name", rp_name, "Row label");
    report->add_option("--table", rp_table, "Fixed-width table output")->required();
    report->add_option("--csv", rp_csv, "CSV output");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            std::map<std::string, ClassLabel> mapping;
            for (const auto& c : all_classes()) mapping[class_name(c)] = c;
            ScanOptions so;
            for (const auto& d : in_ignore) so.ignore_dirs.insert(d);
            DatasetManifest m = scan_directory(in_root, mapping, so);
            m.global_seed = in_seed;
            write_manifest(m, in_out, {.verify_images = false});
            std::cout << "ingested " << m.records.size() << " records -> " << in_out << "\n";
        } else if (*augment) {
            const DatasetManifest m = read_manifest(au_manifest);
            const ClassLabel label = class_by_name(au_class);
            AugmentationSpec spec;
            if (!au_spec.empty()) spec = augmentation_spec_from_json(read_json(au_spec));
            std::vector<ImageRecord> pool;
            for (const auto* r : m.of_class(label.name)) pool.push_back(*r);
            if (pool.empty()) throw ValidationFailure("no records of class " + au_class);
            DatasetManifest out;
            out.global_seed = au_seed;
            out.created_at = now_iso8601();
            out.records = augment_to_count(pool, au_target, spec, au_seed, au_imgdir);
            write_manifest(out, au_out, {.verify_images = false});
            std::cout << "expanded " << au_class << " to " << out.records.size() << " records -> "
                      << au_out << "\n";
        } else if (*gtrain) {
            const DatasetManifest a = read_manifest(gt_a);
            const DatasetManifest b = read_manifest(gt_b);
            const auto cfg = gan::translation_config_from_json(read_json(gt_cfg));
            gan::train(a, b, cfg, fs::path(gt_out));
            std::cout << "checkpoint -> " << gt_out << "\n";
        } else if (*ggen) {
            const auto ckpt = gan::load_checkpoint(gg_ckpt);
            const DatasetManifest src = read_manifest(gg_src);
            DatasetManifest out = gan::generate(ckpt, src, gg_count, gg_seed, gg_imgdir);
            out.global_seed = gg_seed;
            write_manifest(out, gg_out, {.verify_images = false});
            std::cout << "generated " << out.records.size() << " images -> " << gg_out << "\n";
        } else if (*balance) {
            const DatasetManifest real = read_manifest(ba_real);
            BalanceStrategy strategy = builtin_strategy(ba_strategy);
            strategy.seed = ba_seed;
            std::map<ClassName, std::string> ckpts;
            if (!ba_ckpts.empty()) {
                const ordered_json j = read_json(ba_ckpts);
                for (auto it = j.begin(); it != j.end(); ++it)
                    ckpts[class_by_name(it.key()).name] = it.value().get<std::string>();
            }
            const BalancePlan plan = plan_balance(real, strategy, ckpts);
            ExecutionContext ctx;
            if (!ba_spec.empty()) ctx.augment_spec = augmentation_spec_from_json(read_json(ba_spec));
            ctx.image_dir = ba_imgdir;
            const DatasetManifest out = execute_plan(plan, real, ctx);
            write_manifest(out, ba_out, {.verify_images = false});
            std::cout << "balanced manifest with " << out.records.size() << " records -> " << ba_out
                      << "\n";
        } else if (*train) {
            const DatasetManifest m = read_manifest(tr_manifest);
            const ordered_json cfg = read_json(tr_cfg);
            Model model(backbone_from_file(cfg));
            const TrainConfig tc = train_from_file(cfg);
            const TrainedModel tm = fine_tune(model, m, nullptr, tc, model.config().freeze_policy);
            model.save(tr_out);
            std::cout << "model -> " << tr_out << " (final train acc "
                      << tm.log.back().train_accuracy << ")\n";
            if (!tr_eval.empty()) {
                if (tr_predout.empty())
                    throw ValidationFailure("--eval-manifest requires --pred-out");
                const DatasetManifest em = read_manifest(tr_eval);
                write_predictions(predict(model, em), tr_predout);
                std::cout << "predictions -> " << tr_predout << "\n";
            }
        } else if (*crossval) {
            const DatasetManifest m = read_manifest(cv_manifest);
            const ordered_json cfg = read_json(cv_cfg);
            const auto folds = cross_validate(m, cv_k, backbone_from_file(cfg), train_from_file(cfg));
            fs::create_directories(cv_out);
            std::vector<MetricReport> reports;
            for (const auto& fr : folds) {
                ordered_json j;
                j["fold"] = fr.fold;
                j["confusion"] = confusion_to_json(fr.cm);
                j["metrics"] = metric_report_to_json(fr.report);
                ordered_json preds = ordered_json::array();
                for (const auto& p : fr.predictions) {
                    ordered_json e;
                    e["id"] = p.id;
                    e["predicted"] = p.predicted;
                    e["probs"] = p.probs;
                    preds.push_back(std::move(e));
                }
                j["predictions"] = std::move(preds);
                write_text(fs::path(cv_out) / ("fold_" + std::to_string(fr.fold) + ".json"),
                           j.dump(2) + "\n");
                reports.push_back(fr.report);
            }
            const AggregateReport agg = aggregate_folds(reports);
            std::vector<std::pair<std::string, AggregateReport>> rows = {{"crossval", agg}};
            write_text(fs::path(cv_out) / "summary.txt", render_summary_table(rows));
            write_text(fs::path(cv_out) / "summary.csv", render_summary_csv(rows));
            std::cout << "reports -> " << cv_out << "\n"
                      << render_summary_table(rows);
        } else if (*evaluate) {
            const ordered_json pj = read_json(ev_pred);
            const DatasetManifest truth = read_manifest(ev_truth);
            std::map<std::string, int> pred_by_id;
            for (const auto& e : pj.at("predictions"))
                pred_by_id[e.at("id").get<std::string>()] = e.at("predicted").get<int>();
            std::vector<int> y_true, y_pred;
            for (const auto& r : truth.records) {
                auto it = pred_by_id.find(r.id);
                if (it == pred_by_id.end())
                    throw ValidationFailure("no prediction for record " + r.id);
                y_true.push_back(r.label.index);
                y_pred.push_back(it->second);
            }
            const ConfusionMatrix cm = confusion(y_true, y_pred, kNumClasses);
            const MetricReport rep = compute_report(cm);
            ordered_json j;
            j["confusion"] = confusion_to_json(cm);
            j["metrics"] = metric_report_to_json(rep);
            write_text(ev_out, j.dump(2) + "\n");
            // Single-run tables: std columns are zero by construction.
            AggregateReport single;
            single.fold_count = 1;
            single.accuracy = {rep.accuracy, 0};
            single.kappa = {rep.kappa, 0};
            single.rci = {rep.rci, 0};
            single.mcc = {rep.mcc, 0};
            single.balanced_accuracy = {rep.balanced_accuracy, 0};
            for (const auto& t : rep.per_class_tpr)
                single.per_class_tpr.push_back(t ? std::optional<MeanStd>({*t, 0}) : std::nullopt);
            std::vector<std::pair<std::string, AggregateReport>> rows = {{"evaluate", single}};
            if (!ev_table.empty())
                write_text(ev_table, render_summary_table(rows) + "\n" + render_per_class_table(rows));
            if (!ev_csv.empty()) write_text(ev_csv, render_summary_csv(rows));
            std::cout << render_summary_table(rows);
        } else if (*embed) {
            const Model model = Model::load(em_model);
            const DatasetManifest m = read_manifest(em_manifest);
            const FeatureMatrix features = extract_features(model, m);
            const TsneResult result = tsne_3d(features, em_perp, em_iters, em_seed);
            export_embedding_csv(result, features, em_out);
            export_embedding_plot({{fs::path(em_manifest).stem().string(), &result, &features}},
                                  em_plot);
            std::cout << "embedding -> " << em_out << " (final KL " << result.final_kl << ")\n";
        } else if (*run) {
            const ExperimentConfig cfg = load_experiment_config(rn_cfg);
            RunOptions opts;
            opts.stages = rn_stages;
            opts.force = rn_force;
            opts.parallel_gan = rn_parallel;
            const auto errors = validate_experiment(cfg, rn_stages);
            if (!errors.empty()) {
                for (const auto& e : errors) std::cerr << "config error: " << e << "\n";
                return 1;
            }
            const RunRecord rec = run_experiment(cfg, opts);
            for (const auto& s : rec.stages)
                std::cout << s.name << ": " << s.status
                          << (s.status == "done"
                                  ? " (" + std::to_string(static_cast<long long>(s.wall_ms)) + " ms)"
                                  : "")
                          << "\n";
        } else if (*report) {
            std::vector<MetricReport> reports;
            for (const auto& f : rp_folds)
                reports.push_back(metric_report_from_json(read_json(f).at("metrics")));
            const AggregateReport agg = aggregate_folds(reports);
            std::vector<std::pair<std::string, AggregateReport>> rows = {{rp_name, agg}};
            write_text(rp_table, render_summary_table(rows) + "\n" + render_per_class_table(rows));
            if (!rp_csv.empty()) write_text(rp_csv, render_summary_csv(rows));
            std::cout << render_summary_table(rows);
        }
    } catch (const ValidationFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
