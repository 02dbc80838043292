#include "octfew/pipeline.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "octfew/balance.hpp"
#include "octfew/embed.hpp"
#include "octfew/rng.hpp"

namespace octfew {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ExperimentConfig experiment_config_from_json(ordered_json j) {
    const std::string ver = j.value("schema_version", std::string("1"));
    if (ver != ExperimentConfig::kSchemaVersion)
        throw std::runtime_error("experiment schema version mismatch: file has '" + ver + "'");
    ExperimentConfig c;
    c.raw = j;
    c.global_seed = j.value("global_seed", uint64_t{0});
    c.data_root = j.at("data_root").get<std::string>();
    c.output_root = j.at("output_root").get<std::string>();
    c.strategy = j.value("strategy", std::string("none"));
    for (const auto& d : j.value("ignore_dirs", std::vector<std::string>{})) c.ignore_dirs.insert(d);

    const ordered_json stages = j.value("stages", ordered_json::object());
    if (stages.contains("augment")) {
        const auto& a = stages.at("augment");
        c.domain_b_target = a.value("domain_b_target", c.domain_b_target);
        if (a.contains("domain_a_size")) c.domain_a_size = a.at("domain_a_size").get<int64_t>();
        if (a.contains("spec")) c.augment_spec = augmentation_spec_from_json(a.at("spec"));
    }
    if (stages.contains("gan")) c.gan_cfg = gan::translation_config_from_json(stages.at("gan"));
    if (stages.contains("classifier")) {
        const auto& cl = stages.at("classifier");
        if (cl.contains("backbone")) c.backbone_cfg = backbone_config_from_json(cl.at("backbone"));
        if (cl.contains("train")) c.train_cfg = train_config_from_json(cl.at("train"));
        c.cv_k = cl.value("k", c.cv_k);
        c.baseline = cl.value("baseline", c.baseline);
    }
    if (stages.contains("embed")) {
        const auto& e = stages.at("embed");
        c.tsne_perplexity = e.value("perplexity", c.tsne_perplexity);
        c.tsne_iterations = e.value("iterations", c.tsne_iterations);
        c.embed_manifest = e.value("manifest", c.embed_manifest);
    }

    // CI override hook for relocated corpora.
    if (const char* env = std::getenv("OCTFEW_DATA_ROOT")) c.data_root = env;
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open experiment config: " + path.string());
    ordered_json j;
    f >> j;
    return experiment_config_from_json(std::move(j));
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

std::string hash_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("hash_file: cannot open " + p.string());
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    }
    char out[20];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

std::string hash_dir(const fs::path& p) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& f : files) {
        const std::string rel = fs::relative(f, p).generic_string();
        h = fnv1a64(rel.data(), rel.size(), h);
        const std::string fh = hash_file(f);
        h = fnv1a64(fh.data(), fh.size(), h);
    }
    char out[20];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

namespace {

std::string hash_json(const ordered_json& j) {
    const std::string s = j.dump();
    char out[20];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage plumbing
// ---------------------------------------------------------------------------

namespace {

struct Paths {
    fs::path root;
    fs::path manifests, images, checkpoints, model_dir, reports, embed_dir, state;

    explicit Paths(const fs::path& out) : root(out) {
        manifests = out / "manifests";
        images = out / "images";
        checkpoints = out / "checkpoints";
        model_dir = out / "model";
        reports = out / "reports";
        embed_dir = out / "embed";
        state = out / "state";
    }

    fs::path real_manifest() const { return manifests / "real.json"; }
    fs::path domain_a() const { return manifests / "domain_a.json"; }
    fs::path domain_b(const std::string& cls) const { return manifests / ("domain_b_" + cls + ".json"); }
    fs::path balanced() const { return manifests / "balanced.json"; }
    fs::path ckpt(const std::string& cls) const { return checkpoints / cls; }
    fs::path fold_report(const std::string& tag, int fold) const {
        return reports / (tag + "_fold_" + std::to_string(fold) + ".json");
    }
};

std::vector<ClassLabel> rare_classes_present(const DatasetManifest& m) {
    std::vector<ClassLabel> out;
    const auto counts = m.class_counts();
    for (const auto& c : all_classes())
        if (!c.is_major() && counts.count(c.name) && counts.at(c.name) > 0) out.push_back(c);
    return out;
}

bool strategy_uses_generation(const ExperimentConfig& cfg) {
    if (cfg.strategy == "none") return false;
    const BalanceStrategy s = builtin_strategy(cfg.strategy);
    for (const auto& [cls, rule] : s.rules)
        if (rule.generated > 0) return true;
    return false;
}

std::map<std::string, ClassLabel> identity_class_mapping() {
    std::map<std::string, ClassLabel> m;
    for (const auto& c : all_classes()) m[class_name(c)] = c;
    return m;
}

void write_fold_report(const FoldResult& fr, const fs::path& path) {
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
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

struct StageCache {
    fs::path state_file;
    ordered_json input_hashes = ordered_json::object();
    std::vector<std::string> outputs;

    void add_input(const std::string& name, const std::string& hash) { input_hashes[name] = hash; }

    bool fresh(bool force) const {
        if (force) return false;
        std::ifstream f(state_file);
        if (!f) return false;
        ordered_json prev;
        try {
            f >> prev;
        } catch (...) {
            return false;
        }
        if (prev.value("input_hashes", ordered_json::object()) != input_hashes) return false;
        for (const auto& o : prev.value("outputs", std::vector<std::string>{}))
            if (!fs::exists(o)) return false;
        return true;
    }

    void commit() const {
        fs::create_directories(state_file.parent_path());
        ordered_json j;
        j["input_hashes"] = input_hashes;
        j["outputs"] = outputs;
        std::ofstream f(state_file);
        f << j.dump(2) << "\n";
    }

    std::vector<std::string> previous_outputs() const {
        std::ifstream f(state_file);
        ordered_json prev;
        f >> prev;
        return prev.value("outputs", std::vector<std::string>{});
    }
};

int run_child(const std::vector<std::string>& argv_vec) {
    std::vector<char*> argv;
    for (const auto& a : argv_vec) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    const pid_t pid = fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        execv(argv[0], argv.data());
        _exit(127);
    }
    return pid;
}

}  // namespace

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

std::vector<std::string> validate_experiment(const ExperimentConfig& cfg,
                                             const std::vector<std::string>& stages_requested) {
    std::vector<std::string> errors;
    auto stage_requested = [&](const std::string& s) {
        return stages_requested.empty() ||
               std::find(stages_requested.begin(), stages_requested.end(), s) !=
                   stages_requested.end();
    };

    for (const auto& s : stages_requested)
        if (std::find(all_stage_names().begin(), all_stage_names().end(), s) ==
            all_stage_names().end())
            errors.push_back("stages: unknown stage '" + s + "'");

    if (!fs::exists(cfg.data_root))
        errors.push_back("data_root: path does not exist: " + cfg.data_root.string());
    if (cfg.output_root.empty()) errors.push_back("output_root: must be set");

    if (cfg.strategy != "none") {
        try {
            builtin_strategy(cfg.strategy);
        } catch (const std::exception& e) {
            errors.push_back(std::string("strategy: ") + e.what());
        }
    }
    try {
        cfg.gan_cfg.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("stages.gan: ") + e.what());
    }
    try {
        cfg.backbone_cfg.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("stages.classifier.backbone: ") + e.what());
    }
    try {
        cfg.train_cfg.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("stages.classifier.train: ") + e.what());
    }
    try {
        cfg.augment_spec.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("stages.augment.spec: ") + e.what());
    }
    if (cfg.cv_k < 2) errors.push_back("stages.classifier.k: fold count must be >= 2");
    if (cfg.domain_b_target < 1) errors.push_back("stages.augment.domain_b_target: must be >= 1");
    if (cfg.tsne_perplexity < 1) errors.push_back("stages.embed.perplexity: must be >= 1");
    if (cfg.tsne_iterations < 1) errors.push_back("stages.embed.iterations: must be >= 1");
    if (cfg.embed_manifest != "ingest" && cfg.embed_manifest != "balanced")
        errors.push_back("stages.embed.manifest: must be 'ingest' or 'balanced'");

    // Cross-references: a stage run in isolation needs its inputs on disk.
    const Paths paths(cfg.output_root);
    bool gen_needed = false;
    if (cfg.strategy != "none") {
        try {
            gen_needed = strategy_uses_generation(cfg);
        } catch (const std::exception&) {
            // unknown strategy already reported above
        }
    }
    if (!stages_requested.empty()) {
        auto need_file = [&](const std::string& stage, const fs::path& p, const std::string& producer) {
            if (stage_requested(stage) && !stage_requested(producer) && !fs::exists(p))
                errors.push_back(stage + ": missing input " + p.string() + " (run stage '" +
                                 producer + "' first)");
        };
        need_file("augment", paths.real_manifest(), "ingest");
        need_file("gan_train", paths.real_manifest(), "ingest");
        need_file("balance", paths.real_manifest(), "ingest");
        if (cfg.strategy != "none") {
            need_file("train", paths.balanced(), "balance");
            need_file("crossval", paths.balanced(), "balance");
        }
        if (stage_requested("balance") && !stage_requested("gan_train") && gen_needed) {
            DatasetManifest real;
            bool have_real = fs::exists(paths.real_manifest());
            if (have_real) real = read_manifest(paths.real_manifest());
            for (const auto& c : all_classes()) {
                if (c.is_major()) continue;
                if (have_real && real.of_class(c.name).empty()) continue;
                if (!fs::exists(paths.ckpt(class_name(c)) / "header.json"))
                    errors.push_back("balance: missing translation checkpoint for class " +
                                     class_name(c) + " at " + paths.ckpt(class_name(c)).string());
            }
        }
        need_file("evaluate", paths.fold_report("main", 0), "crossval");
        need_file("embed", paths.model_dir / "header.json", "train");
    }
    return errors;
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

ordered_json RunRecord::to_json() const {
    ordered_json j;
    j["schema_version"] = "1";
    j["created_at"] = created_at;
    j["tool_version"] = tool_version;
    j["ok"] = ok;
    j["config"] = config_snapshot;
    ordered_json ss = ordered_json::array();
    for (const auto& s : stages) {
        ordered_json e;
        e["name"] = s.name;
        e["status"] = s.status;
        e["input_hashes"] = s.input_hashes;
        e["outputs"] = s.outputs;
        e["wall_ms"] = s.wall_ms;
        if (!s.error.empty()) e["error"] = s.error;
        ss.push_back(std::move(e));
    }
    j["stages"] = std::move(ss);
    return j;
}

RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
    {
        const auto errors = validate_experiment(cfg, opts.stages);
        if (!errors.empty()) {
            std::string msg = "experiment config invalid:";
            for (const auto& e : errors) msg += "\n  - " + e;
            throw std::invalid_argument(msg);
        }
    }

    const Paths paths(cfg.output_root);
    fs::create_directories(paths.root);
    fs::create_directories(paths.manifests);
    fs::create_directories(paths.state);

    auto requested = [&](const std::string& s) {
        return opts.stages.empty() ||
               std::find(opts.stages.begin(), opts.stages.end(), s) != opts.stages.end();
    };
    const bool with_balance = cfg.strategy != "none";
    const bool gen_needed = with_balance && strategy_uses_generation(cfg);

    RunRecord rec;
    rec.created_at = now_iso8601();
    rec.config_snapshot = cfg.raw;

    bool failed = false;
    auto run_stage = [&](const std::string& name, bool active, auto&& body) {
        StageRecord sr;
        sr.name = name;
        if (!active || !requested(name) || failed) {
            sr.status = "not_run";
            rec.stages.push_back(std::move(sr));
            return;
        }
        StageCache cache{paths.state / (name + ".json")};
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const bool executed = body(cache);
            if (!executed) {
                sr.status = "skipped";
                sr.outputs = cache.previous_outputs();
            } else {
                sr.status = "done";
                sr.outputs = cache.outputs;
                cache.commit();
            }
            sr.input_hashes = cache.input_hashes;
        } catch (const std::exception& e) {
            sr.status = "failed";
            sr.error = e.what();
            failed = true;
        }
        sr.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        rec.stages.push_back(std::move(sr));
    };

    // ---- ingest -------------------------------------------------------------
    run_stage("ingest", true, [&](StageCache& cache) {
        cache.add_input("data_root", hash_dir(cfg.data_root));
        cache.add_input("config", hash_json({{"ignore", std::vector<std::string>(
                                                             cfg.ignore_dirs.begin(),
                                                             cfg.ignore_dirs.end())}}));
        cache.outputs = {paths.real_manifest().string()};
        if (cache.fresh(opts.force)) return false;
        ScanOptions so;
        so.ignore_dirs = cfg.ignore_dirs;
        DatasetManifest m = scan_directory(cfg.data_root, identity_class_mapping(), so);
        m.global_seed = cfg.global_seed;
        // Files were just decode-verified by the scan.
        write_manifest(m, paths.real_manifest(), {.verify_images = false});
        return true;
    });

    // ---- augment (GAN domain prep) -------------------------------------------
    run_stage("augment", with_balance && gen_needed, [&](StageCache& cache) {
        cache.add_input("real", hash_file(paths.real_manifest()));
        ordered_json c;
        c["domain_b_target"] = cfg.domain_b_target;
        if (cfg.domain_a_size) c["domain_a_size"] = *cfg.domain_a_size;
        c["spec"] = augmentation_spec_to_json(cfg.augment_spec);
        cache.add_input("config", hash_json(c));

        const DatasetManifest real = read_manifest(paths.real_manifest());
        const auto rares = rare_classes_present(real);
        cache.outputs = {paths.domain_a().string()};
        for (const auto& r : rares) cache.outputs.push_back(paths.domain_b(class_name(r)).string());
        if (cache.fresh(opts.force)) return false;

        // Domain A: normals (optionally subsampled).
        DatasetManifest domain_a;
        const auto normals = real.of_class(ClassName::NORMAL);
        if (cfg.domain_a_size && *cfg.domain_a_size < static_cast<int64_t>(normals.size())) {
            domain_a = sample_class(real, class_by_name("NORMAL"), *cfg.domain_a_size,
                                    derive_seed(cfg.global_seed, "augment/domain_a"));
        } else {
            domain_a.created_at = real.created_at;
            for (const auto* r : normals) domain_a.records.push_back(*r);
        }
        domain_a.global_seed = cfg.global_seed;
        write_manifest(domain_a, paths.domain_a(), {.verify_images = false});

        for (const auto& r : rares) {
            const std::string cname = class_name(r);
            std::vector<ImageRecord> pool;
            for (const auto* rec : real.of_class(r.name)) pool.push_back(*rec);
            auto expanded = augment_to_count(
                pool, std::max<int64_t>(cfg.domain_b_target, static_cast<int64_t>(pool.size())),
                cfg.augment_spec, derive_seed(cfg.global_seed, "augment/" + cname),
                paths.images / "domain_b" / cname);
            DatasetManifest db;
            db.global_seed = cfg.global_seed;
            db.created_at = real.created_at;
            db.records = std::move(expanded);
            write_manifest(db, paths.domain_b(cname), {.verify_images = false});
        }
        return true;
    });

    // ---- gan_train ------------------------------------------------------------
    run_stage("gan_train", with_balance && gen_needed, [&](StageCache& cache) {
        const DatasetManifest real = read_manifest(paths.real_manifest());
        const auto rares = rare_classes_present(real);
        cache.add_input("domain_a", hash_file(paths.domain_a()));
        for (const auto& r : rares)
            cache.add_input("domain_b_" + class_name(r), hash_file(paths.domain_b(class_name(r))));
        cache.add_input("config", hash_json(gan::translation_config_to_json(cfg.gan_cfg)));
        for (const auto& r : rares) cache.outputs.push_back(paths.ckpt(class_name(r)).string());
        if (cache.fresh(opts.force)) return false;

        if (opts.parallel_gan) {
            // One child process per class; the CLI re-enters gan-train.
            const fs::path self = fs::read_symlink("/proc/self/exe");
            std::vector<std::pair<std::string, pid_t>> children;
            for (const auto& r : rares) {
                const std::string cname = class_name(r);
                gan::TranslationConfig gcfg = cfg.gan_cfg;
                gcfg.seed = derive_seed(cfg.global_seed, "gan/" + cname);
                const fs::path cfg_path = paths.state / ("gan_" + cname + ".json");
                std::ofstream f(cfg_path);
                f << gan::translation_config_to_json(gcfg).dump(2) << "\n";
                f.close();
                children.emplace_back(
                    cname, run_child({self.string(), "gan-train", "--domain-a",
                                      paths.domain_a().string(), "--domain-b",
                                      paths.domain_b(cname).string(), "--config", cfg_path.string(),
                                      "--out", paths.ckpt(cname).string()}));
            }
            for (const auto& [cname, pid] : children) {
                int status = 0;
                waitpid(pid, &status, 0);
                if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
                    throw std::runtime_error("gan_train: child for class " + cname + " failed");
            }
        } else {
            const DatasetManifest domain_a = read_manifest(paths.domain_a());
            for (const auto& r : rares) {
                const std::string cname = class_name(r);
                const DatasetManifest domain_b = read_manifest(paths.domain_b(cname));
                gan::TranslationConfig gcfg = cfg.gan_cfg;
                gcfg.seed = derive_seed(cfg.global_seed, "gan/" + cname);
                gan::train(domain_a, domain_b, gcfg, paths.ckpt(cname));
            }
        }
        return true;
    });

    // ---- balance ---------------------------------------------------------------
    run_stage("balance", with_balance, [&](StageCache& cache) {
        const DatasetManifest real = read_manifest(paths.real_manifest());
        const auto rares = rare_classes_present(real);
        cache.add_input("real", hash_file(paths.real_manifest()));
        if (gen_needed)
            for (const auto& r : rares)
                cache.add_input("ckpt_" + class_name(r), hash_dir(paths.ckpt(class_name(r))));
        cache.add_input("config", hash_json({{"strategy", cfg.strategy},
                                             {"spec", augmentation_spec_to_json(cfg.augment_spec)}}));
        cache.outputs = {paths.balanced().string()};
        if (cache.fresh(opts.force)) return false;

        BalanceStrategy strategy = builtin_strategy(cfg.strategy);
        strategy.seed = derive_seed(cfg.global_seed, "balance");
        std::map<ClassName, std::string> ckpts;
        if (gen_needed)
            for (const auto& r : rares) ckpts[r.name] = paths.ckpt(class_name(r)).string();
        const BalancePlan plan = plan_balance(real, strategy, ckpts);
        ExecutionContext ctx{cfg.augment_spec, paths.images / "balance"};
        DatasetManifest balanced = execute_plan(plan, real, ctx);
        write_manifest(balanced, paths.balanced(), {.verify_images = false});
        return true;
    });

    const fs::path train_input = with_balance ? paths.balanced() : paths.real_manifest();

    // ---- train (final model for embedding / independent evaluation) -------------
    run_stage("train", true, [&](StageCache& cache) {
        cache.add_input("manifest", hash_file(train_input));
        cache.add_input("config", hash_json({{"backbone", backbone_config_to_json(cfg.backbone_cfg)},
                                             {"train", train_config_to_json(cfg.train_cfg)}}));
        cache.outputs = {paths.model_dir.string()};
        if (cache.fresh(opts.force)) return false;

        const DatasetManifest m = read_manifest(train_input);
        BackboneConfig bc = cfg.backbone_cfg;
        bc.seed = derive_seed(cfg.global_seed, "train/model");
        TrainConfig tc = cfg.train_cfg;
        tc.seed = derive_seed(cfg.global_seed, "train");
        Model model(bc);
        fine_tune(model, m, nullptr, tc, bc.freeze_policy);
        model.save(paths.model_dir);
        return true;
    });

    // ---- crossval ----------------------------------------------------------------
    run_stage("crossval", true, [&](StageCache& cache) {
        cache.add_input("manifest", hash_file(train_input));
        if (cfg.baseline) cache.add_input("baseline_manifest", hash_file(paths.real_manifest()));
        cache.add_input("config", hash_json({{"backbone", backbone_config_to_json(cfg.backbone_cfg)},
                                             {"train", train_config_to_json(cfg.train_cfg)},
                                             {"k", cfg.cv_k},
                                             {"baseline", cfg.baseline}}));
        for (int f = 0; f < cfg.cv_k; ++f) {
            cache.outputs.push_back(paths.fold_report("main", f).string());
            if (cfg.baseline) cache.outputs.push_back(paths.fold_report("baseline", f).string());
        }
        if (cache.fresh(opts.force)) return false;

        fs::create_directories(paths.reports);
        BackboneConfig bc = cfg.backbone_cfg;
        bc.seed = derive_seed(cfg.global_seed, "crossval/model");
        TrainConfig tc = cfg.train_cfg;
        tc.seed = derive_seed(cfg.global_seed, "crossval");

        const DatasetManifest main_m = read_manifest(train_input);
        const auto main_folds = cross_validate(main_m, cfg.cv_k, bc, tc);
        for (const auto& fr : main_folds) write_fold_report(fr, paths.fold_report("main", fr.fold));

        if (cfg.baseline) {
            const DatasetManifest base_m = read_manifest(paths.real_manifest());
            const auto base_folds = cross_validate(base_m, cfg.cv_k, bc, tc);
            for (const auto& fr : base_folds)
                write_fold_report(fr, paths.fold_report("baseline", fr.fold));
        }
        return true;
    });

    // ---- evaluate ------------------------------------------------------------------
    run_stage("evaluate", true, [&](StageCache& cache) {
        std::vector<std::pair<std::string, std::vector<fs::path>>> groups;
        groups.emplace_back("main", std::vector<fs::path>{});
        for (int f = 0; f < cfg.cv_k; ++f) groups.back().second.push_back(paths.fold_report("main", f));
        if (cfg.baseline) {
            groups.emplace_back("baseline", std::vector<fs::path>{});
            for (int f = 0; f < cfg.cv_k; ++f)
                groups.back().second.push_back(paths.fold_report("baseline", f));
        }
        for (const auto& [tag, files] : groups)
            for (const auto& f : files) cache.add_input(f.filename().string(), hash_file(f));
        const fs::path table = paths.reports / "summary.txt";
        const fs::path csv = paths.reports / "summary.csv";
        const fs::path table_pc = paths.reports / "per_class.txt";
        const fs::path csv_pc = paths.reports / "per_class.csv";
        const fs::path agg_json = paths.reports / "aggregate.json";
        cache.outputs = {table.string(), csv.string(), table_pc.string(), csv_pc.string(),
                         agg_json.string()};
        if (cache.fresh(opts.force)) return false;

        std::vector<std::pair<std::string, AggregateReport>> rows;
        ordered_json agg_out = ordered_json::object();
        for (const auto& [tag, files] : groups) {
            std::vector<MetricReport> reports;
            for (const auto& file : files) {
                std::ifstream f(file);
                ordered_json j;
                f >> j;
                reports.push_back(metric_report_from_json(j.at("metrics")));
            }
            const AggregateReport agg = aggregate_folds(reports);
            rows.emplace_back(tag, agg);
            ordered_json a;
            a["fold_count"] = agg.fold_count;
            auto put = [&](const char* name, const MeanStd& ms) {
                a[name] = {{"mean", ms.mean}, {"std", ms.stddev}};
            };
            put("accuracy", agg.accuracy);
            put("kappa", agg.kappa);
            put("rci", agg.rci);
            put("mcc", agg.mcc);
            put("balanced_accuracy", agg.balanced_accuracy);
            agg_out[tag] = std::move(a);
        }
        std::ofstream(table) << render_summary_table(rows);
        std::ofstream(csv) << render_summary_csv(rows);
        std::ofstream(table_pc) << render_per_class_table(rows);
        std::ofstream(csv_pc) << render_per_class_csv(rows);
        std::ofstream(agg_json) << agg_out.dump(2) << "\n";
        return true;
    });

    // ---- embed --------------------------------------------------------------------
    run_stage("embed", true, [&](StageCache& cache) {
        const fs::path manifest_path =
            cfg.embed_manifest == "balanced" ? paths.balanced() : paths.real_manifest();
        cache.add_input("model", hash_dir(paths.model_dir));
        cache.add_input("manifest", hash_file(manifest_path));
        cache.add_input("config", hash_json({{"perplexity", cfg.tsne_perplexity},
                                             {"iterations", cfg.tsne_iterations},
                                             {"manifest", cfg.embed_manifest}}));
        const fs::path csv = paths.embed_dir / "embedding.csv";
        const fs::path png = paths.embed_dir / "embedding.png";
        cache.outputs = {csv.string(), png.string()};
        if (cache.fresh(opts.force)) return false;

        const Model model = Model::load(paths.model_dir);
        const DatasetManifest m = read_manifest(manifest_path);
        const FeatureMatrix features = extract_features(model, m);
        const TsneResult result = tsne_3d(features, cfg.tsne_perplexity, cfg.tsne_iterations,
                                          derive_seed(cfg.global_seed, "embed"));
        fs::create_directories(paths.embed_dir);
        export_embedding_csv(result, features, csv);
        export_embedding_plot({{cfg.strategy, &result, &features}}, png);
        return true;
    });

    rec.ok = !failed;
    std::ofstream f(paths.root / "run_record.json");
    f << rec.to_json().dump(2) << "\n";
    if (failed) {
        std::string msg = "pipeline failed:";
        for (const auto& s : rec.stages)
            if (s.status == "failed") msg += " [" + s.name + "] " + s.error;
        throw std::runtime_error(msg);
    }
    return rec;
}

}  // namespace octfew
