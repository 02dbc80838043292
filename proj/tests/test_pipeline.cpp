#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "octfew/pipeline.hpp"
#include "octfew/synthetic.hpp"

using namespace octfew;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("octfew_pipe_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_small_corpus(const fs::path& root, uint64_t seed) {
    synth::CorpusSpec spec;
    spec.image_size = 32;
    spec.seed = seed;
    for (const auto& c : all_classes()) spec.counts[c.name] = c.is_major() ? 12 : 6;
    synth::write_corpus(spec, root);
}

ordered_json base_config(const fs::path& data_root, const fs::path& out_root) {
    ordered_json j;
    j["schema_version"] = "1";
    j["global_seed"] = 11;
    j["data_root"] = data_root.string();
    j["output_root"] = out_root.string();
    j["strategy"] = "none";
    j["stages"]["classifier"]["k"] = 2;
    j["stages"]["classifier"]["baseline"] = false;
    j["stages"]["classifier"]["train"]["epochs"] = 1;
    j["stages"]["classifier"]["train"]["batch_size"] = 16;
    j["stages"]["classifier"]["train"]["learning_rate"] = 0.002;
    j["stages"]["embed"]["perplexity"] = 5;
    j["stages"]["embed"]["iterations"] = 120;
    return j;
}

}  // namespace

TEST_CASE("config: parse, defaults, env override") {
    TempDir tmp("cfg");
    write_small_corpus(tmp.path / "corpus", 1);
    auto j = base_config(tmp.path / "corpus", tmp.path / "out");
    const auto cfg = experiment_config_from_json(j);
    CHECK(cfg.global_seed == 11);
    CHECK(cfg.cv_k == 2);
    CHECK(cfg.strategy == "none");
    CHECK(cfg.train_cfg.epochs == 1);
    CHECK(cfg.gan_cfg.preset == "light");

    // OCTFEW_DATA_ROOT wins over the config value
    setenv("OCTFEW_DATA_ROOT", (tmp.path / "corpus").c_str(), 1);
    ordered_json j2 = j;
    j2["data_root"] = "/does/not/exist";
    const auto cfg2 = experiment_config_from_json(j2);
    CHECK(cfg2.data_root == tmp.path / "corpus");
    unsetenv("OCTFEW_DATA_ROOT");

    ordered_json bad = j;
    bad["schema_version"] = "42";
    CHECK_THROWS(experiment_config_from_json(bad));
}

TEST_CASE("validate: aggregated errors, not fail-fast") {
    TempDir tmp("val");
    write_small_corpus(tmp.path / "corpus", 2);
    auto j = base_config(tmp.path / "corpus", tmp.path / "out");
    j["strategy"] = "bal_9999";             // error 1
    j["stages"]["classifier"]["k"] = 1;     // error 2
    j["stages"]["embed"]["perplexity"] = 0; // error 3
    const auto cfg = experiment_config_from_json(j);
    const auto errors = validate_experiment(cfg, {});
    CHECK(errors.size() >= 3);
    bool saw_strategy = false, saw_k = false, saw_perp = false;
    for (const auto& e : errors) {
        saw_strategy |= e.find("bal_9999") != std::string::npos;
        saw_k |= e.find("fold count") != std::string::npos;
        saw_perp |= e.find("perplexity") != std::string::npos;
    }
    CHECK(saw_strategy);
    CHECK(saw_k);
    CHECK(saw_perp);

    // a minimal valid desk config validates clean
    const auto ok = validate_experiment(experiment_config_from_json(base_config(
                                            tmp.path / "corpus", tmp.path / "out")),
                                        {});
    CHECK(ok.empty());
}

TEST_CASE("validate: isolated balance stage requires per-class checkpoints") {
    TempDir tmp("iso");
    write_small_corpus(tmp.path / "corpus", 3);
    auto j = base_config(tmp.path / "corpus", tmp.path / "out");
    j["strategy"] = "bal_10000";
    const auto cfg = experiment_config_from_json(j);

    // ingest ran earlier; balance alone must name every missing checkpoint
    {
        const auto pre = validate_experiment(cfg, {"ingest"});
        CHECK(pre.empty());
        RunOptions opts;
        opts.stages = {"ingest"};
        run_experiment(cfg, opts);
    }
    const auto errors = validate_experiment(cfg, {"balance"});
    int named = 0;
    for (const auto& c : all_classes())
        if (!c.is_major())
            for (const auto& e : errors)
                if (e.find(class_name(c)) != std::string::npos) {
                    ++named;
                    break;
                }
    CHECK(named == 5);
}

TEST_CASE("run: desk pipeline end to end, caching, force") {
    TempDir tmp("run");
    write_small_corpus(tmp.path / "corpus", 4);
    const auto cfg =
        experiment_config_from_json(base_config(tmp.path / "corpus", tmp.path / "out"));

    const auto rec = run_experiment(cfg, {});
    CHECK(rec.ok);
    std::map<std::string, std::string> status;
    for (const auto& s : rec.stages) status[s.name] = s.status;
    CHECK(status["ingest"] == "done");
    CHECK(status["augment"] == "not_run");    // strategy none
    CHECK(status["gan_train"] == "not_run");
    CHECK(status["balance"] == "not_run");
    CHECK(status["train"] == "done");
    CHECK(status["crossval"] == "done");
    CHECK(status["evaluate"] == "done");
    CHECK(status["embed"] == "done");

    const fs::path out = tmp.path / "out";
    CHECK(fs::exists(out / "manifests" / "real.json"));
    CHECK(fs::exists(out / "model" / "header.json"));
    CHECK(fs::exists(out / "reports" / "main_fold_0.json"));
    CHECK(fs::exists(out / "reports" / "main_fold_1.json"));
    CHECK(fs::exists(out / "reports" / "summary.txt"));
    CHECK(fs::exists(out / "reports" / "summary.csv"));
    CHECK(fs::exists(out / "embed" / "embedding.csv"));
    CHECK(fs::exists(out / "embed" / "embedding.png"));
    CHECK(fs::exists(out / "run_record.json"));

    // every stage output is referenced by the run record
    {
        std::ifstream f(out / "run_record.json");
        ordered_json j;
        f >> j;
        CHECK(j.at("ok").get<bool>());
        CHECK(j.at("tool_version").get<std::string>() == kToolVersion);
        int done = 0;
        for (const auto& s : j.at("stages"))
            if (s.at("status") == "done") {
                ++done;
                CHECK_FALSE(s.at("outputs").empty());
            }
        CHECK(done == 5);
    }

    // unchanged re-run: everything cached
    const auto rec2 = run_experiment(cfg, {});
    for (const auto& s : rec2.stages)
        if (s.status != "not_run") CHECK(s.status == "skipped");

    // stage subset honored; force re-executes
    RunOptions force_eval;
    force_eval.stages = {"evaluate"};
    force_eval.force = true;
    const auto rec3 = run_experiment(cfg, force_eval);
    for (const auto& s : rec3.stages) {
        if (s.name == "evaluate") CHECK(s.status == "done");
        if (s.name == "crossval") CHECK(s.status == "not_run");
    }

    // determinism: a separate output root yields byte-identical tables
    {
        auto j2 = base_config(tmp.path / "corpus", tmp.path / "out2");
        const auto cfg2 = experiment_config_from_json(j2);
        run_experiment(cfg2, {});
        auto slurp = [](const fs::path& p) {
            std::ifstream f(p);
            std::stringstream ss;
            ss << f.rdbuf();
            return ss.str();
        };
        CHECK(slurp(out / "reports" / "summary.txt") ==
              slurp(tmp.path / "out2" / "reports" / "summary.txt"));
        CHECK(slurp(out / "reports" / "per_class.csv") ==
              slurp(tmp.path / "out2" / "reports" / "per_class.csv"));
    }
}

TEST_CASE("hashing: content-sensitive, path-order independent") {
    TempDir tmp("hash");
    std::ofstream(tmp.path / "a.txt") << "hello";
    std::ofstream(tmp.path / "b.txt") << "world";
    const std::string h1 = hash_dir(tmp.path);
    CHECK(hash_dir(tmp.path) == h1);
    std::ofstream(tmp.path / "b.txt") << "world!";
    CHECK(hash_dir(tmp.path) != h1);
    const std::string f1 = hash_file(tmp.path / "a.txt");
    std::ofstream(tmp.path / "a.txt") << "hellp";
    CHECK(hash_file(tmp.path / "a.txt") != f1);
}
