#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "octfew/balance.hpp"
#include "octfew/gan.hpp"
#include "octfew/rng.hpp"
#include "octfew/synthetic.hpp"

using namespace octfew;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("octfew_bal_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

DatasetManifest write_corpus_manifest(const fs::path& root,
                                      const std::map<ClassName, int64_t>& counts, int size,
                                      uint64_t seed) {
    synth::CorpusSpec spec;
    spec.image_size = size;
    spec.counts = counts;
    spec.seed = seed;
    synth::write_corpus(spec, root);
    std::map<std::string, ClassLabel> mapping;
    for (const auto& c : all_classes()) mapping[class_name(c)] = c;
    return scan_directory(root, mapping);
}

// Micro translation checkpoint for one rare class.
void train_micro_ckpt(const DatasetManifest& real, ClassName cls, const fs::path& out,
                      uint64_t seed) {
    DatasetManifest a, b;
    a.created_at = b.created_at = real.created_at;
    for (const auto* r : real.of_class(ClassName::NORMAL)) a.records.push_back(*r);
    for (const auto* r : real.of_class(cls)) b.records.push_back(*r);
    gan::TranslationConfig cfg;
    cfg.image_size = 16;
    cfg.iterations = 2;
    cfg.seed = seed;
    gan::train(a, b, cfg, out);
}

}  // namespace

TEST_CASE("builtin strategies: ledgers match the two balancing recipes") {
    const auto imb = builtin_strategy("imb_5000");
    const auto bal5 = builtin_strategy("bal_5000");
    const auto bal10 = builtin_strategy("bal_10000");
    CHECK_THROWS(builtin_strategy("bal_999"));

    for (const auto& c : all_classes()) {
        if (c.is_major()) {
            CHECK(imb.targets.at(c.name) == 0);  // native count
            CHECK(imb.rules.at(c.name).real == RealRule::all);
            CHECK(bal5.targets.at(c.name) == 5000);
            CHECK(bal5.rules.at(c.name).real == RealRule::sample);
        } else {
            // rare ledger: 2000 augmented + 3000 generated
            CHECK(bal5.rules.at(c.name).augmented == 2000);
            CHECK(bal5.rules.at(c.name).generated == 3000);
            CHECK(imb.rules.at(c.name).augmented == 2000);
            CHECK(imb.rules.at(c.name).generated == 3000);
            // 10000 recipe: 2000 augmented + 8000 generated
            CHECK(bal10.rules.at(c.name).augmented == 2000);
            CHECK(bal10.rules.at(c.name).generated == 8000);
            CHECK(bal10.targets.at(c.name) == 10000);
        }
    }
    // DRUSEN special case: all real, augmentation fills the remainder
    CHECK(bal10.rules.at(ClassName::DRUSEN).real == RealRule::all);
    CHECK(bal10.rules.at(ClassName::DRUSEN).augmented_fill);
    CHECK(bal10.rules.at(ClassName::NORMAL).real == RealRule::sample);
}

TEST_CASE("plan_balance: ledger resolution and loud failures") {
    TempDir tmp("plan");
    std::map<ClassName, int64_t> counts;
    for (const auto& c : all_classes()) counts[c.name] = c.is_major() ? 30 : 4;
    const auto real = write_corpus_manifest(tmp.path / "corpus", counts, 16, 1);

    // desk-scaled bal_5000: targets 50, rares 20 aug + 30 gen
    BalanceStrategy s = scale_strategy(builtin_strategy("bal_5000"), 0.01);
    s.seed = 5;
    std::map<ClassName, std::string> ckpts;
    for (const auto& c : all_classes())
        if (!c.is_major()) ckpts[c.name] = (tmp.path / "fakeckpt").string();

    // majors have only 30 real but the target needs 50 sampled -> shortfall error
    CHECK_THROWS_WITH_AS(plan_balance(real, s, ckpts), doctest::Contains("short by"),
                         std::runtime_error);

    std::map<ClassName, int64_t> counts2 = counts;
    for (const auto& c : all_classes())
        if (c.is_major()) counts2[c.name] = 60;
    const auto real2 = write_corpus_manifest(tmp.path / "corpus2", counts2, 16, 2);
    const auto plan = plan_balance(real2, s, ckpts);
    for (const auto& c : all_classes()) {
        CHECK(plan.ledger.at(c.name).target() == 50);
        if (!c.is_major()) {
            CHECK(plan.ledger.at(c.name).augmented == 20);
            CHECK(plan.ledger.at(c.name).generated == 30);
        }
    }

    // missing checkpoint names the class
    auto missing = ckpts;
    missing.erase(ClassName::RP);
    CHECK_THROWS_WITH_AS(plan_balance(real2, s, missing), doctest::Contains("RP"),
                         std::runtime_error);

    // pass-through strategy: targets equal current real counts
    BalanceStrategy noop;
    noop.name = "noop";
    for (const auto& c : all_classes()) {
        noop.targets[c.name] = 0;
        noop.rules[c.name] = {RealRule::all, 0, 0, false, 0};
    }
    const auto plan2 = plan_balance(real2, noop, {});
    for (const auto& c : all_classes()) {
        CHECK(plan2.ledger.at(c.name).real == counts2[c.name]);
        CHECK(plan2.ledger.at(c.name).augmented == 0);
        CHECK(plan2.ledger.at(c.name).generated == 0);
    }
}

TEST_CASE("execute_plan: exact composition, provenance, class purity, determinism") {
    TempDir tmp("exec");
    std::map<ClassName, int64_t> counts;
    for (const auto& c : all_classes()) counts[c.name] = c.is_major() ? 40 : 4;
    const auto real = write_corpus_manifest(tmp.path / "corpus", counts, 16, 3);

    // micro checkpoints for two rare classes; strategy touches only them
    train_micro_ckpt(real, ClassName::RP, tmp.path / "ckpt_rp", 10);
    train_micro_ckpt(real, ClassName::CSC, tmp.path / "ckpt_csc", 11);

    BalanceStrategy s;
    s.name = "micro";
    s.seed = 21;
    for (const auto& c : all_classes()) {
        if (c.is_major()) {
            s.targets[c.name] = 20;
            s.rules[c.name] = {RealRule::sample, 0, 0, false, 0};
        } else if (c.name == ClassName::RP || c.name == ClassName::CSC) {
            s.targets[c.name] = 20;
            s.rules[c.name] = {RealRule::none, 0, 8, false, 12};
        } else {
            s.targets[c.name] = 4;
            s.rules[c.name] = {RealRule::all, 0, 0, false, 0};
        }
    }
    std::map<ClassName, std::string> ckpts = {
        {ClassName::RP, (tmp.path / "ckpt_rp").string()},
        {ClassName::CSC, (tmp.path / "ckpt_csc").string()},
    };
    const auto plan = plan_balance(real, s, ckpts);

    ExecutionContext ctx;
    ctx.image_dir = tmp.path / "img1";
    const auto out = execute_plan(plan, real, ctx);
    out.validate();

    std::map<ClassName, std::map<Provenance, int64_t>> hist;
    for (const auto& r : out.records) hist[r.label.name][r.provenance]++;
    for (const auto& c : all_classes()) {
        int64_t total = 0;
        for (const auto& [p, n] : hist[c.name]) total += n;
        CHECK(total == s.targets.at(c.name));
    }
    CHECK(hist[ClassName::RP][Provenance::augmented] == 8);
    CHECK(hist[ClassName::RP][Provenance::generated] == 12);
    CHECK(hist[ClassName::CSC][Provenance::augmented] == 8);
    CHECK(hist[ClassName::CSC][Provenance::generated] == 12);
    CHECK(hist[ClassName::NORMAL][Provenance::real] == 20);

    // generated records trace back to NORMAL sources and carry the right label
    for (const auto& r : out.records)
        if (r.provenance == Provenance::generated) {
            REQUIRE(r.source_id.has_value());
            const auto* src = real.find(*r.source_id);
            REQUIRE(src != nullptr);
            CHECK(src->label.name == ClassName::NORMAL);
        }

    // determinism: identical plan seed reproduces identical ids
    ExecutionContext ctx2;
    ctx2.image_dir = tmp.path / "img2";
    const auto out2 = execute_plan(plan, real, ctx2);
    REQUIRE(out2.records.size() == out.records.size());
    for (size_t i = 0; i < out.records.size(); ++i) {
        CHECK(out2.records[i].id == out.records[i].id);
        CHECK(out2.records[i].label.index == out.records[i].label.index);
        CHECK(out2.records[i].provenance == out.records[i].provenance);
    }

    // cross-class contamination rejected: swap the checkpoints
    BalancePlan tampered = plan;
    tampered.checkpoints[ClassName::RP] = (tmp.path / "ckpt_csc").string();
    CHECK_THROWS_WITH_AS(execute_plan(tampered, real, ctx), doctest::Contains("targets"),
                         std::runtime_error);
}

TEST_CASE("scale_strategy: proportional targets") {
    const auto s = scale_strategy(builtin_strategy("bal_10000"), 0.01);
    for (const auto& c : all_classes()) {
        CHECK(s.targets.at(c.name) == 100);
        if (!c.is_major()) {
            CHECK(s.rules.at(c.name).augmented == 20);
            CHECK(s.rules.at(c.name).generated == 80);
        }
    }
    CHECK_THROWS(scale_strategy(builtin_strategy("bal_5000"), 0.0));
}

TEST_CASE("bal_500_desk: desk recipe keeps rare originals and fills with augmentation") {
    const auto s = builtin_strategy("bal_500_desk");
    for (const auto& c : all_classes()) {
        CHECK(s.targets.at(c.name) == 500);
        CHECK(s.rules.at(c.name).real == RealRule::all);
        CHECK(s.rules.at(c.name).augmented_fill);
        if (!c.is_major()) CHECK(s.rules.at(c.name).generated == 300);
    }
}
