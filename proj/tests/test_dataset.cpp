#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "octfew/manifest.hpp"
#include "octfew/rng.hpp"
#include "octfew/synthetic.hpp"

using namespace octfew;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("octfew_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::map<std::string, ClassLabel> identity_mapping() {
    std::map<std::string, ClassLabel> m;
    for (const auto& c : all_classes()) m[class_name(c)] = c;
    return m;
}

void write_class_images(const fs::path& root, ClassName cls, int n, uint64_t seed = 0) {
    fs::create_directories(root / class_name(cls));
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04d.png", i);
        save_png(root / class_name(cls) / name,
                 synth::make_image(cls, 24, derive_seed(seed, static_cast<uint64_t>(i))));
    }
}

// Synthetic manifest without any files on disk (for split logic tests).
DatasetManifest fake_manifest(const std::map<ClassName, int>& real_counts) {
    DatasetManifest m;
    m.created_at = "2026-01-01T00:00:00Z";
    for (const auto& [cls, n] : real_counts)
        for (int i = 0; i < n; ++i) {
            ImageRecord r;
            r.id = class_name(class_by_index(static_cast<int>(cls))) + "/" + std::to_string(i);
            r.path = "/nonexistent/" + r.id + ".png";
            r.label = class_by_index(static_cast<int>(cls));
            m.records.push_back(std::move(r));
        }
    return m;
}

}  // namespace

TEST_CASE("class table: tiers, indices, names") {
    CHECK(all_classes().size() == 9);
    for (int i = 0; i < 9; ++i) CHECK(class_by_index(i).index == i);
    CHECK(class_by_name("NORMAL").is_major());
    CHECK(class_by_name("CNV").is_major());
    CHECK(class_by_name("DME").is_major());
    CHECK(class_by_name("DRUSEN").is_major());
    for (const auto& n : {"CSC", "MH", "MacTel", "RP", "Stargardt"})
        CHECK_FALSE(class_by_name(n).is_major());
    CHECK_THROWS(class_by_name("NOPE"));
    CHECK_THROWS(class_by_index(9));
}

TEST_CASE("scan_directory: counts, ordering, errors") {
    TempDir tmp("scan");
    write_class_images(tmp.path, ClassName::NORMAL, 3);
    write_class_images(tmp.path, ClassName::CNV, 2);

    auto m = scan_directory(tmp.path, identity_mapping());
    CHECK(m.records.size() == 5);
    auto counts = m.class_counts();
    CHECK(counts[ClassName::NORMAL] == 3);
    CHECK(counts[ClassName::CNV] == 2);
    for (const auto& r : m.records) CHECK(r.provenance == Provenance::real);
    // lexicographic by path
    for (size_t i = 1; i < m.records.size(); ++i) CHECK(m.records[i - 1].path < m.records[i].path);

    // empty root: no records, no error
    TempDir empty("scan_empty");
    CHECK(scan_directory(empty.path, identity_mapping()).records.empty());

    // unmapped subdirectory is an error naming it; ignoring it is fine
    fs::create_directories(tmp.path / "STRAYDIR");
    CHECK_THROWS_WITH_AS(scan_directory(tmp.path, identity_mapping()),
                         doctest::Contains("STRAYDIR"), std::runtime_error);
    ScanOptions so;
    so.ignore_dirs = {"STRAYDIR"};
    CHECK(scan_directory(tmp.path, identity_mapping(), so).records.size() == 5);

    // undecodable file: warning + exclusion, recorded in notes
    std::ofstream(tmp.path / "NORMAL" / "broken.png") << "not a png";
    auto m2 = scan_directory(tmp.path, identity_mapping(), so);
    CHECK(m2.records.size() == 5);
    CHECK(m2.notes.find("broken.png") != std::string::npos);
}

TEST_CASE("sample_class: uniform without replacement, deterministic") {
    TempDir tmp("sample");
    write_class_images(tmp.path, ClassName::NORMAL, 20);
    auto m = scan_directory(tmp.path, identity_mapping());

    auto s1 = sample_class(m, class_by_name("NORMAL"), 8, 42);
    auto s2 = sample_class(m, class_by_name("NORMAL"), 8, 42);
    REQUIRE(s1.records.size() == 8);
    for (size_t i = 0; i < 8; ++i) CHECK(s1.records[i].id == s2.records[i].id);

    auto s3 = sample_class(m, class_by_name("NORMAL"), 8, 43);
    bool differs = false;
    for (size_t i = 0; i < 8; ++i) differs |= s1.records[i].id != s3.records[i].id;
    CHECK(differs);

    // exhaustive draw: identical record set regardless of seed
    auto all1 = sample_class(m, class_by_name("NORMAL"), 20, 1);
    auto all2 = sample_class(m, class_by_name("NORMAL"), 20, 999);
    std::set<std::string> ids1, ids2;
    for (const auto& r : all1.records) ids1.insert(r.id);
    for (const auto& r : all2.records) ids2.insert(r.id);
    CHECK(ids1 == ids2);
    CHECK(ids1.size() == 20);

    // shortfall error names the gap
    CHECK_THROWS_WITH_AS(sample_class(m, class_by_name("NORMAL"), 21, 1),
                         doctest::Contains("short by 1"), std::runtime_error);
}

TEST_CASE("make_folds: stratification and degenerate k") {
    std::map<ClassName, int> counts;
    for (const auto& c : all_classes()) counts[c.name] = 10;
    auto m = fake_manifest(counts);

    CHECK_THROWS(make_folds(m, 1, 0));  // no test/train separation possible

    const auto plan = make_folds(m, 5, 7);
    CHECK(plan.k == 5);
    CHECK(plan.assignments.size() == m.records.size());

    // every fold's test partition has exactly 2 per class
    for (int f = 0; f < 5; ++f) {
        std::map<ClassName, int> per_class;
        for (const auto& id : plan.test_ids(m, f)) per_class[m.find(id)->label.name]++;
        for (const auto& c : all_classes()) CHECK(per_class[c.name] == 2);
    }

    // class with fewer than k reals is rejected
    counts[ClassName::RP] = 4;
    CHECK_THROWS_WITH_AS(make_folds(fake_manifest(counts), 5, 7), doctest::Contains("RP"),
                         std::runtime_error);
}

TEST_CASE("make_folds: per-class spread <= 1 for uneven classes") {
    std::map<ClassName, int> counts = {{ClassName::NORMAL, 13}, {ClassName::CNV, 7},
                                       {ClassName::DME, 22},    {ClassName::DRUSEN, 5},
                                       {ClassName::CSC, 9}};
    auto m = fake_manifest(counts);
    const auto plan = make_folds(m, 5, 123);
    for (const auto& [cls, n] : counts) {
        std::map<int, int> fold_sizes;
        for (const auto& r : m.records)
            if (r.label.name == cls) fold_sizes[plan.assignments.at(r.id)]++;
        int mn = 1 << 30, mx = 0;
        for (int f = 0; f < 5; ++f) {
            mn = std::min(mn, fold_sizes[f]);
            mx = std::max(mx, fold_sizes[f]);
        }
        CHECK(mx - mn <= 1);
    }
}

TEST_CASE("make_folds: ancestor-leak guard, brute force") {
    std::map<ClassName, int> counts = {{ClassName::NORMAL, 12}, {ClassName::RP, 8}};
    auto m = fake_manifest(counts);
    // synthetic records referencing RP ancestors plus one orphan ancestor
    Rng rng(5);
    for (int i = 0; i < 40; ++i) {
        ImageRecord r;
        r.id = "syn/" + std::to_string(i);
        r.path = "/nonexistent/syn.png";
        r.label = class_by_name("RP");
        r.provenance = i % 2 ? Provenance::augmented : Provenance::generated;
        r.source_id = i % 5 == 4 ? "missing/ancestor"
                                 : "RP/" + std::to_string(static_cast<int>(rng.below(8)));
        r.seed = static_cast<uint64_t>(i);
        m.records.push_back(std::move(r));
    }
    const auto plan = make_folds(m, 4, 99);

    // brute-force scan over every fold
    for (int f = 0; f < 4; ++f) {
        const auto test = plan.test_ids(m, f);
        const std::set<std::string> test_set(test.begin(), test.end());
        for (const auto& id : test) CHECK_FALSE(m.find(id)->is_synthetic());
        for (const auto& id : plan.train_ids(m, f)) {
            const auto* r = m.find(id);
            if (r->is_synthetic() && r->source_id)
                CHECK_FALSE(test_set.count(*r->source_id));
        }
    }

    // a synthetic record whose ancestor sits in fold f's test set is absent
    // from fold f's training set
    for (const auto& rec : m.records) {
        if (!rec.is_synthetic() || !rec.source_id) continue;
        auto it = plan.assignments.find(*rec.source_id);
        if (it == plan.assignments.end()) continue;
        const int excluded_fold = it->second;
        const auto train = plan.train_ids(m, excluded_fold);
        CHECK(std::find(train.begin(), train.end(), rec.id) == train.end());
    }
}

TEST_CASE("manifest round-trip: identity and byte stability") {
    TempDir tmp("roundtrip");
    write_class_images(tmp.path, ClassName::DME, 4);
    auto m = scan_directory(tmp.path, identity_mapping());
    m.global_seed = 7;
    m.notes = "test";

    const fs::path p1 = tmp.path / "m1.json";
    const fs::path p2 = tmp.path / "m2.json";
    write_manifest(m, p1);
    auto m2 = read_manifest(p1);
    CHECK(m2.global_seed == m.global_seed);
    CHECK(m2.created_at == m.created_at);
    CHECK(m2.notes == m.notes);
    REQUIRE(m2.records.size() == m.records.size());
    for (size_t i = 0; i < m.records.size(); ++i) {
        CHECK(m2.records[i].id == m.records[i].id);
        CHECK(m2.records[i].path == m.records[i].path);
        CHECK(m2.records[i].label.index == m.records[i].label.index);
        CHECK(m2.records[i].provenance == m.records[i].provenance);
        CHECK(m2.records[i].source_id == m.records[i].source_id);
        CHECK(m2.records[i].seed == m.records[i].seed);
    }

    // byte-stable round trip
    write_manifest(m2, p2);
    std::ifstream f1(p1), f2(p2);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
}

TEST_CASE("manifest read: duplicate ids and version mismatch rejected") {
    TempDir tmp("badmanifest");
    write_class_images(tmp.path, ClassName::CSC, 2);
    auto m = scan_directory(tmp.path, identity_mapping());
    std::string json = manifest_to_json(m);

    // duplicate id (hand-edited file)
    auto dup = json;
    const auto id_pos = dup.find("\"id\":");
    const auto id2_pos = dup.find("\"id\":", id_pos + 1);
    const auto val_start = dup.find('"', dup.find(':', id2_pos)) ;
    const auto val_end = dup.find('"', val_start + 1);
    const auto first_val_start = dup.find('"', dup.find(':', id_pos));
    const auto first_val_end = dup.find('"', first_val_start + 1);
    dup.replace(val_start, val_end - val_start + 1,
                dup.substr(first_val_start, first_val_end - first_val_start + 1));
    CHECK_THROWS_WITH_AS(manifest_from_json(dup), doctest::Contains("duplicate"),
                         std::runtime_error);

    // schema from the future
    auto newer = json;
    const auto vpos = newer.find("\"schema_version\": \"1\"");
    REQUIRE(vpos != std::string::npos);
    newer.replace(vpos, std::string("\"schema_version\": \"1\"").size(),
                  "\"schema_version\": \"999\"");
    CHECK_THROWS_WITH_AS(manifest_from_json(newer), doctest::Contains("999"), std::runtime_error);

    // tampered count cache
    auto wrong = json;
    const auto cpos = wrong.find("\"CSC\": 2");
    REQUIRE(cpos != std::string::npos);
    wrong.replace(cpos, std::string("\"CSC\": 2").size(), "\"CSC\": 3");
    CHECK_THROWS_WITH_AS(manifest_from_json(wrong), doctest::Contains("class_counts"),
                         std::runtime_error);
}

TEST_CASE("write_manifest: verification catches missing files") {
    TempDir tmp("verify");
    DatasetManifest m;
    m.created_at = now_iso8601();
    ImageRecord r;
    r.id = "x";
    r.path = (tmp.path / "missing.png").string();
    r.label = class_by_name("NORMAL");
    m.records.push_back(r);
    CHECK_THROWS_WITH_AS(write_manifest(m, tmp.path / "out.json"), doctest::Contains("missing"),
                         std::runtime_error);
    // skip verification for trusted writers
    write_manifest(m, tmp.path / "out.json", {.verify_images = false});
    CHECK(fs::exists(tmp.path / "out.json"));
}
