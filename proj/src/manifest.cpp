#include "octfew/manifest.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "octfew/image.hpp"
#include "octfew/rng.hpp"

namespace octfew {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

const std::vector<ClassLabel>& all_classes() {
    static const std::vector<ClassLabel> table = {
        {ClassName::NORMAL, Tier::major, 0},  {ClassName::CNV, Tier::major, 1},
        {ClassName::DME, Tier::major, 2},     {ClassName::DRUSEN, Tier::major, 3},
        {ClassName::CSC, Tier::rare, 4},      {ClassName::MH, Tier::rare, 5},
        {ClassName::MacTel, Tier::rare, 6},   {ClassName::RP, Tier::rare, 7},
        {ClassName::Stargardt, Tier::rare, 8},
    };
    return table;
}

const std::string& class_name(ClassName n) {
    static const std::vector<std::string> names = {"NORMAL", "CNV",    "DME", "DRUSEN",   "CSC",
                                                   "MH",     "MacTel", "RP",  "Stargardt"};
    return names.at(static_cast<size_t>(n));
}

ClassLabel class_by_name(const std::string& name) {
    for (const auto& c : all_classes())
        if (class_name(c.name) == name) return c;
    throw std::runtime_error("unknown class name: '" + name + "'");
}

ClassLabel class_by_index(int index) {
    if (index < 0 || index >= kNumClasses)
        throw std::runtime_error("class index out of range: " + std::to_string(index));
    return all_classes()[static_cast<size_t>(index)];
}

const std::string& provenance_name(Provenance p) {
    static const std::vector<std::string> names = {"real", "augmented", "generated"};
    return names.at(static_cast<size_t>(p));
}

Provenance provenance_by_name(const std::string& s) {
    if (s == "real") return Provenance::real;
    if (s == "augmented") return Provenance::augmented;
    if (s == "generated") return Provenance::generated;
    throw std::runtime_error("unknown provenance: '" + s + "'");
}

std::string now_iso8601() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::map<ClassName, int64_t> DatasetManifest::class_counts() const {
    std::map<ClassName, int64_t> counts;
    for (const auto& r : records) ++counts[r.label.name];
    return counts;
}

std::vector<const ImageRecord*> DatasetManifest::of_class(ClassName c) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.label.name == c) out.push_back(&r);
    return out;
}

const ImageRecord* DatasetManifest::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& r : records) {
        if (r.id.empty()) throw std::runtime_error("manifest record with empty id (path " + r.path + ")");
        if (!ids.insert(r.id).second) throw std::runtime_error("duplicate record id: " + r.id);
        if (r.is_synthetic() && !r.source_id)
            throw std::runtime_error("synthetic record without source_id: " + r.id);
        if (!r.is_synthetic() && r.source_id)
            throw std::runtime_error("real record with source_id: " + r.id);
    }
}

// ---------------------------------------------------------------------------
// scan_directory
// ---------------------------------------------------------------------------

DatasetManifest scan_directory(const fs::path& root,
                               const std::map<std::string, ClassLabel>& class_mapping,
                               const ScanOptions& opts) {
    if (!fs::exists(root) || !fs::is_directory(root))
        throw std::runtime_error("scan root does not exist: " + root.string());

    std::vector<std::string> subdirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) subdirs.push_back(e.path().filename().string());
    std::sort(subdirs.begin(), subdirs.end());

    DatasetManifest m;
    m.created_at = now_iso8601();
    int64_t skipped = 0;
    std::string skip_notes;

    for (const auto& d : subdirs) {
        if (opts.ignore_dirs.count(d)) continue;
        auto it = class_mapping.find(d);
        if (it == class_mapping.end())
            throw std::runtime_error("unmapped subdirectory '" + d +
                                     "' (map it to a class or add it to the ignore list)");
        const ClassLabel label = it->second;

        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(root / d))
            if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());

        for (const auto& f : files) {
            if (opts.verify_decodable && !can_decode(f)) {
                ++skipped;
                skip_notes += (skip_notes.empty() ? "" : "; ") + f.string() + " undecodable";
                continue;
            }
            ImageRecord r;
            r.path = f.string();
            r.id = fs::relative(f, root).generic_string();
            r.label = label;
            r.provenance = Provenance::real;
            m.records.push_back(std::move(r));
        }
    }
    if (skipped > 0)
        m.notes = "excluded " + std::to_string(skipped) + " undecodable file(s): " + skip_notes;
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// sample_class
// ---------------------------------------------------------------------------

DatasetManifest sample_class(const DatasetManifest& m, ClassLabel label, int64_t n, uint64_t seed) {
    auto pool = m.of_class(label.name);
    if (static_cast<int64_t>(pool.size()) < n)
        throw std::runtime_error("sample_class: requested " + std::to_string(n) + " " +
                                 class_name(label) + " records but only " +
                                 std::to_string(pool.size()) + " available (short by " +
                                 std::to_string(n - static_cast<int64_t>(pool.size())) + ")");
    Rng rng(derive_seed(seed, "sample_class/" + class_name(label)));
    auto idx = rng.sample_without_replacement(pool.size(), static_cast<size_t>(n));
    std::sort(idx.begin(), idx.end());  // keep original manifest order

    DatasetManifest out;
    out.global_seed = seed;
    out.created_at = m.created_at.empty() ? now_iso8601() : m.created_at;
    for (size_t i : idx) out.records.push_back(*pool[i]);
    return out;
}

// ---------------------------------------------------------------------------
// make_folds and SplitPlan
// ---------------------------------------------------------------------------

SplitPlan make_folds(const DatasetManifest& m, int k, uint64_t seed) {
    if (k < 2) throw std::runtime_error("make_folds: k must be >= 2, got " + std::to_string(k));
    m.validate();

    std::map<ClassName, std::vector<const ImageRecord*>> real_by_class;
    for (const auto& r : m.records)
        if (!r.is_synthetic()) real_by_class[r.label.name].push_back(&r);

    for (const auto& [cls, recs] : real_by_class)
        if (static_cast<int>(recs.size()) < k)
            throw std::runtime_error("make_folds: class " + class_name(cls) + " has only " +
                                     std::to_string(recs.size()) + " real records, need >= " +
                                     std::to_string(k));
    // Classes present only through synthetic records can never be tested.
    for (const auto& r : m.records)
        if (r.is_synthetic() && !real_by_class.count(r.label.name))
            throw std::runtime_error("make_folds: class " + class_name(r.label.name) +
                                     " has no real records; its test TPR would be unmeasurable");

    SplitPlan plan;
    plan.k = k;
    plan.stratified = true;

    // Stratified deal: shuffle each class, rotate the starting fold per
    // class so fold sizes stay even across classes, deal round-robin.
    for (auto& [cls, recs] : real_by_class) {
        Rng rng(derive_seed(seed, "folds/" + class_name(cls)));
        std::vector<size_t> order(recs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        const int start = static_cast<int>(rng.below(static_cast<uint64_t>(k)));
        for (size_t i = 0; i < order.size(); ++i)
            plan.assignments[recs[order[i]]->id] = (start + static_cast<int>(i)) % k;
    }

    // Synthetic records: excluded from the fold testing their ancestor.
    for (const auto& r : m.records) {
        if (!r.is_synthetic()) continue;
        auto it = r.source_id ? plan.assignments.find(*r.source_id) : plan.assignments.end();
        if (it != plan.assignments.end())
            plan.assignments[r.id] = it->second;
        else
            plan.assignments[r.id] = static_cast<int>(fnv1a64(r.id) % static_cast<uint64_t>(k));
    }
    return plan;
}

std::vector<std::string> SplitPlan::test_ids(const DatasetManifest& m, int fold) const {
    std::vector<std::string> out;
    for (const auto& r : m.records) {
        if (r.is_synthetic()) continue;  // synthetic records never reach evaluation
        auto it = assignments.find(r.id);
        if (it != assignments.end() && it->second == fold) out.push_back(r.id);
    }
    return out;
}

std::vector<std::string> SplitPlan::train_ids(const DatasetManifest& m, int fold) const {
    std::vector<std::string> out;
    for (const auto& r : m.records) {
        auto it = assignments.find(r.id);
        if (it == assignments.end()) continue;
        if (it->second == fold) continue;  // test fold for reals, excluded fold for synthetics
        out.push_back(r.id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string manifest_to_json(const DatasetManifest& m) {
    m.validate();
    ordered_json j;
    j["schema_version"] = DatasetManifest::kSchemaVersion;
    j["global_seed"] = m.global_seed;
    j["created_at"] = m.created_at;
    j["notes"] = m.notes;
    ordered_json counts = ordered_json::object();
    auto cc = m.class_counts();
    for (const auto& c : all_classes()) {
        auto it = cc.find(c.name);
        if (it != cc.end()) counts[class_name(c)] = it->second;
    }
    j["class_counts"] = counts;
    ordered_json recs = ordered_json::array();
    for (const auto& r : m.records) {
        ordered_json e;
        e["id"] = r.id;
        e["path"] = r.path;
        e["label"] = class_name(r.label);
        e["provenance"] = provenance_name(r.provenance);
        if (r.source_id) e["source_id"] = *r.source_id;
        if (r.seed) e["seed"] = *r.seed;
        recs.push_back(std::move(e));
    }
    j["records"] = std::move(recs);
    return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
    ordered_json j = ordered_json::parse(text);
    const std::string ver = j.at("schema_version").get<std::string>();
    if (ver != DatasetManifest::kSchemaVersion)
        throw std::runtime_error("manifest schema version mismatch: file has '" + ver +
                                 "', this build reads '" + DatasetManifest::kSchemaVersion + "'");
    DatasetManifest m;
    m.global_seed = j.at("global_seed").get<uint64_t>();
    m.created_at = j.at("created_at").get<std::string>();
    m.notes = j.at("notes").get<std::string>();
    for (const auto& e : j.at("records")) {
        ImageRecord r;
        r.id = e.at("id").get<std::string>();
        r.path = e.at("path").get<std::string>();
        r.label = class_by_name(e.at("label").get<std::string>());
        r.provenance = provenance_by_name(e.at("provenance").get<std::string>());
        if (e.contains("source_id")) r.source_id = e.at("source_id").get<std::string>();
        if (e.contains("seed")) r.seed = e.at("seed").get<uint64_t>();
        m.records.push_back(std::move(r));
    }
    m.validate();

    // The cached count table must agree with the records.
    const auto counted = m.class_counts();
    const auto& cached = j.at("class_counts");
    std::map<ClassName, int64_t> cached_counts;
    for (auto it = cached.begin(); it != cached.end(); ++it)
        cached_counts[class_by_name(it.key()).name] = it.value().get<int64_t>();
    if (cached_counts != counted)
        throw std::runtime_error("manifest class_counts cache disagrees with records");
    return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path, const WriteOptions& opts) {
    if (opts.verify_images) {
        for (const auto& r : m.records) {
            if (!fs::exists(r.path))
                throw std::runtime_error("record " + r.id + " points at missing file: " + r.path);
            if (!can_decode(r.path))
                throw std::runtime_error("record " + r.id + " points at undecodable file: " + r.path);
        }
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open manifest for writing: " + path.string());
    f << manifest_to_json(m);
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open manifest: " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return manifest_from_json(ss.str());
}

}  // namespace octfew
