#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace octfew {

// ---------------------------------------------------------------------------
// Nine-class retinal taxonomy. Index order is fixed and stable.
// ---------------------------------------------------------------------------

enum class ClassName : int {
    NORMAL = 0,
    CNV = 1,
    DME = 2,
    DRUSEN = 3,
    CSC = 4,
    MH = 5,
    MacTel = 6,
    RP = 7,
    Stargardt = 8,
};

inline constexpr int kNumClasses = 9;

enum class Tier { major, rare };

struct ClassLabel {
    ClassName name;
    Tier tier;
    int index;

    bool is_major() const { return tier == Tier::major; }
    bool operator==(const ClassLabel& o) const { return name == o.name; }
    bool operator<(const ClassLabel& o) const { return index < o.index; }
};

const std::vector<ClassLabel>& all_classes();
ClassLabel class_by_name(const std::string& name);   // throws on unknown name
ClassLabel class_by_index(int index);                // throws when out of 0..8
const std::string& class_name(ClassName n);
inline const std::string& class_name(const ClassLabel& l) { return class_name(l.name); }

// ---------------------------------------------------------------------------
// Records and manifests
// ---------------------------------------------------------------------------

enum class Provenance { real, augmented, generated };

const std::string& provenance_name(Provenance p);
Provenance provenance_by_name(const std::string& s);

struct ImageRecord {
    std::string id;
    std::string path;
    ClassLabel label{ClassName::NORMAL, Tier::major, 0};
    Provenance provenance = Provenance::real;
    std::optional<std::string> source_id;  // real ancestor; required iff synthetic
    std::optional<uint64_t> seed;          // per-record seed used to produce it

    bool is_synthetic() const { return provenance != Provenance::real; }
};

struct DatasetManifest {
    static constexpr const char* kSchemaVersion = "1";

    uint64_t global_seed = 0;
    std::string created_at;  // ISO-8601 UTC, set at creation
    std::string notes;
    std::vector<ImageRecord> records;

    std::map<ClassName, int64_t> class_counts() const;
    std::vector<const ImageRecord*> of_class(ClassName c) const;
    const ImageRecord* find(const std::string& id) const;

    // Structural checks: unique ids, synthetic <-> source_id, valid labels.
    // Throws std::runtime_error naming the first violation.
    void validate() const;
};

std::string now_iso8601();

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

struct ScanOptions {
    std::set<std::string> ignore_dirs;  // subdirectory names to skip explicitly
    bool verify_decodable = true;       // undecodable files -> warning + exclusion
};

// Walks root's class subdirectories (directory-per-class layout) and emits
// one real record per decodable image, ordered lexicographically by path.
// Unmapped, non-ignored subdirectories are an error.
DatasetManifest scan_directory(const std::filesystem::path& root,
                               const std::map<std::string, ClassLabel>& class_mapping,
                               const ScanOptions& opts = {});

// Uniform sample of n records of one class, without replacement. Returns a
// manifest holding exactly those n records.
DatasetManifest sample_class(const DatasetManifest& m, ClassLabel label, int64_t n, uint64_t seed);

// ---------------------------------------------------------------------------
// Cross-validation splits
// ---------------------------------------------------------------------------

// For a real record, the assigned fold is the one whose TEST partition
// holds it. A synthetic record never enters any test partition; its
// assigned fold is the single fold whose training set excludes it (the
// fold testing its ancestor, or a hash-derived fold when the ancestor is
// not part of the manifest).
struct SplitPlan {
    int k = 0;
    bool stratified = true;
    std::map<std::string, int> assignments;

    std::vector<std::string> test_ids(const DatasetManifest& m, int fold) const;
    std::vector<std::string> train_ids(const DatasetManifest& m, int fold) const;
};

// Stratified k-fold assignment. Requires k >= 2 and at least k real
// records for every class present in the manifest.
SplitPlan make_folds(const DatasetManifest& m, int k, uint64_t seed);

// ---------------------------------------------------------------------------
// Serialization. UTF-8 JSON, canonical key order, schema-versioned.
// ---------------------------------------------------------------------------

struct WriteOptions {
    // Checks that each record's path exists and decodes. Stages that just
    // produced the files themselves may skip the decode pass.
    bool verify_images = true;
};

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path,
                    const WriteOptions& opts = {});
DatasetManifest read_manifest(const std::filesystem::path& path);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

}  // namespace octfew
