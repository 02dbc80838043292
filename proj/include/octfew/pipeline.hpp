#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octfew/augment.hpp"
#include "octfew/classifier.hpp"
#include "octfew/gan.hpp"

namespace octfew {

inline constexpr const char* kToolVersion = "octfew 0.1.0";

// One declarative file drives the whole experiment graph:
// ingest -> augment -> gan-train -> balance -> train -> crossval ->
// evaluate -> embed. Per-stage seeds derive from (global_seed, stage), so
// any stage reproduces independently.
struct ExperimentConfig {
    static constexpr const char* kSchemaVersion = "1";

    uint64_t global_seed = 0;
    std::filesystem::path data_root;
    std::filesystem::path output_root;
    std::string strategy = "none";  // builtin balance strategy, or "none"
    std::set<std::string> ignore_dirs;

    // augment stage (GAN domain preparation)
    int64_t domain_b_target = 64;
    std::optional<int64_t> domain_a_size;  // nullopt: all normals
    AugmentationSpec augment_spec;

    gan::TranslationConfig gan_cfg;

    BackboneConfig backbone_cfg;
    TrainConfig train_cfg;
    int cv_k = 5;
    bool baseline = true;  // also cross-validate the raw ingested corpus

    double tsne_perplexity = 30.0;
    int tsne_iterations = 1000;
    std::string embed_manifest = "ingest";  // "ingest" or "balanced"

    nlohmann::ordered_json raw;  // config snapshot for the run record
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig experiment_config_from_json(nlohmann::ordered_json j);

inline const std::vector<std::string>& all_stage_names() {
    static const std::vector<std::string> names = {"ingest",   "augment", "gan_train", "balance",
                                                   "train",    "crossval", "evaluate", "embed"};
    return names;
}

// Aggregated validation: every issue as one "path/field: message" string.
std::vector<std::string> validate_experiment(const ExperimentConfig& cfg,
                                             const std::vector<std::string>& stages);

struct StageRecord {
    std::string name;
    std::string status;  // "done", "skipped" (cache hit), "failed", "not_run"
    nlohmann::ordered_json input_hashes;
    std::vector<std::string> outputs;
    double wall_ms = 0.0;
    std::string error;
};

struct RunRecord {
    std::string created_at;
    nlohmann::ordered_json config_snapshot;
    std::string tool_version = kToolVersion;
    std::vector<StageRecord> stages;
    bool ok = true;

    nlohmann::ordered_json to_json() const;
};

struct RunOptions {
    std::vector<std::string> stages;  // empty: all
    bool force = false;               // ignore the stage cache
    bool parallel_gan = false;        // per-class GAN training as subprocesses
};

// Executes the requested stages in topological order. A stage whose
// inputs and config hash match its previous run is skipped unless forced.
// On stage failure downstream stages stay not_run and the record is
// marked partial. The record is also written to output_root/run_record.json.
RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Content hashes used by the stage cache (FNV-1a 64, hex).
std::string hash_file(const std::filesystem::path& p);
std::string hash_dir(const std::filesystem::path& p);

}  // namespace octfew
