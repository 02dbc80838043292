#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octfew/attention.hpp"
#include "octfew/autodiff.hpp"
#include "octfew/manifest.hpp"
#include "octfew/metrics.hpp"

namespace octfew {

enum class BackboneVariant { toy_cnn, inception_v3_like };
enum class FreezePolicy { full, final_layers_only };
enum class AttentionVariant { none, se, cbam };

std::string backbone_variant_name(BackboneVariant v);
BackboneVariant backbone_variant_by_name(const std::string& s);
std::string attention_variant_name(AttentionVariant v);
AttentionVariant attention_variant_by_name(const std::string& s);
std::string freeze_policy_name(FreezePolicy p);
FreezePolicy freeze_policy_by_name(const std::string& s);

struct AttentionSetting {
    AttentionVariant variant = AttentionVariant::none;
    int reduction_ratio = 16;
    std::vector<std::string> sites;  // empty: variant defaults
    int spatial_kernel = 7;
};

struct BackboneConfig {
    BackboneVariant variant = BackboneVariant::toy_cnn;
    int input_size = 32;  // fixed per variant: toy_cnn 32, inception_v3_like 299
    int num_classes = kNumClasses;
    std::optional<std::string> pretrained_weights;
    FreezePolicy freeze_policy = FreezePolicy::full;
    AttentionSetting attention;
    uint64_t seed = 0;
    std::array<double, 3> norm_mean{0.5, 0.5, 0.5};
    std::array<double, 3> norm_std{0.5, 0.5, 0.5};
    // Parameter-name prefixes that stay trainable under final_layers_only;
    // empty uses the variant default (head + last block group + attention).
    std::vector<std::string> finetune_prefixes;

    void validate() const;
    std::vector<std::string> default_sites() const;       // valid insertion sites
    std::vector<std::string> default_active_sites() const;  // used when attention.sites empty
    std::vector<std::string> active_sites() const;
};

nlohmann::ordered_json backbone_config_to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::ordered_json& j);

struct TrainConfig {
    int epochs = 5;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    uint64_t seed = 0;
    std::optional<int> early_stop_patience;
    void validate() const;
};

nlohmann::ordered_json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
public:
    // Fresh deterministic init; loads pretrained trunk weights when
    // cfg.pretrained_weights is set (head stays fresh unless the file
    // carries a matching head).
    explicit Model(BackboneConfig cfg);

    const BackboneConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    ad::Var forward(ad::Tape& t, const ad::Var& x) const;           // (N,K) logits
    ad::Var forward_features(ad::Tape& t, const ad::Var& x) const;  // (N,D) penultimate
    int64_t feature_dim() const;

    // Parameter-name prefixes frozen under the given policy.
    std::set<std::string> frozen_prefixes(FreezePolicy policy) const;

    void save(const std::filesystem::path& dir) const;
    static Model load(const std::filesystem::path& dir);

private:
    void build_params();
    void load_pretrained(const std::filesystem::path& file);
    ad::Var attention_at(ad::Tape& t, const std::string& site, const ad::Var& x) const;

    BackboneConfig cfg_;
    ad::ParamStore params_;
};

Model build_model(const BackboneConfig& cfg);

// ---------------------------------------------------------------------------
// Training / prediction / cross-validation
// ---------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    std::optional<double> val_accuracy;
};

struct TrainedModel {
    std::shared_ptr<Model> model;
    TrainConfig train_config;
    std::vector<EpochLog> log;
    int best_epoch = -1;  // epoch whose snapshot the model carries (val runs only)
};

// Trains in place and returns the log; with a validation manifest the
// best-validation parameter snapshot is restored at the end. Only
// parameters outside the frozen set change.
TrainedModel fine_tune(Model& model, const DatasetManifest& train_set,
                       const DatasetManifest* val_set, const TrainConfig& cfg,
                       FreezePolicy policy);

struct Prediction {
    std::string id;
    std::vector<double> probs;  // length num_classes, sums to 1
    int predicted;              // argmax, ties broken toward the lowest index
};

std::vector<Prediction> predict(const Model& model, const DatasetManifest& m);

struct FoldResult {
    int fold = 0;
    ConfusionMatrix cm;
    MetricReport report;
    std::vector<Prediction> predictions;
};

std::vector<FoldResult> cross_validate(const DatasetManifest& m, int k,
                                       const BackboneConfig& backbone_cfg,
                                       const TrainConfig& train_cfg);

}  // namespace octfew
