#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octfew/autodiff.hpp"
#include "octfew/manifest.hpp"

namespace octfew::gan {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct LossWeights {
    double adversarial = 1.0;
    double cycle = 10.0;
    double identity = 10.0;
    double cam = 1000.0;
};

struct TranslationConfig {
    int image_size = 32;   // square, divisible by 4
    int channels = 3;
    int64_t iterations = 200;
    int batch_size = 1;
    double learning_rate = 1e-4;
    LossWeights loss_weights;
    uint64_t seed = 0;
    std::string preset = "light";  // "light" (desk) or "paper" (full-size topology)
    int64_t snapshot_every = 0;    // 0: final checkpoint only

    void validate() const;
    int base_channels() const;  // light: 8, paper: 64
    int n_resblocks() const;    // light: 2, paper: 4
};

nlohmann::ordered_json translation_config_to_json(const TranslationConfig& c);
TranslationConfig translation_config_from_json(const nlohmann::ordered_json& j);

// ---------------------------------------------------------------------------
// Core blocks exposed for direct testing
// ---------------------------------------------------------------------------

// out = gamma * (rho*IN(x) + (1-rho)*LN(x)) + beta.
// gamma/beta: (C) or (N,C); rho: (C), expected within [0,1].
ad::Var adalin(ad::Tape& t, const ad::Var& x, const ad::Var& gamma, const ad::Var& beta,
               const ad::Var& rho, double eps = 1e-5);

struct CamOutput {
    ad::Var weighted;       // (N,C,H,W): features[c] * w[c]
    ad::Var logit;          // (N,1): auxiliary classifier score of gap-pooled features
    ad::Var attention_map;  // (N,1,H,W): sum_c w[c]*features[c], unnormalized
};

// w: (C) channel-importance weights of the auxiliary classifier.
CamOutput cam_attention(ad::Tape& t, const ad::Var& x, const ad::Var& w);

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

struct GeneratorOutput {
    ad::Var img;        // (N,3,H,W) in tanh range
    ad::Var cam_gap;    // (N,1) auxiliary logit, gap branch
    ad::Var cam_gmp;    // (N,1) auxiliary logit, gmp branch
    ad::Var heatmap;    // (N,1,h,w) CAM attention map at bottleneck resolution
};

class Generator {
public:
    // Creates parameters under `prefix` in `ps` (fresh init from seed).
    Generator(ad::ParamStore& ps, std::string prefix, const TranslationConfig& cfg, uint64_t seed);
    // Binds to already-present parameters (checkpoint load path).
    Generator(const ad::ParamStore& ps, std::string prefix, const TranslationConfig& cfg);

    GeneratorOutput forward(ad::Tape& t, const ad::Var& x) const;
    const std::vector<std::string>& rho_names() const { return rho_names_; }

private:
    void bind(const ad::ParamStore& ps);
    std::string prefix_;
    TranslationConfig cfg_;
    std::vector<std::string> rho_names_;
    std::map<std::string, ad::Var> p_;
};

class Discriminator {
public:
    Discriminator(ad::ParamStore& ps, std::string prefix, const TranslationConfig& cfg, uint64_t seed);

    struct Output {
        ad::Var patch;    // (N,1,h,w) patch logits
        ad::Var cam_gap;  // (N,1)
        ad::Var cam_gmp;  // (N,1)
    };
    Output forward(ad::Tape& t, const ad::Var& x) const;

private:
    std::string prefix_;
    TranslationConfig cfg_;
    std::map<std::string, ad::Var> p_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LossRecord {
    int64_t iteration = 0;
    double d_adv = 0, d_cam = 0;
    double g_adv = 0, g_cam = 0, g_cycle = 0, g_identity = 0;
    double d_total = 0, g_total = 0;
};

struct TrainState {
    explicit TrainState(const TranslationConfig& cfg);

    TranslationConfig cfg;
    ad::ParamStore gen_params;
    ad::ParamStore disc_params;
    std::unique_ptr<Generator> g_ab, g_ba;       // A->B, B->A
    std::unique_ptr<Discriminator> d_a, d_b;     // judge domain A / domain B
    std::unique_ptr<ad::Adam> opt_g, opt_d;
    int64_t iteration = 0;
    std::vector<LossRecord> history;
};

// One step: discriminator update, then generator update, then rho clamp.
// Throws on non-finite losses, naming the component and iteration.
LossRecord training_step(TrainState& st, const Tensor& batch_a, const Tensor& batch_b);

struct TranslationCheckpoint {
    TranslationConfig config;
    int64_t iteration = 0;
    ClassLabel target_class{ClassName::NORMAL, Tier::major, 0};
    std::vector<LossRecord> loss_history;
    std::map<std::string, Tensor> gen_tensors;
    std::map<std::string, Tensor> disc_tensors;
};

// Trains one translation model: domain A = source (normal), domain B =
// the single-class target domain. Writes periodic snapshots and a final
// checkpoint when out_dir is given.
TranslationCheckpoint train(const DatasetManifest& domain_a, const DatasetManifest& domain_b,
                            const TranslationConfig& cfg,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt);

void save_checkpoint(const TranslationCheckpoint& ckpt, const std::filesystem::path& dir);
TranslationCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Translates n source (domain A) images through the checkpointed A->B
// generator; writes PNGs into img_dir and returns the generated records.
DatasetManifest generate(const TranslationCheckpoint& ckpt, const DatasetManifest& source,
                         int64_t n, uint64_t seed, const std::filesystem::path& img_dir);

}  // namespace octfew::gan
