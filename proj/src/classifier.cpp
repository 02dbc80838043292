#include "octfew/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "octfew/blobstore.hpp"
#include "octfew/image.hpp"
#include "octfew/rng.hpp"

namespace octfew {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Enum names / configs
// ---------------------------------------------------------------------------

std::string backbone_variant_name(BackboneVariant v) {
    return v == BackboneVariant::toy_cnn ? "toy_cnn" : "inception_v3_like";
}
BackboneVariant backbone_variant_by_name(const std::string& s) {
    if (s == "toy_cnn") return BackboneVariant::toy_cnn;
    if (s == "inception_v3_like") return BackboneVariant::inception_v3_like;
    throw std::runtime_error("unknown backbone variant: '" + s + "'");
}
std::string attention_variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::none: return "none";
        case AttentionVariant::se: return "se";
        default: return "cbam";
    }
}
AttentionVariant attention_variant_by_name(const std::string& s) {
    if (s == "none") return AttentionVariant::none;
    if (s == "se") return AttentionVariant::se;
    if (s == "cbam") return AttentionVariant::cbam;
    throw std::runtime_error("unknown attention variant: '" + s + "'");
}
std::string freeze_policy_name(FreezePolicy p) {
    return p == FreezePolicy::full ? "full" : "final_layers_only";
}
FreezePolicy freeze_policy_by_name(const std::string& s) {
    if (s == "full") return FreezePolicy::full;
    if (s == "final_layers_only") return FreezePolicy::final_layers_only;
    throw std::runtime_error("unknown freeze policy: '" + s + "'");
}

void BackboneConfig::validate() const {
    const int expected = variant == BackboneVariant::toy_cnn ? 32 : 299;
    if (input_size != expected)
        throw std::runtime_error("BackboneConfig: " + backbone_variant_name(variant) +
                                 " expects input_size " + std::to_string(expected) + ", got " +
                                 std::to_string(input_size));
    if (num_classes < 2) throw std::runtime_error("BackboneConfig: num_classes must be >= 2");
    if (attention.variant != AttentionVariant::none) {
        const auto valid = default_sites();
        for (const auto& s : active_sites())
            if (std::find(valid.begin(), valid.end(), s) == valid.end())
                throw std::runtime_error("BackboneConfig: unknown attention site '" + s + "' for " +
                                         backbone_variant_name(variant));
    }
    for (double v : norm_std)
        if (v <= 0) throw std::runtime_error("BackboneConfig: norm_std entries must be > 0");
}

std::vector<std::string> BackboneConfig::default_sites() const {
    if (variant == BackboneVariant::toy_cnn) return {"stage1", "stage2", "stage3"};
    return {"mixed_a1", "mixed_a2", "mixed_a3", "mixed_ra", "mixed_b1", "mixed_b2",
            "mixed_b3", "mixed_b4", "mixed_rb", "mixed_c1", "mixed_c2"};
}

std::vector<std::string> BackboneConfig::default_active_sites() const {
    if (variant == BackboneVariant::toy_cnn) return {"stage3"};
    // After each block group's final concatenation.
    return {"mixed_a3", "mixed_b4", "mixed_c2"};
}

std::vector<std::string> BackboneConfig::active_sites() const {
    if (attention.variant == AttentionVariant::none) return {};
    return attention.sites.empty() ? default_active_sites() : attention.sites;
}

ordered_json backbone_config_to_json(const BackboneConfig& c) {
    ordered_json j;
    j["variant"] = backbone_variant_name(c.variant);
    j["input_size"] = c.input_size;
    j["num_classes"] = c.num_classes;
    if (c.pretrained_weights) j["pretrained_weights"] = *c.pretrained_weights;
    j["freeze_policy"] = freeze_policy_name(c.freeze_policy);
    j["attention"] = {{"variant", attention_variant_name(c.attention.variant)},
                      {"reduction_ratio", c.attention.reduction_ratio},
                      {"sites", c.attention.sites},
                      {"spatial_kernel", c.attention.spatial_kernel}};
    j["seed"] = c.seed;
    j["norm_mean"] = c.norm_mean;
    j["norm_std"] = c.norm_std;
    j["finetune_prefixes"] = c.finetune_prefixes;
    return j;
}

BackboneConfig backbone_config_from_json(const ordered_json& j) {
    BackboneConfig c;
    c.variant = backbone_variant_by_name(j.at("variant").get<std::string>());
    c.input_size = j.value("input_size", c.variant == BackboneVariant::toy_cnn ? 32 : 299);
    c.num_classes = j.value("num_classes", kNumClasses);
    if (j.contains("pretrained_weights"))
        c.pretrained_weights = j.at("pretrained_weights").get<std::string>();
    c.freeze_policy = freeze_policy_by_name(j.value("freeze_policy", std::string("full")));
    if (j.contains("attention")) {
        const auto& a = j.at("attention");
        c.attention.variant = attention_variant_by_name(a.value("variant", std::string("none")));
        c.attention.reduction_ratio = a.value("reduction_ratio", 16);
        c.attention.sites = a.value("sites", std::vector<std::string>{});
        c.attention.spatial_kernel = a.value("spatial_kernel", 7);
    }
    c.seed = j.value("seed", uint64_t{0});
    if (j.contains("norm_mean")) c.norm_mean = j.at("norm_mean").get<std::array<double, 3>>();
    if (j.contains("norm_std")) c.norm_std = j.at("norm_std").get<std::array<double, 3>>();
    c.finetune_prefixes = j.value("finetune_prefixes", std::vector<std::string>{});
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::runtime_error("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::runtime_error("TrainConfig: batch_size must be >= 1");
    if (learning_rate <= 0) throw std::runtime_error("TrainConfig: learning_rate must be > 0");
    if (early_stop_patience && *early_stop_patience < 1)
        throw std::runtime_error("TrainConfig: early_stop_patience must be >= 1");
}

ordered_json train_config_to_json(const TrainConfig& c) {
    ordered_json j;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["seed"] = c.seed;
    if (c.early_stop_patience) j["early_stop_patience"] = *c.early_stop_patience;
    return j;
}

TrainConfig train_config_from_json(const ordered_json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", 5);
    c.batch_size = j.value("batch_size", 16);
    c.learning_rate = j.value("learning_rate", 1e-3);
    c.weight_decay = j.value("weight_decay", 0.0);
    c.seed = j.value("seed", uint64_t{0});
    if (j.contains("early_stop_patience"))
        c.early_stop_patience = j.at("early_stop_patience").get<int>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Architecture tables
// ---------------------------------------------------------------------------

namespace {

// Channel width of the feature map each attention site sees.
int64_t site_channels(BackboneVariant v, const std::string& site) {
    if (v == BackboneVariant::toy_cnn) {
        if (site == "stage1") return 16;
        if (site == "stage2") return 32;
        if (site == "stage3") return 64;
    } else {
        if (site == "mixed_a1") return 256;
        if (site == "mixed_a2" || site == "mixed_a3") return 288;
        if (site == "mixed_ra") return 768;
        if (site.rfind("mixed_b", 0) == 0) return 768;
        if (site == "mixed_rb") return 1280;
        if (site.rfind("mixed_c", 0) == 0) return 2048;
    }
    throw std::runtime_error("unknown attention site '" + site + "'");
}

struct NetBuilder {
    ad::ParamStore& ps;
    Rng rng;
    void conv(const std::string& name, int64_t oc, int64_t ic, int64_t kh, int64_t kw) {
        const double std = std::sqrt(2.0 / static_cast<double>(ic * kh * kw));
        ps.create(name + ".w", Tensor::randn({oc, ic, kh, kw}, rng, std));
        ps.create(name + ".b", Tensor::zeros({oc}));
    }
    void fc(const std::string& name, int64_t o, int64_t i) {
        ps.create(name + ".w", Tensor::randn({o, i}, rng, std::sqrt(2.0 / static_cast<double>(i))));
        ps.create(name + ".b", Tensor::zeros({o}));
    }
};

// Conv + bias + ReLU (norm-free "_like" rendition of the BasicConv block).
Var cbr(Tape& t, const ad::ParamStore& ps, const std::string& name, const Var& x, int stride,
        int ph, int pw) {
    return ad::relu(t, ad::conv2d(t, x, ps.get(name + ".w"), ps.get(name + ".b"), stride, ph, pw));
}

}  // namespace

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params();
    if (cfg_.pretrained_weights) load_pretrained(*cfg_.pretrained_weights);
}

Model build_model(const BackboneConfig& cfg) { return Model(cfg); }

int64_t Model::feature_dim() const {
    return cfg_.variant == BackboneVariant::toy_cnn ? 64 : 2048;
}

void Model::build_params() {
    NetBuilder b{params_, Rng(derive_seed(cfg_.seed, "backbone"))};
    const int64_t K = cfg_.num_classes;

    if (cfg_.variant == BackboneVariant::toy_cnn) {
        b.conv("stage1.c1", 16, 3, 3, 3);
        b.conv("stage1.c2", 16, 16, 3, 3);
        b.conv("stage2.c1", 32, 16, 3, 3);
        b.conv("stage2.c2", 32, 32, 3, 3);
        b.conv("stage3.c1", 64, 32, 3, 3);
        b.conv("stage3.c2", 64, 64, 3, 3);
        b.fc("head.fc", K, 64);
    } else {
        b.conv("stem.conv1", 32, 3, 3, 3);
        b.conv("stem.conv2", 32, 32, 3, 3);
        b.conv("stem.conv3", 64, 32, 3, 3);
        b.conv("stem.conv4", 80, 64, 1, 1);
        b.conv("stem.conv5", 192, 80, 3, 3);

        auto inception_a = [&](const std::string& p, int64_t in, int64_t pf) {
            b.conv(p + ".b1", 64, in, 1, 1);
            b.conv(p + ".b5_1", 48, in, 1, 1);
            b.conv(p + ".b5_2", 64, 48, 5, 5);
            b.conv(p + ".b3d_1", 64, in, 1, 1);
            b.conv(p + ".b3d_2", 96, 64, 3, 3);
            b.conv(p + ".b3d_3", 96, 96, 3, 3);
            b.conv(p + ".pool", pf, in, 1, 1);
        };
        inception_a("mixed_a1", 192, 32);   // -> 256
        inception_a("mixed_a2", 256, 64);   // -> 288
        inception_a("mixed_a3", 288, 64);   // -> 288

        b.conv("mixed_ra.b3", 384, 288, 3, 3);
        b.conv("mixed_ra.b3d_1", 64, 288, 1, 1);
        b.conv("mixed_ra.b3d_2", 96, 64, 3, 3);
        b.conv("mixed_ra.b3d_3", 96, 96, 3, 3);  // -> 384+96+288 = 768

        auto inception_b = [&](const std::string& p, int64_t c7) {
            b.conv(p + ".b1", 192, 768, 1, 1);
            b.conv(p + ".b7_1", c7, 768, 1, 1);
            b.conv(p + ".b7_2", c7, c7, 1, 7);
            b.conv(p + ".b7_3", 192, c7, 7, 1);
            b.conv(p + ".b7d_1", c7, 768, 1, 1);
            b.conv(p + ".b7d_2", c7, c7, 7, 1);
            b.conv(p + ".b7d_3", c7, c7, 1, 7);
            b.conv(p + ".b7d_4", c7, c7, 7, 1);
            b.conv(p + ".b7d_5", 192, c7, 1, 7);
            b.conv(p + ".pool", 192, 768, 1, 1);
        };
        inception_b("mixed_b1", 128);
        inception_b("mixed_b2", 160);
        inception_b("mixed_b3", 160);
        inception_b("mixed_b4", 192);

        b.conv("mixed_rb.b3_1", 192, 768, 1, 1);
        b.conv("mixed_rb.b3_2", 320, 192, 3, 3);
        b.conv("mixed_rb.b7_1", 192, 768, 1, 1);
        b.conv("mixed_rb.b7_2", 192, 192, 1, 7);
        b.conv("mixed_rb.b7_3", 192, 192, 7, 1);
        b.conv("mixed_rb.b7_4", 192, 192, 3, 3);  // -> 320+192+768 = 1280

        auto inception_c = [&](const std::string& p, int64_t in) {
            b.conv(p + ".b1", 320, in, 1, 1);
            b.conv(p + ".b3_1", 384, in, 1, 1);
            b.conv(p + ".b3_2a", 384, 384, 1, 3);
            b.conv(p + ".b3_2b", 384, 384, 3, 1);
            b.conv(p + ".b3d_1", 448, in, 1, 1);
            b.conv(p + ".b3d_2", 384, 448, 3, 3);
            b.conv(p + ".b3d_3a", 384, 384, 1, 3);
            b.conv(p + ".b3d_3b", 384, 384, 3, 1);
            b.conv(p + ".pool", 192, in, 1, 1);
        };
        inception_c("mixed_c1", 1280);  // -> 2048
        inception_c("mixed_c2", 2048);

        b.fc("head.fc", K, 2048);
    }

    // Attention parameters at the active sites.
    const auto sites = cfg_.active_sites();
    for (const auto& site : sites) {
        const int64_t c = site_channels(cfg_.variant, site);
        const uint64_t aseed = derive_seed(cfg_.seed, "att/" + site);
        if (cfg_.attention.variant == AttentionVariant::se) {
            SeConfig sc{cfg_.attention.reduction_ratio};
            make_se_params(params_, "att." + site, c, sc, aseed);
        } else if (cfg_.attention.variant == AttentionVariant::cbam) {
            CbamConfig cc{cfg_.attention.reduction_ratio, cfg_.attention.spatial_kernel};
            make_cbam_params(params_, "att." + site, c, cc, aseed);
        }
    }
}

Var Model::attention_at(Tape& t, const std::string& site, const Var& x) const {
    const auto sites = cfg_.active_sites();
    if (std::find(sites.begin(), sites.end(), site) == sites.end()) return x;
    if (cfg_.attention.variant == AttentionVariant::se) {
        SeConfig sc{cfg_.attention.reduction_ratio};
        return se_block(t, x, bind_se_params(params_, "att." + site), sc);
    }
    CbamConfig cc{cfg_.attention.reduction_ratio, cfg_.attention.spatial_kernel};
    return cbam_block(t, x, bind_cbam_params(params_, "att." + site), cc);
}

Var Model::forward_features(Tape& t, const Var& x) const {
    const auto& ps = params_;
    if (cfg_.variant == BackboneVariant::toy_cnn) {
        Var h = cbr(t, ps, "stage1.c1", x, 1, 1, 1);
        h = cbr(t, ps, "stage1.c2", h, 2, 1, 1);
        h = attention_at(t, "stage1", h);
        h = cbr(t, ps, "stage2.c1", h, 1, 1, 1);
        h = cbr(t, ps, "stage2.c2", h, 2, 1, 1);
        h = attention_at(t, "stage2", h);
        h = cbr(t, ps, "stage3.c1", h, 1, 1, 1);
        h = cbr(t, ps, "stage3.c2", h, 2, 1, 1);
        h = attention_at(t, "stage3", h);
        return ad::global_avg_pool(t, h);
    }

    Var h = cbr(t, ps, "stem.conv1", x, 2, 0, 0);
    h = cbr(t, ps, "stem.conv2", h, 1, 0, 0);
    h = cbr(t, ps, "stem.conv3", h, 1, 1, 1);
    h = ad::maxpool2d(t, h, 3, 2, 0);
    h = cbr(t, ps, "stem.conv4", h, 1, 0, 0);
    h = cbr(t, ps, "stem.conv5", h, 1, 0, 0);
    h = ad::maxpool2d(t, h, 3, 2, 0);

    auto inception_a = [&](const std::string& p, const Var& in) {
        Var b1 = cbr(t, ps, p + ".b1", in, 1, 0, 0);
        Var b5 = cbr(t, ps, p + ".b5_2", cbr(t, ps, p + ".b5_1", in, 1, 0, 0), 1, 2, 2);
        Var b3 = cbr(t, ps, p + ".b3d_3",
                     cbr(t, ps, p + ".b3d_2", cbr(t, ps, p + ".b3d_1", in, 1, 0, 0), 1, 1, 1), 1, 1, 1);
        Var pl = cbr(t, ps, p + ".pool", ad::avgpool2d(t, in, 3, 1, 1), 1, 0, 0);
        return ad::concat_channels(t, {b1, b5, b3, pl});
    };
    h = attention_at(t, "mixed_a1", inception_a("mixed_a1", h));
    h = attention_at(t, "mixed_a2", inception_a("mixed_a2", h));
    h = attention_at(t, "mixed_a3", inception_a("mixed_a3", h));

    {
        Var b3 = cbr(t, ps, "mixed_ra.b3", h, 2, 0, 0);
        Var b3d = cbr(t, ps, "mixed_ra.b3d_3",
                      cbr(t, ps, "mixed_ra.b3d_2", cbr(t, ps, "mixed_ra.b3d_1", h, 1, 0, 0), 1, 1, 1),
                      2, 0, 0);
        Var pl = ad::maxpool2d(t, h, 3, 2, 0);
        h = attention_at(t, "mixed_ra", ad::concat_channels(t, {b3, b3d, pl}));
    }

    auto inception_b = [&](const std::string& p, const Var& in) {
        Var b1 = cbr(t, ps, p + ".b1", in, 1, 0, 0);
        Var b7 = cbr(t, ps, p + ".b7_1", in, 1, 0, 0);
        b7 = cbr(t, ps, p + ".b7_2", b7, 1, 0, 3);
        b7 = cbr(t, ps, p + ".b7_3", b7, 1, 3, 0);
        Var b7d = cbr(t, ps, p + ".b7d_1", in, 1, 0, 0);
        b7d = cbr(t, ps, p + ".b7d_2", b7d, 1, 3, 0);
        b7d = cbr(t, ps, p + ".b7d_3", b7d, 1, 0, 3);
        b7d = cbr(t, ps, p + ".b7d_4", b7d, 1, 3, 0);
        b7d = cbr(t, ps, p + ".b7d_5", b7d, 1, 0, 3);
        Var pl = cbr(t, ps, p + ".pool", ad::avgpool2d(t, in, 3, 1, 1), 1, 0, 0);
        return ad::concat_channels(t, {b1, b7, b7d, pl});
    };
    h = attention_at(t, "mixed_b1", inception_b("mixed_b1", h));
    h = attention_at(t, "mixed_b2", inception_b("mixed_b2", h));
    h = attention_at(t, "mixed_b3", inception_b("mixed_b3", h));
    h = attention_at(t, "mixed_b4", inception_b("mixed_b4", h));

    {
        Var b3 = cbr(t, ps, "mixed_rb.b3_2", cbr(t, ps, "mixed_rb.b3_1", h, 1, 0, 0), 2, 0, 0);
        Var b7 = cbr(t, ps, "mixed_rb.b7_1", h, 1, 0, 0);
        b7 = cbr(t, ps, "mixed_rb.b7_2", b7, 1, 0, 3);
        b7 = cbr(t, ps, "mixed_rb.b7_3", b7, 1, 3, 0);
        b7 = cbr(t, ps, "mixed_rb.b7_4", b7, 2, 0, 0);
        Var pl = ad::maxpool2d(t, h, 3, 2, 0);
        h = attention_at(t, "mixed_rb", ad::concat_channels(t, {b3, b7, pl}));
    }

    auto inception_c = [&](const std::string& p, const Var& in) {
        Var b1 = cbr(t, ps, p + ".b1", in, 1, 0, 0);
        Var b3 = cbr(t, ps, p + ".b3_1", in, 1, 0, 0);
        Var b3a = cbr(t, ps, p + ".b3_2a", b3, 1, 0, 1);
        Var b3b = cbr(t, ps, p + ".b3_2b", b3, 1, 1, 0);
        Var b3d = cbr(t, ps, p + ".b3d_2", cbr(t, ps, p + ".b3d_1", in, 1, 0, 0), 1, 1, 1);
        Var b3da = cbr(t, ps, p + ".b3d_3a", b3d, 1, 0, 1);
        Var b3db = cbr(t, ps, p + ".b3d_3b", b3d, 1, 1, 0);
        Var pl = cbr(t, ps, p + ".pool", ad::avgpool2d(t, in, 3, 1, 1), 1, 0, 0);
        return ad::concat_channels(t, {b1, b3a, b3b, b3da, b3db, pl});
    };
    h = attention_at(t, "mixed_c1", inception_c("mixed_c1", h));
    h = attention_at(t, "mixed_c2", inception_c("mixed_c2", h));

    return ad::global_avg_pool(t, h);
}

Var Model::forward(Tape& t, const Var& x) const {
    Var f = forward_features(t, x);
    return ad::linear(t, f, params_.get("head.fc.w"), params_.get("head.fc.b"));
}

std::set<std::string> Model::frozen_prefixes(FreezePolicy policy) const {
    if (policy == FreezePolicy::full) return {};
    std::vector<std::string> unfrozen = cfg_.finetune_prefixes;
    if (unfrozen.empty()) {
        if (cfg_.variant == BackboneVariant::toy_cnn)
            unfrozen = {"head.", "stage3", "att."};
        else
            unfrozen = {"head.", "mixed_c", "att."};
    }
    std::set<std::string> frozen;
    for (const auto& [name, var] : params_.all()) {
        bool keep = false;
        for (const auto& p : unfrozen)
            if (name.rfind(p, 0) == 0) {
                keep = true;
                break;
            }
        if (!keep) frozen.insert(name);
    }
    return frozen;
}

void Model::load_pretrained(const fs::path& file) {
    const BlobStore store = BlobStore::read(file);
    auto have = store.as_map();
    std::vector<std::string> missing, extra;
    for (const auto& [name, var] : params_.all()) {
        const bool is_head = name.rfind("head.", 0) == 0;
        auto it = have.find(name);
        if (it == have.end()) {
            if (!is_head) missing.push_back(name);
            continue;
        }
        if (it->second.shape() == var->value.shape())
            var->value = it->second;
        else if (!is_head)
            throw std::runtime_error("pretrained tensor '" + name + "' has shape " +
                                     Tensor::shape_str(it->second.shape()) + ", model expects " +
                                     Tensor::shape_str(var->value.shape()));
        // mismatched head stays freshly initialized (class count changed)
        have.erase(name);
    }
    for (const auto& [name, t] : have)
        if (name.rfind("head.", 0) != 0) extra.push_back(name);
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "pretrained weight schema mismatch;";
        if (!missing.empty()) {
            msg += " missing:";
            for (const auto& n : missing) msg += " " + n;
        }
        if (!extra.empty()) {
            msg += " extra:";
            for (const auto& n : extra) msg += " " + n;
        }
        throw std::runtime_error(msg);
    }
}

void Model::save(const fs::path& dir) const {
    BackboneConfig c = cfg_;
    c.pretrained_weights.reset();  // weights are stored here, not referenced
    BlobStore b = BlobStore::from_params("classifier-model", params_, backbone_config_to_json(c));
    b.write(dir);
}

Model Model::load(const fs::path& dir) {
    BlobStore b = BlobStore::read(dir);
    if (b.kind != "classifier-model")
        throw std::runtime_error("not a classifier model: " + dir.string());
    Model m(backbone_config_from_json(b.meta));
    b.load_into(m.params_);
    return m;
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

namespace {

Tensor load_input(const BackboneConfig& cfg, const ImageRecord& rec) {
    Image img;
    try {
        img = load_image(rec.path);
    } catch (const std::exception& e) {
        throw std::runtime_error("record " + rec.id + ": " + e.what());
    }
    if (img.h != cfg.input_size || img.w != cfg.input_size)
        img = resize_bilinear(img, cfg.input_size, cfg.input_size);
    return image_to_chw_norm(img, cfg.norm_mean, cfg.norm_std);
}

Tensor stack(const std::vector<Tensor>& xs, const std::vector<size_t>& idx, size_t lo, size_t hi) {
    const auto& s = xs[idx[lo]].shape();
    Tensor out({static_cast<int64_t>(hi - lo), s[0], s[1], s[2]});
    const int64_t stride = xs[idx[lo]].numel();
    for (size_t i = lo; i < hi; ++i)
        std::copy(xs[idx[i]].data(), xs[idx[i]].data() + stride,
                  out.data() + static_cast<int64_t>(i - lo) * stride);
    return out;
}

int argmax_row(const Tensor& probs, int64_t row) {
    int best = 0;
    for (int64_t k = 1; k < probs.dim(1); ++k)
        if (probs.at2(row, k) > probs.at2(row, best)) best = static_cast<int>(k);
    return best;  // strict > keeps the lowest index on ties
}

double eval_accuracy(const Model& model, const std::vector<Tensor>& inputs,
                     const std::vector<int>& labels) {
    int64_t correct = 0;
    const size_t batch = 64;
    std::vector<size_t> idx(inputs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (size_t lo = 0; lo < inputs.size(); lo += batch) {
        const size_t hi = std::min(inputs.size(), lo + batch);
        Tape t;
        Var logits = model.forward(t, ad::make_var(stack(inputs, idx, lo, hi)));
        Tensor probs = ad::softmax_rows(logits->value);
        for (size_t i = lo; i < hi; ++i)
            if (argmax_row(probs, static_cast<int64_t>(i - lo)) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// fine_tune
// ---------------------------------------------------------------------------

TrainedModel fine_tune(Model& model, const DatasetManifest& train_set,
                       const DatasetManifest* val_set, const TrainConfig& cfg,
                       FreezePolicy policy) {
    cfg.validate();
    if (train_set.records.empty()) throw std::runtime_error("fine_tune: empty training manifest");

    const auto& bc = model.config();
    std::vector<Tensor> inputs;
    std::vector<int> labels;
    inputs.reserve(train_set.records.size());
    for (const auto& r : train_set.records) {
        inputs.push_back(load_input(bc, r));
        labels.push_back(r.label.index);
    }
    std::vector<Tensor> val_inputs;
    std::vector<int> val_labels;
    if (val_set)
        for (const auto& r : val_set->records) {
            val_inputs.push_back(load_input(bc, r));
            val_labels.push_back(r.label.index);
        }

    ad::AdamConfig ac;
    ac.lr = cfg.learning_rate;
    ac.beta1 = 0.9;
    ac.beta2 = 0.999;
    ac.weight_decay = cfg.weight_decay;
    ad::Adam opt(ac);
    const std::set<std::string> frozen = model.frozen_prefixes(policy);

    TrainedModel out;
    out.train_config = cfg;

    double best_val = -1.0;
    int best_epoch = -1;
    std::map<std::string, Tensor> best_snapshot;
    std::vector<size_t> order(inputs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "epoch/" + std::to_string(epoch)));
        rng.shuffle(order);

        double loss_sum = 0.0;
        int64_t correct = 0;
        const size_t bs = static_cast<size_t>(cfg.batch_size);
        for (size_t lo = 0; lo < order.size(); lo += bs) {
            const size_t hi = std::min(order.size(), lo + bs);
            std::vector<int> batch_labels;
            for (size_t i = lo; i < hi; ++i) batch_labels.push_back(labels[order[i]]);

            Tape t;
            Var x = ad::make_var(stack(inputs, order, lo, hi));
            Var logits = model.forward(t, x);
            Var loss = ad::softmax_cross_entropy(t, logits, batch_labels);
            const double lv = loss->value[0];
            if (!std::isfinite(lv))
                throw std::runtime_error("fine_tune: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(lo / bs));
            loss_sum += lv * static_cast<double>(hi - lo);

            Tensor probs = ad::softmax_rows(logits->value);
            for (size_t i = lo; i < hi; ++i)
                if (argmax_row(probs, static_cast<int64_t>(i - lo)) == batch_labels[i - lo]) ++correct;

            model.params().zero_grads();
            t.backward(loss);
            opt.step(model.params(), frozen);
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(inputs.size());
        log.train_accuracy = static_cast<double>(correct) / static_cast<double>(inputs.size());
        if (val_set) {
            log.val_accuracy = eval_accuracy(model, val_inputs, val_labels);
            if (*log.val_accuracy > best_val) {
                best_val = *log.val_accuracy;
                best_epoch = epoch;
                best_snapshot.clear();
                for (const auto& [name, var] : model.params().all())
                    best_snapshot.emplace(name, var->value);
            }
        }
        out.log.push_back(log);

        if (val_set && cfg.early_stop_patience && epoch - best_epoch >= *cfg.early_stop_patience)
            break;
    }

    if (val_set && best_epoch >= 0) {
        for (auto& [name, t] : best_snapshot) model.params().get(name)->value = t;
        out.best_epoch = best_epoch;
    }
    return out;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

std::vector<Prediction> predict(const Model& model, const DatasetManifest& m) {
    const auto& bc = model.config();
    std::vector<Tensor> inputs;
    inputs.reserve(m.records.size());
    for (const auto& r : m.records) inputs.push_back(load_input(bc, r));

    std::vector<Prediction> preds;
    preds.reserve(m.records.size());
    std::vector<size_t> idx(inputs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const size_t batch = 64;
    for (size_t lo = 0; lo < inputs.size(); lo += batch) {
        const size_t hi = std::min(inputs.size(), lo + batch);
        Tape t;
        Var logits = model.forward(t, ad::make_var(stack(inputs, idx, lo, hi)));
        Tensor probs = ad::softmax_rows(logits->value);
        for (size_t i = lo; i < hi; ++i) {
            Prediction p;
            p.id = m.records[i].id;
            const int64_t row = static_cast<int64_t>(i - lo);
            for (int64_t k = 0; k < probs.dim(1); ++k) p.probs.push_back(probs.at2(row, k));
            p.predicted = argmax_row(probs, row);
            preds.push_back(std::move(p));
        }
    }
    return preds;
}

// ---------------------------------------------------------------------------
// cross_validate
// ---------------------------------------------------------------------------

std::vector<FoldResult> cross_validate(const DatasetManifest& m, int k,
                                       const BackboneConfig& backbone_cfg,
                                       const TrainConfig& train_cfg) {
    backbone_cfg.validate();
    train_cfg.validate();
    const SplitPlan plan = make_folds(m, k, derive_seed(train_cfg.seed, "cv-folds"));

    std::map<std::string, const ImageRecord*> by_id;
    for (const auto& r : m.records) by_id[r.id] = &r;

    std::vector<FoldResult> results;
    for (int fold = 0; fold < k; ++fold) {
        DatasetManifest train_m, test_m;
        train_m.global_seed = m.global_seed;
        train_m.created_at = m.created_at;
        test_m.created_at = m.created_at;
        for (const auto& id : plan.train_ids(m, fold)) train_m.records.push_back(*by_id.at(id));
        for (const auto& id : plan.test_ids(m, fold)) test_m.records.push_back(*by_id.at(id));

        BackboneConfig bc = backbone_cfg;
        bc.seed = derive_seed(backbone_cfg.seed, "fold/" + std::to_string(fold));
        TrainConfig tc = train_cfg;
        tc.seed = derive_seed(train_cfg.seed, "fold/" + std::to_string(fold));

        try {
            Model model(bc);
            fine_tune(model, train_m, &test_m, tc, bc.freeze_policy);
            FoldResult fr;
            fr.fold = fold;
            fr.predictions = predict(model, test_m);
            std::vector<int> y_true, y_pred;
            for (size_t i = 0; i < test_m.records.size(); ++i) {
                y_true.push_back(test_m.records[i].label.index);
                y_pred.push_back(fr.predictions[i].predicted);
            }
            fr.cm = confusion(y_true, y_pred, backbone_cfg.num_classes);
            fr.report = compute_report(fr.cm);
            results.push_back(std::move(fr));
        } catch (const std::exception& e) {
            throw std::runtime_error("fold " + std::to_string(fold) + ": " + e.what());
        }
    }
    return results;
}

}  // namespace octfew
