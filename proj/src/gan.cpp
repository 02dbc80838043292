#include "octfew/gan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "octfew/blobstore.hpp"
#include "octfew/image.hpp"
#include "octfew/rng.hpp"

namespace octfew::gan {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TranslationConfig::validate() const {
    if (iterations < 1) throw std::runtime_error("TranslationConfig: iterations must be >= 1");
    if (image_size < 8 || image_size % 4 != 0)
        throw std::runtime_error("TranslationConfig: image_size must be >= 8 and divisible by 4");
    if (batch_size < 1) throw std::runtime_error("TranslationConfig: batch_size must be >= 1");
    if (learning_rate <= 0) throw std::runtime_error("TranslationConfig: learning_rate must be > 0");
    if (loss_weights.adversarial < 0 || loss_weights.cycle < 0 || loss_weights.identity < 0 ||
        loss_weights.cam < 0)
        throw std::runtime_error("TranslationConfig: loss weights must be >= 0");
    if (preset != "light" && preset != "paper")
        throw std::runtime_error("TranslationConfig: unknown preset '" + preset + "'");
}

int TranslationConfig::base_channels() const { return preset == "paper" ? 64 : 8; }
int TranslationConfig::n_resblocks() const { return preset == "paper" ? 4 : 2; }

ordered_json translation_config_to_json(const TranslationConfig& c) {
    ordered_json j;
    j["image_size"] = c.image_size;
    j["channels"] = c.channels;
    j["iterations"] = c.iterations;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["loss_weights"] = {{"adversarial", c.loss_weights.adversarial},
                         {"cycle", c.loss_weights.cycle},
                         {"identity", c.loss_weights.identity},
                         {"cam", c.loss_weights.cam}};
    j["seed"] = c.seed;
    j["preset"] = c.preset;
    j["snapshot_every"] = c.snapshot_every;
    return j;
}

TranslationConfig translation_config_from_json(const ordered_json& j) {
    TranslationConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.channels = j.at("channels").get<int>();
    c.iterations = j.at("iterations").get<int64_t>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    const auto& w = j.at("loss_weights");
    c.loss_weights.adversarial = w.at("adversarial").get<double>();
    c.loss_weights.cycle = w.at("cycle").get<double>();
    c.loss_weights.identity = w.at("identity").get<double>();
    c.loss_weights.cam = w.at("cam").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.preset = j.at("preset").get<std::string>();
    c.snapshot_every = j.value("snapshot_every", int64_t{0});
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// AdaLIN and CAM
// ---------------------------------------------------------------------------

Var adalin(Tape& t, const Var& x, const Var& gamma, const Var& beta, const Var& rho, double eps) {
    Var in = ad::instance_norm(t, x, eps);
    Var ln = ad::layer_norm(t, x, eps);
    Var one_minus_rho = ad::add_const(t, ad::scale(t, rho, -1.0), 1.0);
    Var mix = ad::add(t, ad::mul_channel(t, in, rho), ad::mul_channel(t, ln, one_minus_rho));
    return ad::add_channel(t, ad::mul_channel(t, mix, gamma), beta);
}

CamOutput cam_attention(Tape& t, const Var& x, const Var& w) {
    if (x->value.rank() != 4)
        throw std::invalid_argument("cam_attention: features must be (N,C,H,W)");
    if (w->value.rank() != 1 || w->value.dim(0) != x->value.dim(1))
        throw std::invalid_argument(
            "cam_attention: weight length " + std::to_string(w->value.numel()) +
            " does not match feature channels " + std::to_string(x->value.dim(1)));
    CamOutput out;
    out.weighted = ad::mul_channel(t, x, w);
    const int64_t c = w->value.dim(0);
    out.logit = ad::linear(t, ad::global_avg_pool(t, x), ad::reshape(t, w, {1, c}), nullptr);
    out.attention_map = ad::sum_channels(t, out.weighted);
    return out;
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace {

struct ParamBuilder {
    ad::ParamStore& ps;
    std::string prefix;
    Rng rng;

    void conv(const std::string& name, int64_t oc, int64_t ic, int64_t k) {
        const double std = std::sqrt(2.0 / static_cast<double>(ic * k * k));
        ps.create(prefix + "." + name + ".w", Tensor::randn({oc, ic, k, k}, rng, std));
        ps.create(prefix + "." + name + ".b", Tensor::zeros({oc}));
    }
    void fc(const std::string& name, int64_t o, int64_t i, bool bias = true) {
        ps.create(prefix + "." + name + ".w",
                  Tensor::randn({o, i}, rng, std::sqrt(2.0 / static_cast<double>(i))));
        if (bias) ps.create(prefix + "." + name + ".b", Tensor::zeros({o}));
    }
    // Channel-importance vector of the CAM auxiliary classifier.
    void cam_weight(const std::string& name, int64_t c) {
        ps.create(prefix + "." + name,
                  Tensor::randn({c}, rng, std::sqrt(1.0 / static_cast<double>(c))));
    }
    void vec(const std::string& name, int64_t c, double fill) {
        ps.create(prefix + "." + name, Tensor::full({c}, fill));
    }
};

void build_generator_params(ad::ParamStore& ps, const std::string& prefix,
                            const TranslationConfig& cfg, uint64_t seed) {
    const int64_t f = cfg.base_channels();
    const int64_t f2 = f * 2, f4 = f * 4;
    ParamBuilder b{ps, prefix, Rng(derive_seed(seed, prefix))};

    b.conv("enc0", f, cfg.channels, 7);
    b.conv("down1", f2, f, 3);
    b.conv("down2", f4, f2, 3);
    for (int i = 0; i < cfg.n_resblocks(); ++i) {
        const std::string nb = "encres" + std::to_string(i);
        b.conv(nb + ".c1", f4, f4, 3);
        b.conv(nb + ".c2", f4, f4, 3);
    }
    b.cam_weight("cam.gap.w", f4);
    b.cam_weight("cam.gmp.w", f4);
    b.conv("cam.fuse", f4, 2 * f4, 1);
    b.fc("mlp.fc1", f4, f4);
    b.fc("mlp.fc2", f4, f4);
    b.fc("mlp.gamma", f4, f4);
    b.fc("mlp.beta", f4, f4);
    for (int i = 0; i < cfg.n_resblocks(); ++i) {
        const std::string nb = "decres" + std::to_string(i);
        b.conv(nb + ".c1", f4, f4, 3);
        b.conv(nb + ".c2", f4, f4, 3);
        b.vec(nb + ".n1.rho", f4, 0.9);
        b.vec(nb + ".n2.rho", f4, 0.9);
    }
    int64_t c = f4;
    for (int i = 0; i < 2; ++i) {
        const std::string nb = "up" + std::to_string(i);
        b.conv(nb + ".c", c / 2, c, 3);
        c /= 2;
        b.vec(nb + ".n.gamma", c, 1.0);
        b.vec(nb + ".n.beta", c, 0.0);
        b.vec(nb + ".n.rho", c, 0.0);
    }
    b.conv("out", cfg.channels, f, 7);
}

void build_discriminator_params(ad::ParamStore& ps, const std::string& prefix,
                                const TranslationConfig& cfg, uint64_t seed) {
    const int64_t f = cfg.base_channels();
    const int64_t f2 = f * 2, f4 = f * 4;
    ParamBuilder b{ps, prefix, Rng(derive_seed(seed, prefix))};
    b.conv("d0", f, cfg.channels, 4);
    b.conv("d1", f2, f, 4);
    b.conv("d2", f4, f2, 4);
    b.cam_weight("cam.gap.w", f4);
    b.cam_weight("cam.gmp.w", f4);
    b.conv("cam.fuse", f4, 2 * f4, 1);
    b.conv("out", 1, f4, 4);
}

Var conv_block(Tape& t, const std::map<std::string, Var>& p, const std::string& name, const Var& x,
               int stride, int reflect_pad) {
    Var h = reflect_pad > 0 ? ad::pad_reflect(t, x, reflect_pad) : x;
    return ad::conv2d(t, h, p.at(name + ".w"), p.at(name + ".b"), stride, 0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

Generator::Generator(ad::ParamStore& ps, std::string prefix, const TranslationConfig& cfg,
                     uint64_t seed)
    : prefix_(std::move(prefix)), cfg_(cfg) {
    cfg_.validate();
    build_generator_params(ps, prefix_, cfg_, seed);
    bind(ps);
}

Generator::Generator(const ad::ParamStore& ps, std::string prefix, const TranslationConfig& cfg)
    : prefix_(std::move(prefix)), cfg_(cfg) {
    cfg_.validate();
    bind(ps);
}

void Generator::bind(const ad::ParamStore& ps) {
    const std::string want = prefix_ + ".";
    for (const auto& [name, var] : ps.all()) {
        if (name.size() > want.size() && name.compare(0, want.size(), want) == 0) {
            const std::string local = name.substr(want.size());
            p_[local] = var;
            if (local.size() >= 3 && local.compare(local.size() - 3, 3, "rho") == 0)
                rho_names_.push_back(name);
        }
    }
    if (p_.empty()) throw std::runtime_error("Generator: no parameters under prefix " + prefix_);
}

GeneratorOutput Generator::forward(Tape& t, const Var& x) const {
    const auto& p = p_;
    Var h = ad::relu(t, ad::instance_norm(t, conv_block(t, p, "enc0", x, 1, 3)));
    h = ad::relu(t, ad::instance_norm(t, conv_block(t, p, "down1", h, 2, 1)));
    h = ad::relu(t, ad::instance_norm(t, conv_block(t, p, "down2", h, 2, 1)));

    for (int i = 0; i < cfg_.n_resblocks(); ++i) {
        const std::string nb = "encres" + std::to_string(i);
        Var r = ad::relu(t, ad::instance_norm(t, conv_block(t, p, nb + ".c1", h, 1, 1)));
        r = ad::instance_norm(t, conv_block(t, p, nb + ".c2", r, 1, 1));
        h = ad::add(t, h, r);
    }

    GeneratorOutput out;
    CamOutput gap = cam_attention(t, h, p.at("cam.gap.w"));
    // gmp branch shares the structure but pools by max.
    Var wgmp = p.at("cam.gmp.w");
    const int64_t f4 = h->value.dim(1);
    out.cam_gap = gap.logit;
    out.cam_gmp = ad::linear(t, ad::global_max_pool(t, h), ad::reshape(t, wgmp, {1, f4}), nullptr);
    Var x_gmp = ad::mul_channel(t, h, wgmp);
    h = ad::relu(t, ad::conv2d(t, ad::concat_channels(t, {gap.weighted, x_gmp}), p.at("cam.fuse.w"),
                               p.at("cam.fuse.b"), 1, 0));
    out.heatmap = ad::sum_channels(t, h);

    Var z = ad::global_avg_pool(t, h);
    z = ad::relu(t, ad::linear(t, z, p.at("mlp.fc1.w"), p.at("mlp.fc1.b")));
    z = ad::relu(t, ad::linear(t, z, p.at("mlp.fc2.w"), p.at("mlp.fc2.b")));
    Var gamma = ad::linear(t, z, p.at("mlp.gamma.w"), p.at("mlp.gamma.b"));
    Var beta = ad::linear(t, z, p.at("mlp.beta.w"), p.at("mlp.beta.b"));

    for (int i = 0; i < cfg_.n_resblocks(); ++i) {
        const std::string nb = "decres" + std::to_string(i);
        Var r = conv_block(t, p, nb + ".c1", h, 1, 1);
        r = ad::relu(t, adalin(t, r, gamma, beta, p.at(nb + ".n1.rho")));
        r = conv_block(t, p, nb + ".c2", r, 1, 1);
        r = adalin(t, r, gamma, beta, p.at(nb + ".n2.rho"));
        h = ad::add(t, h, r);
    }

    for (int i = 0; i < 2; ++i) {
        const std::string nb = "up" + std::to_string(i);
        h = ad::upsample_nearest2(t, h);
        h = conv_block(t, p, nb + ".c", h, 1, 1);
        h = ad::relu(t,
                     adalin(t, h, p.at(nb + ".n.gamma"), p.at(nb + ".n.beta"), p.at(nb + ".n.rho")));
    }

    out.img = ad::tanh_op(t, conv_block(t, p, "out", h, 1, 3));
    return out;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

Discriminator::Discriminator(ad::ParamStore& ps, std::string prefix, const TranslationConfig& cfg,
                             uint64_t seed)
    : prefix_(std::move(prefix)), cfg_(cfg) {
    build_discriminator_params(ps, prefix_, cfg_, seed);
    const std::string want = prefix_ + ".";
    for (const auto& [name, var] : ps.all())
        if (name.size() > want.size() && name.compare(0, want.size(), want) == 0)
            p_[name.substr(want.size())] = var;
}

Discriminator::Output Discriminator::forward(Tape& t, const Var& x) const {
    const auto& p = p_;
    Var h = ad::leaky_relu(t, conv_block(t, p, "d0", x, 2, 1), 0.2);
    h = ad::leaky_relu(t, conv_block(t, p, "d1", h, 2, 1), 0.2);
    h = ad::leaky_relu(t, conv_block(t, p, "d2", h, 1, 1), 0.2);

    Output out;
    const int64_t c = h->value.dim(1);
    Var wgap = p.at("cam.gap.w");
    Var wgmp = p.at("cam.gmp.w");
    out.cam_gap = ad::linear(t, ad::global_avg_pool(t, h), ad::reshape(t, wgap, {1, c}), nullptr);
    out.cam_gmp = ad::linear(t, ad::global_max_pool(t, h), ad::reshape(t, wgmp, {1, c}), nullptr);
    Var x_gap = ad::mul_channel(t, h, wgap);
    Var x_gmp = ad::mul_channel(t, h, wgmp);
    h = ad::leaky_relu(t, ad::conv2d(t, ad::concat_channels(t, {x_gap, x_gmp}), p.at("cam.fuse.w"),
                                     p.at("cam.fuse.b"), 1, 0),
                       0.2);
    out.patch = conv_block(t, p, "out", h, 1, 1);
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainState::TrainState(const TranslationConfig& c) : cfg(c) {
    cfg.validate();
    g_ab = std::make_unique<Generator>(gen_params, "gen_ab", cfg, derive_seed(cfg.seed, "g_ab"));
    g_ba = std::make_unique<Generator>(gen_params, "gen_ba", cfg, derive_seed(cfg.seed, "g_ba"));
    d_a = std::make_unique<Discriminator>(disc_params, "disc_a", cfg, derive_seed(cfg.seed, "d_a"));
    d_b = std::make_unique<Discriminator>(disc_params, "disc_b", cfg, derive_seed(cfg.seed, "d_b"));
    ad::AdamConfig ac;
    ac.lr = cfg.learning_rate;
    ac.beta1 = 0.5;  // GAN-style betas per the adopted architecture
    ac.beta2 = 0.999;
    ac.weight_decay = 1e-4;
    opt_g = std::make_unique<ad::Adam>(ac);
    opt_d = std::make_unique<ad::Adam>(ac);
}

namespace {

double scalar(const Var& v) { return v->value[0]; }

void check_finite(double v, const char* component, int64_t iteration) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string("non-finite ") + component + " loss at iteration " +
                                 std::to_string(iteration));
}

// Mean of the gap/gmp logit MSE pair (equivalent to MSE over their concat).
Var cam_mse(Tape& t, const Discriminator::Output& o, double target) {
    return ad::scale(t, ad::add(t, ad::mse_to(t, o.cam_gap, target), ad::mse_to(t, o.cam_gmp, target)),
                     0.5);
}

Var cam_bce(Tape& t, const GeneratorOutput& o, double target) {
    return ad::scale(
        t, ad::add(t, ad::bce_with_logits_to(t, o.cam_gap, target),
                   ad::bce_with_logits_to(t, o.cam_gmp, target)),
        0.5);
}

}  // namespace

LossRecord training_step(TrainState& st, const Tensor& batch_a, const Tensor& batch_b) {
    const auto& w = st.cfg.loss_weights;
    const int64_t it = st.iteration + 1;
    if (batch_a.rank() != 4 || batch_b.rank() != 4 || batch_a.dim(0) < 1 || batch_b.dim(0) < 1)
        throw std::runtime_error("training_step: batches must be nonempty (N,C,H,W)");
    if (batch_a.dim(2) != st.cfg.image_size || batch_b.dim(2) != st.cfg.image_size)
        throw std::runtime_error("training_step: batch size does not match config image_size");

    // Generator forward pass. The same tape later grows the generator loss,
    // so fake images are translated exactly once per iteration.
    Tape tg;
    Var real_a = ad::make_var(batch_a);
    Var real_b = ad::make_var(batch_b);
    GeneratorOutput a2b = st.g_ab->forward(tg, real_a);
    GeneratorOutput b2a = st.g_ba->forward(tg, real_b);

    // --- Discriminator step (fakes detached, updated first) -----------------
    LossRecord rec;
    rec.iteration = it;
    {
        Tape td;
        Var fake_a = ad::detach(b2a.img);
        Var fake_b = ad::detach(a2b.img);
        auto da_real = st.d_a->forward(td, real_a);
        auto da_fake = st.d_a->forward(td, fake_a);
        auto db_real = st.d_b->forward(td, real_b);
        auto db_fake = st.d_b->forward(td, fake_b);

        Var d_adv = ad::add(td, ad::add(td, ad::mse_to(td, da_real.patch, 1.0),
                                        ad::mse_to(td, da_fake.patch, 0.0)),
                            ad::add(td, ad::mse_to(td, db_real.patch, 1.0),
                                    ad::mse_to(td, db_fake.patch, 0.0)));
        Var d_cam = ad::add(td, ad::add(td, cam_mse(td, da_real, 1.0), cam_mse(td, da_fake, 0.0)),
                            ad::add(td, cam_mse(td, db_real, 1.0), cam_mse(td, db_fake, 0.0)));
        Var d_loss = ad::scale(td, ad::add(td, d_adv, d_cam), w.adversarial);

        rec.d_adv = scalar(d_adv);
        rec.d_cam = scalar(d_cam);
        rec.d_total = scalar(d_loss);
        check_finite(rec.d_adv, "discriminator adversarial", it);
        check_finite(rec.d_cam, "discriminator cam", it);

        st.disc_params.zero_grads();
        td.backward(d_loss);
        st.opt_d->step(st.disc_params);
    }

    // --- Generator step (against the updated discriminators) ----------------
    {
        GeneratorOutput a2b2a = st.g_ba->forward(tg, a2b.img);
        GeneratorOutput b2a2b = st.g_ab->forward(tg, b2a.img);
        GeneratorOutput a2a = st.g_ba->forward(tg, real_a);  // identity passes
        GeneratorOutput b2b = st.g_ab->forward(tg, real_b);

        auto da_fake = st.d_a->forward(tg, b2a.img);
        auto db_fake = st.d_b->forward(tg, a2b.img);

        Var g_adv = ad::add(tg, ad::mse_to(tg, da_fake.patch, 1.0), ad::mse_to(tg, db_fake.patch, 1.0));
        Var g_adv_cam = ad::add(tg, cam_mse(tg, da_fake, 1.0), cam_mse(tg, db_fake, 1.0));
        Var g_cycle = ad::add(tg, ad::l1_diff(tg, a2b2a.img, real_a), ad::l1_diff(tg, b2a2b.img, real_b));
        Var g_id = ad::add(tg, ad::l1_diff(tg, a2a.img, real_a), ad::l1_diff(tg, b2b.img, real_b));
        // Encoder CAM classifiers: source domain -> 1, target domain -> 0.
        Var g_cam = ad::add(tg, ad::add(tg, cam_bce(tg, a2b, 1.0), cam_bce(tg, b2b, 0.0)),
                            ad::add(tg, cam_bce(tg, b2a, 1.0), cam_bce(tg, a2a, 0.0)));

        Var g_loss = ad::add(
            tg,
            ad::add(tg, ad::scale(tg, ad::add(tg, g_adv, g_adv_cam), w.adversarial),
                    ad::scale(tg, g_cycle, w.cycle)),
            ad::add(tg, ad::scale(tg, g_id, w.identity), ad::scale(tg, g_cam, w.cam)));

        rec.g_adv = scalar(g_adv);
        rec.g_cam = scalar(g_cam);
        rec.g_cycle = scalar(g_cycle);
        rec.g_identity = scalar(g_id);
        rec.g_total = scalar(g_loss);
        check_finite(rec.g_adv, "generator adversarial", it);
        check_finite(rec.g_cycle, "generator cycle", it);
        check_finite(rec.g_identity, "generator identity", it);
        check_finite(rec.g_cam, "generator cam", it);

        st.gen_params.zero_grads();
        st.disc_params.zero_grads();  // tg flows into D params too; discard those grads
        tg.backward(g_loss);
        st.opt_g->step(st.gen_params);
    }

    // AdaLIN/ILN mixing coefficients stay in [0,1].
    for (const auto* gen : {st.g_ab.get(), st.g_ba.get()})
        for (const auto& name : gen->rho_names()) {
            auto& v = st.gen_params.get(name)->value;
            for (int64_t i = 0; i < v.numel(); ++i)
                v[static_cast<size_t>(i)] = std::clamp(v[static_cast<size_t>(i)], 0.0, 1.0);
        }

    st.iteration = it;
    st.history.push_back(rec);
    return rec;
}

// ---------------------------------------------------------------------------
// train / checkpoint / generate
// ---------------------------------------------------------------------------

namespace {

Tensor stack_batch(const std::vector<Tensor>& imgs) {
    const int64_t n = static_cast<int64_t>(imgs.size());
    const auto& s = imgs.front().shape();
    Tensor out({n, s[0], s[1], s[2]});
    const int64_t stride = imgs.front().numel();
    for (int64_t i = 0; i < n; ++i)
        std::copy(imgs[static_cast<size_t>(i)].data(), imgs[static_cast<size_t>(i)].data() + stride,
                  out.data() + i * stride);
    return out;
}

Tensor load_tanh(const ImageRecord& r, int size) {
    Image img = load_image(r.path);
    if (img.h != size || img.w != size) img = resize_bilinear(img, size, size);
    return image_to_chw_tanh(img);
}

struct DomainData {
    std::vector<const ImageRecord*> records;
    std::vector<Tensor> cache;  // populated when small enough to keep resident
    int size = 0;

    Tensor fetch(size_t i) const {
        if (!cache.empty()) return cache[i];
        return load_tanh(*records[i], size);
    }
};

DomainData prepare_domain(const DatasetManifest& m, int size) {
    DomainData d;
    d.size = size;
    for (const auto& r : m.records) d.records.push_back(&r);
    if (d.records.empty()) throw std::runtime_error("train: empty domain manifest");
    if (d.records.size() <= 4096)
        for (const auto* r : d.records) d.cache.push_back(load_tanh(*r, size));
    return d;
}

Tensor sample_batch(const DomainData& d, int batch, uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> picks;
    picks.reserve(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i)
        picks.push_back(d.fetch(static_cast<size_t>(rng.below(d.records.size()))));
    return stack_batch(picks);
}

void write_loss_csv(const std::vector<LossRecord>& hist, const fs::path& path) {
    std::ofstream f(path);
    f << "iteration,d_adv,d_cam,g_adv,g_cam,g_cycle,g_identity,d_total,g_total\n";
    for (const auto& r : hist) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n",
                      static_cast<long long>(r.iteration), r.d_adv, r.d_cam, r.g_adv, r.g_cam,
                      r.g_cycle, r.g_identity, r.d_total, r.g_total);
        f << buf;
    }
}

std::vector<LossRecord> read_loss_csv(const fs::path& path) {
    std::vector<LossRecord> hist;
    std::ifstream f(path);
    if (!f) return hist;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        LossRecord r;
        long long it = 0;
        if (std::sscanf(line.c_str(), "%lld,%lg,%lg,%lg,%lg,%lg,%lg,%lg,%lg", &it, &r.d_adv,
                        &r.d_cam, &r.g_adv, &r.g_cam, &r.g_cycle, &r.g_identity, &r.d_total,
                        &r.g_total) == 9) {
            r.iteration = it;
            hist.push_back(r);
        }
    }
    return hist;
}

TranslationCheckpoint snapshot_state(const TrainState& st, const ClassLabel& target) {
    TranslationCheckpoint c;
    c.config = st.cfg;
    c.iteration = st.iteration;
    c.target_class = target;
    c.loss_history = st.history;
    for (const auto& [name, var] : st.gen_params.all()) c.gen_tensors[name] = var->value;
    for (const auto& [name, var] : st.disc_params.all()) c.disc_tensors[name] = var->value;
    return c;
}

}  // namespace

TranslationCheckpoint train(const DatasetManifest& domain_a, const DatasetManifest& domain_b,
                            const TranslationConfig& cfg,
                            const std::optional<fs::path>& out_dir) {
    cfg.validate();
    if (domain_a.records.empty() || domain_b.records.empty())
        throw std::runtime_error("train: both domains must be nonempty");
    const auto b_counts = domain_b.class_counts();
    if (b_counts.size() != 1)
        throw std::runtime_error("train: domain B must hold a single class, found " +
                                 std::to_string(b_counts.size()));
    const ClassLabel target = class_by_name(class_name(b_counts.begin()->first));

    DomainData da = prepare_domain(domain_a, cfg.image_size);
    DomainData db = prepare_domain(domain_b, cfg.image_size);

    TrainState st(cfg);
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        Tensor batch_a = sample_batch(da, cfg.batch_size, derive_seed(cfg.seed, 2 * it));
        Tensor batch_b = sample_batch(db, cfg.batch_size, derive_seed(cfg.seed, 2 * it + 1));
        try {
            training_step(st, batch_a, batch_b);
        } catch (const std::exception& e) {
            throw std::runtime_error("train: " + std::string(e.what()));
        }
        if (out_dir && cfg.snapshot_every > 0 && (it + 1) % cfg.snapshot_every == 0 &&
            it + 1 < cfg.iterations) {
            char name[32];
            std::snprintf(name, sizeof(name), "snapshot_%08lld", static_cast<long long>(it + 1));
            save_checkpoint(snapshot_state(st, target), *out_dir / name);
        }
    }

    TranslationCheckpoint ckpt = snapshot_state(st, target);
    if (out_dir) save_checkpoint(ckpt, *out_dir);
    return ckpt;
}

void save_checkpoint(const TranslationCheckpoint& ckpt, const fs::path& dir) {
    BlobStore b;
    b.kind = "ugatit-checkpoint";
    b.meta = ordered_json{{"config", translation_config_to_json(ckpt.config)},
                          {"iteration", ckpt.iteration},
                          {"target_class", class_name(ckpt.target_class)}};
    for (const auto& [name, t] : ckpt.gen_tensors) b.add(name, t);
    for (const auto& [name, t] : ckpt.disc_tensors) b.add(name, t);
    b.write(dir);
    write_loss_csv(ckpt.loss_history, dir / "losses.csv");
}

TranslationCheckpoint load_checkpoint(const fs::path& dir) {
    BlobStore b = BlobStore::read(dir);
    if (b.kind != "ugatit-checkpoint")
        throw std::runtime_error("not a translation checkpoint: " + dir.string());
    TranslationCheckpoint c;
    c.config = translation_config_from_json(b.meta.at("config"));
    c.iteration = b.meta.at("iteration").get<int64_t>();
    c.target_class = class_by_name(b.meta.at("target_class").get<std::string>());
    for (const auto& [name, t] : b.tensors) {
        if (name.rfind("gen_", 0) == 0)
            c.gen_tensors[name] = t;
        else
            c.disc_tensors[name] = t;
    }
    c.loss_history = read_loss_csv(dir / "losses.csv");
    return c;
}

DatasetManifest generate(const TranslationCheckpoint& ckpt, const DatasetManifest& source,
                         int64_t n, uint64_t seed, const fs::path& img_dir) {
    if (source.records.empty()) throw std::runtime_error("generate: empty source manifest");
    if (n < 1) throw std::runtime_error("generate: n must be >= 1");

    // Inference-only parameter store: no gradients, no tape growth.
    ad::ParamStore ps;
    for (const auto& [name, t] : ckpt.gen_tensors)
        if (name.rfind("gen_ab.", 0) == 0) ps.create(name, t)->requires_grad = false;
    Generator g_ab(ps, "gen_ab", ckpt.config);

    // Choose source records: without replacement when they suffice,
    // uniform with replacement otherwise.
    const int64_t ns = static_cast<int64_t>(source.records.size());
    Rng rng(derive_seed(seed, "generate/" + class_name(ckpt.target_class)));
    std::vector<size_t> picks;
    picks.reserve(static_cast<size_t>(n));
    if (n <= ns) {
        auto idx = rng.sample_without_replacement(static_cast<size_t>(ns), static_cast<size_t>(n));
        std::sort(idx.begin(), idx.end());
        picks = std::move(idx);
    } else {
        for (int64_t i = 0; i < n; ++i)
            picks.push_back(static_cast<size_t>(rng.below(static_cast<uint64_t>(ns))));
    }

    fs::create_directories(img_dir);
    DatasetManifest out;
    out.global_seed = seed;
    out.created_at = now_iso8601();

    const int64_t batch = 64;
    const int size = ckpt.config.image_size;
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t end = std::min(n, start + batch);
        std::vector<Tensor> imgs;
        for (int64_t i = start; i < end; ++i)
            imgs.push_back(load_tanh(source.records[picks[static_cast<size_t>(i)]], size));
        Tape t;
        Var x = ad::make_var(stack_batch(imgs));
        GeneratorOutput go = g_ab.forward(t, x);
        for (int64_t i = start; i < end; ++i) {
            const ImageRecord& src = source.records[picks[static_cast<size_t>(i)]];
            const uint64_t rec_seed = derive_seed(seed, static_cast<uint64_t>(i));
            Tensor chw({3, size, size});
            const int64_t plane = static_cast<int64_t>(3) * size * size;
            std::copy(go.img->value.data() + (i - start) * plane,
                      go.img->value.data() + (i - start + 1) * plane, chw.data());

            ImageRecord r;
            char suffix[48];
            std::snprintf(suffix, sizeof(suffix), "~gen-%s-%016llx",
                          class_name(ckpt.target_class).c_str(),
                          static_cast<unsigned long long>(rec_seed));
            r.id = src.id + suffix;
            std::string fname = r.id;
            std::replace(fname.begin(), fname.end(), '/', '_');
            r.path = (img_dir / (fname + ".png")).string();
            r.label = ckpt.target_class;
            r.provenance = Provenance::generated;
            r.source_id = src.id;
            r.seed = rec_seed;
            save_png(r.path, chw_tanh_to_image(chw));
            out.records.push_back(std::move(r));
        }
    }
    out.validate();
    return out;
}

}  // namespace octfew::gan
