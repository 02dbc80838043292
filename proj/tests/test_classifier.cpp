#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "octfew/blobstore.hpp"
#include "octfew/classifier.hpp"
#include "octfew/rng.hpp"
#include "octfew/synthetic.hpp"

using namespace octfew;
using ad::Tape;
using ad::Var;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("octfew_cls_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Writes n synthetic images of each listed class and returns a manifest.
DatasetManifest image_manifest(const fs::path& dir, const std::vector<std::pair<ClassName, int>>& spec,
                               uint64_t seed = 0) {
    DatasetManifest m;
    m.created_at = now_iso8601();
    for (const auto& [cls, n] : spec) {
        fs::create_directories(dir / class_name(class_by_index(static_cast<int>(cls))));
        for (int i = 0; i < n; ++i) {
            ImageRecord r;
            const std::string cname = class_name(class_by_index(static_cast<int>(cls)));
            r.id = cname + "/" + std::to_string(i);
            r.path = (dir / cname / (std::to_string(i) + ".png")).string();
            r.label = class_by_index(static_cast<int>(cls));
            save_png(r.path, synth::make_image(cls, 32, derive_seed(seed, r.id)));
            m.records.push_back(std::move(r));
        }
    }
    return m;
}

BackboneConfig toy_config(uint64_t seed) {
    BackboneConfig c;
    c.variant = BackboneVariant::toy_cnn;
    c.seed = seed;
    return c;
}

bool same_tensor_bits(const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape())) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace

TEST_CASE("config validation: sizes pinned per variant") {
    BackboneConfig c = toy_config(0);
    CHECK_NOTHROW(c.validate());
    c.input_size = 64;
    CHECK_THROWS(c.validate());
    c = toy_config(0);
    c.variant = BackboneVariant::inception_v3_like;
    CHECK_THROWS(c.validate());  // still 32
    c.input_size = 299;
    CHECK_NOTHROW(c.validate());
    // json round trip
    c.attention.variant = AttentionVariant::cbam;
    c.attention.sites = {"mixed_b4"};
    const auto back = backbone_config_from_json(backbone_config_to_json(c));
    CHECK(back.variant == BackboneVariant::inception_v3_like);
    CHECK(back.attention.variant == AttentionVariant::cbam);
    CHECK(back.attention.sites == std::vector<std::string>{"mixed_b4"});
}

TEST_CASE("toy model: deterministic initialization and initial loss") {
    Model a(toy_config(11)), b(toy_config(11)), c(toy_config(12));
    for (const auto& [name, va] : a.params().all())
        CHECK(same_tensor_bits(va->value, b.params().get(name)->value));
    bool any_diff = false;
    for (const auto& [name, va] : a.params().all())
        any_diff |= !same_tensor_bits(va->value, c.params().get(name)->value);
    CHECK(any_diff);

    Rng rng(5);
    Tensor x = Tensor::uniform({4, 3, 32, 32}, rng, -1.0, 1.0);
    const std::vector<int> labels = {0, 3, 5, 8};
    auto loss_of = [&](Model& m) {
        Tape t;
        return ad::softmax_cross_entropy(t, m.forward(t, ad::make_var(x)), labels)->value[0];
    };
    CHECK(loss_of(a) == loss_of(b));
}

TEST_CASE("predict: softmax identities and tie-breaking") {
    TempDir tmp("pred");
    auto m = image_manifest(tmp.path, {{ClassName::NORMAL, 3}});

    Model model(toy_config(3));
    // zero head -> all logits 0 -> uniform 1/9 and argmax at index 0
    model.params().get("head.fc.w")->value.fill(0.0);
    model.params().get("head.fc.b")->value.fill(0.0);
    const auto preds = predict(model, m);
    REQUIRE(preds.size() == 3);
    for (const auto& p : preds) {
        REQUIRE(p.probs.size() == 9);
        double sum = 0.0;
        for (double v : p.probs) {
            CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-9));
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(p.predicted == 0);  // nine-way tie resolves to the lowest index
    }

    // tie between indices 2 and 5 -> index 2
    model.params().get("head.fc.b")->value[2] = 3.0;
    model.params().get("head.fc.b")->value[5] = 3.0;
    for (const auto& p : predict(model, m)) CHECK(p.predicted == 2);

    // unreadable image names the record
    DatasetManifest bad = m;
    bad.records[1].path = (tmp.path / "gone.png").string();
    CHECK_THROWS_WITH_AS(predict(model, bad), doctest::Contains(bad.records[1].id.c_str()),
                         std::runtime_error);
}

TEST_CASE("fine_tune: freeze contract is bit-exact; only unfrozen change") {
    TempDir tmp("freeze");
    auto m = image_manifest(tmp.path, {{ClassName::NORMAL, 8}, {ClassName::CNV, 8}});

    BackboneConfig bc = toy_config(21);
    bc.freeze_policy = FreezePolicy::final_layers_only;
    Model model(bc);

    const auto frozen = model.frozen_prefixes(FreezePolicy::final_layers_only);
    CHECK(frozen.count("stage1.c1.w"));
    CHECK(frozen.count("stage2.c2.b"));
    CHECK_FALSE(frozen.count("stage3.c1.w"));
    CHECK_FALSE(frozen.count("head.fc.w"));

    std::map<std::string, Tensor> before;
    for (const auto& [name, v] : model.params().all()) before[name] = v->value;

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = 1;
    fine_tune(model, m, nullptr, tc, FreezePolicy::final_layers_only);

    for (const auto& [name, v] : model.params().all()) {
        if (frozen.count(name))
            CHECK(same_tensor_bits(before.at(name), v->value));
        else
            CHECK_FALSE(same_tensor_bits(before.at(name), v->value));
    }
}

TEST_CASE("fine_tune: deterministic end-to-end; separable data reaches 0.99") {
    TempDir tmp("sep");
    // NORMAL vs CNV are structurally very different images
    auto m = image_manifest(tmp.path, {{ClassName::NORMAL, 30}, {ClassName::CNV, 30}});

    TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 8;
    tc.learning_rate = 2e-3;
    tc.seed = 4;

    Model m1(toy_config(31));
    const auto log1 = fine_tune(m1, m, nullptr, tc, FreezePolicy::full);
    CHECK(log1.log.size() == 10);
    CHECK(log1.log.back().train_accuracy >= 0.99);

    // exact repeatability (epochs=1, batch=1 included in the contract)
    TrainConfig tc1 = tc;
    tc1.epochs = 1;
    tc1.batch_size = 1;
    Model m2(toy_config(31)), m3(toy_config(31));
    fine_tune(m2, m, nullptr, tc1, FreezePolicy::full);
    fine_tune(m3, m, nullptr, tc1, FreezePolicy::full);
    for (const auto& [name, v] : m2.params().all())
        CHECK(same_tensor_bits(v->value, m3.params().get(name)->value));
}

TEST_CASE("fine_tune: overfit sanity, 90-image 9-class corpus to 100% within 50 epochs") {
    TempDir tmp("overfit");
    std::vector<std::pair<ClassName, int>> spec;
    for (const auto& c : all_classes()) spec.emplace_back(c.name, 10);
    auto m = image_manifest(tmp.path, spec);

    TrainConfig tc;
    tc.epochs = 50;
    tc.batch_size = 16;
    tc.learning_rate = 3e-3;
    tc.seed = 10;
    Model model(toy_config(7));
    const auto tm = fine_tune(model, m, nullptr, tc, FreezePolicy::full);
    double best = 0.0;
    for (const auto& e : tm.log) best = std::max(best, e.train_accuracy);
    CHECK(best == 1.0);
}

TEST_CASE("fine_tune: early stop and best-validation snapshot") {
    TempDir tmp("val");
    auto train_m = image_manifest(tmp.path / "tr", {{ClassName::NORMAL, 12}, {ClassName::DME, 12}});
    auto val_m = image_manifest(tmp.path / "va", {{ClassName::NORMAL, 4}, {ClassName::DME, 4}}, 99);

    TrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 4;
    tc.seed = 2;
    tc.early_stop_patience = 2;
    Model model(toy_config(41));
    const auto tm = fine_tune(model, train_m, &val_m, tc, FreezePolicy::full);
    CHECK(tm.best_epoch >= 0);
    for (const auto& e : tm.log) CHECK(e.val_accuracy.has_value());
}

TEST_CASE("model save/load: round trip preserves config and weights to f32") {
    TempDir tmp("saveload");
    BackboneConfig bc = toy_config(51);
    bc.attention.variant = AttentionVariant::se;
    bc.attention.reduction_ratio = 8;
    Model model(bc);
    model.save(tmp.path / "model");
    Model loaded = Model::load(tmp.path / "model");
    CHECK(loaded.config().variant == BackboneVariant::toy_cnn);
    CHECK(loaded.config().attention.variant == AttentionVariant::se);
    for (const auto& [name, v] : model.params().all()) {
        const auto& lv = loaded.params().get(name)->value;
        for (int64_t i = 0; i < v->value.numel(); ++i)
            CHECK(lv[static_cast<size_t>(i)] ==
                  doctest::Approx(v->value[static_cast<size_t>(i)]).epsilon(1e-6));
    }
}

TEST_CASE("pretrained loading: trunk from file, fresh head, loud schema errors") {
    TempDir tmp("pretrained");
    // donor model with 5 classes; its trunk becomes the pretrained file
    BackboneConfig donor_cfg = toy_config(61);
    donor_cfg.num_classes = 5;
    Model donor(donor_cfg);
    donor.save(tmp.path / "weights");

    BackboneConfig bc = toy_config(62);
    bc.num_classes = 9;
    bc.pretrained_weights = (tmp.path / "weights").string();
    Model model(bc);
    // trunk equals file contents (within f32), head freshly initialized
    for (const auto& [name, v] : model.params().all()) {
        if (name.rfind("head.", 0) == 0) {
            CHECK(v->value.dim(0) == 9);
        } else {
            const auto& dv = donor.params().get(name)->value;
            for (int64_t i = 0; i < v->value.numel(); ++i)
                CHECK(v->value[static_cast<size_t>(i)] ==
                      doctest::Approx(dv[static_cast<size_t>(i)]).epsilon(1e-6));
        }
    }

    // missing trunk tensor -> error listing its name
    {
        BlobStore store = BlobStore::read(tmp.path / "weights");
        BlobStore partial;
        partial.kind = store.kind;
        partial.meta = store.meta;
        for (const auto& [name, t] : store.tensors)
            if (name != "stage2.c1.w") partial.add(name, t);
        partial.write(tmp.path / "missing");
        BackboneConfig bad = bc;
        bad.pretrained_weights = (tmp.path / "missing").string();
        CHECK_THROWS_WITH_AS(Model{bad}, doctest::Contains("stage2.c1.w"), std::runtime_error);
    }
    // extra tensor -> error listing its name
    {
        BlobStore store = BlobStore::read(tmp.path / "weights");
        store.add("stage9.w", Tensor::zeros({1}));
        store.write(tmp.path / "extra");
        BackboneConfig bad = bc;
        bad.pretrained_weights = (tmp.path / "extra").string();
        CHECK_THROWS_WITH_AS(Model{bad}, doctest::Contains("stage9.w"), std::runtime_error);
    }
}

TEST_CASE("cross_validate: fold structure, determinism, k=2 minimum") {
    TempDir tmp("cv");
    std::vector<std::pair<ClassName, int>> spec = {{ClassName::NORMAL, 10}, {ClassName::CNV, 10},
                                                   {ClassName::DME, 10}};
    auto m = image_manifest(tmp.path, spec);

    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.learning_rate = 2e-3;
    tc.seed = 77;
    const auto folds = cross_validate(m, 2, toy_config(71), tc);
    REQUIRE(folds.size() == 2);
    int64_t tested = 0;
    for (const auto& fr : folds) {
        tested += fr.cm.total();
        CHECK(fr.cm.k == 9);
        CHECK(fr.predictions.size() == static_cast<size_t>(fr.cm.total()));
    }
    CHECK(tested == 30);  // every record tested exactly once across folds

    // per-fold determinism: identical seeds give identical reports
    const auto folds2 = cross_validate(m, 2, toy_config(71), tc);
    for (size_t f = 0; f < folds.size(); ++f) {
        CHECK(folds[f].report.accuracy == folds2[f].report.accuracy);
        CHECK(folds[f].cm.counts == folds2[f].cm.counts);
    }
}

TEST_CASE("inception_v3_like: construction, forward shape, freeze boundary") {
    BackboneConfig c;
    c.variant = BackboneVariant::inception_v3_like;
    c.input_size = 299;
    c.seed = 81;
    c.attention.variant = AttentionVariant::se;
    c.attention.reduction_ratio = 16;  // default sites: mixed_a3, mixed_b4, mixed_c2
    Model model(c);

    // attention adds the analytic increment at each default site
    BackboneConfig plain = c;
    plain.attention.variant = AttentionVariant::none;
    Model base(plain);
    const int64_t want = base.params().total_size() + se_param_count(288, SeConfig{16}) +
                         se_param_count(768, SeConfig{16}) + se_param_count(2048, SeConfig{16});
    CHECK(model.params().total_size() == want);

    // final_layers_only keeps head + last block group + attention trainable
    const auto frozen = model.frozen_prefixes(FreezePolicy::final_layers_only);
    CHECK(frozen.count("stem.conv1.w"));
    CHECK(frozen.count("mixed_b4.b1.w"));
    CHECK_FALSE(frozen.count("mixed_c1.b1.w"));
    CHECK_FALSE(frozen.count("mixed_c2.b1.w"));
    CHECK_FALSE(frozen.count("head.fc.w"));
    CHECK_FALSE(frozen.count("att.mixed_a3.w1"));

    // one forward pass: 9-way logits from a 299x299 input
    Rng rng(9);
    Tensor x = Tensor::uniform({1, 3, 299, 299}, rng, -1.0, 1.0);
    Tape t;
    Var logits = model.forward(t, ad::make_var(x));
    CHECK(logits->value.shape() == std::vector<int64_t>{1, 9});
    CHECK(model.feature_dim() == 2048);
    for (int64_t i = 0; i < 9; ++i) CHECK(std::isfinite(logits->value[static_cast<size_t>(i)]));
}
