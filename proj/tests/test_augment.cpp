#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "octfew/augment.hpp"
#include "octfew/rng.hpp"
#include "octfew/synthetic.hpp"

using namespace octfew;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("octfew_aug_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Image noise_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.px) v = static_cast<uint8_t>(rng.below(256));
    return img;
}

}  // namespace

TEST_CASE("sample_params: degenerate spec gives identity params") {
    AugmentationSpec spec;
    spec.translate_frac = 0;
    spec.rotate_deg = 0;
    spec.zoom_frac = 0;
    spec.brightness_frac = 0;
    spec.hflip_prob = 0;
    const auto p = sample_params(spec, 123);
    CHECK(p.dx == 0.0);
    CHECK(p.dy == 0.0);
    CHECK(p.theta == 0.0);
    CHECK(p.zoom == 0.0);
    CHECK(p.brightness == 0.0);
    CHECK_FALSE(p.flip);
}

TEST_CASE("sample_params: bounds hold over 10^4 seeded draws") {
    const AugmentationSpec spec;  // paper ranges
    int flips = 0;
    for (uint64_t s = 0; s < 10000; ++s) {
        const auto p = sample_params(spec, s);
        CHECK(p.within(spec));
        CHECK(std::abs(p.dx) <= 0.05);
        CHECK(std::abs(p.dy) <= 0.05);
        CHECK(std::abs(p.theta) <= 30.0);
        CHECK(p.zoom >= 0.0);
        CHECK(p.zoom <= 0.20);
        CHECK(std::abs(p.brightness) <= 0.10);
        flips += p.flip ? 1 : 0;
    }
    // Bernoulli(1/2) over 10^4 draws
    CHECK(flips > 4600);
    CHECK(flips < 5400);
}

TEST_CASE("sample_params: same seed twice is identical") {
    const AugmentationSpec spec;
    const auto a = sample_params(spec, 77);
    const auto b = sample_params(spec, 77);
    CHECK(a.dx == b.dx);
    CHECK(a.dy == b.dy);
    CHECK(a.theta == b.theta);
    CHECK(a.zoom == b.zoom);
    CHECK(a.brightness == b.brightness);
    CHECK(a.flip == b.flip);
}

TEST_CASE("apply: identity params are pixel-exact") {
    const Image img = noise_image(17, 23, 5);
    SampledParams p;  // all zero
    const Image out = apply_augmentation(img, p);
    CHECK(out.px == img.px);
    CHECK(out.h == img.h);
    CHECK(out.w == img.w);
}

TEST_CASE("apply: double flip is pixel-exact") {
    const Image img = noise_image(16, 16, 6);
    SampledParams p;
    p.flip = true;
    const Image once = apply_augmentation(img, p);
    CHECK(once.px != img.px);
    const Image twice = apply_augmentation(once, p);
    CHECK(twice.px == img.px);
}

TEST_CASE("apply: multiplicative brightness on constant image, closed form") {
    Image img(8, 8, 100);
    SampledParams p;
    p.brightness = 0.10;
    const Image out = apply_augmentation(img, p);
    for (auto v : out.px) CHECK(v == 110);

    p.brightness = -0.10;
    const Image out2 = apply_augmentation(img, p);
    for (auto v : out2.px) CHECK(v == 90);

    // clamping at the top
    Image bright(4, 4, 250);
    p.brightness = 0.10;
    for (auto v : apply_augmentation(bright, p).px) CHECK(v == 255);
}

TEST_CASE("apply: shape preserved under arbitrary params") {
    const AugmentationSpec spec;
    const Image img = noise_image(21, 34, 7);
    for (uint64_t s = 0; s < 25; ++s) {
        const Image out = apply_augmentation(img, sample_params(spec, s));
        CHECK(out.h == 21);
        CHECK(out.w == 34);
    }
}

TEST_CASE("apply: pure translation moves pixels with black fill") {
    Image img(10, 10, 0);
    img.at(5, 5, 0) = img.at(5, 5, 1) = img.at(5, 5, 2) = 200;
    SampledParams p;
    p.dx = 0.2;  // +2 pixels right on a 10-wide image
    const Image out = apply_augmentation(img, p);
    CHECK(out.at(5, 7, 0) == 200);
    CHECK(out.at(5, 5, 0) == 0);
}

TEST_CASE("augment_to_count: counts, provenance, round-robin sources") {
    TempDir tmp("a2c");
    std::vector<ImageRecord> records;
    for (int i = 0; i < 4; ++i) {
        ImageRecord r;
        r.id = "RP/" + std::to_string(i);
        r.path = (tmp.path / ("src" + std::to_string(i) + ".png")).string();
        r.label = class_by_name("RP");
        save_png(r.path, synth::make_image(ClassName::RP, 24, static_cast<uint64_t>(i)));
        records.push_back(std::move(r));
    }

    // no-op when target equals the source count
    const auto same = augment_to_count(records, 4, {}, 9, tmp.path / "imgs");
    CHECK(same.size() == 4);
    for (size_t i = 0; i < 4; ++i) CHECK(same[i].id == records[i].id);

    const auto out = augment_to_count(records, 10, {}, 9, tmp.path / "imgs");
    REQUIRE(out.size() == 10);
    // originals first, untouched
    for (size_t i = 0; i < 4; ++i) {
        CHECK(out[i].id == records[i].id);
        CHECK(out[i].provenance == Provenance::real);
    }
    // 6 augmented with round-robin sources: multiplicities {2,2,1,1}
    std::map<std::string, int> mult;
    for (size_t i = 4; i < 10; ++i) {
        CHECK(out[i].provenance == Provenance::augmented);
        REQUIRE(out[i].source_id.has_value());
        REQUIRE(out[i].seed.has_value());
        CHECK(fs::exists(out[i].path));
        ++mult[*out[i].source_id];
    }
    CHECK(mult["RP/0"] == 2);
    CHECK(mult["RP/1"] == 2);
    CHECK(mult["RP/2"] == 1);
    CHECK(mult["RP/3"] == 1);

    // ids unique
    std::set<std::string> ids;
    for (const auto& r : out) CHECK(ids.insert(r.id).second);

    // errors
    CHECK_THROWS(augment_to_count({}, 5, {}, 0, tmp.path / "imgs"));
    CHECK_THROWS(augment_to_count(records, 3, {}, 0, tmp.path / "imgs"));
}

TEST_CASE("augment_to_count: fully deterministic in ids and pixels") {
    TempDir tmp1("det1");
    TempDir tmp2("det2");
    std::vector<ImageRecord> records;
    for (int i = 0; i < 3; ++i) {
        ImageRecord r;
        r.id = "MH/" + std::to_string(i);
        r.path = (tmp1.path / ("s" + std::to_string(i) + ".png")).string();
        r.label = class_by_name("MH");
        save_png(r.path, synth::make_image(ClassName::MH, 24, static_cast<uint64_t>(100 + i)));
        records.push_back(std::move(r));
    }
    const auto a = augment_to_count(records, 9, {}, 55, tmp1.path / "a");
    const auto b = augment_to_count(records, 9, {}, 55, tmp2.path / "b");
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].source_id == b[i].source_id);
        CHECK(a[i].seed == b[i].seed);
        if (a[i].provenance == Provenance::augmented)
            CHECK(load_image(a[i].path).px == load_image(b[i].path).px);
    }
}

TEST_CASE("spec json round-trip") {
    AugmentationSpec s;
    s.rotate_deg = 12.5;
    s.hflip_prob = 0.25;
    const auto j = augmentation_spec_to_json(s);
    const auto back = augmentation_spec_from_json(j);
    CHECK(back.rotate_deg == 12.5);
    CHECK(back.hflip_prob == 0.25);
    CHECK(back.translate_frac == s.translate_frac);
    AugmentationSpec bad;
    bad.hflip_prob = 1.5;
    CHECK_THROWS(bad.validate());
}
