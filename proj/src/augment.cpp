#include "octfew/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "octfew/rng.hpp"

namespace octfew {

namespace fs = std::filesystem;

void AugmentationSpec::validate() const {
    if (translate_frac < 0 || rotate_deg < 0 || zoom_frac < 0 || brightness_frac < 0)
        throw std::runtime_error("AugmentationSpec: bounds must be nonnegative");
    if (hflip_prob < 0.0 || hflip_prob > 1.0)
        throw std::runtime_error("AugmentationSpec: hflip_prob must be in [0,1]");
}

bool SampledParams::within(const AugmentationSpec& spec) const {
    return std::abs(dx) <= spec.translate_frac && std::abs(dy) <= spec.translate_frac &&
           std::abs(theta) <= spec.rotate_deg && zoom >= 0.0 && zoom <= spec.zoom_frac &&
           std::abs(brightness) <= spec.brightness_frac;
}

nlohmann::ordered_json augmentation_spec_to_json(const AugmentationSpec& s) {
    nlohmann::ordered_json j;
    j["translate_frac"] = s.translate_frac;
    j["rotate_deg"] = s.rotate_deg;
    j["zoom_frac"] = s.zoom_frac;
    j["brightness_frac"] = s.brightness_frac;
    j["hflip_prob"] = s.hflip_prob;
    return j;
}

AugmentationSpec augmentation_spec_from_json(const nlohmann::ordered_json& j) {
    AugmentationSpec s;
    s.translate_frac = j.value("translate_frac", s.translate_frac);
    s.rotate_deg = j.value("rotate_deg", s.rotate_deg);
    s.zoom_frac = j.value("zoom_frac", s.zoom_frac);
    s.brightness_frac = j.value("brightness_frac", s.brightness_frac);
    s.hflip_prob = j.value("hflip_prob", s.hflip_prob);
    s.validate();
    return s;
}

SampledParams sample_params(const AugmentationSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, "augment_params"));
    SampledParams p;
    p.dx = rng.uniform(-spec.translate_frac, spec.translate_frac);
    p.dy = rng.uniform(-spec.translate_frac, spec.translate_frac);
    p.theta = rng.uniform(-spec.rotate_deg, spec.rotate_deg);
    p.zoom = rng.uniform(0.0, spec.zoom_frac);
    p.brightness = rng.uniform(-spec.brightness_frac, spec.brightness_frac);
    p.flip = rng.bernoulli(spec.hflip_prob);
    p.seed = seed;
    return p;
}

Image apply_augmentation(const Image& img, const SampledParams& p) {
    if (img.empty()) throw std::runtime_error("apply_augmentation: empty image");
    Image out = img;

    const bool needs_warp = p.dx != 0.0 || p.dy != 0.0 || p.theta != 0.0 || p.zoom != 0.0;
    if (needs_warp) {
        const double cx = (img.w - 1) / 2.0;
        const double cy = (img.h - 1) / 2.0;
        auto m = affine_translate(p.dx * img.w, p.dy * img.h);
        m = affine_compose(affine_rotate_about(p.theta, cx, cy), m);
        m = affine_compose(affine_scale_about(1.0 + p.zoom, cx, cy), m);
        out = warp_affine(out, m);
    }

    if (p.brightness != 0.0) {
        const double k = 1.0 + p.brightness;
        for (auto& v : out.px)
            v = static_cast<uint8_t>(std::clamp(std::lround(v * k), 0L, 255L));
    }

    if (p.flip) out = hflip(out);
    return out;
}

std::vector<ImageRecord> augment_to_count(const std::vector<ImageRecord>& records, int64_t target,
                                          const AugmentationSpec& spec, uint64_t seed,
                                          const fs::path& img_dir) {
    if (records.empty()) throw std::runtime_error("augment_to_count: no source records");
    if (target < static_cast<int64_t>(records.size()))
        throw std::runtime_error("augment_to_count: target " + std::to_string(target) +
                                 " below source count " + std::to_string(records.size()));
    spec.validate();
    for (const auto& r : records)
        if (r.label.name != records.front().label.name)
            throw std::runtime_error("augment_to_count: records span multiple classes");

    std::vector<ImageRecord> out = records;
    const int64_t n_new = target - static_cast<int64_t>(records.size());
    if (n_new == 0) return out;

    fs::create_directories(img_dir);
    std::vector<Image> sources(records.size());
    std::vector<bool> loaded(records.size(), false);

    for (int64_t j = 0; j < n_new; ++j) {
        const size_t src = static_cast<size_t>(j) % records.size();
        const int64_t out_index = static_cast<int64_t>(records.size()) + j;
        const uint64_t rec_seed = derive_seed(seed, static_cast<uint64_t>(out_index));
        if (!loaded[src]) {
            sources[src] = load_image(records[src].path);
            loaded[src] = true;
        }
        const SampledParams p = sample_params(spec, rec_seed);
        const Image aug = apply_augmentation(sources[src], p);

        ImageRecord r;
        char suffix[32];
        std::snprintf(suffix, sizeof(suffix), "~aug%016llx",
                      static_cast<unsigned long long>(rec_seed));
        r.id = records[src].id + suffix;
        std::string fname = r.id;
        std::replace(fname.begin(), fname.end(), '/', '_');
        r.path = (img_dir / (fname + ".png")).string();
        r.label = records[src].label;
        r.provenance = Provenance::augmented;
        r.source_id = records[src].id;
        r.seed = rec_seed;
        save_png(r.path, aug);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace octfew
