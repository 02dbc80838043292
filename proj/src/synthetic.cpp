#include "octfew/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "octfew/rng.hpp"

namespace octfew::synth {

namespace fs = std::filesystem;

CorpusSpec CorpusSpec::desk_default() {
    CorpusSpec s;
    for (const auto& c : all_classes()) s.counts[c.name] = c.is_major() ? 200 : 10;
    return s;
}

namespace {

struct Canvas {
    int size;
    std::vector<double> v;  // grayscale working buffer
    explicit Canvas(int s) : size(s), v(static_cast<size_t>(s) * s, 12.0) {}
    double& at(int y, int x) { return v[static_cast<size_t>(y) * size + x]; }

    void disc(double cy, double cx, double r, double value) {
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double d = std::hypot(y - cy, x - cx);
                if (d <= r) at(y, x) = value;
            }
    }
    void ring(double cy, double cx, double r, double thickness, double value) {
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double d = std::hypot(y - cy, x - cx);
                if (std::abs(d - r) <= thickness) at(y, x) = value;
            }
    }
    void rect(double y0, double y1, double x0, double x1, double value) {
        for (int y = std::max(0, static_cast<int>(y0)); y < std::min(size, static_cast<int>(y1)); ++y)
            for (int x = std::max(0, static_cast<int>(x0)); x < std::min(size, static_cast<int>(x1)); ++x)
                at(y, x) = value;
    }
};

}  // namespace

Image make_image(ClassName cls, int size, uint64_t seed) {
    Rng rng(derive_seed(seed, "synth/" + class_name(cls)));
    Canvas c(size);
    const double s = size;

    // Retina band with per-image vertical jitter and intensity jitter.
    const double jitter = rng.uniform(-0.05, 0.05) * s;
    const double band_top = 0.35 * s + jitter;
    const double band_bot = 0.62 * s + jitter;
    const double base = 140.0 + rng.uniform(-15.0, 15.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (y >= band_top && y < band_bot) {
                const double depth = (y - band_top) / std::max(1.0, band_bot - band_top);
                c.at(y, x) = base + 40.0 * (1.0 - depth);
            }

    const double cx = 0.5 * s + rng.uniform(-0.04, 0.04) * s;
    const double below = band_bot + 0.12 * s;

    switch (cls) {
        case ClassName::NORMAL:
            break;
        case ClassName::CNV:
            // Large bright bulge pushing out of the band.
            c.disc(band_bot, cx, 0.22 * s, base + 70.0);
            break;
        case ClassName::DME:
            // Large dark cystic hole inside the band.
            c.disc((band_top + band_bot) / 2.0, cx, 0.18 * s, 25.0);
            break;
        case ClassName::DRUSEN:
            // Bumpy deposits along the band's upper edge.
            for (int i = -1; i <= 1; ++i)
                c.disc(band_top, cx + i * 0.22 * s, 0.07 * s, base + 55.0);
            break;
        case ClassName::CSC:
            // Small dark detachment dome carved into the band's underside.
            c.disc(band_bot - 0.03 * s, cx - 0.15 * s, 0.09 * s, 25.0);
            break;
        case ClassName::MH:
            // Narrow full-thickness notch at the fovea.
            c.rect(band_top, band_bot, cx - 0.05 * s, cx + 0.05 * s, 18.0);
            break;
        case ClassName::MacTel:
            // Two small bright foci beneath the band.
            c.disc(below, cx - 0.12 * s, 0.05 * s, 235.0);
            c.disc(below, cx + 0.12 * s, 0.05 * s, 235.0);
            break;
        case ClassName::RP:
            // Pigmentary dark stripes at both flanks.
            c.rect(band_top, band_bot, 0.08 * s, 0.14 * s, 22.0);
            c.rect(band_top, band_bot, 0.86 * s, 0.92 * s, 22.0);
            break;
        case ClassName::Stargardt:
            // Small bright flecked ring under the fovea.
            c.ring(below, cx, 0.09 * s, 0.03 * s, 225.0);
            break;
    }

    Image img(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double noisy = c.at(y, x) + rng.uniform(-8.0, 8.0);
            const auto px = static_cast<uint8_t>(std::clamp(std::lround(noisy), 0L, 255L));
            img.at(y, x, 0) = px;
            img.at(y, x, 1) = px;
            img.at(y, x, 2) = px;
        }
    return img;
}

void write_corpus(const CorpusSpec& spec, const fs::path& root) {
    for (const auto& c : all_classes()) {
        auto it = spec.counts.find(c.name);
        if (it == spec.counts.end() || it->second <= 0) continue;
        const fs::path dir = root / class_name(c);
        fs::create_directories(dir);
        for (int64_t i = 0; i < it->second; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "img_%06lld.png", static_cast<long long>(i));
            save_png(dir / name,
                     make_image(c.name, spec.image_size,
                                derive_seed(spec.seed, class_name(c) + "/" + std::to_string(i))));
        }
    }
}

}  // namespace octfew::synth
