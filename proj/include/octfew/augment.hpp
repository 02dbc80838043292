#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "octfew/image.hpp"
#include "octfew/manifest.hpp"

namespace octfew {

// Linear augmentation family: translation, rotation, zoom-in, brightness,
// horizontal flip. Defaults are the full working ranges.
struct AugmentationSpec {
    double translate_frac = 0.05;  // |dx|,|dy| as fraction of image side
    double rotate_deg = 30.0;      // |theta| in degrees
    double zoom_frac = 0.20;       // zoom-in only: scale in [1, 1+zoom_frac]
    double brightness_frac = 0.10; // multiplicative: pixel * (1 + b)
    double hflip_prob = 0.5;

    void validate() const;  // all bounds nonnegative, hflip_prob in [0,1]
};

nlohmann::ordered_json augmentation_spec_to_json(const AugmentationSpec& s);
AugmentationSpec augmentation_spec_from_json(const nlohmann::ordered_json& j);

struct SampledParams {
    double dx = 0.0, dy = 0.0;  // signed fractions of width/height
    double theta = 0.0;         // signed degrees, CCW positive
    double zoom = 0.0;          // >= 0; scale factor is 1+zoom
    double brightness = 0.0;    // signed fraction
    bool flip = false;
    uint64_t seed = 0;

    bool within(const AugmentationSpec& spec) const;
};

// Uniform draw over the spec's ranges; flip is Bernoulli(hflip_prob).
SampledParams sample_params(const AugmentationSpec& spec, uint64_t seed);

// Affine warp (translate, then rotate about center, then zoom about
// center, composed into one matrix and resampled bilinearly once with
// black fill), then multiplicative brightness with clamping, then the
// optional horizontal flip. Output shape equals input shape.
Image apply_augmentation(const Image& img, const SampledParams& p);

// Expands `records` (one class) to `target` total by appending augmented
// copies; sources cycle round-robin over the originals and per-record
// seeds derive from (seed, output index). New images are written to
// img_dir as PNG.
std::vector<ImageRecord> augment_to_count(const std::vector<ImageRecord>& records, int64_t target,
                                          const AugmentationSpec& spec, uint64_t seed,
                                          const std::filesystem::path& img_dir);

}  // namespace octfew
