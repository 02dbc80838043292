#pragma once

#include <cstdint>
#include <filesystem>
#include <map>

#include "octfew/image.hpp"
#include "octfew/manifest.hpp"

namespace octfew::synth {

// Desk-scale stand-in corpus. Every image carries a bright horizontal
// "retina band"; major classes differ by large structures, rare classes
// look like NORMAL plus a small class-specific lesion, which is what makes
// them genuinely few-shot-hard for an imbalanced classifier and gives the
// normal->disease translation GANs a learnable local edit.
struct CorpusSpec {
    int image_size = 32;
    std::map<ClassName, int64_t> counts;
    uint64_t seed = 0;

    // Majors 200 each, rares 10 each.
    static CorpusSpec desk_default();
};

Image make_image(ClassName cls, int size, uint64_t seed);

// Writes a directory-per-class tree of PNGs under root.
void write_corpus(const CorpusSpec& spec, const std::filesystem::path& root);

}  // namespace octfew::synth
