#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "octfew/tensor.hpp"

namespace octfew {

// 8-bit image, 3 interleaved channels, row-major. Grayscale sources are
// replicated to 3 channels at load time (backbones expect 3 channels).
struct Image {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> px;  // size h*w*3

    Image() = default;
    Image(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), px(static_cast<size_t>(h_) * w_ * 3, fill) {}

    uint8_t& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    bool empty() const { return px.empty(); }
};

// Decode any of .png/.jpg/.jpeg/.bmp/.tif/.tiff into a 3-channel image.
// Throws std::runtime_error on failure.
Image load_image(const std::filesystem::path& path);

// True if the file decodes as an image.
bool can_decode(const std::filesystem::path& path);

void save_png(const std::filesystem::path& path, const Image& img);

bool has_image_extension(const std::filesystem::path& path);

Image resize_bilinear(const Image& src, int oh, int ow);

Image hflip(const Image& src);

// Single-pass bilinear resample under an affine map. `fwd` is the
// row-major 2x3 forward matrix taking source pixel centers to output
// positions; out-of-frame samples are black.
Image warp_affine(const Image& src, const std::array<double, 6>& fwd);

// 2x3 affine helpers (row-major [a b tx; c d ty]).
std::array<double, 6> affine_identity();
std::array<double, 6> affine_compose(const std::array<double, 6>& second,
                                     const std::array<double, 6>& first);
std::array<double, 6> affine_translate(double tx, double ty);
std::array<double, 6> affine_rotate_about(double deg, double cx, double cy);
std::array<double, 6> affine_scale_about(double s, double cx, double cy);

// (3,H,W) tensor in [0,1] (scaled by 1/255) or normalized per channel.
Tensor image_to_chw(const Image& img);
Tensor image_to_chw_norm(const Image& img, const std::array<double, 3>& mean,
                         const std::array<double, 3>& stddev);
// Map a (3,H,W) tensor in [-1,1] (tanh range) back to 8-bit.
Image chw_tanh_to_image(const Tensor& chw);
// Map an image to tanh range [-1,1].
Tensor image_to_chw_tanh(const Image& img);

}  // namespace octfew
