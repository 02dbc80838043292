#include "octfew/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace octfew {

namespace {

Image from_mat(const cv::Mat& m) {
    cv::Mat bgr;
    if (m.channels() == 1) {
        cv::cvtColor(m, bgr, cv::COLOR_GRAY2BGR);
    } else if (m.channels() == 4) {
        cv::cvtColor(m, bgr, cv::COLOR_BGRA2BGR);
    } else {
        bgr = m;
    }
    if (bgr.depth() != CV_8U) {
        cv::Mat tmp;
        bgr.convertTo(tmp, CV_8U);
        bgr = tmp;
    }
    Image img(bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<uint8_t>(y);
        std::copy(row, row + static_cast<size_t>(bgr.cols) * 3, img.px.data() + static_cast<size_t>(y) * bgr.cols * 3);
    }
    return img;
}

cv::Mat to_mat(const Image& img) {
    cv::Mat m(img.h, img.w, CV_8UC3);
    for (int y = 0; y < img.h; ++y)
        std::copy(img.px.data() + static_cast<size_t>(y) * img.w * 3,
                  img.px.data() + static_cast<size_t>(y + 1) * img.w * 3, m.ptr<uint8_t>(y));
    return m;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw std::runtime_error("cannot decode image: " + path.string());
    return from_mat(m);
}

bool can_decode(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    return !m.empty();
}

void save_png(const std::filesystem::path& path, const Image& img) {
    if (img.empty()) throw std::runtime_error("save_png: empty image");
    // Low compression level: pipeline stages write many small files.
    if (!cv::imwrite(path.string(), to_mat(img), {cv::IMWRITE_PNG_COMPRESSION, 1}))
        throw std::runtime_error("cannot write image: " + path.string());
}

bool has_image_extension(const std::filesystem::path& path) {
    std::string e = path.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp" || e == ".tif" || e == ".tiff";
}

Image resize_bilinear(const Image& src, int oh, int ow) {
    if (src.h == oh && src.w == ow) return src;
    Image out(oh, ow);
    const double sy = static_cast<double>(src.h) / oh;
    const double sx = static_cast<double>(src.w) / ow;
    for (int y = 0; y < oh; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        const int ya = std::clamp(y0, 0, src.h - 1);
        const int yb = std::clamp(y0 + 1, 0, src.h - 1);
        for (int x = 0; x < ow; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            const int xa = std::clamp(x0, 0, src.w - 1);
            const int xb = std::clamp(x0 + 1, 0, src.w - 1);
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * src.at(ya, xa, c) + wx * src.at(ya, xb, c)) +
                                 wy * ((1 - wx) * src.at(yb, xa, c) + wx * src.at(yb, xb, c));
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

Image hflip(const Image& src) {
    Image out(src.h, src.w);
    for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(y, src.w - 1 - x, c);
    return out;
}

std::array<double, 6> affine_identity() { return {1, 0, 0, 0, 1, 0}; }

// second ∘ first (apply `first`, then `second`).
std::array<double, 6> affine_compose(const std::array<double, 6>& s,
                                     const std::array<double, 6>& f) {
    return {s[0] * f[0] + s[1] * f[3],        s[0] * f[1] + s[1] * f[4],
            s[0] * f[2] + s[1] * f[5] + s[2], s[3] * f[0] + s[4] * f[3],
            s[3] * f[1] + s[4] * f[4],        s[3] * f[2] + s[4] * f[5] + s[5]};
}

std::array<double, 6> affine_translate(double tx, double ty) { return {1, 0, tx, 0, 1, ty}; }

std::array<double, 6> affine_rotate_about(double deg, double cx, double cy) {
    const double r = deg * 3.14159265358979323846 / 180.0;
    const double c = std::cos(r), s = std::sin(r);
    // T(c) * R * T(-c)
    return {c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy};
}

std::array<double, 6> affine_scale_about(double k, double cx, double cy) {
    return {k, 0, cx * (1 - k), 0, k, cy * (1 - k)};
}

Image warp_affine(const Image& src, const std::array<double, 6>& fwd) {
    if (src.empty()) throw std::runtime_error("warp_affine: empty image");
    // Invert the forward map; sample output pixels back into the source.
    const double det = fwd[0] * fwd[4] - fwd[1] * fwd[3];
    if (std::abs(det) < 1e-12) throw std::runtime_error("warp_affine: singular transform");
    const double ia = fwd[4] / det, ib = -fwd[1] / det;
    const double ic = -fwd[3] / det, id = fwd[0] / det;
    const double itx = -(ia * fwd[2] + ib * fwd[5]);
    const double ity = -(ic * fwd[2] + id * fwd[5]);

    Image out(src.h, src.w);
    for (int y = 0; y < src.h; ++y) {
        for (int x = 0; x < src.w; ++x) {
            const double sx = ia * x + ib * y + itx;
            const double sy = ic * x + id * y + ity;
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const double wx = sx - x0;
            const double wy = sy - y0;
            for (int c = 0; c < 3; ++c) {
                auto sample = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= src.h || xx < 0 || xx >= src.w) return 0.0;  // black border
                    return src.at(yy, xx, c);
                };
                const double v = (1 - wy) * ((1 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1)) +
                                 wy * ((1 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1));
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

Tensor image_to_chw(const Image& img) {
    Tensor t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t.data()[(static_cast<int64_t>(c) * img.h + y) * img.w + x] = img.at(y, x, c) / 255.0;
    return t;
}

Tensor image_to_chw_norm(const Image& img, const std::array<double, 3>& mean,
                         const std::array<double, 3>& stddev) {
    Tensor t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c) {
        const double m = mean[static_cast<size_t>(c)];
        const double s = stddev[static_cast<size_t>(c)];
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t.data()[(static_cast<int64_t>(c) * img.h + y) * img.w + x] =
                    (img.at(y, x, c) / 255.0 - m) / s;
    }
    return t;
}

Tensor image_to_chw_tanh(const Image& img) {
    Tensor t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t.data()[(static_cast<int64_t>(c) * img.h + y) * img.w + x] =
                    img.at(y, x, c) / 127.5 - 1.0;
    return t;
}

Image chw_tanh_to_image(const Tensor& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3)
        throw std::runtime_error("chw_tanh_to_image: expected (3,H,W), got " +
                                 Tensor::shape_str(chw.shape()));
    const int h = static_cast<int>(chw.dim(1)), w = static_cast<int>(chw.dim(2));
    Image img(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double v = (chw.data()[(static_cast<int64_t>(c) * h + y) * w + x] + 1.0) * 127.5;
                img.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
    return img;
}

}  // namespace octfew
