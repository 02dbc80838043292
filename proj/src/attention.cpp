#include "octfew/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "octfew/rng.hpp"

namespace octfew {

using ad::Var;

void SeConfig::validate() const {
    if (reduction_ratio < 1) throw std::runtime_error("SeConfig: reduction_ratio must be >= 1");
}

int64_t SeConfig::bottleneck(int64_t channels) const {
    return std::max<int64_t>(1, channels / reduction_ratio);
}

void CbamConfig::validate() const {
    if (reduction_ratio < 1) throw std::runtime_error("CbamConfig: reduction_ratio must be >= 1");
    if (spatial_kernel < 1 || spatial_kernel % 2 == 0)
        throw std::runtime_error("CbamConfig: spatial_kernel must be odd, got " +
                                 std::to_string(spatial_kernel));
}

int64_t CbamConfig::bottleneck(int64_t channels) const {
    return std::max<int64_t>(1, channels / reduction_ratio);
}

namespace {

Tensor kaiming(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace

SeParams make_se_params(ad::ParamStore& ps, const std::string& prefix, int64_t channels,
                        const SeConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int64_t m = cfg.bottleneck(channels);
    Rng rng(derive_seed(seed, prefix));
    SeParams p;
    p.w1 = ps.create(prefix + ".w1", kaiming({m, channels}, channels, rng));
    p.b1 = ps.create(prefix + ".b1", Tensor::zeros({m}));
    p.w2 = ps.create(prefix + ".w2", kaiming({channels, m}, m, rng));
    p.b2 = ps.create(prefix + ".b2", Tensor::zeros({channels}));
    return p;
}

CbamParams make_cbam_params(ad::ParamStore& ps, const std::string& prefix, int64_t channels,
                            const CbamConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int64_t m = cfg.bottleneck(channels);
    Rng rng(derive_seed(seed, prefix));
    CbamParams p;
    p.w1 = ps.create(prefix + ".w1", kaiming({m, channels}, channels, rng));
    p.b1 = ps.create(prefix + ".b1", Tensor::zeros({m}));
    p.w2 = ps.create(prefix + ".w2", kaiming({channels, m}, m, rng));
    p.b2 = ps.create(prefix + ".b2", Tensor::zeros({channels}));
    const int ks = cfg.spatial_kernel;
    p.conv_w = ps.create(prefix + ".spatial.w", kaiming({1, 2, ks, ks}, 2 * ks * ks, rng));
    p.conv_b = ps.create(prefix + ".spatial.b", Tensor::zeros({1}));
    return p;
}

SeParams bind_se_params(const ad::ParamStore& ps, const std::string& prefix) {
    return {ps.get(prefix + ".w1"), ps.get(prefix + ".b1"), ps.get(prefix + ".w2"),
            ps.get(prefix + ".b2")};
}

CbamParams bind_cbam_params(const ad::ParamStore& ps, const std::string& prefix) {
    return {ps.get(prefix + ".w1"),      ps.get(prefix + ".b1"), ps.get(prefix + ".w2"),
            ps.get(prefix + ".b2"),      ps.get(prefix + ".spatial.w"),
            ps.get(prefix + ".spatial.b")};
}

int64_t se_param_count(int64_t channels, const SeConfig& cfg) {
    const int64_t m = cfg.bottleneck(channels);
    return 2 * channels * m + m + channels;
}

int64_t cbam_param_count(int64_t channels, const CbamConfig& cfg) {
    const int64_t m = cfg.bottleneck(channels);
    const int64_t ks = cfg.spatial_kernel;
    return 2 * channels * m + m + channels + 2 * ks * ks + 1;
}

namespace {

// Shared bottleneck MLP on pooled (N,C) descriptors.
Var channel_mlp(ad::Tape& t, const Var& pooled, const Var& w1, const Var& b1, const Var& w2,
                const Var& b2) {
    return ad::linear(t, ad::relu(t, ad::linear(t, pooled, w1, b1)), w2, b2);
}

}  // namespace

Var se_block(ad::Tape& t, const Var& x, const SeParams& p, const SeConfig& cfg) {
    cfg.validate();
    Var s = ad::sigmoid(t, channel_mlp(t, ad::global_avg_pool(t, x), p.w1, p.b1, p.w2, p.b2));
    return ad::mul_channel(t, x, s);
}

Var cbam_channel(ad::Tape& t, const Var& x, const CbamParams& p, const CbamConfig& cfg) {
    cfg.validate();
    Var a = channel_mlp(t, ad::global_avg_pool(t, x), p.w1, p.b1, p.w2, p.b2);
    Var m = channel_mlp(t, ad::global_max_pool(t, x), p.w1, p.b1, p.w2, p.b2);
    return ad::sigmoid(t, ad::add(t, a, m));
}

Var cbam_spatial(ad::Tape& t, const Var& x, const CbamParams& p, const CbamConfig& cfg) {
    cfg.validate();
    Var stacked = ad::concat_channels(t, {ad::channel_mean(t, x), ad::channel_max(t, x)});
    const int pad = cfg.spatial_kernel / 2;
    return ad::sigmoid(t, ad::conv2d(t, stacked, p.conv_w, p.conv_b, 1, pad));
}

Var cbam_block(ad::Tape& t, const Var& x, const CbamParams& p, const CbamConfig& cfg) {
    Var xc = ad::mul_channel(t, x, cbam_channel(t, x, p, cfg));
    return ad::mul_spatial(t, xc, cbam_spatial(t, xc, p, cfg));
}

}  // namespace octfew
