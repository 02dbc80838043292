#pragma once

#include <cstdint>
#include <string>

#include "octfew/autodiff.hpp"

namespace octfew {

struct SeConfig {
    int reduction_ratio = 16;
    void validate() const;
    // MLP bottleneck width: floor(C/r), minimum 1.
    int64_t bottleneck(int64_t channels) const;
};

struct CbamConfig {
    int reduction_ratio = 16;
    int spatial_kernel = 7;  // odd
    void validate() const;
    int64_t bottleneck(int64_t channels) const;
};

// Squeeze-and-excitation parameters (biases included):
//   w1:(C/r,C) b1:(C/r) w2:(C,C/r) b2:(C)
struct SeParams {
    ad::Var w1, b1, w2, b2;
};

// CBAM: shared channel MLP (same layout as SE) plus a spatial conv over
// the stacked [mean-over-C ; max-over-C] maps.
struct CbamParams {
    ad::Var w1, b1, w2, b2;       // shared MLP
    ad::Var conv_w, conv_b;       // (1,2,ks,ks), (1)
};

// Creates named parameters under `prefix` in `ps`, seeded deterministically.
SeParams make_se_params(ad::ParamStore& ps, const std::string& prefix, int64_t channels,
                        const SeConfig& cfg, uint64_t seed);
CbamParams make_cbam_params(ad::ParamStore& ps, const std::string& prefix, int64_t channels,
                            const CbamConfig& cfg, uint64_t seed);
// Binds already-created parameters (e.g. after checkpoint load).
SeParams bind_se_params(const ad::ParamStore& ps, const std::string& prefix);
CbamParams bind_cbam_params(const ad::ParamStore& ps, const std::string& prefix);

// Analytic parameter-count increments for one inserted block.
int64_t se_param_count(int64_t channels, const SeConfig& cfg);
int64_t cbam_param_count(int64_t channels, const CbamConfig& cfg);

// s = sigmoid(W2·relu(W1·gap(x) + b1) + b2); output = x scaled per channel.
ad::Var se_block(ad::Tape& t, const ad::Var& x, const SeParams& p, const SeConfig& cfg);

// sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))) -> (N,C) channel weights.
ad::Var cbam_channel(ad::Tape& t, const ad::Var& x, const CbamParams& p, const CbamConfig& cfg);

// sigmoid(conv([mean over C ; max over C])) with same padding -> (N,1,H,W).
ad::Var cbam_spatial(ad::Tape& t, const ad::Var& x, const CbamParams& p, const CbamConfig& cfg);

// Channel attention then spatial attention, both broadcast-multiplied.
ad::Var cbam_block(ad::Tape& t, const ad::Var& x, const CbamParams& p, const CbamConfig& cfg);

}  // namespace octfew
