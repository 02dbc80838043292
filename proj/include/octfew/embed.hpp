#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "octfew/classifier.hpp"
#include "octfew/manifest.hpp"
#include "octfew/tensor.hpp"

namespace octfew {

struct FeatureMatrix {
    Tensor data;  // (N,D)
    std::vector<ClassLabel> labels;
    std::vector<std::string> ids;
    int64_t n() const { return data.rank() == 2 ? data.dim(0) : 0; }
    int64_t d() const { return data.rank() == 2 ? data.dim(1) : 0; }
};

// Penultimate-layer activations, one row per record in manifest order.
FeatureMatrix extract_features(const Model& model, const DatasetManifest& m);

struct TsneResult {
    Tensor coords;  // (N,3)
    double perplexity = 30.0;
    int iterations = 0;
    uint64_t seed = 0;
    double final_kl = 0.0;
    std::vector<std::pair<int, double>> kl_history;  // (iteration, KL) every 50 iterations
};

// Exact (O(N^2)) 3-D t-SNE. Early exaggeration 12 for the first 250
// iterations, learning rate 200, momentum 0.5 switching to 0.8 at 250.
// Requires N >= 3 * perplexity.
TsneResult tsne_3d(const FeatureMatrix& features, double perplexity, int iterations, uint64_t seed);

// Internals exposed for oracle tests.
namespace tsne_detail {
// Symmetrized affinities; each row of the conditional distribution is
// calibrated to the target perplexity by bisection on the bandwidth.
// achieved_perplexity receives the per-row calibration result.
Tensor joint_affinities(const Tensor& x, double perplexity, std::vector<double>* achieved_perplexity);
// KL(P || Q(y)) and its gradient wrt y (N,3).
double kl_and_grad(const Tensor& p, const Tensor& y, Tensor* grad);
}  // namespace tsne_detail

// CSV rows: id,label,x,y,z.
void export_embedding_csv(const TsneResult& r, const FeatureMatrix& f,
                          const std::filesystem::path& csv_path);

struct EmbeddingPanel {
    std::string title;
    const TsneResult* result;
    const FeatureMatrix* features;
};

// Static 3-D scatter (orthographic projection), one color per class with a
// nine-entry legend; multiple panels render side by side.
void export_embedding_plot(const std::vector<EmbeddingPanel>& panels,
                           const std::filesystem::path& png_path);

}  // namespace octfew
