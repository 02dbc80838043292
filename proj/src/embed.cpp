#include "octfew/embed.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "octfew/image.hpp"
#include "octfew/rng.hpp"

namespace octfew {

namespace fs = std::filesystem;

FeatureMatrix extract_features(const Model& model, const DatasetManifest& m) {
    if (m.records.empty()) throw std::runtime_error("extract_features: empty manifest");
    const auto& bc = model.config();
    FeatureMatrix fm;
    fm.data = Tensor({static_cast<int64_t>(m.records.size()), model.feature_dim()});

    const size_t batch = 64;
    for (size_t lo = 0; lo < m.records.size(); lo += batch) {
        const size_t hi = std::min(m.records.size(), lo + batch);
        std::vector<Tensor> inputs;
        for (size_t i = lo; i < hi; ++i) {
            const auto& r = m.records[i];
            Image img;
            try {
                img = load_image(r.path);
            } catch (const std::exception& e) {
                throw std::runtime_error("record " + r.id + ": " + e.what());
            }
            if (img.h != bc.input_size || img.w != bc.input_size)
                img = resize_bilinear(img, bc.input_size, bc.input_size);
            inputs.push_back(image_to_chw_norm(img, bc.norm_mean, bc.norm_std));
        }
        Tensor x({static_cast<int64_t>(hi - lo), 3, bc.input_size, bc.input_size});
        const int64_t stride = inputs.front().numel();
        for (size_t i = 0; i < inputs.size(); ++i)
            std::copy(inputs[i].data(), inputs[i].data() + stride,
                      x.data() + static_cast<int64_t>(i) * stride);
        ad::Tape t;
        ad::Var f = model.forward_features(t, ad::make_var(std::move(x)));
        const int64_t d = f->value.dim(1);
        for (size_t i = lo; i < hi; ++i)
            for (int64_t j = 0; j < d; ++j)
                fm.data.at2(static_cast<int64_t>(i), j) = f->value.at2(static_cast<int64_t>(i - lo), j);
    }
    for (const auto& r : m.records) {
        fm.labels.push_back(r.label);
        fm.ids.push_back(r.id);
    }
    for (int64_t i = 0; i < fm.data.numel(); ++i)
        if (!std::isfinite(fm.data[static_cast<size_t>(i)]))
            throw std::runtime_error("extract_features: non-finite feature value");
    return fm;
}

// ---------------------------------------------------------------------------
// t-SNE
// ---------------------------------------------------------------------------

namespace tsne_detail {

namespace {

// Squared Euclidean distances between rows.
Tensor pairwise_sq(const Tensor& x) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor dist({n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                const double diff = x.at2(i, k) - x.at2(j, k);
                s += diff * diff;
            }
            dist.at2(i, j) = s;
            dist.at2(j, i) = s;
        }
    return dist;
}

// Conditional row distribution at bandwidth beta; returns perplexity.
double row_perplexity(const Tensor& dist, int64_t i, double beta, std::vector<double>& p_row) {
    const int64_t n = dist.dim(0);
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        if (j == i) {
            p_row[static_cast<size_t>(j)] = 0.0;
            continue;
        }
        const double v = std::exp(-dist.at2(i, j) * beta);
        p_row[static_cast<size_t>(j)] = v;
        sum += v;
    }
    if (sum <= 0.0) {
        // All neighbors at (numerically) infinite distance: uniform fallback.
        for (int64_t j = 0; j < n; ++j)
            p_row[static_cast<size_t>(j)] = (j == i) ? 0.0 : 1.0 / static_cast<double>(n - 1);
        return static_cast<double>(n - 1);
    }
    double h = 0.0;  // entropy in nats
    for (int64_t j = 0; j < n; ++j) {
        double& p = p_row[static_cast<size_t>(j)];
        p /= sum;
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::exp(h);
}

}  // namespace

Tensor joint_affinities(const Tensor& x, double perplexity, std::vector<double>* achieved) {
    const int64_t n = x.dim(0);
    const Tensor dist = pairwise_sq(x);
    Tensor pcond({n, n});
    if (achieved) achieved->assign(static_cast<size_t>(n), 0.0);

    std::vector<double> row(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        // Bisection on beta = 1/(2 sigma^2); perplexity decreases in beta.
        double lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double beta = 1.0;
        double perp = row_perplexity(dist, i, beta, row);
        for (int iter = 0; iter < 200 && std::abs(perp - perplexity) > 1e-5; ++iter) {
            if (perp > perplexity) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            perp = row_perplexity(dist, i, beta, row);
        }
        if (achieved) (*achieved)[static_cast<size_t>(i)] = perp;
        for (int64_t j = 0; j < n; ++j) pcond.at2(i, j) = row[static_cast<size_t>(j)];
    }

    // Symmetrize.
    Tensor p({n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            p.at2(i, j) = (pcond.at2(i, j) + pcond.at2(j, i)) / (2.0 * static_cast<double>(n));
    return p;
}

double kl_and_grad(const Tensor& p, const Tensor& y, Tensor* grad) {
    const int64_t n = y.dim(0), d = y.dim(1);
    // Student-t kernel weights and normalizer.
    Tensor w({n, n});
    double z = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                const double diff = y.at2(i, k) - y.at2(j, k);
                s += diff * diff;
            }
            const double v = 1.0 / (1.0 + s);
            w.at2(i, j) = v;
            w.at2(j, i) = v;
            z += 2.0 * v;
        }
    z = std::max(z, 1e-300);

    double kl = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double pij = p.at2(i, j);
            if (pij <= 0.0) continue;
            const double qij = std::max(w.at2(i, j) / z, 1e-300);
            kl += pij * std::log(pij / qij);
        }

    if (grad) {
        *grad = Tensor({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double mult = 4.0 * (p.at2(i, j) - w.at2(i, j) / z) * w.at2(i, j);
                for (int64_t k = 0; k < d; ++k)
                    grad->at2(i, k) += mult * (y.at2(i, k) - y.at2(j, k));
            }
    }
    return kl;
}

}  // namespace tsne_detail

TsneResult tsne_3d(const FeatureMatrix& features, double perplexity, int iterations, uint64_t seed) {
    const int64_t n = features.n();
    if (features.d() < 1) throw std::runtime_error("tsne_3d: features must have D >= 1");
    if (perplexity < 1.0) throw std::runtime_error("tsne_3d: perplexity must be >= 1");
    if (static_cast<double>(n) < 3.0 * perplexity)
        throw std::runtime_error("tsne_3d: infeasible perplexity, need N >= 3*perplexity (N=" +
                                 std::to_string(n) + ", 3*perplexity=" +
                                 std::to_string(3.0 * perplexity) + ")");
    if (iterations < 1) throw std::runtime_error("tsne_3d: iterations must be >= 1");

    const Tensor p = tsne_detail::joint_affinities(features.data, perplexity, nullptr);

    constexpr int kDim = 3;
    constexpr double kExaggeration = 12.0;
    constexpr int kExaggerationIters = 250;
    constexpr double kLearningRate = 200.0;

    Rng rng(derive_seed(seed, "tsne-init"));
    Tensor y = Tensor::randn({n, kDim}, rng, 1e-4);
    Tensor inc = Tensor::zeros({n, kDim});
    Tensor gains = Tensor::full({n, kDim}, 1.0);

    TsneResult res;
    res.perplexity = perplexity;
    res.iterations = iterations;
    res.seed = seed;

    Tensor p_run = p;  // exaggerated during the early phase
    for (int64_t i = 0; i < p_run.numel(); ++i) p_run[static_cast<size_t>(i)] *= kExaggeration;

    for (int iter = 1; iter <= iterations; ++iter) {
        if (iter == kExaggerationIters + 1) p_run = p;
        const double momentum = iter <= kExaggerationIters ? 0.5 : 0.8;

        Tensor grad;
        tsne_detail::kl_and_grad(p_run, y, &grad);

        for (int64_t i = 0; i < y.numel(); ++i) {
            const size_t k = static_cast<size_t>(i);
            const bool same_sign = (grad[k] > 0.0) == (inc[k] > 0.0);
            gains[k] = same_sign ? std::max(gains[k] * 0.8, 0.01) : gains[k] + 0.2;
            inc[k] = momentum * inc[k] - kLearningRate * gains[k] * grad[k];
            y[k] += inc[k];
        }
        // Recenter.
        for (int64_t k = 0; k < kDim; ++k) {
            double mean = 0.0;
            for (int64_t i = 0; i < n; ++i) mean += y.at2(i, k);
            mean /= static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) y.at2(i, k) -= mean;
        }

        if (iter % 50 == 0 || iter == iterations) {
            const double kl = tsne_detail::kl_and_grad(p, y, nullptr);
            if (iter % 50 == 0) res.kl_history.emplace_back(iter, kl);
            res.final_kl = kl;
        }
    }
    res.coords = std::move(y);
    return res;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

void export_embedding_csv(const TsneResult& r, const FeatureMatrix& f, const fs::path& csv_path) {
    if (r.coords.dim(0) != f.n()) throw std::runtime_error("export: coordinate/label count mismatch");
    if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
    std::ofstream out(csv_path);
    if (!out) throw std::runtime_error("cannot write " + csv_path.string());
    out << "id,label,x,y,z\n";
    for (int64_t i = 0; i < f.n(); ++i) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f\n", r.coords.at2(i, 0), r.coords.at2(i, 1),
                      r.coords.at2(i, 2));
        out << f.ids[static_cast<size_t>(i)] << "," << class_name(f.labels[static_cast<size_t>(i)])
            << buf;
    }
}

namespace {

const std::array<cv::Scalar, kNumClasses>& class_colors() {
    // BGR, one distinct color per class.
    static const std::array<cv::Scalar, kNumClasses> colors = {
        cv::Scalar(90, 90, 90),    // NORMAL gray
        cv::Scalar(60, 76, 231),   // CNV red
        cv::Scalar(18, 156, 243),  // DME orange
        cv::Scalar(0, 211, 255),   // DRUSEN yellow
        cv::Scalar(113, 204, 46),  // CSC green
        cv::Scalar(219, 152, 52),  // MH blue
        cv::Scalar(182, 89, 155),  // MacTel purple
        cv::Scalar(156, 188, 26),  // RP teal
        cv::Scalar(133, 160, 22),  // Stargardt dark teal
    };
    return colors;
}

void draw_panel(cv::Mat& canvas, const TsneResult& r, const FeatureMatrix& f,
                const std::string& title) {
    const int w = canvas.cols, h = canvas.rows;
    canvas.setTo(cv::Scalar(255, 255, 255));

    // Orthographic projection of the 3-D embedding at a fixed oblique view.
    const double a = 0.6, b = 0.35;  // view angles
    const double ca = std::cos(a), sa = std::sin(a), cb = std::cos(b), sb = std::sin(b);
    const int64_t n = r.coords.dim(0);
    std::vector<cv::Point2d> pts(static_cast<size_t>(n));
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    for (int64_t i = 0; i < n; ++i) {
        const double x = r.coords.at2(i, 0), y = r.coords.at2(i, 1), z = r.coords.at2(i, 2);
        const double px = ca * x + sa * y;
        const double py = cb * z - sb * (-sa * x + ca * y);
        pts[static_cast<size_t>(i)] = {px, py};
        min_x = std::min(min_x, px);
        max_x = std::max(max_x, px);
        min_y = std::min(min_y, py);
        max_y = std::max(max_y, py);
    }
    const double span_x = std::max(max_x - min_x, 1e-9);
    const double span_y = std::max(max_y - min_y, 1e-9);
    const int margin = 40, legend_w = 120;
    const double sx = (w - 2 * margin - legend_w) / span_x;
    const double sy = (h - 2 * margin - 30) / span_y;
    const double s = std::min(sx, sy);

    for (int64_t i = 0; i < n; ++i) {
        const int px = margin + static_cast<int>((pts[static_cast<size_t>(i)].x - min_x) * s);
        const int py = h - margin - static_cast<int>((pts[static_cast<size_t>(i)].y - min_y) * s);
        const auto& color = class_colors()[static_cast<size_t>(f.labels[static_cast<size_t>(i)].index)];
        cv::circle(canvas, {px, py}, 3, color, cv::FILLED, cv::LINE_AA);
    }

    cv::putText(canvas, title, {margin, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1,
                cv::LINE_AA);

    // Nine-entry legend.
    for (int c = 0; c < kNumClasses; ++c) {
        const int ly = 50 + 22 * c;
        cv::circle(canvas, {w - legend_w + 10, ly}, 5, class_colors()[static_cast<size_t>(c)],
                   cv::FILLED, cv::LINE_AA);
        cv::putText(canvas, class_name(class_by_index(c)), {w - legend_w + 22, ly + 4},
                    cv::FONT_HERSHEY_SIMPLEX, 0.42, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    }
}

}  // namespace

void export_embedding_plot(const std::vector<EmbeddingPanel>& panels, const fs::path& png_path) {
    if (panels.empty()) throw std::runtime_error("export_embedding_plot: no panels");
    const int pw = 640, ph = 560;
    cv::Mat canvas(ph, pw * static_cast<int>(panels.size()), CV_8UC3);
    for (size_t i = 0; i < panels.size(); ++i) {
        cv::Mat roi = canvas(cv::Rect(static_cast<int>(i) * pw, 0, pw, ph));
        cv::Mat panel(ph, pw, CV_8UC3);
        draw_panel(panel, *panels[i].result, *panels[i].features, panels[i].title);
        panel.copyTo(roi);
    }
    if (png_path.has_parent_path()) fs::create_directories(png_path.parent_path());
    if (!cv::imwrite(png_path.string(), canvas))
        throw std::runtime_error("cannot write " + png_path.string());
}

}  // namespace octfew
