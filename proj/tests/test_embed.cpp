#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "octfew/embed.hpp"
#include "octfew/rng.hpp"
#include "octfew/synthetic.hpp"

using namespace octfew;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("octfew_emb_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Three well-separated Gaussian blobs in D=10 (N = 3 x 50).
FeatureMatrix three_blobs(uint64_t seed) {
    Rng rng(seed);
    FeatureMatrix f;
    f.data = Tensor({150, 10});
    const double centers[3][10] = {
        {10, 0, 0, 0, 0, 0, 0, 0, 0, 0}, {0, 10, 0, 0, 0, 0, 0, 0, 0, 0},
        {0, 0, 10, 0, 0, 0, 0, 0, 0, 0}};
    for (int64_t i = 0; i < 150; ++i) {
        const int blob = static_cast<int>(i / 50);
        for (int64_t d = 0; d < 10; ++d)
            f.data.at2(i, d) = centers[blob][d] + rng.normal() * 0.5;
        f.labels.push_back(class_by_index(blob));
        f.ids.push_back("r" + std::to_string(i));
    }
    return f;
}

}  // namespace

TEST_CASE("affinities: rows hit the target perplexity via bisection") {
    const auto f = three_blobs(1);
    std::vector<double> achieved;
    const Tensor p = tsne_detail::joint_affinities(f.data, 30.0, &achieved);
    REQUIRE(achieved.size() == 150);
    for (double a : achieved) CHECK(std::abs(a - 30.0) < 1e-4);

    // symmetric, nonnegative, sums to ~1
    double sum = 0.0;
    for (int64_t i = 0; i < 150; ++i)
        for (int64_t j = 0; j < 150; ++j) {
            CHECK(p.at2(i, j) >= 0.0);
            CHECK(p.at2(i, j) == doctest::Approx(p.at2(j, i)).epsilon(1e-12));
            sum += p.at2(i, j);
        }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("kl gradient matches finite differences on N<=20") {
    Rng rng(2);
    FeatureMatrix f;
    f.data = Tensor::randn({12, 4}, rng, 1.0);
    const Tensor p = tsne_detail::joint_affinities(f.data, 3.0, nullptr);
    Tensor y = Tensor::randn({12, 3}, rng, 1.0);

    Tensor grad;
    tsne_detail::kl_and_grad(p, y, &grad);
    const double h = 1e-6;
    double max_rel = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i) {
        const size_t k = static_cast<size_t>(i);
        const double orig = y[k];
        y[k] = orig + h;
        const double fp = tsne_detail::kl_and_grad(p, y, nullptr);
        y[k] = orig - h;
        const double fm = tsne_detail::kl_and_grad(p, y, nullptr);
        y[k] = orig;
        const double numeric = (fp - fm) / (2 * h);
        const double rel = std::abs(grad[k] - numeric) /
                           std::max({std::abs(grad[k]), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("tsne_3d: blob separation, KL descent, determinism") {
    const auto f = three_blobs(3);
    const auto r1 = tsne_3d(f, 25.0, 600, 7);
    const auto r2 = tsne_3d(f, 25.0, 600, 7);

    // bit-exact determinism under a fixed seed
    REQUIRE(r1.coords.numel() == r2.coords.numel());
    for (int64_t i = 0; i < r1.coords.numel(); ++i)
        CHECK(r1.coords[static_cast<size_t>(i)] == r2.coords[static_cast<size_t>(i)]);

    // KL recorded every 50 iterations, non-increasing after early exaggeration
    CHECK_FALSE(r1.kl_history.empty());
    CHECK(r1.final_kl >= 0.0);
    double prev = -1.0;
    for (const auto& [iter, kl] : r1.kl_history) {
        if (iter <= 300) {
            prev = kl;
            continue;
        }
        CHECK(kl <= prev + 1e-9);
        prev = kl;
    }

    // blob-separation oracle: mean inter-centroid distance > 3x mean
    // intra-blob point-to-centroid distance
    double centroid[3][3] = {};
    for (int64_t i = 0; i < 150; ++i)
        for (int64_t d = 0; d < 3; ++d) centroid[i / 50][d] += r1.coords.at2(i, d) / 50.0;
    double intra = 0.0;
    for (int64_t i = 0; i < 150; ++i) {
        double s = 0.0;
        for (int64_t d = 0; d < 3; ++d) {
            const double diff = r1.coords.at2(i, d) - centroid[i / 50][d];
            s += diff * diff;
        }
        intra += std::sqrt(s) / 150.0;
    }
    double inter = 0.0;
    int pairs = 0;
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b, ++pairs) {
            double s = 0.0;
            for (int64_t d = 0; d < 3; ++d) {
                const double diff = centroid[a][d] - centroid[b][d];
                s += diff * diff;
            }
            inter += std::sqrt(s);
        }
    inter /= pairs;
    INFO("inter ", inter, " intra ", intra);
    CHECK(inter > 3.0 * intra);
}

TEST_CASE("tsne_3d: feasibility bound and argument validation") {
    Rng rng(4);
    FeatureMatrix f;
    f.data = Tensor::randn({10, 4}, rng, 1.0);
    for (int i = 0; i < 10; ++i) {
        f.labels.push_back(class_by_index(0));
        f.ids.push_back("x" + std::to_string(i));
    }
    CHECK_THROWS_WITH_AS(tsne_3d(f, 5.0, 100, 0), doctest::Contains("3*perplexity"),
                         std::runtime_error);
    CHECK_NOTHROW(tsne_3d(f, 3.0, 60, 0));
    CHECK_THROWS(tsne_3d(f, 3.0, 0, 0));
}

TEST_CASE("extract_features: shape, order, determinism, unreadable record") {
    TempDir tmp("feat");
    synth::CorpusSpec spec;
    spec.image_size = 32;
    spec.seed = 5;
    spec.counts = {{ClassName::NORMAL, 6}, {ClassName::CNV, 4}};
    synth::write_corpus(spec, tmp.path / "corpus");
    std::map<std::string, ClassLabel> mapping;
    for (const auto& c : all_classes()) mapping[class_name(c)] = c;
    auto m = scan_directory(tmp.path / "corpus", mapping);

    BackboneConfig bc;
    bc.seed = 6;
    Model model(bc);
    const auto f1 = extract_features(model, m);
    const auto f2 = extract_features(model, m);
    CHECK(f1.n() == 10);
    CHECK(f1.d() == 64);  // toy penultimate width
    for (int64_t i = 0; i < f1.data.numel(); ++i)
        CHECK(f1.data[static_cast<size_t>(i)] == f2.data[static_cast<size_t>(i)]);
    for (size_t i = 0; i < 10; ++i) CHECK(f1.ids[i] == m.records[i].id);

    DatasetManifest bad = m;
    bad.records[3].path = (tmp.path / "gone.png").string();
    CHECK_THROWS_WITH_AS(extract_features(model, bad), doctest::Contains(bad.records[3].id.c_str()),
                         std::runtime_error);
}

TEST_CASE("export: csv rows and panel plot") {
    TempDir tmp("export");
    const auto f = three_blobs(8);
    const auto r = tsne_3d(f, 10.0, 300, 9);

    const fs::path csv = tmp.path / "emb.csv";
    export_embedding_csv(r, f, csv);
    std::ifstream in(csv);
    std::string line;
    int rows = 0;
    std::getline(in, line);
    CHECK(line == "id,label,x,y,z");
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 150);

    const fs::path png = tmp.path / "emb.png";
    export_embedding_plot({{"panel a", &r, &f}, {"panel b", &r, &f}}, png);
    CHECK(fs::exists(png));
    const Image img = load_image(png);
    CHECK(img.w == 2 * 640);  // two panels side by side
}
