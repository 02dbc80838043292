#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers/gradcheck.hpp"
#include "helpers/oracles.hpp"
#include "octfew/autodiff.hpp"
#include "octfew/rng.hpp"
#include "octfew/tensor.hpp"

using namespace octfew;
using ad::Tape;
using ad::Var;
using testing::grad_check;

TEST_CASE("rng: determinism and ranges") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
        const double u = a.uniform();
        b.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    Rng c(1);
    for (int i = 0; i < 1000; ++i) CHECK(c.below(7) < 7);

    // sample_without_replacement yields distinct indices
    Rng d(9);
    auto s = d.sample_without_replacement(100, 20);
    std::set<size_t> uniq(s.begin(), s.end());
    CHECK(uniq.size() == 20);
}

TEST_CASE("rng: derive_seed separates streams") {
    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
    CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
    CHECK(derive_seed(1, uint64_t{0}) != derive_seed(1, uint64_t{1}));
}

TEST_CASE("tensor: shape bookkeeping") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    t.at2(1, 2) = 5.0;
    CHECK(t[5] == 5.0);
    CHECK_THROWS(t.reshaped({4, 2}));
    CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

namespace {

Var randn_var(std::vector<int64_t> shape, uint64_t seed, bool rg = true) {
    Rng rng(seed);
    return ad::make_var(Tensor::randn(std::move(shape), rng, 1.0), rg);
}

void check_grads(const std::function<Var(Tape&)>& fn, const std::vector<Var>& inputs,
                 double tol = 1e-6) {
    auto res = grad_check(fn, inputs);
    INFO("worst element ", res.worst, " rel err ", res.max_rel_err);
    CHECK(res.max_rel_err < tol);
}

}  // namespace

TEST_CASE("autodiff: conv2d matches finite differences") {
    Var x = randn_var({2, 3, 5, 5}, 1);
    Var w = randn_var({4, 3, 3, 3}, 2);
    Var b = randn_var({4}, 3);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::conv2d(t, x, w, b, 1, 1))); },
                {x, w, b});
    // strided, no padding
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::conv2d(t, x, w, b, 2, 0)); }, {x, w, b});
}

TEST_CASE("autodiff: conv2d asymmetric padding shapes and grads") {
    Var x = randn_var({1, 2, 4, 6}, 4);
    Var w = randn_var({3, 2, 1, 5}, 5);
    Tape t;
    Var y = ad::conv2d(t, x, w, nullptr, 1, 0, 2);
    CHECK(y->value.shape() == std::vector<int64_t>{1, 3, 4, 6});
    check_grads([&](Tape& t2) { return ad::mean_all(t2, ad::conv2d(t2, x, w, nullptr, 1, 0, 2)); },
                {x, w});
}

TEST_CASE("autodiff: linear") {
    Var x = randn_var({3, 4}, 6);
    Var w = randn_var({2, 4}, 7);
    Var b = randn_var({2}, 8);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::sigmoid(t, ad::linear(t, x, w, b))); },
                {x, w, b});
}

TEST_CASE("autodiff: pointwise and arithmetic") {
    Var x = randn_var({2, 2, 3, 3}, 10);
    Var y = randn_var({2, 2, 3, 3}, 11);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::mul(t, ad::tanh_op(t, x), y)); }, {x, y});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::sub(t, ad::scale(t, x, 2.5), y)); }, {x, y});
    check_grads(
        [&](Tape& t) { return ad::mean_all(t, ad::leaky_relu(t, ad::add_const(t, x, 0.3), 0.2)); },
        {x});
}

TEST_CASE("autodiff: channel/spatial broadcasts") {
    Var x = randn_var({2, 4, 3, 3}, 12);
    Var s = randn_var({4}, 13);
    Var s2 = randn_var({2, 4}, 14);
    Var m = randn_var({2, 1, 3, 3}, 15);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::mul_channel(t, x, s)); }, {x, s});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::mul_channel(t, x, s2)); }, {x, s2});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::add_channel(t, x, s)); }, {x, s});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::mul_spatial(t, x, m)); }, {x, m});
}

TEST_CASE("autodiff: normalizations match oracles and finite differences") {
    Var x = randn_var({2, 3, 4, 4}, 16);
    {
        Tape t;
        Var in = ad::instance_norm(t, x);
        const Tensor ref = testing::naive_instance_norm(x->value);
        for (int64_t i = 0; i < ref.numel(); ++i)
            CHECK(in->value[static_cast<size_t>(i)] ==
                  doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-12));
        Var ln = ad::layer_norm(t, x);
        const Tensor ref2 = testing::naive_layer_norm(x->value);
        for (int64_t i = 0; i < ref2.numel(); ++i)
            CHECK(ln->value[static_cast<size_t>(i)] ==
                  doctest::Approx(ref2[static_cast<size_t>(i)]).epsilon(1e-12));
    }
    // tanh keeps the loss sensitive to the normalized values.
    check_grads(
        [&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::instance_norm(t, x))); }, {x},
        2e-5);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::layer_norm(t, x))); }, {x},
                2e-5);
}

TEST_CASE("autodiff: pooling") {
    Var x = randn_var({2, 3, 6, 6}, 17);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::global_avg_pool(t, x))); },
                {x});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::global_max_pool(t, x))); },
                {x});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::maxpool2d(t, x, 3, 2, 0)); }, {x});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::avgpool2d(t, x, 3, 1, 1)); }, {x});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::upsample_nearest2(t, x)); }, {x});
}

TEST_CASE("autodiff: channel reductions and concat") {
    Var x = randn_var({2, 4, 3, 3}, 18);
    Var y = randn_var({2, 2, 3, 3}, 19);
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::channel_mean(t, x))); }, {x});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::channel_max(t, x))); }, {x});
    check_grads([&](Tape& t) { return ad::mean_all(t, ad::tanh_op(t, ad::sum_channels(t, x))); }, {x});
    check_grads(
        [&](Tape& t) {
            return ad::mean_all(t, ad::tanh_op(t, ad::concat_channels(t, {x, y})));
        },
        {x, y});
}

TEST_CASE("autodiff: reflection padding") {
    Var x = randn_var({1, 2, 4, 4}, 20);
    Tape t;
    Var p = ad::pad_reflect(t, x, 2);
    CHECK(p->value.shape() == std::vector<int64_t>{1, 2, 8, 8});
    // reflected corner: p(0,0) should equal x(2,2)
    CHECK(p->value.at4(0, 0, 0, 0) == x->value.at4(0, 0, 2, 2));
    check_grads([&](Tape& t2) { return ad::mean_all(t2, ad::tanh_op(t2, ad::pad_reflect(t2, x, 1))); },
                {x});
}

TEST_CASE("autodiff: losses") {
    Var x = randn_var({2, 3, 4, 4}, 21);
    Var y = randn_var({2, 3, 4, 4}, 22);
    check_grads([&](Tape& t) { return ad::mse_to(t, x, 0.7); }, {x});
    check_grads([&](Tape& t) { return ad::l1_diff(t, x, y); }, {x, y}, 1e-5);
    check_grads([&](Tape& t) { return ad::bce_with_logits_to(t, x, 1.0); }, {x});
    Var logits = randn_var({4, 5}, 23);
    const std::vector<int> labels = {0, 3, 2, 4};
    check_grads([&](Tape& t) { return ad::softmax_cross_entropy(t, logits, labels); }, {logits});
}

TEST_CASE("autodiff: softmax rows sum to one") {
    Rng rng(31);
    Tensor logits = Tensor::randn({5, 9}, rng, 3.0);
    Tensor p = ad::softmax_rows(logits);
    for (int64_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int64_t k = 0; k < 9; ++k) {
            CHECK(p.at2(i, k) >= 0.0);
            s += p.at2(i, k);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("adam: converges on a quadratic and respects frozen prefixes") {
    ad::ParamStore ps;
    Rng rng(1);
    Var a = ps.create("a", Tensor::randn({4}, rng));
    Var b = ps.create("frozen.b", Tensor::randn({4}, rng));
    const Tensor b0 = b->value;
    ad::AdamConfig cfg;
    cfg.lr = 0.05;
    ad::Adam opt(cfg);
    for (int i = 0; i < 300; ++i) {
        Tape t;
        Var loss = ad::add(t, ad::mse_to(t, a, 3.0), ad::mse_to(t, b, -2.0));
        ps.zero_grads();
        t.backward(loss);
        opt.step(ps, {"frozen."});
    }
    for (int i = 0; i < 4; ++i) CHECK(a->value[i] == doctest::Approx(3.0).epsilon(1e-3));
    for (int i = 0; i < 4; ++i) CHECK(b->value[i] == b0[i]);  // bit-identical
}
