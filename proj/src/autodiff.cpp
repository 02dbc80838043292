#include "octfew/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace octfew::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require4d(const Var& x, const char* op) {
    require(x->value.rank() == 4, std::string(op) + ": expected a 4-d (N,C,H,W) input, got " +
                                      Tensor::shape_str(x->value.shape()));
}

}  // namespace

void Tape::backward(const Var& loss) {
    require(loss->value.numel() == 1, "backward: loss must be scalar");
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// Convolution (zero padding) via im2col + GEMM.
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int64_t N, C, H, W, OC, KH, KW, OH, OW;
};

ConvDims conv_dims(const Var& x, const Var& w, int stride, int pad_h, int pad_w) {
    require4d(x, "conv2d");
    require(w->value.rank() == 4, "conv2d: weight must be (OC,C,KH,KW)");
    ConvDims d{};
    d.N = x->value.dim(0);
    d.C = x->value.dim(1);
    d.H = x->value.dim(2);
    d.W = x->value.dim(3);
    d.OC = w->value.dim(0);
    d.KH = w->value.dim(2);
    d.KW = w->value.dim(3);
    require(w->value.dim(1) == d.C, "conv2d: weight channel mismatch, input has " +
                                        std::to_string(d.C) + " channels, weight expects " +
                                        std::to_string(w->value.dim(1)));
    d.OH = (d.H + 2 * pad_h - d.KH) / stride + 1;
    d.OW = (d.W + 2 * pad_w - d.KW) / stride + 1;
    require(d.OH >= 1 && d.OW >= 1, "conv2d: kernel larger than padded input");
    return d;
}

// col is (C*KH*KW) x (N*OH*OW), column index = ((n*OH + oh)*OW + ow).
void im2col(const Tensor& x, const ConvDims& d, int stride, int pad_h, int pad_w,
            std::vector<double>& col) {
    const int64_t K = d.C * d.KH * d.KW;
    const int64_t M = d.N * d.OH * d.OW;
    if (pad_h > 0 || pad_w > 0) {
        col.assign(static_cast<size_t>(K * M), 0.0);  // padding cells stay zero
    } else {
        col.resize(static_cast<size_t>(K * M));  // every cell gets written below
    }
    const double* xp = x.data();
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t kh = 0; kh < d.KH; ++kh) {
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                const int64_t krow = (c * d.KH + kh) * d.KW + kw;
                double* crow = col.data() + krow * M;
                for (int64_t n = 0; n < d.N; ++n) {
                    const double* xbase = xp + (n * d.C + c) * d.H * d.W;
                    for (int64_t oh = 0; oh < d.OH; ++oh) {
                        const int64_t ih = oh * stride - pad_h + kh;
                        double* out = crow + (n * d.OH + oh) * d.OW;
                        if (ih < 0 || ih >= d.H) continue;
                        const double* xr = xbase + ih * d.W;
                        for (int64_t ow = 0; ow < d.OW; ++ow) {
                            const int64_t iw = ow * stride - pad_w + kw;
                            if (iw >= 0 && iw < d.W) out[ow] = xr[iw];
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const std::vector<double>& col, const ConvDims& d, int stride, int pad_h,
                int pad_w, Tensor& dx) {
    const int64_t M = d.N * d.OH * d.OW;
    double* xp = dx.data();
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t kh = 0; kh < d.KH; ++kh) {
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                const int64_t krow = (c * d.KH + kh) * d.KW + kw;
                const double* crow = col.data() + krow * M;
                for (int64_t n = 0; n < d.N; ++n) {
                    double* xbase = xp + (n * d.C + c) * d.H * d.W;
                    for (int64_t oh = 0; oh < d.OH; ++oh) {
                        const int64_t ih = oh * stride - pad_h + kh;
                        if (ih < 0 || ih >= d.H) continue;
                        const double* in = crow + (n * d.OH + oh) * d.OW;
                        double* xr = xbase + ih * d.W;
                        for (int64_t ow = 0; ow < d.OW; ++ow) {
                            const int64_t iw = ow * stride - pad_w + kw;
                            if (iw >= 0 && iw < d.W) xr[iw] += in[ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Tape& t, const Var& x, const Var& w, const Var& b, int stride, int pad) {
    return conv2d(t, x, w, b, stride, pad, pad);
}

Var conv2d(Tape& t, const Var& x, const Var& w, const Var& b, int stride, int pad_h, int pad_w) {
    const ConvDims d = conv_dims(x, w, stride, pad_h, pad_w);
    if (b) require(b->value.rank() == 1 && b->value.dim(0) == d.OC, "conv2d: bias must be (OC)");

    const int64_t K = d.C * d.KH * d.KW;
    const int64_t M = d.N * d.OH * d.OW;

    const bool needs_grad = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    // Inference reuses one grow-only scratch; training owns its col buffer
    // because the backward closure reads it later.
    static thread_local std::vector<double> scratch;
    std::shared_ptr<std::vector<double>> col;
    std::vector<double>* colp;
    if (needs_grad) {
        col = std::make_shared<std::vector<double>>();
        colp = col.get();
    } else {
        colp = &scratch;
    }
    im2col(x->value, d, stride, pad_h, pad_w, *colp);

    // Y (OC x M) = W (OC x K) * col (K x M)
    Tensor y({d.N, d.OC, d.OH, d.OW});
    {
        CMapRM Wm(w->value.data(), d.OC, K);
        CMapRM Cm(colp->data(), K, M);
        MatRM Ym = Wm * Cm;
        // scatter (OC, n*OH*OW) -> (n, OC, OH, OW)
        const int64_t plane = d.OH * d.OW;
        for (int64_t oc = 0; oc < d.OC; ++oc) {
            const double bias = b ? b->value[static_cast<size_t>(oc)] : 0.0;
            for (int64_t n = 0; n < d.N; ++n) {
                const double* src = Ym.data() + oc * M + n * plane;
                double* dst = y.data() + (n * d.OC + oc) * plane;
                for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bias;
            }
        }
    }

    auto out = make_var(std::move(y), needs_grad);
    if (!out->requires_grad) return out;

    Var xv = x, wv = w, bv = b;
    t.record([xv, wv, bv, out, col, d, stride, pad_h, pad_w]() {
        if (!out->grad.same_shape(out->value)) return;
        const int64_t K = d.C * d.KH * d.KW;
        const int64_t M = d.N * d.OH * d.OW;
        const int64_t plane = d.OH * d.OW;
        // gather dY into (OC x M)
        MatRM dY(d.OC, M);
        for (int64_t oc = 0; oc < d.OC; ++oc)
            for (int64_t n = 0; n < d.N; ++n) {
                const double* src = out->grad.data() + (n * d.OC + oc) * plane;
                double* dst = dY.data() + oc * M + n * plane;
                for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
            }
        if (wv->requires_grad) {
            wv->ensure_grad();
            CMapRM Cm(col->data(), K, M);
            MapRM dW(wv->grad.data(), d.OC, K);
            dW.noalias() += dY * Cm.transpose();
        }
        if (bv && bv->requires_grad) {
            bv->ensure_grad();
            for (int64_t oc = 0; oc < d.OC; ++oc)
                bv->grad[static_cast<size_t>(oc)] += dY.row(oc).sum();
        }
        if (xv->requires_grad) {
            xv->ensure_grad();
            CMapRM Wm(wv->value.data(), d.OC, K);
            MatRM dColM = Wm.transpose() * dY;  // K x M
            std::vector<double> dcol(dColM.data(), dColM.data() + K * M);
            col2im_add(dcol, d, stride, pad_h, pad_w, xv->grad);
        }
    });
    return out;
}

Var pad_reflect(Tape& t, const Var& x, int p) {
    require4d(x, "pad_reflect");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                  W = x->value.dim(3);
    require(p >= 0 && p < H && p < W, "pad_reflect: padding must be smaller than spatial size");
    const int64_t OH = H + 2 * p, OW = W + 2 * p;

    auto refl = [](int64_t i, int64_t n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };

    Tensor y({N, C, OH, OW});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < OH; ++oh) {
                const int64_t ih = refl(oh - p, H);
                for (int64_t ow = 0; ow < OW; ++ow)
                    y.at4(n, c, oh, ow) = x->value.at4(n, c, ih, refl(ow - p, W));
            }

    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, p, N, C, H, W, OH, OW, refl]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih = refl(oh - p, H);
                    for (int64_t ow = 0; ow < OW; ++ow)
                        xv->grad.at4(n, c, ih, refl(ow - p, W)) += out->grad.at4(n, c, oh, ow);
                }
    });
    return out;
}

Var linear(Tape& t, const Var& x, const Var& w, const Var& b) {
    require(x->value.rank() == 2, "linear: input must be (N,D)");
    require(w->value.rank() == 2, "linear: weight must be (O,D)");
    const int64_t N = x->value.dim(0), D = x->value.dim(1), O = w->value.dim(0);
    require(w->value.dim(1) == D, "linear: weight expects input width " +
                                      std::to_string(w->value.dim(1)) + ", got " + std::to_string(D));
    if (b) require(b->value.rank() == 1 && b->value.dim(0) == O, "linear: bias must be (O)");

    Tensor y({N, O});
    {
        CMapRM X(x->value.data(), N, D);
        CMapRM W(w->value.data(), O, D);
        MapRM Y(y.data(), N, O);
        Y.noalias() = X * W.transpose();
        if (b)
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < O; ++j) y.at2(i, j) += b->value[static_cast<size_t>(j)];
    }

    auto out = make_var(std::move(y), x->requires_grad || w->requires_grad || (b && b->requires_grad));
    if (!out->requires_grad) return out;
    Var xv = x, wv = w, bv = b;
    t.record([xv, wv, bv, out, N, D, O]() {
        if (!out->grad.same_shape(out->value)) return;
        CMapRM dY(out->grad.data(), N, O);
        if (wv->requires_grad) {
            wv->ensure_grad();
            CMapRM X(xv->value.data(), N, D);
            MapRM dW(wv->grad.data(), O, D);
            dW.noalias() += dY.transpose() * X;
        }
        if (bv && bv->requires_grad) {
            bv->ensure_grad();
            for (int64_t j = 0; j < O; ++j) bv->grad[static_cast<size_t>(j)] += dY.col(j).sum();
        }
        if (xv->requires_grad) {
            xv->ensure_grad();
            CMapRM W(wv->value.data(), O, D);
            MapRM dX(xv->grad.data(), N, D);
            dX.noalias() += dY * W;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Var pointwise(Tape& t, const Var& x, Fwd f, Bwd dfdx_from_y) {
    Tensor y(x->value.shape());
    const int64_t n = x->value.numel();
    for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = f(x->value[static_cast<size_t>(i)]);
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, n, dfdx_from_y]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const size_t k = static_cast<size_t>(i);
            xv->grad[k] += out->grad[k] * dfdx_from_y(xv->value[k], out->value[k]);
        }
    });
    return out;
}

}  // namespace

Var relu(Tape& t, const Var& x) {
    return pointwise(
        t, x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Tape& t, const Var& x, double slope) {
    return pointwise(
        t, x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var tanh_op(Tape& t, const Var& x) {
    return pointwise(
        t, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Tape& t, const Var& x) {
    return pointwise(
        t, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var add(Tape& t, const Var& a, const Var& b) {
    require(a->value.same_shape(b->value), "add: shape mismatch " +
                                               Tensor::shape_str(a->value.shape()) + " vs " +
                                               Tensor::shape_str(b->value.shape()));
    Tensor y(a->value.shape());
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i)
        y[static_cast<size_t>(i)] = a->value[static_cast<size_t>(i)] + b->value[static_cast<size_t>(i)];
    auto out = make_var(std::move(y), a->requires_grad || b->requires_grad);
    if (!out->requires_grad) return out;
    Var av = a, bv = b;
    t.record([av, bv, out, n]() {
        if (!out->grad.same_shape(out->value)) return;
        if (av->requires_grad) {
            av->ensure_grad();
            for (int64_t i = 0; i < n; ++i) av->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
        }
        if (bv->requires_grad) {
            bv->ensure_grad();
            for (int64_t i = 0; i < n; ++i) bv->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
        }
    });
    return out;
}

Var sub(Tape& t, const Var& a, const Var& b) {
    require(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor y(a->value.shape());
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i)
        y[static_cast<size_t>(i)] = a->value[static_cast<size_t>(i)] - b->value[static_cast<size_t>(i)];
    auto out = make_var(std::move(y), a->requires_grad || b->requires_grad);
    if (!out->requires_grad) return out;
    Var av = a, bv = b;
    t.record([av, bv, out, n]() {
        if (!out->grad.same_shape(out->value)) return;
        if (av->requires_grad) {
            av->ensure_grad();
            for (int64_t i = 0; i < n; ++i) av->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
        }
        if (bv->requires_grad) {
            bv->ensure_grad();
            for (int64_t i = 0; i < n; ++i) bv->grad[static_cast<size_t>(i)] -= out->grad[static_cast<size_t>(i)];
        }
    });
    return out;
}

Var mul(Tape& t, const Var& a, const Var& b) {
    require(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor y(a->value.shape());
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i)
        y[static_cast<size_t>(i)] = a->value[static_cast<size_t>(i)] * b->value[static_cast<size_t>(i)];
    auto out = make_var(std::move(y), a->requires_grad || b->requires_grad);
    if (!out->requires_grad) return out;
    Var av = a, bv = b;
    t.record([av, bv, out, n]() {
        if (!out->grad.same_shape(out->value)) return;
        if (av->requires_grad) {
            av->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                av->grad[static_cast<size_t>(i)] +=
                    out->grad[static_cast<size_t>(i)] * bv->value[static_cast<size_t>(i)];
        }
        if (bv->requires_grad) {
            bv->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                bv->grad[static_cast<size_t>(i)] +=
                    out->grad[static_cast<size_t>(i)] * av->value[static_cast<size_t>(i)];
        }
    });
    return out;
}

Var scale(Tape& t, const Var& a, double k) {
    Tensor y(a->value.shape());
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = a->value[static_cast<size_t>(i)] * k;
    auto out = make_var(std::move(y), a->requires_grad);
    if (!out->requires_grad) return out;
    Var av = a;
    t.record([av, out, n, k]() {
        if (!out->grad.same_shape(out->value)) return;
        av->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            av->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)] * k;
    });
    return out;
}

Var add_const(Tape& t, const Var& a, double k) {
    Tensor y(a->value.shape());
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = a->value[static_cast<size_t>(i)] + k;
    auto out = make_var(std::move(y), a->requires_grad);
    if (!out->requires_grad) return out;
    Var av = a;
    t.record([av, out, n]() {
        if (!out->grad.same_shape(out->value)) return;
        av->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            av->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

namespace {

// s may be (C) or (N,C); returns index of s for (n,c).
size_t bidx(const Tensor& s, int64_t n, int64_t c, int64_t C) {
    return s.rank() == 1 ? static_cast<size_t>(c) : static_cast<size_t>(n * C + c);
}

void require_channel_operand(const Var& x, const Var& s, const char* op) {
    require4d(x, op);
    const int64_t N = x->value.dim(0), C = x->value.dim(1);
    const bool ok1 = s->value.rank() == 1 && s->value.dim(0) == C;
    const bool ok2 = s->value.rank() == 2 && s->value.dim(0) == N && s->value.dim(1) == C;
    require(ok1 || ok2, std::string(op) + ": operand must be (C) or (N,C) with C=" +
                            std::to_string(C) + ", got " + Tensor::shape_str(s->value.shape()));
}

}  // namespace

Var mul_channel(Tape& t, const Var& x, const Var& s) {
    require_channel_operand(x, s, "mul_channel");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y(x->value.shape());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double k = s->value[bidx(s->value, n, c, C)];
            const double* src = x->value.data() + (n * C + c) * HW;
            double* dst = y.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] * k;
        }
    auto out = make_var(std::move(y), x->requires_grad || s->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x, sv = s;
    t.record([xv, sv, out, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        if (xv->requires_grad) xv->ensure_grad();
        if (sv->requires_grad) sv->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const size_t si = bidx(sv->value, n, c, C);
                const double k = sv->value[si];
                const double* g = out->grad.data() + (n * C + c) * HW;
                if (xv->requires_grad) {
                    double* dx = xv->grad.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dx[i] += g[i] * k;
                }
                if (sv->requires_grad) {
                    const double* xd = xv->value.data() + (n * C + c) * HW;
                    double acc = 0.0;
                    for (int64_t i = 0; i < HW; ++i) acc += g[i] * xd[i];
                    sv->grad[si] += acc;
                }
            }
    });
    return out;
}

Var add_channel(Tape& t, const Var& x, const Var& b) {
    require_channel_operand(x, b, "add_channel");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y(x->value.shape());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double k = b->value[bidx(b->value, n, c, C)];
            const double* src = x->value.data() + (n * C + c) * HW;
            double* dst = y.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + k;
        }
    auto out = make_var(std::move(y), x->requires_grad || b->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x, bvv = b;
    t.record([xv, bvv, out, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        if (xv->requires_grad) xv->ensure_grad();
        if (bvv->requires_grad) bvv->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double* g = out->grad.data() + (n * C + c) * HW;
                if (xv->requires_grad) {
                    double* dx = xv->grad.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dx[i] += g[i];
                }
                if (bvv->requires_grad) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < HW; ++i) acc += g[i];
                    bvv->grad[bidx(bvv->value, n, c, C)] += acc;
                }
            }
    });
    return out;
}

Var mul_spatial(Tape& t, const Var& x, const Var& m) {
    require4d(x, "mul_spatial");
    require(m->value.rank() == 4 && m->value.dim(0) == x->value.dim(0) && m->value.dim(1) == 1 &&
                m->value.dim(2) == x->value.dim(2) && m->value.dim(3) == x->value.dim(3),
            "mul_spatial: mask must be (N,1,H,W) matching input");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y(x->value.shape());
    for (int64_t n = 0; n < N; ++n) {
        const double* mp = m->value.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
            const double* src = x->value.data() + (n * C + c) * HW;
            double* dst = y.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] * mp[i];
        }
    }
    auto out = make_var(std::move(y), x->requires_grad || m->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x, mv = m;
    t.record([xv, mv, out, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        if (xv->requires_grad) xv->ensure_grad();
        if (mv->requires_grad) mv->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
            const double* mp = mv->value.data() + n * HW;
            double* dm = mv->requires_grad ? mv->grad.data() + n * HW : nullptr;
            for (int64_t c = 0; c < C; ++c) {
                const double* g = out->grad.data() + (n * C + c) * HW;
                if (xv->requires_grad) {
                    double* dx = xv->grad.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dx[i] += g[i] * mp[i];
                }
                if (dm) {
                    const double* xd = xv->value.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dm[i] += g[i] * xd[i];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Normalization. Both reduce to: y = (x - mean) / sqrt(var + eps) over a
// group of size M; dx = inv_std * (dy - mean(dy) - y * mean(dy*y)).
// ---------------------------------------------------------------------------

namespace {

Var norm_over_groups(Tape& t, const Var& x, int64_t groups, int64_t M, double eps) {
    Tensor y(x->value.shape());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
    for (int64_t g = 0; g < groups; ++g) {
        const double* src = x->value.data() + g * M;
        double mean = 0.0;
        for (int64_t i = 0; i < M; ++i) mean += src[i];
        mean /= static_cast<double>(M);
        double var = 0.0;
        for (int64_t i = 0; i < M; ++i) {
            const double d = src[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(M);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(g)] = is;
        double* dst = y.data() + g * M;
        for (int64_t i = 0; i < M; ++i) dst[i] = (src[i] - mean) * is;
    }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, inv_std, groups, M]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t g = 0; g < groups; ++g) {
            const double is = (*inv_std)[static_cast<size_t>(g)];
            const double* yv = out->value.data() + g * M;
            const double* gy = out->grad.data() + g * M;
            double* dx = xv->grad.data() + g * M;
            double mean_gy = 0.0, mean_gyy = 0.0;
            for (int64_t i = 0; i < M; ++i) {
                mean_gy += gy[i];
                mean_gyy += gy[i] * yv[i];
            }
            mean_gy /= static_cast<double>(M);
            mean_gyy /= static_cast<double>(M);
            for (int64_t i = 0; i < M; ++i)
                dx[i] += is * (gy[i] - mean_gy - yv[i] * mean_gyy);
        }
    });
    return out;
}

}  // namespace

Var instance_norm(Tape& t, const Var& x, double eps) {
    require4d(x, "instance_norm");
    const int64_t groups = x->value.dim(0) * x->value.dim(1);
    const int64_t M = x->value.dim(2) * x->value.dim(3);
    return norm_over_groups(t, x, groups, M, eps);
}

Var layer_norm(Tape& t, const Var& x, double eps) {
    require4d(x, "layer_norm");
    const int64_t groups = x->value.dim(0);
    const int64_t M = x->value.dim(1) * x->value.dim(2) * x->value.dim(3);
    return norm_over_groups(t, x, groups, M, eps);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Var global_avg_pool(Tape& t, const Var& x) {
    require4d(x, "global_avg_pool");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y({N, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* src = x->value.data() + (n * C + c) * HW;
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) acc += src[i];
            y.at2(n, c) = acc / static_cast<double>(HW);
        }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        const double inv = 1.0 / static_cast<double>(HW);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double g = out->grad.at2(n, c) * inv;
                double* dx = xv->grad.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dx[i] += g;
            }
    });
    return out;
}

Var global_max_pool(Tape& t, const Var& x) {
    require4d(x, "global_max_pool");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y({N, C});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* src = x->value.data() + (n * C + c) * HW;
            int64_t best = 0;
            for (int64_t i = 1; i < HW; ++i)
                if (src[i] > src[best]) best = i;
            (*argmax)[static_cast<size_t>(n * C + c)] = best;
            y.at2(n, c) = src[best];
        }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, argmax, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                xv->grad.data()[(n * C + c) * HW + (*argmax)[static_cast<size_t>(n * C + c)]] +=
                    out->grad.at2(n, c);
    });
    return out;
}

namespace {

struct PoolDims {
    int64_t N, C, H, W, OH, OW;
};

PoolDims pool_dims(const Var& x, int k, int stride, int pad, const char* op) {
    require4d(x, op);
    PoolDims d{};
    d.N = x->value.dim(0);
    d.C = x->value.dim(1);
    d.H = x->value.dim(2);
    d.W = x->value.dim(3);
    d.OH = (d.H + 2 * pad - k) / stride + 1;
    d.OW = (d.W + 2 * pad - k) / stride + 1;
    require(d.OH >= 1 && d.OW >= 1, std::string(op) + ": window larger than padded input");
    return d;
}

}  // namespace

Var maxpool2d(Tape& t, const Var& x, int k, int stride, int pad) {
    const PoolDims d = pool_dims(x, k, stride, pad, "maxpool2d");
    Tensor y({d.N, d.C, d.OH, d.OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(y.numel()));
    int64_t oi = 0;
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t c = 0; c < d.C; ++c) {
            const double* plane = x->value.data() + (n * d.C + c) * d.H * d.W;
            for (int64_t oh = 0; oh < d.OH; ++oh)
                for (int64_t ow = 0; ow < d.OW; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t bi = -1;
                    for (int64_t kh = 0; kh < k; ++kh) {
                        const int64_t ih = oh * stride - pad + kh;
                        if (ih < 0 || ih >= d.H) continue;
                        for (int64_t kw = 0; kw < k; ++kw) {
                            const int64_t iw = ow * stride - pad + kw;
                            if (iw < 0 || iw >= d.W) continue;
                            const double v = plane[ih * d.W + iw];
                            if (v > best) {
                                best = v;
                                bi = ih * d.W + iw;
                            }
                        }
                    }
                    require(bi >= 0, "maxpool2d: empty window");
                    y[static_cast<size_t>(oi)] = best;
                    (*argmax)[static_cast<size_t>(oi)] = (n * d.C + c) * d.H * d.W + bi;
                }
        }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, argmax]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        const int64_t n = out->grad.numel();
        for (int64_t i = 0; i < n; ++i)
            xv->grad.data()[(*argmax)[static_cast<size_t>(i)]] += out->grad[static_cast<size_t>(i)];
    });
    return out;
}

Var avgpool2d(Tape& t, const Var& x, int k, int stride, int pad) {
    const PoolDims d = pool_dims(x, k, stride, pad, "avgpool2d");
    // count_include_pad semantics: divisor is always k*k.
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor y({d.N, d.C, d.OH, d.OW});
    int64_t oi = 0;
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t c = 0; c < d.C; ++c) {
            const double* plane = x->value.data() + (n * d.C + c) * d.H * d.W;
            for (int64_t oh = 0; oh < d.OH; ++oh)
                for (int64_t ow = 0; ow < d.OW; ++ow, ++oi) {
                    double acc = 0.0;
                    for (int64_t kh = 0; kh < k; ++kh) {
                        const int64_t ih = oh * stride - pad + kh;
                        if (ih < 0 || ih >= d.H) continue;
                        for (int64_t kw = 0; kw < k; ++kw) {
                            const int64_t iw = ow * stride - pad + kw;
                            if (iw >= 0 && iw < d.W) acc += plane[ih * d.W + iw];
                        }
                    }
                    y[static_cast<size_t>(oi)] = acc * inv;
                }
        }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    const int ks = k, st = stride, pd = pad;
    t.record([xv, out, d, ks, st, pd, inv]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        int64_t oi = 0;
        for (int64_t n = 0; n < d.N; ++n)
            for (int64_t c = 0; c < d.C; ++c) {
                double* dplane = xv->grad.data() + (n * d.C + c) * d.H * d.W;
                for (int64_t oh = 0; oh < d.OH; ++oh)
                    for (int64_t ow = 0; ow < d.OW; ++ow, ++oi) {
                        const double g = out->grad[static_cast<size_t>(oi)] * inv;
                        for (int64_t kh = 0; kh < ks; ++kh) {
                            const int64_t ih = oh * st - pd + kh;
                            if (ih < 0 || ih >= d.H) continue;
                            for (int64_t kw = 0; kw < ks; ++kw) {
                                const int64_t iw = ow * st - pd + kw;
                                if (iw >= 0 && iw < d.W) dplane[ih * d.W + iw] += g;
                            }
                        }
                    }
            }
    });
    return out;
}

Var upsample_nearest2(Tape& t, const Var& x) {
    require4d(x, "upsample_nearest2");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    Tensor y({N, C, H * 2, W * 2});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    const double v = x->value.at4(n, c, h, w);
                    y.at4(n, c, 2 * h, 2 * w) = v;
                    y.at4(n, c, 2 * h, 2 * w + 1) = v;
                    y.at4(n, c, 2 * h + 1, 2 * w) = v;
                    y.at4(n, c, 2 * h + 1, 2 * w + 1) = v;
                }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, N, C, H, W]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w)
                        xv->grad.at4(n, c, h, w) +=
                            out->grad.at4(n, c, 2 * h, 2 * w) + out->grad.at4(n, c, 2 * h, 2 * w + 1) +
                            out->grad.at4(n, c, 2 * h + 1, 2 * w) +
                            out->grad.at4(n, c, 2 * h + 1, 2 * w + 1);
    });
    return out;
}

Var concat_channels(Tape& t, const std::vector<Var>& xs) {
    require(!xs.empty(), "concat_channels: empty input list");
    const int64_t N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
    int64_t Ctot = 0;
    bool needs_grad = false;
    for (const auto& x : xs) {
        require4d(x, "concat_channels");
        require(x->value.dim(0) == N && x->value.dim(2) == H && x->value.dim(3) == W,
                "concat_channels: inputs must agree on N,H,W");
        Ctot += x->value.dim(1);
        needs_grad = needs_grad || x->requires_grad;
    }
    Tensor y({N, Ctot, H, W});
    const int64_t HW = H * W;
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t C = x->value.dim(1);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double* src = x->value.data() + (n * C + c) * HW;
                double* dst = y.data() + (n * Ctot + coff + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dst[i] = src[i];
            }
        coff += C;
    }
    auto out = make_var(std::move(y), needs_grad);
    if (!out->requires_grad) return out;
    auto inputs = xs;
    t.record([inputs, out, N, Ctot, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        int64_t coff = 0;
        for (const auto& x : inputs) {
            const int64_t C = x->value.dim(1);
            if (x->requires_grad) {
                x->ensure_grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const double* g = out->grad.data() + (n * Ctot + coff + c) * HW;
                        double* dx = x->grad.data() + (n * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) dx[i] += g[i];
                    }
            }
            coff += C;
        }
    });
    return out;
}

Var channel_mean(Tape& t, const Var& x) {
    require4d(x, "channel_mean");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y({N, 1, x->value.dim(2), x->value.dim(3)});
    const double inv = 1.0 / static_cast<double>(C);
    for (int64_t n = 0; n < N; ++n) {
        double* dst = y.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
            const double* src = x->value.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] += src[i];
        }
        for (int64_t i = 0; i < HW; ++i) dst[i] *= inv;
    }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, N, C, HW, inv]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
            const double* g = out->grad.data() + n * HW;
            for (int64_t c = 0; c < C; ++c) {
                double* dx = xv->grad.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dx[i] += g[i] * inv;
            }
        }
    });
    return out;
}

Var channel_max(Tape& t, const Var& x) {
    require4d(x, "channel_max");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y({N, 1, x->value.dim(2), x->value.dim(3)});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * HW));
    for (int64_t n = 0; n < N; ++n) {
        double* dst = y.data() + n * HW;
        for (int64_t i = 0; i < HW; ++i) {
            int64_t best = 0;
            double bv = x->value.data()[(n * C) * HW + i];
            for (int64_t c = 1; c < C; ++c) {
                const double v = x->value.data()[(n * C + c) * HW + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            dst[i] = bv;
            (*argmax)[static_cast<size_t>(n * HW + i)] = best;
        }
    }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, argmax, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                const int64_t c = (*argmax)[static_cast<size_t>(n * HW + i)];
                xv->grad.data()[(n * C + c) * HW + i] += out->grad.data()[n * HW + i];
            }
    });
    return out;
}

Var sum_channels(Tape& t, const Var& x) {
    require4d(x, "sum_channels");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    Tensor y({N, 1, x->value.dim(2), x->value.dim(3)});
    for (int64_t n = 0; n < N; ++n) {
        double* dst = y.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
            const double* src = x->value.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] += src[i];
        }
    }
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, N, C, HW]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
            const double* g = out->grad.data() + n * HW;
            for (int64_t c = 0; c < C; ++c) {
                double* dx = xv->grad.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dx[i] += g[i];
            }
        }
    });
    return out;
}

Var reshape(Tape& t, const Var& x, std::vector<int64_t> shape) {
    Tensor y = x->value.reshaped(std::move(shape));
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        const int64_t n = xv->grad.numel();
        for (int64_t i = 0; i < n; ++i)
            xv->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
    });
    return out;
}

Var mean_all(Tape& t, const Var& x) {
    const int64_t n = x->value.numel();
    require(n > 0, "mean_all: empty tensor");
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x->value[static_cast<size_t>(i)];
    Tensor y({1});
    y[0] = acc / static_cast<double>(n);
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, n]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        const double g = out->grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) xv->grad[static_cast<size_t>(i)] += g;
    });
    return out;
}

Var mse_to(Tape& t, const Var& x, double target) {
    const int64_t n = x->value.numel();
    require(n > 0, "mse_to: empty tensor");
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = x->value[static_cast<size_t>(i)] - target;
        acc += d * d;
    }
    Tensor y({1});
    y[0] = acc / static_cast<double>(n);
    auto out = make_var(std::move(y), x->requires_grad);
    if (!out->requires_grad) return out;
    Var xv = x;
    t.record([xv, out, n, target]() {
        if (!out->grad.same_shape(out->value)) return;
        xv->ensure_grad();
        const double g = out->grad[0] * 2.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
            xv->grad[static_cast<size_t>(i)] += g * (xv->value[static_cast<size_t>(i)] - target);
    });
    return out;
}

Var l1_diff(Tape& t, const Var& a, const Var& b) {
    require(a->value.same_shape(b->value), "l1_diff: shape mismatch");
    const int64_t n = a->value.numel();
    require(n > 0, "l1_diff: empty tensor");
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i)
        acc += std::abs(a->value[static_cast<size_t>(i)] - b->value[static_cast<size_t>(i)]);
    Tensor y({1});
    y[0] = acc / static_cast<double>(n);
    auto out = make_var(std::move(y), a->requires_grad || b->requires_grad);
    if (!out->requires_grad) return out;
    Var av = a, bv = b;
    t.record([av, bv, out, n]() {
        if (!out->grad.same_shape(out->value)) return;
        const double g = out->grad[0] / static_cast<double>(n);
        if (av->requires_grad) av->ensure_grad();
        if (bv->requires_grad) bv->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const size_t k = static_cast<size_t>(i);
            const double d = av->value[k] - bv->value[k];
            const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            if (av->requires_grad) av->grad[k] += g * s;
            if (bv->requires_grad) bv->grad[k] -= g * s;
        }
    });
    return out;
}

Var bce_with_logits_to(Tape& t, const Var& logits, double target) {
    const int64_t n = logits->value.numel();
    require(n > 0, "bce_with_logits_to: empty tensor");
    // loss = mean( max(z,0) - z*t + log(1+exp(-|z|)) ), the stable form.
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = logits->value[static_cast<size_t>(i)];
        acc += std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor y({1});
    y[0] = acc / static_cast<double>(n);
    auto out = make_var(std::move(y), logits->requires_grad);
    if (!out->requires_grad) return out;
    Var lv = logits;
    t.record([lv, out, n, target]() {
        if (!out->grad.same_shape(out->value)) return;
        lv->ensure_grad();
        const double g = out->grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            const double z = lv->value[static_cast<size_t>(i)];
            const double sig = 1.0 / (1.0 + std::exp(-z));
            lv->grad[static_cast<size_t>(i)] += g * (sig - target);
        }
    });
    return out;
}

Var softmax_cross_entropy(Tape& t, const Var& logits, const std::vector<int>& labels) {
    require(logits->value.rank() == 2, "softmax_cross_entropy: logits must be (N,K)");
    const int64_t N = logits->value.dim(0), K = logits->value.dim(1);
    require(static_cast<int64_t>(labels.size()) == N,
            "softmax_cross_entropy: label count mismatch");
    auto probs = std::make_shared<Tensor>(softmax_rows(logits->value));
    double acc = 0.0;
    for (int64_t i = 0; i < N; ++i) {
        const int lbl = labels[static_cast<size_t>(i)];
        require(lbl >= 0 && lbl < K, "softmax_cross_entropy: label out of range");
        acc -= std::log(std::max(probs->at2(i, lbl), 1e-300));
    }
    Tensor y({1});
    y[0] = acc / static_cast<double>(N);
    auto out = make_var(std::move(y), logits->requires_grad);
    if (!out->requires_grad) return out;
    Var lv = logits;
    auto lbls = labels;
    t.record([lv, out, probs, lbls, N, K]() {
        if (!out->grad.same_shape(out->value)) return;
        lv->ensure_grad();
        const double g = out->grad[0] / static_cast<double>(N);
        for (int64_t i = 0; i < N; ++i)
            for (int64_t k = 0; k < K; ++k) {
                const double onehot = (k == lbls[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                lv->grad.at2(i, k) += g * (probs->at2(i, k) - onehot);
            }
    });
    return out;
}

Tensor softmax_rows(const Tensor& logits) {
    const int64_t N = logits.dim(0), K = logits.dim(1);
    Tensor p({N, K});
    for (int64_t i = 0; i < N; ++i) {
        double mx = logits.at2(i, 0);
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, logits.at2(i, k));
        double z = 0.0;
        for (int64_t k = 0; k < K; ++k) {
            const double e = std::exp(logits.at2(i, k) - mx);
            p.at2(i, k) = e;
            z += e;
        }
        for (int64_t k = 0; k < K; ++k) p.at2(i, k) /= z;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

bool Adam::is_frozen(const std::string& name, const std::set<std::string>& prefixes) {
    for (const auto& p : prefixes)
        if (name.size() >= p.size() && name.compare(0, p.size(), p) == 0) return true;
    return false;
}

void Adam::step(ParamStore& ps, const std::set<std::string>& frozen_prefixes) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, v] : ps.all()) {
        if (is_frozen(name, frozen_prefixes)) continue;
        if (!v->grad.same_shape(v->value)) continue;  // never touched this step
        auto& [m, s] = state_.try_emplace(name, Tensor::zeros(v->value.shape()),
                                          Tensor::zeros(v->value.shape()))
                           .first->second;
        const int64_t n = v->value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const size_t k = static_cast<size_t>(i);
            const double g = v->grad[k];
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
            s[k] = cfg_.beta2 * s[k] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m[k] / bc1;
            const double sh = s[k] / bc2;
            double upd = mh / (std::sqrt(sh) + cfg_.eps);
            if (cfg_.weight_decay > 0.0) upd += cfg_.weight_decay * v->value[k];
            v->value[k] -= cfg_.lr * upd;
        }
    }
}

}  // namespace octfew::ad
