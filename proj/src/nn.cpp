#include "dive/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "dive/errors.hpp"

namespace dive::nn {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace {

MatMap as_mat(Tensor& t, int64_t rows, int64_t cols) {
    return MatMap(t.data.data(), rows, cols);
}

ConstMatMap as_mat(const Tensor& t, int64_t rows, int64_t cols) {
    return ConstMatMap(t.data.data(), rows, cols);
}

}  // namespace

Linear Linear::init(int64_t out, int64_t in, std::mt19937_64& rng, bool bias, Scalar w_std) {
    Linear l;
    if (w_std < 0) w_std = 1.0 / std::sqrt(static_cast<Scalar>(in));
    l.w = Tensor::randn({out, in}, rng, w_std);
    if (bias) l.b = Tensor::zeros({out});
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    const int64_t in = w.size(1), out = w.size(0);
    if (x.ndim() != 2 || x.size(1) != in) require_shape(x, {x.ndim() ? x.size(0) : 0, in}, "linear input");
    const int64_t n = x.size(0);
    Tensor y = Tensor::zeros({n, out});
    as_mat(y, n, out).noalias() = as_mat(x, n, in) * as_mat(w, out, in).transpose();
    if (!b.data.empty()) {
        auto ym = as_mat(y, n, out);
        ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data.data(), out);
    }
    return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& gy) {
    const int64_t in = w.size(1), out = w.size(0), n = x.size(0);
    if (trainable) {
        if (gw.data.empty()) alloc_grads();
        as_mat(gw, out, in).noalias() += as_mat(gy, n, out).transpose() * as_mat(x, n, in);
        if (!b.data.empty())
            Eigen::Map<Eigen::RowVectorXd>(gb.data.data(), out) +=
                as_mat(gy, n, out).colwise().sum();
    }
    Tensor gx = Tensor::zeros({n, in});
    as_mat(gx, n, in).noalias() = as_mat(gy, n, out) * as_mat(w, out, in);
    return gx;
}

void Linear::alloc_grads() {
    gw = Tensor::zeros(w.shape);
    if (!b.data.empty()) gb = Tensor::zeros(b.shape);
}

void Linear::zero_grads() {
    if (!gw.data.empty()) gw.zero();
    if (!gb.data.empty()) gb.zero();
}

Conv2d Conv2d::init(int64_t cout, int64_t cin, int stride, std::mt19937_64& rng, Scalar w_std) {
    Conv2d c;
    c.stride = stride;
    if (w_std < 0) w_std = 1.0 / std::sqrt(static_cast<Scalar>(cin) * 9.0);
    c.w = Tensor::randn({cout, cin, 3, 3}, rng, w_std);
    c.b = Tensor::zeros({cout});
    return c;
}

namespace {

// Gathers 3x3 neighborhoods (zero padding 1) into cols (cin*9, ho*wo).
void im2col(const Tensor& x, int64_t item, int stride, int64_t ho, int64_t wo, Tensor& cols) {
    const int64_t cin = x.size(1), h = x.size(2), w = x.size(3);
    for (int64_t c = 0; c < cin; ++c) {
        const Scalar* xp = x.data.data() + ((item * cin + c) * h) * w;
        for (int64_t ky = 0; ky < 3; ++ky) {
            for (int64_t kx = 0; kx < 3; ++kx) {
                Scalar* out = cols.data.data() + ((c * 3 + ky) * 3 + kx) * (ho * wo);
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) {
                        std::fill(out + oy * wo, out + (oy + 1) * wo, 0.0);
                        continue;
                    }
                    const Scalar* row = xp + iy * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - 1;
                        out[oy * wo + ox] = (ix >= 0 && ix < w) ? row[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-add of col gradients back to the input image grid.
void col2im(const Tensor& cols, int64_t item, int stride, int64_t ho, int64_t wo, Tensor& gx) {
    const int64_t cin = gx.size(1), h = gx.size(2), w = gx.size(3);
    for (int64_t c = 0; c < cin; ++c) {
        Scalar* gp = gx.data.data() + ((item * cin + c) * h) * w;
        for (int64_t ky = 0; ky < 3; ++ky) {
            for (int64_t kx = 0; kx < 3; ++kx) {
                const Scalar* col = cols.data.data() + ((c * 3 + ky) * 3 + kx) * (ho * wo);
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    Scalar* row = gp + iy * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < w) row[ix] += col[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) const {
    const int64_t cout = w.size(0), cin = w.size(1);
    if (x.ndim() != 4 || x.size(1) != cin)
        throw DataError("conv input must be (B, " + std::to_string(cin) + ", H, W)");
    const int64_t bsz = x.size(0), h = x.size(2), ww = x.size(3);
    const int64_t ho = (h - 1) / stride + 1, wo = (ww - 1) / stride + 1;
    Tensor y = Tensor::zeros({bsz, cout, ho, wo});
    Tensor cols = Tensor::zeros({cin * 9, ho * wo});
    for (int64_t i = 0; i < bsz; ++i) {
        im2col(x, i, stride, ho, wo, cols);
        MatMap ym(y.data.data() + i * cout * ho * wo, cout, ho * wo);
        ym.noalias() = as_mat(w, cout, cin * 9) * as_mat(cols, cin * 9, ho * wo);
        ym.colwise() += Eigen::Map<const Eigen::VectorXd>(b.data.data(), cout);
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& gy) {
    const int64_t cout = w.size(0), cin = w.size(1);
    const int64_t bsz = x.size(0), h = x.size(2), ww = x.size(3);
    const int64_t ho = gy.size(2), wo = gy.size(3);
    Tensor gx = Tensor::zeros(x.shape);
    Tensor cols = Tensor::zeros({cin * 9, ho * wo});
    Tensor gcols = Tensor::zeros({cin * 9, ho * wo});
    if (trainable && gw.data.empty()) alloc_grads();
    for (int64_t i = 0; i < bsz; ++i) {
        ConstMatMap gym(gy.data.data() + i * cout * ho * wo, cout, ho * wo);
        if (trainable) {
            im2col(x, i, stride, ho, wo, cols);
            as_mat(gw, cout, cin * 9).noalias() += gym * as_mat(cols, cin * 9, ho * wo).transpose();
            Eigen::Map<Eigen::VectorXd>(gb.data.data(), cout) += gym.rowwise().sum();
        }
        as_mat(gcols, cin * 9, ho * wo).noalias() = as_mat(w, cout, cin * 9).transpose() * gym;
        col2im(gcols, i, stride, ho, wo, gx);
    }
    return gx;
}

void Conv2d::alloc_grads() {
    gw = Tensor::zeros(w.shape);
    gb = Tensor::zeros(b.shape);
}

void Conv2d::zero_grads() {
    if (!gw.data.empty()) gw.zero();
    if (!gb.data.empty()) gb.zero();
}

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.data) v = v / (1.0 + std::exp(-v));
    return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& gy) {
    Tensor gx = Tensor::zeros(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const Scalar s = 1.0 / (1.0 + std::exp(-x.data[i]));
        gx.data[i] = gy.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
    }
    return gx;
}

Tensor upsample2x(const Tensor& x) {
    const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    Tensor y = Tensor::zeros({b, c, 2 * h, 2 * w});
    for (int64_t bc = 0; bc < b * c; ++bc) {
        const Scalar* xp = x.data.data() + bc * h * w;
        Scalar* yp = y.data.data() + bc * 4 * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const Scalar v = xp[i * w + j];
                Scalar* r0 = yp + (2 * i) * 2 * w + 2 * j;
                Scalar* r1 = r0 + 2 * w;
                r0[0] = r0[1] = r1[0] = r1[1] = v;
            }
    }
    return y;
}

Tensor upsample2x_backward(const Tensor& gy) {
    const int64_t b = gy.size(0), c = gy.size(1), h2 = gy.size(2), w2 = gy.size(3);
    const int64_t h = h2 / 2, w = w2 / 2;
    Tensor gx = Tensor::zeros({b, c, h, w});
    for (int64_t bc = 0; bc < b * c; ++bc) {
        const Scalar* gp = gy.data.data() + bc * h2 * w2;
        Scalar* xp = gx.data.data() + bc * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const Scalar* r0 = gp + (2 * i) * w2 + 2 * j;
                const Scalar* r1 = r0 + w2;
                xp[i * w + j] = r0[0] + r0[1] + r1[0] + r1[1];
            }
    }
    return gx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const int64_t bs = a.size(0), ca = a.size(1), cb = b.size(1), h = a.size(2), w = a.size(3);
    if (b.size(0) != bs || b.size(2) != h || b.size(3) != w)
        throw DataError("concat_channels: mismatched spatial shapes");
    Tensor y = Tensor::zeros({bs, ca + cb, h, w});
    const int64_t plane = h * w;
    for (int64_t i = 0; i < bs; ++i) {
        std::copy_n(a.data.data() + i * ca * plane, ca * plane,
                    y.data.data() + i * (ca + cb) * plane);
        std::copy_n(b.data.data() + i * cb * plane, cb * plane,
                    y.data.data() + (i * (ca + cb) + ca) * plane);
    }
    return y;
}

void split_channels(const Tensor& g, int64_t ca, Tensor& ga, Tensor& gb) {
    const int64_t bs = g.size(0), c = g.size(1), h = g.size(2), w = g.size(3);
    const int64_t cb = c - ca, plane = h * w;
    ga = Tensor::zeros({bs, ca, h, w});
    gb = Tensor::zeros({bs, cb, h, w});
    for (int64_t i = 0; i < bs; ++i) {
        std::copy_n(g.data.data() + i * c * plane, ca * plane, ga.data.data() + i * ca * plane);
        std::copy_n(g.data.data() + (i * c + ca) * plane, cb * plane,
                    gb.data.data() + i * cb * plane);
    }
}

void softmax_rows_(Tensor& m) {
    const int64_t n = m.size(0), k = m.size(1);
    for (int64_t i = 0; i < n; ++i) {
        Scalar* row = m.data.data() + i * k;
        const Scalar mx = *std::max_element(row, row + k);
        Scalar sum = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < k; ++j) row[j] /= sum;
    }
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& gy) {
    const int64_t n = y.size(0), k = y.size(1);
    Tensor gx = Tensor::zeros(y.shape);
    for (int64_t i = 0; i < n; ++i) {
        const Scalar* yr = y.data.data() + i * k;
        const Scalar* gr = gy.data.data() + i * k;
        Scalar dot = 0.0;
        for (int64_t j = 0; j < k; ++j) dot += yr[j] * gr[j];
        Scalar* out = gx.data.data() + i * k;
        for (int64_t j = 0; j < k; ++j) out[j] = yr[j] * (gr[j] - dot);
    }
    return gx;
}

Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads,
                         AttentionCtx* ctx) {
    const int64_t sq = q.size(0), sk = k.size(0), d = q.size(1);
    if (d % heads != 0) throw NumericError("attention dim not divisible by head count");
    const int64_t dh = d / heads;
    const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
    Tensor out = Tensor::zeros({sq, d});
    Tensor attn = Tensor::zeros({heads, sq, sk});
    auto qm = as_mat(q, sq, d), km = as_mat(k, sk, d), vm = as_mat(v, sk, d);
    auto om = as_mat(out, sq, d);
    for (int64_t h = 0; h < heads; ++h) {
        MatMap am(attn.data.data() + h * sq * sk, sq, sk);
        am.noalias() = qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose() * scale;
        Tensor arows{{sq, sk}, std::vector<Scalar>(am.data(), am.data() + sq * sk)};
        softmax_rows_(arows);
        std::copy(arows.data.begin(), arows.data.end(), attn.data.data() + h * sq * sk);
        MatMap am2(attn.data.data() + h * sq * sk, sq, sk);
        om.middleCols(h * dh, dh).noalias() = am2 * vm.middleCols(h * dh, dh);
    }
    if (ctx) {
        ctx->q = q;
        ctx->k = k;
        ctx->v = v;
        ctx->attn = std::move(attn);
        ctx->heads = heads;
    }
    return out;
}

void attention_backward(const AttentionCtx& ctx, const Tensor& gout, Tensor& gq, Tensor& gk,
                        Tensor& gv) {
    const int64_t sq = ctx.q.size(0), sk = ctx.k.size(0), d = ctx.q.size(1);
    const int64_t heads = ctx.heads, dh = d / heads;
    const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
    gq = Tensor::zeros(ctx.q.shape);
    gk = Tensor::zeros(ctx.k.shape);
    gv = Tensor::zeros(ctx.v.shape);
    auto qm = as_mat(ctx.q, sq, d), km = as_mat(ctx.k, sk, d), vm = as_mat(ctx.v, sk, d);
    auto gom = as_mat(gout, sq, d);
    auto gqm = as_mat(gq, sq, d), gkm = as_mat(gk, sk, d), gvm = as_mat(gv, sk, d);
    for (int64_t h = 0; h < heads; ++h) {
        ConstMatMap am(ctx.attn.data.data() + h * sq * sk, sq, sk);
        gvm.middleCols(h * dh, dh).noalias() = am.transpose() * gom.middleCols(h * dh, dh);
        RowMat gattn = gom.middleCols(h * dh, dh) * vm.middleCols(h * dh, dh).transpose();
        Tensor yt{{sq, sk}, std::vector<Scalar>(am.data(), am.data() + sq * sk)};
        Tensor gt{{sq, sk}, std::vector<Scalar>(gattn.data(), gattn.data() + sq * sk)};
        Tensor gscores = softmax_rows_backward(yt, gt);
        ConstMatMap gsm(gscores.data.data(), sq, sk);
        gqm.middleCols(h * dh, dh).noalias() = gsm * km.middleCols(h * dh, dh) * scale;
        gkm.middleCols(h * dh, dh).noalias() = gsm.transpose() * qm.middleCols(h * dh, dh) * scale;
    }
}

Tensor timestep_embedding(const std::vector<Scalar>& t, int64_t dim, Scalar max_period) {
    if (dim % 2 != 0) throw NumericError("timestep embedding dim must be even");
    const int64_t n = static_cast<int64_t>(t.size()), half = dim / 2;
    Tensor e = Tensor::zeros({n, dim});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < half; ++j) {
            const Scalar freq =
                std::exp(-std::log(max_period) * static_cast<Scalar>(j) / static_cast<Scalar>(half));
            e.at(i, j) = std::cos(t[i] * freq);
            e.at(i, half + j) = std::sin(t[i] * freq);
        }
    return e;
}

Tensor positional_encoding(int64_t length, int64_t dim) {
    std::vector<Scalar> pos(length);
    for (int64_t i = 0; i < length; ++i) pos[i] = static_cast<Scalar>(i);
    return timestep_embedding(pos, dim);
}

Tensor positional_encoding_2d(int64_t h, int64_t w, int64_t dim) {
    if (dim % 2 != 0) throw NumericError("2d positional encoding dim must be even");
    Tensor rows = positional_encoding(h, dim / 2);
    Tensor cols = positional_encoding(w, dim / 2);
    Tensor e = Tensor::zeros({h * w, dim});
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            Scalar* out = e.data.data() + (r * w + c) * dim;
            std::copy_n(rows.data.data() + r * (dim / 2), dim / 2, out);
            std::copy_n(cols.data.data() + c * (dim / 2), dim / 2, out + dim / 2);
        }
    return e;
}

Tensor global_avg_pool(const Tensor& x) {
    const int64_t b = x.size(0), c = x.size(1), plane = x.size(2) * x.size(3);
    Tensor y = Tensor::zeros({b, c});
    for (int64_t i = 0; i < b * c; ++i) {
        const Scalar* p = x.data.data() + i * plane;
        Scalar s = 0.0;
        for (int64_t j = 0; j < plane; ++j) s += p[j];
        y.data[i] = s / static_cast<Scalar>(plane);
    }
    return y;
}

Tensor global_avg_pool_backward(const Tensor& x_shape_like, const Tensor& gy) {
    const int64_t b = x_shape_like.size(0), c = x_shape_like.size(1);
    const int64_t plane = x_shape_like.size(2) * x_shape_like.size(3);
    Tensor gx = Tensor::zeros(x_shape_like.shape);
    for (int64_t i = 0; i < b * c; ++i) {
        const Scalar g = gy.data[i] / static_cast<Scalar>(plane);
        Scalar* p = gx.data.data() + i * plane;
        for (int64_t j = 0; j < plane; ++j) p[j] = g;
    }
    return gx;
}

Scalar cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels, Tensor* glogits) {
    const int64_t n = logits.size(0), k = logits.size(1);
    if (static_cast<int64_t>(labels.size()) != n)
        throw DataError("cross_entropy: label count mismatch");
    Tensor probs = logits;
    softmax_rows_(probs);
    Scalar loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const Scalar p = probs.at(i, labels[i]);
        loss -= std::log(std::max(p, 1e-300));
    }
    loss /= static_cast<Scalar>(n);
    if (glogits) {
        *glogits = probs;
        for (int64_t i = 0; i < n; ++i) glogits->at(i, labels[i]) -= 1.0;
        glogits->scale_(1.0 / static_cast<Scalar>(n));
    }
    return loss;
}

void Adam::add(Tensor& value, Tensor& grad) {
    if (grad.data.empty()) grad = Tensor::zeros(value.shape);
    slots.push_back({&value, &grad, Tensor::zeros(value.shape), Tensor::zeros(value.shape)});
}

void Adam::step() {
    ++steps;
    const Scalar bc1 = 1.0 - std::pow(beta1, static_cast<Scalar>(steps));
    const Scalar bc2 = 1.0 - std::pow(beta2, static_cast<Scalar>(steps));
    for (auto& s : slots) {
        for (size_t i = 0; i < s.value->data.size(); ++i) {
            const Scalar g = s.grad->data[i];
            s.m.data[i] = beta1 * s.m.data[i] + (1.0 - beta1) * g;
            s.v.data[i] = beta2 * s.v.data[i] + (1.0 - beta2) * g * g;
            const Scalar mhat = s.m.data[i] / bc1;
            const Scalar vhat = s.v.data[i] / bc2;
            s.value->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void Adam::zero_grads() {
    for (auto& s : slots) s.grad->zero();
}

}  // namespace dive::nn
