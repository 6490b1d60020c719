#include "dive/diffusion.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

#include "dive/errors.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

constexpr Scalar kPi = 3.14159265358979323846;
constexpr Scalar kAlphaClampLo = 1e-4;
constexpr Scalar kAlphaClampHi = 1.0 - 1e-4;

// Adds a per-(item, channel) bias to every spatial position.
void add_channel_bias(Tensor& x, const Tensor& bias) {
    const int64_t b = x.size(0), c = x.size(1), plane = x.size(2) * x.size(3);
    for (int64_t i = 0; i < b; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const Scalar v = bias.at(i, ch);
            Scalar* p = x.data.data() + (i * c + ch) * plane;
            for (int64_t j = 0; j < plane; ++j) p[j] += v;
        }
}

// (C, h, w) channel planes of one item -> (h*w, C) position rows.
Tensor positions_of_item(const Tensor& x, int64_t item) {
    const int64_t c = x.size(1), h = x.size(2), w = x.size(3), p = h * w;
    Tensor out = Tensor::zeros({p, c});
    for (int64_t ch = 0; ch < c; ++ch) {
        const Scalar* src = x.data.data() + (item * c + ch) * p;
        for (int64_t pos = 0; pos < p; ++pos) out.at(pos, ch) = src[pos];
    }
    return out;
}

void positions_to_item(const Tensor& rows, Tensor& x, int64_t item, bool accumulate) {
    const int64_t c = x.size(1), p = x.size(2) * x.size(3);
    for (int64_t ch = 0; ch < c; ++ch) {
        Scalar* dst = x.data.data() + (item * c + ch) * p;
        for (int64_t pos = 0; pos < p; ++pos)
            dst[pos] = accumulate ? dst[pos] + rows.at(pos, ch) : rows.at(pos, ch);
    }
}

}  // namespace

Scalar NoiseSchedule::alpha(Scalar t) const {
    if (t < 0 || t > Scalar(t_max)) throw NumericError("timestep out of schedule range");
    const Scalar a = std::cos(kPi / 2.0 * t / Scalar(t_max));
    return std::clamp(a, kAlphaClampLo, kAlphaClampHi);
}

Scalar NoiseSchedule::sigma(Scalar t) const {
    const Scalar a = alpha(t);
    return std::sqrt(1.0 - a * a);
}

Scalar NoiseSchedule::log_snr(Scalar t) const { return std::log(alpha(t) / sigma(t)); }

Tensor forward_noise(const Tensor& x, Scalar t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!x.same_shape(eps)) throw DataError("forward_noise: eps shape differs from x");
    Tensor z = x;
    z.scale_(sched.alpha(t));
    z.add_(eps, sched.sigma(t));
    return z;
}

LoraAdapter LoraAdapter::init(int64_t out, int64_t in, int64_t rank, Scalar scale,
                              std::mt19937_64& rng) {
    if (rank <= 0) throw DataError("adapter rank must be positive");
    if (rank > std::min(out, in))
        throw DataError("adapter rank " + std::to_string(rank) + " exceeds min(out,in) = " +
                        std::to_string(std::min(out, in)));
    LoraAdapter ad;
    ad.rank = rank;
    ad.scale = scale;
    ad.a = Tensor::randn({out, rank}, rng, 1.0 / Scalar(rank));
    ad.b = Tensor::zeros({rank, in});
    return ad;
}

void LoraAdapter::alloc_grads() {
    ga = Tensor::zeros(a.shape);
    gb = Tensor::zeros(b.shape);
}

void LoraAdapter::zero_grads() {
    if (!ga.data.empty()) ga.zero();
    if (!gb.data.empty()) gb.zero();
}

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap mat_of(const Tensor& t) { return ConstMatMap(t.data.data(), t.size(0), t.size(1)); }
MatMap mat_of(Tensor& t) { return MatMap(t.data.data(), t.size(0), t.size(1)); }

}  // namespace

Tensor lora_forward(const nn::Linear& base, const LoraAdapter* ad, const Tensor& x,
                    LoraCtx* ctx) {
    Tensor y = base.forward(x);
    if (!ad) {
        if (ctx) ctx->x = x;
        return y;
    }
    // u = x B^T (n, r); y += scale * u A^T
    Tensor u = Tensor::zeros({x.size(0), ad->rank});
    mat_of(u).noalias() = mat_of(x) * mat_of(ad->b).transpose();
    mat_of(y).noalias() += ad->scale * (mat_of(u) * mat_of(ad->a).transpose());
    if (ctx) {
        ctx->x = x;
        ctx->u = std::move(u);
    }
    return y;
}

Tensor lora_backward(const nn::Linear& base, LoraAdapter* ad, const LoraCtx& ctx,
                     const Tensor& gy) {
    // Base path input gradient (base weights stay frozen).
    auto& base_mut = const_cast<nn::Linear&>(base);
    Tensor gx = base_mut.backward(ctx.x, gy);
    if (!ad) return gx;
    if (ad->ga.data.empty()) ad->alloc_grads();
    // gu = gy A; gA += scale gy^T u; gB += scale gu^T x; gx += scale gu B
    Tensor gu = Tensor::zeros({ctx.x.size(0), ad->rank});
    mat_of(gu).noalias() = mat_of(gy) * mat_of(ad->a);
    mat_of(ad->ga).noalias() += ad->scale * (mat_of(gy).transpose() * mat_of(ctx.u));
    mat_of(ad->gb).noalias() += ad->scale * (mat_of(gu).transpose() * mat_of(ctx.x));
    mat_of(gx).noalias() += ad->scale * (mat_of(gu) * mat_of(ad->b));
    return gx;
}

std::string DenoiserConfig::arch_string() const {
    std::ostringstream out;
    out << "h" << height << "_w" << width << "_c" << width0 << "x" << width1 << "_dtext" << d_text
        << "_attn" << attn_dim << "_heads" << heads << "_temb" << temb_dim << "_seed" << seed;
    return out.str();
}

Denoiser Denoiser::create(const DenoiserConfig& cfg) {
    if (cfg.height % 4 != 0 || cfg.width % 4 != 0)
        throw DataError("denoiser image size must be a multiple of 4");
    Denoiser d;
    d.cfg = cfg;
    auto rng = make_rng(seed_combine(cfg.seed, "denoiser"));
    d.stem = nn::Conv2d::init(cfg.width0, 3, 1, rng);
    d.down1 = nn::Conv2d::init(cfg.width1, cfg.width0, 2, rng);
    d.down2 = nn::Conv2d::init(cfg.width1, cfg.width1, 2, rng);
    d.mid = nn::Conv2d::init(cfg.width1, cfg.width1, 1, rng);
    d.up1 = nn::Conv2d::init(cfg.width0, 2 * cfg.width1, 1, rng);
    d.up2 = nn::Conv2d::init(cfg.width0, 2 * cfg.width0, 1, rng);
    d.head = nn::Conv2d::init(3, cfg.width0, 1, rng);
    d.t_stem = nn::Linear::init(cfg.width0, cfg.temb_dim, rng);
    d.t_mid = nn::Linear::init(cfg.width1, cfg.temb_dim, rng);
    d.lift = nn::Linear::init(cfg.attn_dim, cfg.width1, rng);
    d.wq = nn::Linear::init(cfg.attn_dim, cfg.attn_dim, rng, false);
    d.wk = nn::Linear::init(cfg.attn_dim, cfg.d_text, rng, false);
    d.wv = nn::Linear::init(cfg.attn_dim, cfg.d_text, rng, false);
    d.out_proj = nn::Linear::init(cfg.width1, cfg.attn_dim, rng);
    return d;
}

std::vector<Tensor*> Denoiser::all_weights() {
    return {&stem.w, &stem.b, &down1.w, &down1.b, &down2.w, &down2.b, &mid.w,  &mid.b,
            &up1.w,  &up1.b,  &up2.w,   &up2.b,   &head.w,  &head.b,  &t_stem.w, &t_stem.b,
            &t_mid.w, &t_mid.b, &lift.w, &lift.b, &wq.w,    &wk.w,    &wv.w,   &out_proj.w,
            &out_proj.b};
}

std::vector<const Tensor*> Denoiser::all_weights() const {
    auto mut = const_cast<Denoiser*>(this)->all_weights();
    return std::vector<const Tensor*>(mut.begin(), mut.end());
}

void AdapterSet::alloc_grads() {
    for (auto& blk : blocks) {
        blk.q.alloc_grads();
        blk.k.alloc_grads();
        blk.v.alloc_grads();
    }
}

void AdapterSet::zero_grads() {
    for (auto& blk : blocks) {
        blk.q.zero_grads();
        blk.k.zero_grads();
        blk.v.zero_grads();
    }
}

std::vector<Tensor*> AdapterSet::trainable() {
    std::vector<Tensor*> out;
    for (auto& blk : blocks)
        for (LoraAdapter* ad : {&blk.q, &blk.k, &blk.v}) {
            out.push_back(&ad->a);
            out.push_back(&ad->b);
        }
    return out;
}

std::vector<Tensor*> AdapterSet::grads() {
    std::vector<Tensor*> out;
    for (auto& blk : blocks)
        for (LoraAdapter* ad : {&blk.q, &blk.k, &blk.v}) {
            out.push_back(&ad->ga);
            out.push_back(&ad->gb);
        }
    return out;
}

AdapterSet attach_adapters(const Denoiser& den, int64_t rank, Scalar scale,
                           std::mt19937_64& rng) {
    AdapterSet set;
    set.rank = rank;
    set.scale = scale;
    BlockAdapters blk;
    blk.q = LoraAdapter::init(den.cfg.attn_dim, den.cfg.attn_dim, rank, scale, rng);
    blk.k = LoraAdapter::init(den.cfg.attn_dim, den.cfg.d_text, rank, scale, rng);
    blk.v = LoraAdapter::init(den.cfg.attn_dim, den.cfg.d_text, rank, scale, rng);
    set.blocks.push_back(std::move(blk));
    set.alloc_grads();
    return set;
}

Tensor denoise_predict(const Tensor& z, const std::vector<Scalar>& t,
                       const std::vector<Tensor>& cond, const Denoiser& den,
                       const AdapterSet* adapters, const NoiseSchedule& sched, DenoiserTrace* trace) {
    const auto& cfg = den.cfg;
    require_shape(z, {z.size(0), 3, cfg.height, cfg.width}, "denoiser input");
    const int64_t bsz = z.size(0);
    if (int64_t(t.size()) != bsz || int64_t(cond.size()) != bsz)
        throw DataError("denoiser batch fields disagree in length");
    if (adapters && adapters->blocks.size() != 1)
        throw DataError("adapter set does not match denoiser block count");

    DenoiserTrace local;
    DenoiserTrace& tr = trace ? *trace : local;
    tr.z = z;
    tr.t = t;
    tr.cond = cond;

    tr.temb = nn::timestep_embedding(t, cfg.temb_dim);

    tr.stem_pre = den.stem.forward(z);
    add_channel_bias(tr.stem_pre, den.t_stem.forward(tr.temb));
    tr.x0 = nn::silu(tr.stem_pre);

    tr.down1_pre = den.down1.forward(tr.x0);
    tr.x1 = nn::silu(tr.down1_pre);

    tr.down2_pre = den.down2.forward(tr.x1);
    add_channel_bias(tr.down2_pre, den.t_mid.forward(tr.temb));
    tr.x2 = nn::silu(tr.down2_pre);

    const int64_t h4 = cfg.height / 4, w4 = cfg.width / 4;
    const Tensor pos = nn::positional_encoding_2d(h4, w4, cfg.attn_dim);

    tr.x3 = tr.x2;
    tr.lift_in.resize(size_t(bsz));
    tr.lift_out.resize(size_t(bsz));
    tr.qctx.resize(size_t(bsz));
    tr.kctx.resize(size_t(bsz));
    tr.vctx.resize(size_t(bsz));
    tr.attn.resize(size_t(bsz));
    tr.attn_out.resize(size_t(bsz));
    for (int64_t i = 0; i < bsz; ++i) {
        if (cond[size_t(i)].ndim() != 2 || cond[size_t(i)].size(1) != cfg.d_text)
            throw DataError("conditioning matrix width does not match d_text");
        tr.lift_in[size_t(i)] = positions_of_item(tr.x2, i);
        Tensor lifted = den.lift.forward(tr.lift_in[size_t(i)]);
        lifted.add_(pos, 1.0);
        tr.lift_out[size_t(i)] = std::move(lifted);
        const LoraAdapter* aq = adapters ? &adapters->blocks[0].q : nullptr;
        const LoraAdapter* ak = adapters ? &adapters->blocks[0].k : nullptr;
        const LoraAdapter* av = adapters ? &adapters->blocks[0].v : nullptr;
        Tensor q = lora_forward(den.wq, aq, tr.lift_out[size_t(i)], &tr.qctx[size_t(i)]);
        Tensor k = lora_forward(den.wk, ak, cond[size_t(i)], &tr.kctx[size_t(i)]);
        Tensor v = lora_forward(den.wv, av, cond[size_t(i)], &tr.vctx[size_t(i)]);
        tr.attn_out[size_t(i)] =
            nn::attention_forward(q, k, v, cfg.heads, &tr.attn[size_t(i)]);
        Tensor proj = den.out_proj.forward(tr.attn_out[size_t(i)]);
        positions_to_item(proj, tr.x3, i, /*accumulate=*/true);
    }

    tr.mid_pre = den.mid.forward(tr.x3);
    tr.x4 = nn::silu(tr.mid_pre);

    tr.up1_in = nn::concat_channels(nn::upsample2x(tr.x4), tr.x1);
    tr.up1_pre = den.up1.forward(tr.up1_in);
    tr.x5 = nn::silu(tr.up1_pre);

    tr.up2_in = nn::concat_channels(nn::upsample2x(tr.x5), tr.x0);
    tr.up2_pre = den.up2.forward(tr.up2_in);
    tr.x6 = nn::silu(tr.up2_pre);

    tr.raw = den.head.forward(tr.x6);

    // Structural skip: eps_hat = sigma_t z + alpha_t raw. An untrained trunk
    // (raw ~ 0) then predicts sigma_t z, the calibrated baseline for
    // unit-variance data.
    Tensor eps_hat = tr.raw;
    const int64_t item = 3 * cfg.height * cfg.width;
    for (int64_t i = 0; i < bsz; ++i) {
        const Scalar a = sched.alpha(t[size_t(i)]), s = sched.sigma(t[size_t(i)]);
        Scalar* e = eps_hat.data.data() + i * item;
        const Scalar* zp = z.data.data() + i * item;
        for (int64_t j = 0; j < item; ++j) e[j] = s * zp[j] + a * e[j];
    }
    return eps_hat;
}

std::vector<Tensor> denoise_backward(const Denoiser& den, AdapterSet* adapters,
                                     const DenoiserTrace& tr, const Tensor& geps,
                                     const NoiseSchedule& sched) {
    const auto& cfg = den.cfg;
    const int64_t bsz = tr.z.size(0), item = 3 * cfg.height * cfg.width;
    auto& d = const_cast<Denoiser&>(den);

    Tensor graw = geps;
    for (int64_t i = 0; i < bsz; ++i) {
        const Scalar a = sched.alpha(tr.t[size_t(i)]);
        Scalar* g = graw.data.data() + i * item;
        for (int64_t j = 0; j < item; ++j) g[j] *= a;
    }

    Tensor gx6 = d.head.backward(tr.x6, graw);
    Tensor gup2_pre = nn::silu_backward(tr.up2_pre, gx6);
    Tensor gup2_in = d.up2.backward(tr.up2_in, gup2_pre);
    Tensor gup_half, gskip;
    nn::split_channels(gup2_in, cfg.width0, gup_half, gskip);  // skip path (x0) is frozen-dead
    Tensor gx5 = nn::upsample2x_backward(gup_half);

    Tensor gup1_pre = nn::silu_backward(tr.up1_pre, gx5);
    Tensor gup1_in = d.up1.backward(tr.up1_in, gup1_pre);
    nn::split_channels(gup1_in, cfg.width1, gup_half, gskip);  // skip path (x1) frozen-dead
    Tensor gx4 = nn::upsample2x_backward(gup_half);

    Tensor gmid_pre = nn::silu_backward(tr.mid_pre, gx4);
    Tensor gx3 = d.mid.backward(tr.x3, gmid_pre);

    std::vector<Tensor> gcond(static_cast<size_t>(bsz));
    for (int64_t i = 0; i < bsz; ++i) {
        Tensor gproj = positions_of_item(gx3, i);  // (P, width1)
        Tensor gao = d.out_proj.backward(tr.attn_out[size_t(i)], gproj);
        Tensor gq, gk, gv;
        nn::attention_backward(tr.attn[size_t(i)], gao, gq, gk, gv);
        LoraAdapter* aq = adapters ? &adapters->blocks[0].q : nullptr;
        LoraAdapter* ak = adapters ? &adapters->blocks[0].k : nullptr;
        LoraAdapter* av = adapters ? &adapters->blocks[0].v : nullptr;
        lora_backward(den.wq, aq, tr.qctx[size_t(i)], gq);  // image path ends frozen
        Tensor gc = lora_backward(den.wk, ak, tr.kctx[size_t(i)], gk);
        gc.add_(lora_backward(den.wv, av, tr.vctx[size_t(i)], gv), 1.0);
        gcond[size_t(i)] = std::move(gc);
    }
    return gcond;
}

NoiseDraw draw_noise(int64_t batch, const Shape& image_shape, const NoiseSchedule& sched,
                     std::mt19937_64& rng) {
    NoiseDraw draw;
    std::uniform_int_distribution<int64_t> tpick(1, sched.t_max);
    for (int64_t i = 0; i < batch; ++i) {
        draw.t.push_back(Scalar(tpick(rng)));
        draw.eps.push_back(Tensor::randn(image_shape, rng));
    }
    return draw;
}

Scalar training_loss_with_draw(const std::vector<TrainingExample>& batch, const NoiseDraw& draw,
                               const Denoiser& den, AdapterSet* adapters,
                               const TokenRegistry& reg, const PromptEncoder& enc,
                               const NoiseSchedule& sched, Tensor* table_grad,
                               PromptVariant variant, const DenoiseHook& hook) {
    const int64_t bsz = int64_t(batch.size());
    if (bsz == 0) throw DataError("empty training batch");
    if (int64_t(draw.t.size()) != bsz || int64_t(draw.eps.size()) != bsz)
        throw DataError("noise draw does not match batch size");

    const Shape img_shape = batch[0].image.shape;
    Tensor z = Tensor::zeros({bsz, img_shape[0], img_shape[1], img_shape[2]});
    const int64_t item = numel_of(img_shape);
    std::vector<Tensor> cond(static_cast<size_t>(bsz));
    std::vector<EncodeCtx> ectx(static_cast<size_t>(bsz));
    for (int64_t i = 0; i < bsz; ++i) {
        const auto& ex = batch[size_t(i)];
        require_shape(ex.image, img_shape, "batch image");
        Tensor zi = forward_noise(ex.image, draw.t[size_t(i)], draw.eps[size_t(i)], sched);
        std::copy(zi.data.begin(), zi.data.end(), z.data.begin() + i * item);
        PromptSpec spec{ex.identity_row, ex.view_row};
        cond[size_t(i)] = enc.encode(reg.table, build_prompt(reg, spec, variant),
                                     table_grad ? &ectx[size_t(i)] : nullptr);
    }

    DenoiserTrace trace;
    Tensor eps_hat = hook ? hook(z, draw.t, cond)
                          : denoise_predict(z, draw.t, cond, den, adapters, sched,
                                            table_grad ? &trace : nullptr);

    Scalar loss = 0.0;
    Tensor geps = Tensor::zeros(eps_hat.shape);
    const Scalar denom = Scalar(bsz * item);
    for (int64_t i = 0; i < bsz; ++i) {
        const Scalar* e = draw.eps[size_t(i)].data.data();
        for (int64_t j = 0; j < item; ++j) {
            const Scalar diff = eps_hat.data[size_t(i * item + j)] - e[j];
            loss += diff * diff / denom;
            geps.data[size_t(i * item + j)] = 2.0 * diff / denom;
        }
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss");

    if (table_grad && !hook) {
        std::vector<Tensor> gcond = denoise_backward(den, adapters, trace, geps, sched);
        for (int64_t i = 0; i < bsz; ++i)
            enc.backward(ectx[size_t(i)], gcond[size_t(i)], *table_grad);
    }
    return loss;
}

Scalar training_loss(const std::vector<TrainingExample>& batch, const Denoiser& den,
                     AdapterSet* adapters, const TokenRegistry& reg, const PromptEncoder& enc,
                     const NoiseSchedule& sched, std::mt19937_64& rng, Tensor* table_grad,
                     PromptVariant variant) {
    const NoiseDraw draw = draw_noise(int64_t(batch.size()), batch[0].image.shape, sched, rng);
    return training_loss_with_draw(batch, draw, den, adapters, reg, enc, sched, table_grad,
                                   variant);
}

namespace {

const std::vector<std::string>& weight_names() {
    static const std::vector<std::string> names = {
        "stem.w",  "stem.b",  "down1.w", "down1.b", "down2.w",  "down2.b",  "mid.w",
        "mid.b",   "up1.w",   "up1.b",   "up2.w",   "up2.b",    "head.w",   "head.b",
        "t_stem.w", "t_stem.b", "t_mid.w", "t_mid.b", "lift.w",  "lift.b",  "wq.w",
        "wk.w",    "wv.w",    "out_proj.w", "out_proj.b"};
    return names;
}

}  // namespace

void save_denoiser(const Denoiser& den, CheckpointWriter& w) {
    const auto& cfg = den.cfg;
    w.put_string("denoiser/arch", cfg.arch_string());
    w.put_i64("denoiser/height", cfg.height);
    w.put_i64("denoiser/width", cfg.width);
    w.put_i64("denoiser/width0", cfg.width0);
    w.put_i64("denoiser/width1", cfg.width1);
    w.put_i64("denoiser/d_text", cfg.d_text);
    w.put_i64("denoiser/attn_dim", cfg.attn_dim);
    w.put_i64("denoiser/heads", cfg.heads);
    w.put_i64("denoiser/temb_dim", cfg.temb_dim);
    w.put_i64("denoiser/seed", int64_t(cfg.seed));
    auto weights = den.all_weights();
    const auto& names = weight_names();
    for (size_t i = 0; i < names.size(); ++i)
        w.put_tensor("denoiser/" + names[i], *weights[i]);
}

Denoiser load_denoiser(const CheckpointReader& r) {
    DenoiserConfig cfg;
    cfg.height = r.i64("denoiser/height");
    cfg.width = r.i64("denoiser/width");
    cfg.width0 = r.i64("denoiser/width0");
    cfg.width1 = r.i64("denoiser/width1");
    cfg.d_text = r.i64("denoiser/d_text");
    cfg.attn_dim = r.i64("denoiser/attn_dim");
    cfg.heads = r.i64("denoiser/heads");
    cfg.temb_dim = r.i64("denoiser/temb_dim");
    cfg.seed = uint64_t(r.i64("denoiser/seed"));
    if (r.string("denoiser/arch") != cfg.arch_string())
        throw DataError("checkpoint architecture string mismatch");
    Denoiser den = Denoiser::create(cfg);
    auto weights = den.all_weights();
    const auto& names = weight_names();
    for (size_t i = 0; i < names.size(); ++i) {
        Tensor t = r.tensor("denoiser/" + names[i]);
        require_shape(t, weights[i]->shape, "checkpoint weight " + names[i]);
        *weights[i] = std::move(t);
    }
    return den;
}

void save_adapters(const AdapterSet& ad, CheckpointWriter& w) {
    w.put_i64("adapters/rank", ad.rank);
    w.put_tensor("adapters/scale", Tensor({1}, {ad.scale}));
    w.put_i64("adapters/blocks", int64_t(ad.blocks.size()));
    for (size_t i = 0; i < ad.blocks.size(); ++i) {
        const std::string p = "adapters/" + std::to_string(i) + "/";
        w.put_tensor(p + "q.a", ad.blocks[i].q.a);
        w.put_tensor(p + "q.b", ad.blocks[i].q.b);
        w.put_tensor(p + "k.a", ad.blocks[i].k.a);
        w.put_tensor(p + "k.b", ad.blocks[i].k.b);
        w.put_tensor(p + "v.a", ad.blocks[i].v.a);
        w.put_tensor(p + "v.b", ad.blocks[i].v.b);
    }
}

AdapterSet load_adapters(const CheckpointReader& r) {
    AdapterSet set;
    set.rank = r.i64("adapters/rank");
    set.scale = r.tensor("adapters/scale").data.at(0);
    const int64_t n = r.i64("adapters/blocks");
    for (int64_t i = 0; i < n; ++i) {
        const std::string p = "adapters/" + std::to_string(i) + "/";
        BlockAdapters blk;
        auto fill = [&](LoraAdapter& ad, const std::string& name) {
            ad.a = r.tensor(p + name + ".a");
            ad.b = r.tensor(p + name + ".b");
            ad.rank = set.rank;
            ad.scale = set.scale;
            ad.alloc_grads();
        };
        fill(blk.q, "q");
        fill(blk.k, "k");
        fill(blk.v, "v");
        set.blocks.push_back(std::move(blk));
    }
    return set;
}

}  // namespace dive
