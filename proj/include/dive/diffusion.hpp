#pragma once

#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "dive/checkpoint.hpp"
#include "dive/nn.hpp"
#include "dive/prompt.hpp"
#include "dive/tensor.hpp"

namespace dive {

// Variance-preserving cosine schedule: alpha_t^2 + sigma_t^2 = 1.
struct NoiseSchedule {
    int64_t t_max = 1000;

    Scalar alpha(Scalar t) const;
    Scalar sigma(Scalar t) const;
    Scalar log_snr(Scalar t) const;  // log(alpha/sigma)
};

Tensor forward_noise(const Tensor& x, Scalar t, const Tensor& eps, const NoiseSchedule& sched);

// Low-rank branch on a frozen projection: W_eff = W + scale * A * B.
// A is (out, rank) Gaussian with std 1/rank; B is (rank, in) zero so a fresh
// adapter leaves the base model untouched.
struct LoraAdapter {
    Tensor a, b;
    Scalar scale = 1.0;
    int64_t rank = 0;
    Tensor ga, gb;

    static LoraAdapter init(int64_t out, int64_t in, int64_t rank, Scalar scale,
                            std::mt19937_64& rng);
    void alloc_grads();
    void zero_grads();
};

struct LoraCtx {
    Tensor x;  // layer input
    Tensor u;  // x * B^T, cached for the A gradient
};

Tensor lora_forward(const nn::Linear& base, const LoraAdapter* ad, const Tensor& x, LoraCtx* ctx);
// Accumulates ga/gb; returns the input gradient (base path + adapter path).
Tensor lora_backward(const nn::Linear& base, LoraAdapter* ad, const LoraCtx& ctx,
                     const Tensor& gy);

struct DenoiserConfig {
    int64_t height = 32, width = 16;  // multiples of 4
    int64_t width0 = 32, width1 = 64;  // trunk channel widths
    int64_t d_text = 256;
    int64_t attn_dim = 256;
    int64_t heads = 4;
    int64_t temb_dim = 64;
    uint64_t seed = 0;

    std::string arch_string() const;
};

// Frozen conditional denoiser: conv trunk with one cross-attention bottleneck
// reading the prompt conditioning. Epsilon prediction with a structural skip,
//   eps_hat = sigma_t * z + alpha_t * trunk(z, t, cond),
// which makes the untrained base calibrated for unit-variance data.
struct Denoiser {
    DenoiserConfig cfg;
    nn::Conv2d stem, down1, down2, mid, up1, up2, head;
    nn::Linear t_stem, t_mid;     // timestep embedding projections
    nn::Linear lift;              // width1 -> attn_dim for queries
    nn::Linear wq, wk, wv;        // frozen attention projection bases
    nn::Linear out_proj;          // attn_dim -> width1

    static Denoiser create(const DenoiserConfig& cfg);
    std::vector<Tensor*> all_weights();
    std::vector<const Tensor*> all_weights() const;
};

struct BlockAdapters {
    LoraAdapter q, k, v;
};

struct AdapterSet {
    int64_t rank = 0;
    Scalar scale = 1.0;
    std::vector<BlockAdapters> blocks;

    void alloc_grads();
    void zero_grads();
    std::vector<Tensor*> trainable();
    std::vector<Tensor*> grads();
};

// One adapter triple (Q, K, V) per cross-attention block (the toy trunk has
// exactly one such block).
AdapterSet attach_adapters(const Denoiser& den, int64_t rank, Scalar scale, std::mt19937_64& rng);

// Cached activations for one forward pass (batch).
struct DenoiserTrace {
    Tensor z;
    std::vector<Scalar> t;
    std::vector<Tensor> cond;
    Tensor temb;
    Tensor stem_pre, x0;      // pre-activation / activated
    Tensor down1_pre, x1;
    Tensor down2_pre, x2;
    std::vector<Tensor> lift_in, lift_out;  // per item: (P, width1), (P, attn_dim)
    std::vector<LoraCtx> qctx, kctx, vctx;
    std::vector<nn::AttentionCtx> attn;
    std::vector<Tensor> attn_out;           // per item (P, attn_dim)
    Tensor x3;                              // x2 + projected attention
    Tensor mid_pre, x4;
    Tensor up1_in, up1_pre, x5;
    Tensor up2_in, up2_pre, x6;
    Tensor raw;                             // head output
};

Tensor denoise_predict(const Tensor& z, const std::vector<Scalar>& t,
                       const std::vector<Tensor>& cond, const Denoiser& den,
                       const AdapterSet* adapters, const NoiseSchedule& sched,
                       DenoiserTrace* trace = nullptr);

// Backward for the trainable leaves only: adapter A/B gradients accumulate in
// the AdapterSet, conditioning gradients are returned per batch item. The
// frozen trunk below the bottleneck is never differentiated.
std::vector<Tensor> denoise_backward(const Denoiser& den, AdapterSet* adapters,
                                     const DenoiserTrace& trace, const Tensor& geps,
                                     const NoiseSchedule& sched);

struct TrainingExample {
    Tensor image;  // (3, H, W) in [-1, 1]
    int64_t identity_row = -1;
    int64_t view_row = -1;
};

struct NoiseDraw {
    std::vector<Scalar> t;
    std::vector<Tensor> eps;
};

NoiseDraw draw_noise(int64_t batch, const Shape& image_shape, const NoiseSchedule& sched,
                     std::mt19937_64& rng);

using DenoiseHook =
    std::function<Tensor(const Tensor& z, const std::vector<Scalar>& t,
                         const std::vector<Tensor>& cond)>;

// Mean squared error between drawn noise and the prediction. When table_grad
// is non-null, backpropagates into adapter grads and embedding-row grads.
// A non-null hook replaces the real denoiser (no gradients; used by tests).
Scalar training_loss_with_draw(const std::vector<TrainingExample>& batch, const NoiseDraw& draw,
                               const Denoiser& den, AdapterSet* adapters,
                               const TokenRegistry& reg, const PromptEncoder& enc,
                               const NoiseSchedule& sched, Tensor* table_grad,
                               PromptVariant variant = PromptVariant::full,
                               const DenoiseHook& hook = nullptr);

Scalar training_loss(const std::vector<TrainingExample>& batch, const Denoiser& den,
                     AdapterSet* adapters, const TokenRegistry& reg, const PromptEncoder& enc,
                     const NoiseSchedule& sched, std::mt19937_64& rng, Tensor* table_grad,
                     PromptVariant variant = PromptVariant::full);

void save_denoiser(const Denoiser& den, CheckpointWriter& w);
Denoiser load_denoiser(const CheckpointReader& r);
void save_adapters(const AdapterSet& ad, CheckpointWriter& w);
AdapterSet load_adapters(const CheckpointReader& r);

}  // namespace dive
