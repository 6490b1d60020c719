#pragma once

#include <random>
#include <vector>

#include "dive/tensor.hpp"

namespace dive::nn {

// y = x W^T + b, x is (n, in) row-major.
struct Linear {
    Tensor w;  // (out, in)
    Tensor b;  // (out); empty means no bias
    bool trainable = false;
    Tensor gw, gb;

    static Linear init(int64_t out, int64_t in, std::mt19937_64& rng, bool bias = true,
                       Scalar w_std = -1.0);
    Tensor forward(const Tensor& x) const;
    // Accumulates gw/gb when trainable; returns gradient w.r.t. x.
    Tensor backward(const Tensor& x, const Tensor& gy);
    void alloc_grads();
    void zero_grads();
};

// 3x3 convolution, zero padding 1, stride 1 or 2. x is (B, cin, H, W).
struct Conv2d {
    Tensor w;  // (cout, cin, 3, 3)
    Tensor b;  // (cout)
    int stride = 1;
    bool trainable = false;
    Tensor gw, gb;

    static Conv2d init(int64_t cout, int64_t cin, int stride, std::mt19937_64& rng,
                       Scalar w_std = -1.0);
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& gy);
    void alloc_grads();
    void zero_grads();
};

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& gy);

Tensor upsample2x(const Tensor& x);            // (B,C,H,W) -> (B,C,2H,2W), nearest
Tensor upsample2x_backward(const Tensor& gy);  // sums each 2x2 cell

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& g, int64_t ca, Tensor& ga, Tensor& gb);

void softmax_rows_(Tensor& m);  // (n, k), in place, numerically stable
Tensor softmax_rows_backward(const Tensor& y, const Tensor& gy);

// Multi-head scaled dot-product attention over row matrices.
// q (Sq, D), k (Sk, D), v (Sk, D); D divisible by heads.
struct AttentionCtx {
    Tensor q, k, v;
    Tensor attn;  // (heads, Sq, Sk) softmax weights
    int64_t heads = 1;
};
Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads,
                         AttentionCtx* ctx);
void attention_backward(const AttentionCtx& ctx, const Tensor& gout, Tensor& gq, Tensor& gk,
                        Tensor& gv);

// Sinusoidal embeddings. Timesteps are continuous scalars.
Tensor timestep_embedding(const std::vector<Scalar>& t, int64_t dim, Scalar max_period = 10000.0);
Tensor positional_encoding(int64_t length, int64_t dim);          // (length, dim)
Tensor positional_encoding_2d(int64_t h, int64_t w, int64_t dim); // (h*w, dim)

Tensor global_avg_pool(const Tensor& x);  // (B,C,H,W) -> (B,C)
Tensor global_avg_pool_backward(const Tensor& x_shape_like, const Tensor& gy);

// Mean cross-entropy over logits (B, K); fills glogits when non-null.
Scalar cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels, Tensor* glogits);

struct Adam {
    Scalar lr = 1e-3;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    int64_t steps = 0;

    struct Slot {
        Tensor* value;
        Tensor* grad;
        Tensor m, v;
    };
    std::vector<Slot> slots;

    void add(Tensor& value, Tensor& grad);
    void step();
    void zero_grads();
};

}  // namespace dive::nn
