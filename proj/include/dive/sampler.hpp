#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dive/diffusion.hpp"
#include "dive/prompt.hpp"
#include "dive/reid_dataset.hpp"
#include "dive/trainer.hpp"

namespace dive {

struct SamplerConfig {
    enum class Method { multistep_2nd_order, first_order };

    int64_t steps = 25;
    Method method = Method::multistep_2nd_order;
    uint64_t seed = 0;
    int64_t batch = 1;
    Scalar guidance_scale = 1.0;  // reserved; only 1.0 is implemented

    void validate(const NoiseSchedule& sched) const;  // throws UsageError
};

std::string to_string(SamplerConfig::Method m);
SamplerConfig::Method parse_sampler_method(const std::string& s);

// Uniform descending grid: T_max = t_0 > t_1 > ... > t_steps = 0.
std::vector<Scalar> timestep_grid(int64_t steps, const NoiseSchedule& sched);

struct SampleStats {
    int64_t denoiser_evals = 0;
};

// Batched noise prediction at a shared timestep.
using DenoiseFn = std::function<Tensor(const Tensor& z, Scalar t)>;

// The exact initial noise a sampler run starts from: shape [batch, item...],
// drawn from the config seed. Exposed so callers can relate outputs to their
// starting points.
Tensor sampler_init_noise(const SamplerConfig& cfg, const Shape& item_shape);

// Instrumentation: called after each solver update with the new state
// (index of the completed interval, the timestep landed on, and the
// unmodified state — only the final state is clamped).
using StepObserver = std::function<void(int64_t step_index, Scalar t_next, const Tensor& x)>;

// Reverse sampling from standard-normal noise. The second-order method is a
// data-prediction multistep update in log-SNR coordinates with a first-order
// final step; first_order is the deterministic DDIM recursion. Output values
// are clamped to [-1, 1] at the final step only.
Tensor sample_with_fn(const DenoiseFn& fn, const Shape& item_shape, const SamplerConfig& cfg,
                      const NoiseSchedule& sched, SampleStats* stats = nullptr,
                      const StepObserver& observer = nullptr);

// Prompt-conditioned sampling through a trained model bundle.
Tensor sample(const ModelBundle& m, const PromptSpec& prompt, const SamplerConfig& cfg,
              SampleStats* stats = nullptr, PromptVariant variant = PromptVariant::full);

// Writes one PNG per batch item as {identity_token}_{view_token}_{index}.png
// (index starts at start_index) and returns matching synthetic records.
std::vector<ReidRecord> write_samples(const std::string& dir, const TokenRegistry& reg,
                                      const PromptSpec& prompt, const Tensor& batch,
                                      int64_t start_index);

}  // namespace dive
