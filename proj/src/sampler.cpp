#include "dive/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dive/errors.hpp"
#include "dive/image_io.hpp"
#include "dive/rng.hpp"

namespace dive {

void SamplerConfig::validate(const NoiseSchedule& sched) const {
    if (steps < 1 || steps > sched.t_max)
        throw UsageError("sampler steps must lie in [1, " + std::to_string(sched.t_max) + "]");
    if (batch < 1) throw UsageError("sampler batch must be at least 1");
    if (guidance_scale != 1.0)
        throw UsageError("classifier-free guidance is reserved but not implemented");
}

std::string to_string(SamplerConfig::Method m) {
    return m == SamplerConfig::Method::first_order ? "first_order" : "multistep_2nd_order";
}

SamplerConfig::Method parse_sampler_method(const std::string& s) {
    if (s == "first_order") return SamplerConfig::Method::first_order;
    if (s == "multistep_2nd_order") return SamplerConfig::Method::multistep_2nd_order;
    throw UsageError("unknown sampler method: " + s);
}

std::vector<Scalar> timestep_grid(int64_t steps, const NoiseSchedule& sched) {
    if (steps < 1) throw UsageError("timestep grid needs at least one step");
    std::vector<Scalar> grid(static_cast<size_t>(steps) + 1);
    for (int64_t i = 0; i <= steps; ++i)
        grid[size_t(i)] = Scalar(sched.t_max) * Scalar(steps - i) / Scalar(steps);
    return grid;
}

Tensor sampler_init_noise(const SamplerConfig& cfg, const Shape& item_shape) {
    Shape full;
    full.push_back(cfg.batch);
    full.insert(full.end(), item_shape.begin(), item_shape.end());
    auto rng = make_rng(seed_combine(cfg.seed, "init"));
    return Tensor::randn(full, rng);
}

Tensor sample_with_fn(const DenoiseFn& fn, const Shape& item_shape, const SamplerConfig& cfg,
                      const NoiseSchedule& sched, SampleStats* stats,
                      const StepObserver& observer) {
    cfg.validate(sched);
    const auto grid = timestep_grid(cfg.steps, sched);

    Tensor x = sampler_init_noise(cfg, item_shape);

    Tensor x0_prev;
    Scalar h_prev = 0.0;
    bool have_prev = false;
    const bool second_order = cfg.method == SamplerConfig::Method::multistep_2nd_order;

    for (int64_t i = 0; i < cfg.steps; ++i) {
        const Scalar tc = grid[size_t(i)];
        const Scalar tn = grid[size_t(i) + 1];
        Tensor eps = fn(x, tc);
        if (stats) ++stats->denoiser_evals;
        require_shape(eps, x.shape, "denoiser prediction");

        const Scalar ac = sched.alpha(tc), sc = sched.sigma(tc);
        Tensor x0 = Tensor::zeros(x.shape);
        for (size_t k = 0; k < x.data.size(); ++k)
            x0.data[k] = (x.data[k] - sc * eps.data[k]) / ac;

        if (i + 1 == cfg.steps) {
            // Terminal interval: sigma -> 0, so the update degenerates to the
            // data prediction itself. Clamp here and only here.
            for (size_t k = 0; k < x.data.size(); ++k)
                x.data[k] = std::clamp(x0.data[k], -1.0, 1.0);
        } else {
            const Scalar an = sched.alpha(tn), sn = sched.sigma(tn);
            const Scalar h = sched.log_snr(tn) - sched.log_snr(tc);
            const Scalar ratio = sn / sc;
            const Scalar gain = -an * std::expm1(-h);
            if (second_order && have_prev) {
                const Scalar r = h_prev / h;
                const Scalar c_cur = 1.0 + 1.0 / (2.0 * r);
                const Scalar c_prev = 1.0 / (2.0 * r);
                for (size_t k = 0; k < x.data.size(); ++k)
                    x.data[k] = ratio * x.data[k] +
                                gain * (c_cur * x0.data[k] - c_prev * x0_prev.data[k]);
            } else {
                for (size_t k = 0; k < x.data.size(); ++k)
                    x.data[k] = ratio * x.data[k] + gain * x0.data[k];
            }
            h_prev = h;
            if (second_order) {
                x0_prev = std::move(x0);
                have_prev = true;
            }
        }
        if (!x.all_finite()) throw NumericError("sampler state became non-finite");
        if (observer) observer(i, tn, x);
    }
    return x;
}

Tensor sample(const ModelBundle& m, const PromptSpec& prompt, const SamplerConfig& cfg,
              SampleStats* stats, PromptVariant variant) {
    cfg.validate(m.sched);
    if (m.trained_steps <= 0)
        throw UsageError("checkpoint carries no training steps; refusing to sample");
    const auto rows = build_prompt(m.reg, prompt, variant);
    const Tensor cond_item = m.enc.encode(m.reg.table, rows, nullptr);
    const std::vector<Tensor> cond(static_cast<size_t>(cfg.batch), cond_item);
    DenoiseFn fn = [&](const Tensor& z, Scalar t) {
        std::vector<Scalar> tvec(static_cast<size_t>(cfg.batch), t);
        return denoise_predict(z, tvec, cond, m.den, &m.adapters, m.sched, nullptr);
    };
    const Shape item_shape{3, m.den.cfg.height, m.den.cfg.width};
    return sample_with_fn(fn, item_shape, cfg, m.sched, stats, nullptr);
}

std::vector<ReidRecord> write_samples(const std::string& dir, const TokenRegistry& reg,
                                      const PromptSpec& prompt, const Tensor& batch,
                                      int64_t start_index) {
    if (batch.ndim() != 4) throw DataError("write_samples expects a (B, C, H, W) batch");
    if (prompt.identity_row < 0 || prompt.identity_row >= reg.rows() || prompt.view_row < 0 ||
        prompt.view_row >= reg.rows())
        throw DataError("prompt rows outside the registry");
    const auto& id_tok = reg.tokens[size_t(prompt.identity_row)];
    const auto& view_tok = reg.tokens[size_t(prompt.view_row)];
    if (id_tok.kind != TokenKind::identity || view_tok.kind != TokenKind::modality_view)
        throw DataError("prompt rows are not an identity/view token pair");
    std::filesystem::create_directories(dir);

    std::vector<ReidRecord> records;
    const int64_t b = batch.size(0);
    for (int64_t i = 0; i < b; ++i) {
        Tensor img = Tensor::zeros({batch.size(1), batch.size(2), batch.size(3)});
        const size_t stride = img.data.size();
        for (size_t k = 0; k < stride; ++k)
            img.data[k] = (batch.data[size_t(i) * stride + k] + 1.0) * 0.5;
        const std::string name = id_tok.surface + "_" + view_tok.surface + "_" +
                                 std::to_string(start_index + i) + ".png";
        const std::string path = (std::filesystem::path(dir) / name).string();
        write_png(path, img);
        ReidRecord rec;
        rec.image_path = path;
        rec.identity = id_tok.identity;
        rec.modality = view_tok.modality;
        rec.camera_id = view_tok.camera_id;
        rec.dataset_id = view_tok.dataset_id;
        rec.is_synthetic = true;
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace dive
