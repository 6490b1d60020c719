#include "dive/toy_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "dive/errors.hpp"
#include "dive/image_io.hpp"
#include "dive/rng.hpp"

namespace fs = std::filesystem;

namespace dive {

namespace {

struct Rgb {
    Scalar r = 0, g = 0, b = 0;
};

Rgb hsv(Scalar h, Scalar s, Scalar v) {
    h = h - std::floor(h);
    const Scalar c = v * s;
    const Scalar hp = h * 6.0;
    const Scalar x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Rgb o;
    switch (int(hp)) {
        case 0: o = {c, x, 0}; break;
        case 1: o = {x, c, 0}; break;
        case 2: o = {0, c, x}; break;
        case 3: o = {0, x, c}; break;
        case 4: o = {x, 0, c}; break;
        default: o = {c, 0, x}; break;
    }
    const Scalar m = v - c;
    return {o.r + m, o.g + m, o.b + m};
}

Rgb lerp(const Rgb& a, const Rgb& b, Scalar t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

Scalar luma(const Rgb& c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

Scalar uniform(std::mt19937_64& rng, Scalar lo, Scalar hi) {
    return std::uniform_real_distribution<Scalar>(lo, hi)(rng);
}

// Per-identity appearance: proportions, stripe pattern, palette. Identity
// separation must survive low-resolution generation, so most of the signal
// is low-frequency (torso width, palette value levels) rather than the
// stripes alone.
struct IdentityStyle {
    Scalar torso_half_w, torso_top, torso_bottom, leg_bottom, leg_gap, head_r, taper;
    int64_t stripe_period;
    Scalar stripe_phase;
    bool stripe_vertical;
    Rgb c0, c1, head;
};

IdentityStyle identity_style(const ToyCorpusConfig& cfg, const std::string& dataset_id,
                             int64_t identity) {
    auto rng = make_rng(seed_combine(seed_combine(seed_combine(cfg.seed, "style"), dataset_id),
                                     uint64_t(identity)));
    IdentityStyle s;
    s.torso_half_w = uniform(rng, 0.20, 0.33);
    s.torso_top = uniform(rng, 0.28, 0.34);
    s.torso_bottom = uniform(rng, 0.62, 0.72);
    s.leg_bottom = uniform(rng, 0.88, 0.95);
    s.leg_gap = uniform(rng, 0.05, 0.14);
    s.head_r = uniform(rng, 0.09, 0.13);
    s.taper = std::uniform_int_distribution<int>(0, 1)(rng) ? 0.35 : 0.0;
    s.stripe_period = std::uniform_int_distribution<int64_t>(2, 5)(rng);
    s.stripe_phase = uniform(rng, 0.0, Scalar(s.stripe_period));
    s.stripe_vertical = std::uniform_int_distribution<int>(0, 1)(rng) != 0;
    const Scalar h0 = uniform(rng, 0.0, 1.0);
    s.c0 = hsv(h0, 0.9, uniform(rng, 0.5, 0.95));
    s.c1 = hsv(h0 + uniform(rng, 0.3, 0.65), 0.9, uniform(rng, 0.35, 0.9));
    s.head = lerp(s.c0, {1.0, 1.0, 1.0}, 0.35);
    return s;
}

// Per (modality, camera) framing bias and background.
struct CameraStyle {
    Scalar dx_bias, dy_bias, scale_bias;
    Rgb bg;            // visible background
    Scalar bg_grad;    // vertical gradient amplitude
    Scalar ir_bg;      // infrared background level
};

CameraStyle camera_style(const ToyCorpusConfig& cfg, const std::string& dataset_id,
                         Modality modality, int64_t camera) {
    auto rng = make_rng(seed_combine(
        seed_combine(seed_combine(seed_combine(cfg.seed, "camera"), dataset_id),
                     uint64_t(modality == Modality::infrared)),
        uint64_t(camera)));
    CameraStyle c;
    c.dx_bias = uniform(rng, -1.2, 1.2);
    c.dy_bias = uniform(rng, -1.0, 1.0);
    c.scale_bias = uniform(rng, 0.95, 1.05);
    c.bg = hsv(uniform(rng, 0.0, 1.0), 0.25, uniform(rng, 0.45, 0.8));
    c.bg_grad = uniform(rng, -0.08, 0.08);
    c.ir_bg = uniform(rng, 0.15, 0.35);
    return c;
}

}  // namespace

void ToyCorpusConfig::validate() const {
    if (vi_identities < 1) throw UsageError("toy corpus needs at least one VI identity");
    if (ext_identities < 0) throw UsageError("negative external identity count");
    if (cameras_per_modality < 1) throw UsageError("toy corpus needs at least one camera");
    if (images_per_cell < 1) throw UsageError("toy corpus needs at least one image per cell");
    if (height < 8 || width < 8) throw UsageError("toy images must be at least 8x8");
    if (vi_dataset_id.empty() || ext_dataset_id.empty()) throw UsageError("empty dataset id");
    if (vi_dataset_id == ext_dataset_id)
        throw UsageError("VI and external dataset ids must differ");
}

ToyRender render_toy_image(const ToyCorpusConfig& cfg, const std::string& dataset_id,
                           int64_t identity, Modality modality, int64_t camera, int64_t index) {
    cfg.validate();
    const IdentityStyle st = identity_style(cfg, dataset_id, identity);
    const CameraStyle cam = camera_style(cfg, dataset_id, modality, camera);

    auto jitter_rng = make_rng(seed_combine(
        seed_combine(seed_combine(seed_combine(seed_combine(seed_combine(cfg.seed, "jitter"),
                                                            dataset_id),
                                               uint64_t(identity)),
                                  uint64_t(modality == Modality::infrared)),
                     uint64_t(camera)),
        uint64_t(index)));
    const Scalar W = Scalar(cfg.width), H = Scalar(cfg.height);
    const Scalar dx = cam.dx_bias + uniform(jitter_rng, -1.2, 1.2) * (W / 16.0);
    const Scalar dy = cam.dy_bias + uniform(jitter_rng, -1.0, 1.0) * (H / 32.0);
    const Scalar scale = cam.scale_bias * uniform(jitter_rng, 0.92, 1.08);

    const Scalar cx = W / 2.0 + dx;
    const Scalar torso_top = st.torso_top * H + dy;
    const Scalar torso_bottom = st.torso_bottom * H + dy;
    const Scalar leg_bottom = st.leg_bottom * H + dy;
    const Scalar half_w = st.torso_half_w * W * scale;
    const Scalar head_r = st.head_r * H * scale;
    const Scalar head_cy = torso_top - head_r - H / 32.0;
    const Scalar leg_gap = st.leg_gap * W;

    ToyRender out;
    out.image = Tensor::zeros({3, cfg.height, cfg.width});
    out.mask = Tensor::zeros({1, cfg.height, cfg.width});

    std::mt19937_64 noise_rng;
    std::normal_distribution<Scalar> noise(0.0, 0.035);
    const bool infrared = modality == Modality::infrared;
    if (infrared)
        noise_rng = make_rng(seed_combine(
            seed_combine(seed_combine(seed_combine(seed_combine(cfg.seed, "noise"), dataset_id),
                                      uint64_t(identity)),
                         uint64_t(camera)),
            uint64_t(index)));

    for (int64_t y = 0; y < cfg.height; ++y) {
        for (int64_t x = 0; x < cfg.width; ++x) {
            const Scalar py = Scalar(y) + 0.5, px = Scalar(x) + 0.5;
            bool fig = false;
            Rgb color;
            const Scalar hd = (px - cx) * (px - cx) + (py - head_cy) * (py - head_cy);
            if (hd <= head_r * head_r) {
                fig = true;
                color = st.head;
            } else if (py >= torso_top && py <= torso_bottom) {
                const Scalar frac = (py - torso_top) / std::max(torso_bottom - torso_top, 1e-6);
                const Scalar w_here = half_w * (1.0 - st.taper * frac);
                if (std::abs(px - cx) <= w_here) {
                    fig = true;
                    const Scalar coord = st.stripe_vertical ? px - cx : py - torso_top;
                    const int64_t band =
                        int64_t(std::floor(coord / Scalar(st.stripe_period) + st.stripe_phase));
                    color = (band % 2 == 0) ? st.c0 : st.c1;
                }
            } else if (py > torso_bottom && py <= leg_bottom) {
                const Scalar off = std::abs(px - cx);
                if (off <= half_w * 0.8 && off >= leg_gap / 2.0) {
                    fig = true;
                    color = lerp(st.c1, {0.0, 0.0, 0.0}, 0.4);
                }
            }

            Scalar r, g, b;
            if (infrared) {
                Scalar v;
                if (fig) {
                    v = 1.0 - luma(color);
                } else {
                    v = cam.ir_bg + cam.bg_grad * (py / H - 0.5);
                }
                v += noise(noise_rng);
                v = std::clamp(v, Scalar(0.0), Scalar(1.0));
                r = g = b = v;
            } else {
                Rgb c = fig ? color : lerp(cam.bg, {1.0, 1.0, 1.0}, cam.bg_grad * (py / H - 0.5));
                r = std::clamp(c.r, Scalar(0.0), Scalar(1.0));
                g = std::clamp(c.g, Scalar(0.0), Scalar(1.0));
                b = std::clamp(c.b, Scalar(0.0), Scalar(1.0));
            }
            out.image.at(0, y, x) = r;
            out.image.at(1, y, x) = g;
            out.image.at(2, y, x) = b;
            if (fig) out.mask.at(0, y, x) = 1.0;
        }
    }
    return out;
}

namespace {

std::string cell_basename(const std::string& dataset_id, int64_t identity, Modality modality,
                          int64_t camera, int64_t index) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "_%03lld_%s_c%lld_%02lld.png",
                  static_cast<long long>(identity), to_string(modality).c_str(),
                  static_cast<long long>(camera), static_cast<long long>(index));
    return dataset_id + buf;
}

}  // namespace

ToyCorpus write_toy_corpus(const std::string& dir, const ToyCorpusConfig& cfg) {
    cfg.validate();
    const fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    ToyCorpus out;
    std::vector<ReidRecord> vi, ext;
    auto emit = [&](const std::string& dataset_id, int64_t identity, Modality modality,
                    int64_t camera, int64_t index, std::vector<ReidRecord>& sink) {
        const ToyRender r = render_toy_image(cfg, dataset_id, identity, modality, camera, index);
        const std::string base = cell_basename(dataset_id, identity, modality, camera, index);
        const std::string image_path = (root / "images" / base).string();
        write_png(image_path, r.image);
        Tensor mask3 = Tensor::zeros({3, cfg.height, cfg.width});
        for (int64_t i = 0; i < cfg.height * cfg.width; ++i)
            mask3.data[size_t(i)] = mask3.data[size_t(cfg.height * cfg.width + i)] =
                mask3.data[size_t(2 * cfg.height * cfg.width + i)] = r.mask.data[size_t(i)];
        write_png((root / "masks" / base).string(), mask3);
        ReidRecord rec;
        rec.image_path = image_path;
        rec.identity = identity;
        rec.modality = modality;
        rec.camera_id = camera;
        rec.dataset_id = dataset_id;
        sink.push_back(std::move(rec));
    };

    for (int64_t id = 0; id < cfg.vi_identities; ++id)
        for (Modality m : {Modality::visible, Modality::infrared})
            for (int64_t cam = 0; cam < cfg.cameras_per_modality; ++cam)
                for (int64_t i = 0; i < cfg.images_per_cell; ++i)
                    emit(cfg.vi_dataset_id, id, m, cam, i, vi);
    for (int64_t id = 0; id < cfg.ext_identities; ++id)
        for (int64_t cam = 0; cam < cfg.cameras_per_modality; ++cam)
            for (int64_t i = 0; i < cfg.images_per_cell; ++i)
                emit(cfg.ext_dataset_id, id, Modality::visible, cam, i, ext);

    out.vi = ReidCorpus::from_records(std::move(vi));
    out.ext = ReidCorpus::from_records(std::move(ext));
    out.vi_manifest = (root / "vi_manifest.tsv").string();
    out.ext_manifest = (root / "ext_manifest.tsv").string();
    // Manifests carry paths relative to their own directory so the corpus
    // tree is relocatable and reruns into different roots stay comparable.
    auto relative_copy = [](const ReidCorpus& c) {
        ReidCorpus r = c;
        for (auto& rec : r.records)
            rec.image_path = (fs::path("images") / fs::path(rec.image_path).filename()).string();
        return r;
    };
    write_manifest(relative_copy(out.vi), out.vi_manifest);
    write_manifest(relative_copy(out.ext), out.ext_manifest);
    return out;
}

std::string toy_mask_path(const std::string& image_path) {
    const fs::path p(image_path);
    return (p.parent_path().parent_path() / "masks" / p.filename()).string();
}

}  // namespace dive
