#include "dive/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "dive/errors.hpp"
#include "dive/image_io.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

std::string format_scalar(Scalar v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Scalar parse_scalar(const std::string& s) {
    try {
        size_t pos = 0;
        const Scalar v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("malformed numeric field in checkpoint: " + s);
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (!std::isfinite(learning_rate) || learning_rate < 0.0)
        throw UsageError("learning_rate must be finite and non-negative");
    if (batch_size < 1) throw UsageError("batch_size must be at least 1");
    if (total_steps < 0) throw UsageError("total_steps must be non-negative");
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
        throw UsageError("image size must be positive multiples of 4 (trunk downsampling)");
    if (checkpoint_every < 1) throw UsageError("checkpoint_every must be at least 1");
    if (lora_rank < 1) throw UsageError("lora_rank must be at least 1");
    if (!std::isfinite(lora_scale)) throw UsageError("lora_scale must be finite");
}

ModelBundle make_model(const TrainConfig& cfg, TokenRegistry reg, uint64_t model_seed) {
    cfg.validate();
    DenoiserConfig dc;
    dc.height = cfg.height;
    dc.width = cfg.width;
    dc.d_text = reg.d_text;
    dc.seed = model_seed;
    ModelBundle m{Denoiser::create(dc),
                  AdapterSet{},
                  std::move(reg),
                  PromptEncoder::create(dc.d_text, seed_combine(model_seed, "encoder")),
                  NoiseSchedule{},
                  0,
                  0};
    auto rng = make_rng(seed_combine(model_seed, "adapters"));
    m.adapters = attach_adapters(m.den, cfg.lora_rank, cfg.lora_scale, rng);
    return m;
}

void save_train_config(const TrainConfig& cfg, CheckpointWriter& w) {
    w.put_string("train/learning_rate", format_scalar(cfg.learning_rate));
    w.put_i64("train/batch_size", cfg.batch_size);
    w.put_i64("train/total_steps", cfg.total_steps);
    w.put_i64("train/height", cfg.height);
    w.put_i64("train/width", cfg.width);
    w.put_i64("train/horizontal_flip", cfg.horizontal_flip ? 1 : 0);
    w.put_i64("train/seed", int64_t(cfg.seed));
    w.put_i64("train/checkpoint_every", cfg.checkpoint_every);
    w.put_i64("train/lora_rank", cfg.lora_rank);
    w.put_string("train/lora_scale", format_scalar(cfg.lora_scale));
}

TrainConfig load_train_config(const CheckpointReader& r) {
    TrainConfig cfg;
    cfg.learning_rate = parse_scalar(r.string("train/learning_rate"));
    cfg.batch_size = r.i64("train/batch_size");
    cfg.total_steps = r.i64("train/total_steps");
    cfg.height = r.i64("train/height");
    cfg.width = r.i64("train/width");
    cfg.horizontal_flip = r.i64("train/horizontal_flip") != 0;
    cfg.seed = uint64_t(r.i64("train/seed"));
    cfg.checkpoint_every = r.i64("train/checkpoint_every");
    cfg.lora_rank = r.i64("train/lora_rank");
    cfg.lora_scale = parse_scalar(r.string("train/lora_scale"));
    return cfg;
}

void save_model(const ModelBundle& m, CheckpointWriter& w) {
    save_denoiser(m.den, w);
    save_adapters(m.adapters, w);
    save_registry(m.reg, w);
    w.put_i64("encoder/mode", m.enc.mode == PromptEncoder::Mode::lookup ? 0 : 1);
    w.put_i64("encoder/seed", int64_t(m.enc.seed));
    w.put_i64("sched/t_max", m.sched.t_max);
    w.put_i64("model/ext_id_offset", m.ext_id_offset);
    w.put_i64("model/trained_steps", m.trained_steps);
}

ModelBundle load_model(const CheckpointReader& r) {
    ModelBundle m{load_denoiser(r),
                  load_adapters(r),
                  load_registry(r),
                  PromptEncoder{},
                  NoiseSchedule{},
                  r.i64("model/ext_id_offset"),
                  r.i64("model/trained_steps")};
    const auto mode = r.i64("encoder/mode") == 0 ? PromptEncoder::Mode::lookup
                                                 : PromptEncoder::Mode::mixing;
    m.enc = PromptEncoder::create(m.reg.d_text, uint64_t(r.i64("encoder/seed")), mode);
    m.sched.t_max = r.i64("sched/t_max");
    if (m.reg.d_text != m.den.cfg.d_text)
        throw DataError("checkpoint registry and denoiser disagree on text width");
    return m;
}

int64_t register_corpus_tokens(TokenRegistry& reg, const ReidCorpus& vi, const ReidCorpus& ext,
                               uint64_t seed) {
    const int64_t offset = ext.empty() ? 0 : default_id_offset(vi);
    for (int64_t p : vi.identity_set)
        reg.register_identity(p, seed_combine(seed_combine(seed, "identity"), uint64_t(p)));
    for (int64_t p : ext.identity_set) {
        const int64_t shifted = p + offset;
        reg.register_identity(shifted,
                              seed_combine(seed_combine(seed, "identity"), uint64_t(shifted)));
    }
    std::set<std::tuple<std::string, int, int64_t>> views;
    for (const ReidCorpus* c : {&vi, &ext})
        for (const auto& rec : c->records)
            views.insert({rec.dataset_id, int(rec.modality), rec.camera_id});
    for (const auto& [dataset, mod, cam] : views)
        reg.register_view(Modality(mod), cam, dataset);
    return offset;
}

std::vector<TrainingExample> build_training_set(const ReidCorpus& vi, const ReidCorpus& ext,
                                                const TokenRegistry& reg, int64_t ext_id_offset,
                                                int64_t height, int64_t width) {
    std::vector<TrainingExample> out;
    out.reserve(vi.records.size() + ext.records.size());
    auto append = [&](const ReidCorpus& corpus, int64_t offset) {
        for (const auto& rec : corpus.records) {
            TrainingExample ex;
            Tensor img = resize_bilinear(read_png(rec.image_path), height, width);
            img.scale_(2.0);
            img.add_(Tensor::full(img.shape, -1.0));
            ex.image = std::move(img);
            ex.identity_row = reg.row_of_identity(rec.identity + offset);
            ex.view_row = reg.row_of_view(rec.modality, rec.camera_id, rec.dataset_id);
            out.push_back(std::move(ex));
        }
    };
    append(vi, 0);
    append(ext, ext_id_offset);
    return out;
}

std::vector<int64_t> batch_indices(uint64_t seed, int64_t step, int64_t n, int64_t batch_size) {
    if (n < 1) throw UsageError("cannot sample batches from an empty training set");
    auto rng = make_rng(seed_combine(seed_combine(seed, "batch"), uint64_t(step)));
    std::uniform_int_distribution<int64_t> pick(0, n - 1);
    std::vector<int64_t> idx(static_cast<size_t>(batch_size));
    for (auto& i : idx) i = pick(rng);
    return idx;
}

Tensor flip_horizontal(const Tensor& image) {
    if (image.ndim() != 3) throw DataError("flip_horizontal expects a (C, H, W) image");
    const int64_t c = image.size(0), h = image.size(1), w = image.size(2);
    Tensor out = Tensor::zeros(image.shape);
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) out.at(ci, y, x) = image.at(ci, y, w - 1 - x);
    return out;
}

Trainer::Trainer(TrainConfig cfg, ModelBundle bundle)
    : cfg_(std::move(cfg)), bundle_(std::move(bundle)) {
    cfg_.validate();
    table_grad_ = Tensor::zeros(bundle_.reg.table.shape);
    bind_optimizer();
}

void Trainer::bind_optimizer() {
    opt_ = nn::Adam{};
    opt_.lr = cfg_.learning_rate;
    bundle_.adapters.alloc_grads();
    opt_.add(bundle_.reg.table, table_grad_);
    for (auto& blk : bundle_.adapters.blocks)
        for (LoraAdapter* ad : {&blk.q, &blk.k, &blk.v}) {
            opt_.add(ad->a, ad->ga);
            opt_.add(ad->b, ad->gb);
        }
}

Scalar Trainer::run_step(const std::vector<TrainingExample>& examples, int64_t step) {
    if (examples.empty()) throw UsageError("training set is empty");
    const auto idx =
        batch_indices(cfg_.seed, step, int64_t(examples.size()), cfg_.batch_size);
    std::vector<TrainingExample> batch;
    batch.reserve(idx.size());
    auto flip_rng = make_rng(seed_combine(seed_combine(cfg_.seed, "augment"), uint64_t(step)));
    std::uniform_int_distribution<int> coin(0, 1);
    for (int64_t i : idx) {
        TrainingExample ex = examples[static_cast<size_t>(i)];
        if (cfg_.horizontal_flip && coin(flip_rng) == 1) ex.image = flip_horizontal(ex.image);
        batch.push_back(std::move(ex));
    }
    auto noise_rng = make_rng(seed_combine(seed_combine(cfg_.seed, "noise"), uint64_t(step)));
    const NoiseDraw draw =
        draw_noise(int64_t(batch.size()), batch.front().image.shape, bundle_.sched, noise_rng);

    opt_.zero_grads();
    Scalar loss = 0.0;
    try {
        loss = training_loss_with_draw(batch, draw, bundle_.den, &bundle_.adapters, bundle_.reg,
                                       bundle_.enc, bundle_.sched, &table_grad_);
    } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << "training aborted at step " << step << " (batch indices";
        for (int64_t i : idx) msg << ' ' << i;
        msg << "): " << e.what();
        throw NumericError(msg.str());
    }
    bundle_.reg.mask_frozen(table_grad_);
    opt_.step();
    return loss;
}

TrainResult Trainer::run(const std::vector<TrainingExample>& examples,
                         const std::string& checkpoint_dir,
                         const std::string& loss_curve_path) {
    if (examples.empty()) throw UsageError("training set is empty");
    if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);
    std::ofstream curve;
    if (!loss_curve_path.empty()) {
        curve.open(loss_curve_path,
                   bundle_.trained_steps > 0 ? std::ios::app : std::ios::trunc);
        if (!curve) throw DataError("cannot open loss curve file: " + loss_curve_path);
    }
    TrainResult res;
    for (int64_t s = bundle_.trained_steps + 1; s <= cfg_.total_steps; ++s) {
        const Scalar loss = run_step(examples, s);
        bundle_.trained_steps = s;
        res.curve.push_back({s, loss});
        if (curve.is_open()) curve << s << '\t' << format_scalar(loss) << '\n';
        if (!checkpoint_dir.empty() &&
            (s % cfg_.checkpoint_every == 0 || s == cfg_.total_steps)) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06" PRId64 ".dive", s);
            save(checkpoint_dir + "/" + name);
            save(checkpoint_dir + "/latest.dive");
        }
    }
    return res;
}

void Trainer::save(const std::string& path) const {
    CheckpointWriter w;
    save_model(bundle_, w);
    save_train_config(cfg_, w);
    w.put_i64("opt/steps", opt_.steps);
    for (size_t i = 0; i < opt_.slots.size(); ++i) {
        w.put_tensor("opt/m/" + std::to_string(i), opt_.slots[i].m);
        w.put_tensor("opt/v/" + std::to_string(i), opt_.slots[i].v);
    }
    w.save(path);
}

std::unique_ptr<Trainer> Trainer::load(const std::string& path, const TrainConfig* override_cfg) {
    CheckpointReader r(path);
    auto t = std::make_unique<Trainer>(override_cfg ? *override_cfg : load_train_config(r),
                                       load_model(r));
    if (r.has("opt/steps")) {
        t->opt_.steps = r.i64("opt/steps");
        for (size_t i = 0; i < t->opt_.slots.size(); ++i) {
            Tensor m = r.tensor("opt/m/" + std::to_string(i));
            Tensor v = r.tensor("opt/v/" + std::to_string(i));
            require_shape(m, t->opt_.slots[i].value->shape, "optimizer moment");
            require_shape(v, t->opt_.slots[i].value->shape, "optimizer moment");
            t->opt_.slots[i].m = std::move(m);
            t->opt_.slots[i].v = std::move(v);
        }
    }
    return t;
}

}  // namespace dive
