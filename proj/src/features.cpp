#include "dive/features.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dive/image_io.hpp"
#include "dive/rng.hpp"
#include "dive/trainer.hpp"

namespace dive {

namespace {

void check_image(const Tensor& image, const char* what) {
    if (image.ndim() != 3 || image.size(0) != 3)
        throw DataError(std::string(what) + " expects a (3, H, W) image");
}

// Loads every record once; the trained heads iterate over these rows.
struct LoadedCorpus {
    Tensor stats;                 // (N, stat_dim)
    std::vector<int64_t> labels;  // class indices, filled by the caller
};

Tensor forward_embed(const ToyEmbedder& e, const Tensor& stats_rows, Tensor* hidden_pre = nullptr,
                     Tensor* hidden = nullptr) {
    Tensor h_pre = e.l1.forward(stats_rows);
    Tensor h = nn::silu(h_pre);
    Tensor out = e.l2.forward(h);
    if (hidden_pre) *hidden_pre = std::move(h_pre);
    if (hidden) *hidden = h;
    return out;
}

}  // namespace

Tensor RawPixelExtractor::extract(const Tensor& image) const {
    check_image(image, "raw pixel extractor");
    Tensor resized = resize_bilinear(image, height, width);
    return resized.reshaped({dim()});
}

Tensor cell_stats(const Tensor& image, int64_t grid_h, int64_t grid_w) {
    check_image(image, "cell statistics");
    const int64_t h = image.size(1), w = image.size(2);
    if (grid_h < 1 || grid_w < 1 || grid_h > h || grid_w > w)
        throw DataError("cell grid must be at least 1x1 and no finer than the image");
    Tensor out({3 * grid_h * grid_w});
    int64_t k = 0;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t gy = 0; gy < grid_h; ++gy)
            for (int64_t gx = 0; gx < grid_w; ++gx, ++k) {
                const int64_t y0 = gy * h / grid_h, y1 = (gy + 1) * h / grid_h;
                const int64_t x0 = gx * w / grid_w, x1 = (gx + 1) * w / grid_w;
                Scalar sum = 0;
                for (int64_t y = y0; y < y1; ++y)
                    for (int64_t x = x0; x < x1; ++x) sum += image.at(c, y, x);
                out[k] = sum / Scalar((y1 - y0) * (x1 - x0));
            }
    return out;
}

void ToyEmbedderConfig::validate() const {
    if (grid_h < 1 || grid_w < 1) throw UsageError("embedder grid must be at least 1x1");
    if (hidden < 1 || embed_dim < 1) throw UsageError("embedder layer widths must be positive");
    if (steps < 1) throw UsageError("embedder training needs at least one step");
    if (batch < 1) throw UsageError("embedder batch size must be positive");
    if (!(learning_rate > 0)) throw UsageError("embedder learning rate must be positive");
}

Tensor ToyEmbedder::extract(const Tensor& image) const {
    Tensor stats = cell_stats(image, cfg.grid_h, cfg.grid_w).reshaped({1, 3 * cfg.grid_h * cfg.grid_w});
    return forward_embed(*this, stats).reshaped({cfg.embed_dim});
}

ToyEmbedder train_toy_embedder(const ReidCorpus& corpus, const ToyEmbedderConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) throw DataError("cannot train an embedder on an empty corpus");
    if (corpus.identity_set.size() < 2)
        throw DataError("embedder training needs at least two identities");

    ToyEmbedder e;
    e.cfg = cfg;
    e.classes.assign(corpus.identity_set.begin(), corpus.identity_set.end());
    std::map<int64_t, int64_t> class_of;
    for (size_t i = 0; i < e.classes.size(); ++i) class_of[e.classes[i]] = int64_t(i);

    const int64_t n = int64_t(corpus.records.size());
    const int64_t stat_dim = 3 * cfg.grid_h * cfg.grid_w;
    LoadedCorpus data;
    data.stats = Tensor({n, stat_dim});
    for (int64_t i = 0; i < n; ++i) {
        const ReidRecord& r = corpus.records[size_t(i)];
        Tensor row = cell_stats(read_png(r.image_path), cfg.grid_h, cfg.grid_w);
        for (int64_t j = 0; j < stat_dim; ++j) data.stats.at(i, j) = row[j];
        data.labels.push_back(class_of.at(r.identity));
    }

    auto rng = make_rng(seed_combine(cfg.seed, "toy-embed"));
    e.l1 = nn::Linear::init(cfg.hidden, stat_dim, rng);
    e.l2 = nn::Linear::init(cfg.embed_dim, cfg.hidden, rng);
    e.head = nn::Linear::init(int64_t(e.classes.size()), cfg.embed_dim, rng);
    for (nn::Linear* l : {&e.l1, &e.l2, &e.head}) {
        l->trainable = true;
        l->alloc_grads();
    }

    nn::Adam opt;
    opt.lr = cfg.learning_rate;
    for (nn::Linear* l : {&e.l1, &e.l2, &e.head}) {
        opt.add(l->w, l->gw);
        opt.add(l->b, l->gb);
    }

    for (int64_t step = 1; step <= cfg.steps; ++step) {
        const std::vector<int64_t> idx = batch_indices(cfg.seed, step, n, cfg.batch);
        Tensor x({int64_t(idx.size()), stat_dim});
        std::vector<int64_t> labels;
        for (size_t b = 0; b < idx.size(); ++b) {
            for (int64_t j = 0; j < stat_dim; ++j) x.at(int64_t(b), j) = data.stats.at(idx[b], j);
            labels.push_back(data.labels[size_t(idx[b])]);
        }

        opt.zero_grads();
        Tensor h_pre, h;
        Tensor embed = forward_embed(e, x, &h_pre, &h);
        Tensor logits = e.head.forward(embed);
        Tensor glogits;
        nn::cross_entropy(logits, labels, &glogits);
        Tensor gembed = e.head.backward(embed, glogits);
        Tensor gh = e.l2.backward(h, gembed);
        Tensor gh_pre = nn::silu_backward(h_pre, gh);
        e.l1.backward(x, gh_pre);
        opt.step();
    }

    Tensor logits = e.head.forward(forward_embed(e, data.stats));
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t k = 1; k < logits.size(1); ++k)
            if (logits.at(i, k) > logits.at(i, best)) best = k;
        if (best == data.labels[size_t(i)]) ++correct;
    }
    e.train_accuracy = Scalar(correct) / Scalar(n);
    return e;
}

Tensor ModalityClassifier::stats(const Tensor& image) {
    check_image(image, "modality statistics");
    const int64_t pixels = image.size(1) * image.size(2);
    Scalar rg = 0, gb = 0, rb = 0, spread = 0, luma_sum = 0, luma_sq = 0;
    for (int64_t p = 0; p < pixels; ++p) {
        const Scalar r = image.data[size_t(p)];
        const Scalar g = image.data[size_t(pixels + p)];
        const Scalar b = image.data[size_t(2 * pixels + p)];
        rg += std::abs(r - g);
        gb += std::abs(g - b);
        rb += std::abs(r - b);
        spread += std::max({r, g, b}) - std::min({r, g, b});
        const Scalar luma = 0.299 * r + 0.587 * g + 0.114 * b;
        luma_sum += luma;
        luma_sq += luma * luma;
    }
    const Scalar inv = 1.0 / Scalar(pixels);
    const Scalar luma_mean = luma_sum * inv;
    Tensor out({6});
    out[0] = rg * inv;
    out[1] = gb * inv;
    out[2] = rb * inv;
    out[3] = spread * inv;
    out[4] = luma_mean;
    out[5] = std::sqrt(std::max<Scalar>(luma_sq * inv - luma_mean * luma_mean, 0.0));
    return out;
}

Modality ModalityClassifier::predict(const Tensor& image) const {
    Tensor logits = head.forward(stats(image).reshaped({1, 6}));
    return logits.at(0, 1) > logits.at(0, 0) ? Modality::infrared : Modality::visible;
}

Scalar ModalityClassifier::infrared_probability(const Tensor& image) const {
    Tensor logits = head.forward(stats(image).reshaped({1, 6}));
    const Scalar d = logits.at(0, 1) - logits.at(0, 0);
    return 1.0 / (1.0 + std::exp(-d));
}

ModalityClassifier train_modality_classifier(const ReidCorpus& corpus,
                                             const ModalityClassifierConfig& cfg) {
    if (cfg.steps < 1) throw UsageError("classifier training needs at least one step");
    if (!(cfg.learning_rate > 0)) throw UsageError("classifier learning rate must be positive");
    if (corpus.empty()) throw DataError("cannot train a modality classifier on an empty corpus");
    if (corpus.modality_views.size() < 2)
        throw DataError("modality classifier training needs both modalities");

    const int64_t n = int64_t(corpus.records.size());
    Tensor x({n, 6});
    std::vector<int64_t> labels;
    for (int64_t i = 0; i < n; ++i) {
        const ReidRecord& r = corpus.records[size_t(i)];
        Tensor row = ModalityClassifier::stats(read_png(r.image_path));
        for (int64_t j = 0; j < 6; ++j) x.at(i, j) = row[j];
        labels.push_back(r.modality == Modality::infrared ? 1 : 0);
    }

    ModalityClassifier clf;
    auto rng = make_rng(seed_combine(cfg.seed, "modality-clf"));
    clf.head = nn::Linear::init(2, 6, rng, true, 0.01);
    clf.head.trainable = true;
    clf.head.alloc_grads();

    nn::Adam opt;
    opt.lr = cfg.learning_rate;
    opt.add(clf.head.w, clf.head.gw);
    opt.add(clf.head.b, clf.head.gb);

    for (int64_t step = 0; step < cfg.steps; ++step) {
        opt.zero_grads();
        Tensor logits = clf.head.forward(x);
        Tensor glogits;
        nn::cross_entropy(logits, labels, &glogits);
        clf.head.backward(x, glogits);
        clf.head.gw.add_(clf.head.w, cfg.weight_decay);
        opt.step();
    }

    Tensor logits = clf.head.forward(x);
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i)
        if ((logits.at(i, 1) > logits.at(i, 0)) == (labels[size_t(i)] == 1)) ++correct;
    clf.train_accuracy = Scalar(correct) / Scalar(n);
    return clf;
}

Scalar modality_accuracy(const ReidCorpus& corpus, const ModalityClassifier& clf) {
    if (corpus.empty()) throw DataError("cannot score an empty corpus");
    int64_t correct = 0;
    for (const ReidRecord& r : corpus.records)
        if (clf.predict(read_png(r.image_path)) == r.modality) ++correct;
    return Scalar(correct) / Scalar(corpus.records.size());
}

FeatureSet features_of_corpus(const ReidCorpus& corpus, const FeatureExtractor& ex,
                              bool normalize) {
    if (corpus.empty()) throw DataError("cannot extract features from an empty corpus");
    FeatureSet fs;
    const int64_t n = int64_t(corpus.records.size());
    fs.matrix = Tensor({n, ex.dim()});
    for (int64_t i = 0; i < n; ++i) {
        const ReidRecord& r = corpus.records[size_t(i)];
        Tensor row = ex.extract(read_png(r.image_path));
        require_shape(row, {ex.dim()}, "extracted feature row");
        for (int64_t j = 0; j < ex.dim(); ++j) fs.matrix.at(i, j) = row[j];
        fs.identities.push_back(r.identity);
        fs.modalities.push_back(r.modality);
        fs.cameras.push_back(r.camera_id);
    }
    return normalize ? normalize_rows(std::move(fs)) : fs;
}

}  // namespace dive
