#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dive/eval.hpp"
#include "dive/nn.hpp"
#include "dive/reid_dataset.hpp"
#include "dive/tensor.hpp"

namespace dive {

// Maps a (3, H, W) image in [0, 1] to a fixed-length feature row. A heavier
// external embedding model can be plugged in behind this interface.
struct FeatureExtractor {
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual int64_t dim() const = 0;
    virtual Tensor extract(const Tensor& image) const = 0;
};

// Resize and flatten: no learned state, for exercising the metric kernels.
struct RawPixelExtractor final : FeatureExtractor {
    int64_t height = 16, width = 8;

    std::string name() const override { return "raw-pixel"; }
    int64_t dim() const override { return 3 * height * width; }
    Tensor extract(const Tensor& image) const override;
};

// Per-cell channel means over a fixed grid; cells absorb pixel noise while
// keeping silhouette and palette information.
Tensor cell_stats(const Tensor& image, int64_t grid_h, int64_t grid_w);

struct ToyEmbedderConfig {
    int64_t grid_h = 8, grid_w = 4;
    int64_t hidden = 64;
    int64_t embed_dim = 32;
    int64_t steps = 400;
    int64_t batch = 32;
    Scalar learning_rate = 3e-3;
    uint64_t seed = 0;

    void validate() const;  // throws UsageError
};

// Identity-supervised embedding over cell statistics, trained on both
// modalities at once so same-identity features align across them. Features
// are the layer under the classification head.
struct ToyEmbedder final : FeatureExtractor {
    ToyEmbedderConfig cfg;
    nn::Linear l1, l2, head;       // stats -> hidden -> embedding -> identity logits
    std::vector<int64_t> classes;  // identity label per logit column
    Scalar train_accuracy = 0.0;

    std::string name() const override { return "toy-embed"; }
    int64_t dim() const override { return cfg.embed_dim; }
    Tensor extract(const Tensor& image) const override;
};

ToyEmbedder train_toy_embedder(const ReidCorpus& corpus, const ToyEmbedderConfig& cfg);

// Logistic head over global channel-dispersion statistics. Infrared frames
// have (near-)equal channels, visible frames do not, so these six numbers
// separate the modalities without seeing any spatial structure.
struct ModalityClassifier {
    nn::Linear head;  // (2, 6)
    Scalar train_accuracy = 0.0;

    static Tensor stats(const Tensor& image);  // (6)
    Modality predict(const Tensor& image) const;
    Scalar infrared_probability(const Tensor& image) const;
};

struct ModalityClassifierConfig {
    int64_t steps = 300;
    Scalar learning_rate = 0.05;
    Scalar weight_decay = 1e-2;  // keeps the boundary between the clusters
    uint64_t seed = 0;
};

ModalityClassifier train_modality_classifier(const ReidCorpus& corpus,
                                             const ModalityClassifierConfig& cfg = {});

// Fraction of records whose predicted modality matches the label.
Scalar modality_accuracy(const ReidCorpus& corpus, const ModalityClassifier& clf);

// Extracts every record's image into one labeled feature set, optionally
// L2-normalizing rows (the default used by the distance metrics).
FeatureSet features_of_corpus(const ReidCorpus& corpus, const FeatureExtractor& ex,
                              bool normalize = true);

}  // namespace dive
