#pragma once

#include <cstdint>
#include <string>

#include "dive/reid_dataset.hpp"
#include "dive/tensor.hpp"

namespace dive {

// Procedural two-modality person corpus. Each identity is a rendered figure
// (head, striped torso, legs) with its own proportions, stripe pattern, and
// palette; visible images are chromatic, infrared images are inverted
// grayscale with channel-shared sensor noise (so R == G == B exactly).
// Cameras differ by background and framing bias; per-image jitter supplies
// intra-view variation. Everything is a pure function of (seed, record key).
struct ToyCorpusConfig {
    int64_t vi_identities = 8;         // dual-modality identities
    int64_t ext_identities = 4;        // visible-only identities
    int64_t cameras_per_modality = 2;
    int64_t images_per_cell = 6;       // per (identity, modality, camera)
    int64_t height = 32;
    int64_t width = 16;
    uint64_t seed = 0;
    std::string vi_dataset_id = "toy-vi";
    std::string ext_dataset_id = "toy-ext";

    void validate() const;  // throws UsageError
};

struct ToyRender {
    Tensor image;  // (3, H, W) in [0, 1]
    Tensor mask;   // (1, H, W) in {0, 1}; figure pixels, noise-free
};

ToyRender render_toy_image(const ToyCorpusConfig& cfg, const std::string& dataset_id,
                           int64_t identity, Modality modality, int64_t camera, int64_t index);

struct ToyCorpus {
    ReidCorpus vi;
    ReidCorpus ext;
    std::string vi_manifest;   // dir/vi_manifest.tsv
    std::string ext_manifest;  // dir/ext_manifest.tsv
};

// Renders every cell under dir/images and dir/masks and writes both
// manifests. Record paths are absolute.
ToyCorpus write_toy_corpus(const std::string& dir, const ToyCorpusConfig& cfg);

// Path of the mask PNG that pairs with a generated image path.
std::string toy_mask_path(const std::string& image_path);

}  // namespace dive
