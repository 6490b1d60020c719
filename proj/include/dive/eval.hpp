#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dive/prompt.hpp"
#include "dive/reid_dataset.hpp"
#include "dive/tensor.hpp"
#include "dive/trainer.hpp"

namespace dive {

// Feature rows with the retrieval labels the metric kernels need. Modality
// and camera labels may be left empty when a kernel does not use them.
struct FeatureSet {
    Tensor matrix;  // (N, d)
    std::vector<int64_t> identities;
    std::vector<Modality> modalities;
    std::vector<int64_t> cameras;
    bool normalized = false;

    int64_t rows() const { return matrix.ndim() == 2 ? matrix.size(0) : 0; }
    int64_t dim() const { return matrix.ndim() == 2 ? matrix.size(1) : 0; }
    void validate() const;  // throws DataError
};

// Scales each row to unit L2 norm and sets the flag. Zero rows are a
// DataError: they carry no direction to preserve.
FeatureSet normalize_rows(FeatureSet fs);

struct GaussianSummary {
    Tensor mean;  // (d)
    Tensor cov;   // (d, d), symmetric PSD up to rounding
};

// Exact streaming moments (Chan's pairwise combination), so shards evaluated
// in parallel merge into the same summary as a single pass.
struct MomentAccumulator {
    int64_t n = 0;
    Tensor mean;  // (d)
    Tensor m2;    // (d, d) centered co-moment sum

    void add(const Tensor& row);
    void merge(const MomentAccumulator& o);
    GaussianSummary summary() const;  // unbiased covariance; needs n >= 2
};

GaussianSummary moment_summary(const Tensor& matrix);  // (N, d), N >= 2
GaussianSummary moment_summary(const FeatureSet& fs);

// Frechet distance between Gaussians:
//   |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2).
// Matrix square roots go through symmetric eigendecomposition; eigenvalues
// below -1e-8 raise NumericError, small negatives are clamped to zero.
Scalar fid(const GaussianSummary& a, const GaussianSummary& b);

struct DistanceStats {
    Scalar mean = 0.0;
    Scalar median = 0.0;
    int64_t pairs = 0;
    std::vector<int64_t> histogram;
    Scalar hist_max = 0.0;  // bins split [0, hist_max] evenly
};

struct ClassDistances {
    DistanceStats intra;  // same identity, opposite modality
    DistanceStats inter;  // different identity, opposite modality
};

// Pairwise Euclidean distances restricted to cross-modality pairs, split by
// identity agreement. Both histograms share one bin range so they overlay.
ClassDistances class_distances(const FeatureSet& fs, int64_t hist_bins = 20);

struct RetrievalResult {
    std::vector<Scalar> cmc;  // cmc[k] = fraction of queries with a hit in top k+1
    Scalar map = 0.0;
    int64_t evaluated = 0;
    int64_t skipped = 0;  // queries with no valid same-identity gallery entry
};

// Single-gallery-shot-free protocol: per query, gallery entries sharing both
// identity and camera are excluded; ranking is by Euclidean distance with
// ties broken by gallery index.
RetrievalResult cmc_map(const FeatureSet& query, const FeatureSet& gallery);

struct TokenHeatmap {
    int64_t row = -1;  // registry row of the token at this prompt position
    std::string surface;
    Tensor probs;  // (grid_h, grid_w) attention averaged over heads and timesteps
    Tensor map;    // (out_h, out_w) bilinear upsample of probs, max-normalized to [0, 1]
};

struct AttentionMapResult {
    std::vector<TokenHeatmap> tokens;  // one per prompt position, in prompt order
};

// Reduction core, exposed so stubbed attention tensors exercise the same
// path: each entry of attn is one timestep's (heads, grid_h*grid_w, S)
// probabilities for a prompt of length S.
AttentionMapResult reduce_attention(const std::vector<Tensor>& attn, int64_t grid_h,
                                    int64_t grid_w, int64_t out_h, int64_t out_w,
                                    const std::vector<int64_t>& rows,
                                    const std::vector<std::string>& surfaces);

struct AttentionMapConfig {
    std::vector<Scalar> timesteps = {250.0, 500.0, 750.0};
    uint64_t seed = 0;  // noise draw used to push the image to each timestep
};

// Noises `image` ((3, H, W) in [-1, 1]) to each configured timestep, runs the
// denoiser, and reduces the cross-attention probabilities per prompt token.
AttentionMapResult attention_maps(const ModelBundle& m, const PromptSpec& prompt,
                                  const Tensor& image, const AttentionMapConfig& cfg,
                                  PromptVariant variant = PromptVariant::full);

// Heatmap of the prompt token with this surface; UsageError when the token
// is not part of the prompt.
const TokenHeatmap& heatmap_for(const AttentionMapResult& r, const std::string& surface);

// Fraction of the map's total mass falling where mask > 0.5. The mask is
// (1, H, W) or (3, H, W) (channel 0 is used) matching the map's extent.
Scalar heatmap_mass(const Tensor& map, const Tensor& mask);

// One row of tiles: the conditioning image, then each token's heatmap in
// prompt order, separated by white gutters.
void write_attention_grid(const std::string& path, const Tensor& image,
                          const AttentionMapResult& r);

// Everything the evaluate run reports; sections the run did not compute stay
// empty. Serialized as JSON with a stable key layout.
struct MetricReport {
    std::string extractor;
    CorpusStats real_stats, synthetic_stats;
    bool has_fid = false;
    Scalar fid_value = 0.0;
    bool has_distances = false;
    ClassDistances distances;
    bool has_retrieval = false;
    RetrievalResult retrieval;
    std::vector<int64_t> cmc_ranks = {1, 5, 10, 20};  // ranks echoed in the summary
    bool has_modality = false;
    Scalar modality_infrared_rate = 0.0;  // fraction of synthetic classified infrared
    Scalar modality_train_accuracy = 0.0;
    bool has_attention = false;
    Scalar attention_identity_mass = 0.0;  // identity-token mass inside the mask
    Scalar attention_modality_mass = 0.0;  // view-token mass inside the mask

    std::string to_json() const;
    std::string summary_table() const;
};

void write_metric_report(const MetricReport& r, const std::string& path);

// Bar chart of the intra/inter distance histograms (intra above, inter below)
// so the separation is visible at a glance.
void write_distance_histogram(const std::string& path, const ClassDistances& d);

}  // namespace dive
