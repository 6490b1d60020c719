#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dive/checkpoint.hpp"
#include "dive/diffusion.hpp"
#include "dive/nn.hpp"
#include "dive/prompt.hpp"
#include "dive/reid_dataset.hpp"

namespace dive {

struct TrainConfig {
    Scalar learning_rate = 5e-5;
    int64_t batch_size = 16;
    int64_t total_steps = 2000;
    int64_t height = 32;
    int64_t width = 16;
    bool horizontal_flip = true;
    uint64_t seed = 0;
    int64_t checkpoint_every = 500;
    int64_t lora_rank = 128;
    Scalar lora_scale = 8.0;

    void validate() const;  // throws UsageError
};

// Everything a trained model needs downstream: frozen denoiser, adapters,
// token table, conditioning encoder, and the noise schedule they were
// trained under.
struct ModelBundle {
    Denoiser den;
    AdapterSet adapters;
    TokenRegistry reg;
    PromptEncoder enc;
    NoiseSchedule sched;
    int64_t ext_id_offset = 0;  // added to external identities for token lookup
    int64_t trained_steps = 0;
};

ModelBundle make_model(const TrainConfig& cfg, TokenRegistry reg, uint64_t model_seed);
void save_model(const ModelBundle& m, CheckpointWriter& w);
ModelBundle load_model(const CheckpointReader& r);

// Registers one identity token per identity in either corpus and one view
// token per (dataset, modality, camera). External identities are shifted by
// the returned offset so the two corpora never share an identity token.
int64_t register_corpus_tokens(TokenRegistry& reg, const ReidCorpus& vi, const ReidCorpus& ext,
                               uint64_t seed);

// Loads every record's image (resized to height x width, mapped to [-1, 1])
// and binds its identity/view token rows. Records of one identity share a
// single identity token across modalities.
std::vector<TrainingExample> build_training_set(const ReidCorpus& vi, const ReidCorpus& ext,
                                                const TokenRegistry& reg, int64_t ext_id_offset,
                                                int64_t height, int64_t width);

// Pure function of (seed, step): a resumed run replays the original batches.
std::vector<int64_t> batch_indices(uint64_t seed, int64_t step, int64_t n, int64_t batch_size);

Tensor flip_horizontal(const Tensor& image);

struct StepRecord {
    int64_t step = 0;
    Scalar loss = 0.0;
};

struct TrainResult {
    std::vector<StepRecord> curve;
};

// Owns the optimization loop over adapter A/B factors and trainable embedding
// rows. Not movable: the optimizer holds pointers into the bundle.
class Trainer {
  public:
    Trainer(TrainConfig cfg, ModelBundle bundle);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // Runs steps trained_steps+1 .. total_steps. Writes `step<TAB>loss` lines
    // to loss_curve_path and periodic checkpoints to checkpoint_dir when the
    // paths are non-empty.
    TrainResult run(const std::vector<TrainingExample>& examples,
                    const std::string& checkpoint_dir = "",
                    const std::string& loss_curve_path = "");

    // One optimization step; exposed so tests can drive the loop directly.
    Scalar run_step(const std::vector<TrainingExample>& examples, int64_t step);

    void save(const std::string& path) const;
    // override_cfg replaces the checkpointed config (e.g. a raised
    // total_steps when resuming); optimizer moments are restored either way.
    static std::unique_ptr<Trainer> load(const std::string& path,
                                         const TrainConfig* override_cfg = nullptr);

    const TrainConfig& config() const { return cfg_; }
    ModelBundle& model() { return bundle_; }
    const ModelBundle& model() const { return bundle_; }
    int64_t step() const { return bundle_.trained_steps; }

  private:
    void bind_optimizer();

    TrainConfig cfg_;
    ModelBundle bundle_;
    Tensor table_grad_;
    nn::Adam opt_;
};

void save_train_config(const TrainConfig& cfg, CheckpointWriter& w);
TrainConfig load_train_config(const CheckpointReader& r);

}  // namespace dive
