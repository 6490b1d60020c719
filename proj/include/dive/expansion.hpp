#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dive/reid_dataset.hpp"
#include "dive/sampler.hpp"
#include "dive/trainer.hpp"

namespace dive {

// One generation campaign: for every planned external identity, sample
// images_per_view infrared images under each infrared view token.
struct ExpansionPlan {
    std::string checkpoint;            // trained model bundle
    std::vector<int64_t> identities;   // external ids in their source numbering
    int64_t images_per_view = 18;
    std::string out_dir;
    uint64_t seed = 0;
    int64_t sampler_steps = 25;
    SamplerConfig::Method method = SamplerConfig::Method::multistep_2nd_order;
    int64_t jobs = 1;               // worker threads over (identity, view) cells
    bool generate_visible = false;  // reserved; only infrared synthesis is wired

    void validate() const;  // throws UsageError
};

struct ExpansionResult {
    ReidCorpus i_ext;
    std::string manifest;  // out_dir/i_ext_manifest.tsv
    std::string log_path;  // out_dir/expansion.log
    int64_t cells_done = 0;
    int64_t cells_skipped = 0;
};

// Runs the plan against an already-loaded model. Rerunning skips (identity,
// view) cells whose outputs are complete; the log is append-only.
ExpansionResult expand_with_model(const ExpansionPlan& plan, const ModelBundle& m);

// Loads the checkpoint named by the plan, then runs it.
ExpansionResult expand(const ExpansionPlan& plan);

struct MergedCorpora {
    ReidCorpus v_star;
    ReidCorpus i_star;
};

// V* = visible half of vi ∪ offset v_ext; I* = infrared half of vi ∪ i_ext
// (whose identities already carry the offset). Every external identity must
// have at least one synthetic infrared record.
MergedCorpora finalize_merge(const ReidCorpus& vi, const ReidCorpus& v_ext,
                             const ReidCorpus& i_ext, int64_t id_offset);
MergedCorpora finalize_merge(const ReidCorpus& vi, const ReidCorpus& v_ext,
                             const ReidCorpus& i_ext);  // offset = default_id_offset(vi)

}  // namespace dive
