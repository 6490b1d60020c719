#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace dive {

enum class Modality { visible, infrared };

std::string to_string(Modality m);
Modality parse_modality(const std::string& s);  // throws DataError on unknown value

// One image with identity, modality, camera/view, and dataset provenance.
struct ReidRecord {
    std::string image_path;
    int64_t identity = 0;
    Modality modality = Modality::visible;
    int64_t camera_id = 0;
    std::string dataset_id;
    bool is_synthetic = false;
};

struct ReidCorpus {
    std::vector<ReidRecord> records;
    std::set<int64_t> identity_set;
    std::map<Modality, int64_t> modality_views;  // modality -> number of distinct camera ids

    // Recomputes identity_set and modality_views from records, validating invariants.
    static ReidCorpus from_records(std::vector<ReidRecord> records);
    bool empty() const { return records.empty(); }
};

struct MergePlan {
    const ReidCorpus* base = nullptr;
    const ReidCorpus* external = nullptr;
    int64_t id_offset = 0;  // must be >= 1 + max base identity
};

// Canonical manifest: one record per line,
//   path<TAB>identity<TAB>modality<TAB>camera_id<TAB>dataset_id[<TAB>synthetic]
// with optional '#'-prefixed header lines. The sixth column is 0/1 and
// defaults to 0 when absent.
ReidCorpus ingest_manifest(const std::string& path);
void write_manifest(const ReidCorpus& corpus, const std::string& path);

// Market-1501 style tree: filenames ID_cCsS_frame_box.jpg anywhere under root.
// Junk (-1) and distractor (0000) labels are skipped; unparsable names are
// counted into *skipped when provided.
ReidCorpus ingest_market_layout(const std::string& root, int64_t* skipped = nullptr);

// SYSU style tree: camN/<identity>/<image>. Cameras 1,2,4,5 are visible
// (camera_id 0..3 in that order); cameras 3,6 are infrared (0..1).
ReidCorpus ingest_sysu_layout(const std::string& root);

// Identities with strictly more than min_images records, ascending.
std::vector<int64_t> select_identities(const ReidCorpus& corpus, int64_t min_images);

int64_t default_id_offset(const ReidCorpus& base);
ReidCorpus merge(const MergePlan& plan);

struct CorpusStats {
    int64_t identities = 0;
    std::map<Modality, int64_t> images;
    std::map<Modality, int64_t> cameras;
    int64_t synthetic = 0;
};
CorpusStats corpus_stats(const ReidCorpus& corpus);
std::string format_stats(const CorpusStats& s);

}  // namespace dive
