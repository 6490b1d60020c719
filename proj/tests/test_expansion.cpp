#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dive/errors.hpp"
#include "dive/expansion.hpp"
#include "dive/rng.hpp"
#include "doctest.h"
#include "temp_dir.hpp"

using namespace dive;
using dive::testing::TempDir;

namespace {

// Two dual-modality VI identities plus two external visible-only identities,
// registered the same way the trainer does it. No image files are needed:
// expansion only reads the registry and the model.
struct Fixture {
    ReidCorpus vi, ext;
    ModelBundle model;

    Fixture() : model(make_fixture_model()) {}

    static ReidCorpus make_vi() {
        std::vector<ReidRecord> recs;
        for (int64_t id : {0, 1})
            for (int m = 0; m < 2; ++m)
                for (int64_t cam = 0; cam < 2; ++cam) {
                    ReidRecord r;
                    r.image_path = "vi_" + std::to_string(id) + "_" + std::to_string(m) + "_" +
                                   std::to_string(cam);
                    r.identity = id;
                    r.modality = m ? Modality::infrared : Modality::visible;
                    r.camera_id = cam;
                    r.dataset_id = "toy-vi";
                    recs.push_back(std::move(r));
                }
        return ReidCorpus::from_records(std::move(recs));
    }

    static ReidCorpus make_ext() {
        std::vector<ReidRecord> recs;
        for (int64_t id : {0, 1}) {
            ReidRecord r;
            r.image_path = "ext_" + std::to_string(id);
            r.identity = id;
            r.modality = Modality::visible;
            r.camera_id = 0;
            r.dataset_id = "toy-ext";
            recs.push_back(std::move(r));
        }
        return ReidCorpus::from_records(std::move(recs));
    }

    ModelBundle make_fixture_model() {
        vi = make_vi();
        ext = make_ext();
        TrainConfig cfg;
        cfg.height = 8;
        cfg.width = 8;
        cfg.lora_rank = 4;
        TokenRegistry reg = TokenRegistry::create(64, 3);
        const int64_t offset = register_corpus_tokens(reg, vi, ext, 5);
        ModelBundle m = make_model(cfg, std::move(reg), 9);
        m.ext_id_offset = offset;
        m.trained_steps = 1;  // plumbing tests need a "trained" bundle, not a good one
        return m;
    }
};

ExpansionPlan small_plan(const std::string& out_dir) {
    ExpansionPlan plan;
    plan.identities = {0, 1};
    plan.images_per_view = 3;
    plan.out_dir = out_dir;
    plan.seed = 21;
    plan.sampler_steps = 2;
    return plan;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::vector<std::string>> log_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::vector<std::vector<std::string>> lines;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> fields;
        std::string f;
        std::istringstream ls(line);
        while (std::getline(ls, f, '\t')) fields.push_back(f);
        lines.push_back(std::move(fields));
    }
    return lines;
}

}  // namespace

TEST_CASE("plan validation") {
    ExpansionPlan plan = small_plan("x");
    CHECK_NOTHROW(plan.validate());
    plan.identities.clear();
    CHECK_THROWS_AS(plan.validate(), UsageError);
    plan = small_plan("x");
    plan.images_per_view = 0;
    CHECK_THROWS_AS(plan.validate(), UsageError);
    plan = small_plan("");
    CHECK_THROWS_AS(plan.validate(), UsageError);
    plan = small_plan("x");
    plan.generate_visible = true;
    CHECK_THROWS_AS(plan.validate(), UsageError);
}

TEST_CASE("expansion produces the exact cell grid with synthetic records") {
    TempDir tmp("expand");
    Fixture fx;
    const ExpansionPlan plan = small_plan(tmp.file("out"));
    const ExpansionResult res = expand_with_model(plan, fx.model);

    // 2 identities x 2 infrared views x 3 images.
    CHECK(res.i_ext.records.size() == 12);
    CHECK(res.cells_done == 4);
    CHECK(res.cells_skipped == 0);
    CHECK(res.i_ext.identity_set ==
          std::set<int64_t>{fx.model.ext_id_offset + 0, fx.model.ext_id_offset + 1});
    CHECK(res.i_ext.modality_views.at(Modality::infrared) == 2);
    for (const auto& r : res.i_ext.records) {
        CHECK(r.is_synthetic);
        CHECK(r.modality == Modality::infrared);
        CHECK(std::filesystem::exists(r.image_path));
        // Filename decodes back to (identity token, view token, index).
        const auto& id_tok = fx.model.reg.tokens[size_t(fx.model.reg.row_of_identity(r.identity))];
        const auto& view_tok = fx.model.reg.tokens[size_t(
            fx.model.reg.row_of_view(r.modality, r.camera_id, r.dataset_id))];
        const std::string base = std::filesystem::path(r.image_path).filename().string();
        CHECK(base.find(id_tok.surface + "_" + view_tok.surface + "_") == 0);
    }

    const ReidCorpus reread = ingest_manifest(res.manifest);
    CHECK(reread.records.size() == res.i_ext.records.size());
    CHECK(reread.identity_set == res.i_ext.identity_set);
}

TEST_CASE("rerun skips completed cells and leaves bytes untouched") {
    TempDir tmp("resume");
    Fixture fx;
    const ExpansionPlan plan = small_plan(tmp.file("out"));
    const ExpansionResult first = expand_with_model(plan, fx.model);
    std::map<std::string, std::string> before;
    for (const auto& r : first.i_ext.records) before[r.image_path] = file_bytes(r.image_path);

    const ExpansionResult second = expand_with_model(plan, fx.model);
    CHECK(second.cells_done == 0);
    CHECK(second.cells_skipped == 4);
    CHECK(second.i_ext.records.size() == first.i_ext.records.size());
    for (const auto& r : second.i_ext.records) CHECK(file_bytes(r.image_path) == before.at(r.image_path));

    const auto lines = log_lines(second.log_path);
    REQUIRE(lines.size() == 8);  // 4 done + 4 skipped, append-only
    for (const auto& f : lines) {
        REQUIRE(f.size() == 4);
        CHECK((f[1] == "done" || f[1] == "skipped"));
    }
    for (size_t i = 0; i < 4; ++i) CHECK(lines[i][1] == "done");
    for (size_t i = 4; i < 8; ++i) CHECK(lines[i][1] == "skipped");
}

TEST_CASE("interrupted cell is regenerated to identical bytes") {
    TempDir tmp("interrupt");
    Fixture fx;
    const ExpansionPlan plan = small_plan(tmp.file("out"));
    const ExpansionResult first = expand_with_model(plan, fx.model);
    const std::string victim = first.i_ext.records[4].image_path;
    const std::string original = file_bytes(victim);
    std::filesystem::remove(victim);

    const ExpansionResult second = expand_with_model(plan, fx.model);
    CHECK(second.cells_done == 1);
    CHECK(second.cells_skipped == 3);
    CHECK(file_bytes(victim) == original);
}

TEST_CASE("expansion is deterministic across output directories") {
    TempDir tmp("deterministic");
    Fixture fx;
    const ExpansionResult a = expand_with_model(small_plan(tmp.file("a")), fx.model);
    const ExpansionResult b = expand_with_model(small_plan(tmp.file("b")), fx.model);
    REQUIRE(a.i_ext.records.size() == b.i_ext.records.size());
    for (size_t i = 0; i < a.i_ext.records.size(); ++i)
        CHECK(file_bytes(a.i_ext.records[i].image_path) ==
              file_bytes(b.i_ext.records[i].image_path));
    CHECK(file_bytes(a.manifest) == file_bytes(b.manifest));
}

TEST_CASE("unregistered identity is rejected with its id") {
    TempDir tmp("badid");
    Fixture fx;
    ExpansionPlan plan = small_plan(tmp.file("out"));
    plan.identities = {7};
    try {
        expand_with_model(plan, fx.model);
        FAIL("expected UsageError");
    } catch (const UsageError& e) {
        CHECK(std::string(e.what()).find("7") != std::string::npos);
    }
}

TEST_CASE("finalize_merge builds V*/I* with one namespace") {
    TempDir tmp("merge");
    Fixture fx;
    const ExpansionPlan plan = small_plan(tmp.file("out"));
    const ExpansionResult res = expand_with_model(plan, fx.model);

    const MergedCorpora merged =
        finalize_merge(fx.vi, fx.ext, res.i_ext, fx.model.ext_id_offset);
    CHECK(merged.v_star.identity_set ==
          std::set<int64_t>{0, 1, fx.model.ext_id_offset, fx.model.ext_id_offset + 1});
    CHECK(merged.i_star.identity_set == merged.v_star.identity_set);
    for (const auto& r : merged.v_star.records) CHECK(r.modality == Modality::visible);
    for (const auto& r : merged.i_star.records) CHECK(r.modality == Modality::infrared);

    // Default offset overload agrees: default_id_offset(vi) matches the
    // offset the registry was built with.
    const MergedCorpora merged2 = finalize_merge(fx.vi, fx.ext, res.i_ext);
    CHECK(merged2.v_star.identity_set == merged.v_star.identity_set);
}

TEST_CASE("finalize_merge rejects orphans and namespace mismatches") {
    TempDir tmp("orphan");
    Fixture fx;
    ExpansionPlan plan = small_plan(tmp.file("out"));
    plan.identities = {0};  // identity 1 gets no synthetic images
    const ExpansionResult res = expand_with_model(plan, fx.model);
    try {
        finalize_merge(fx.vi, fx.ext, res.i_ext, fx.model.ext_id_offset);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(std::to_string(fx.model.ext_id_offset + 1)) !=
              std::string::npos);
    }

    // Synthetic identity with no visible source: shift the offset so nothing lines up.
    const ExpansionResult full = expand_with_model(small_plan(tmp.file("out2")), fx.model);
    CHECK_THROWS_AS(finalize_merge(fx.vi, fx.ext, full.i_ext, fx.model.ext_id_offset + 50),
                    DataError);

    // Wrong-modality records are rejected outright.
    CHECK_THROWS_AS(finalize_merge(fx.vi, full.i_ext, full.i_ext, fx.model.ext_id_offset),
                    DataError);
}
