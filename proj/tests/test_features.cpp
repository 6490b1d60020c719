#include <cmath>

#include "dive/errors.hpp"
#include "dive/features.hpp"
#include "dive/image_io.hpp"
#include "dive/rng.hpp"
#include "dive/toy_corpus.hpp"
#include "doctest.h"
#include "temp_dir.hpp"

using namespace dive;
using dive::testing::TempDir;

namespace {

ToyCorpusConfig small_cfg() {
    ToyCorpusConfig cfg;
    cfg.vi_identities = 4;
    cfg.ext_identities = 2;
    cfg.cameras_per_modality = 2;
    cfg.images_per_cell = 4;
    cfg.seed = 42;
    return cfg;
}

ToyEmbedderConfig embed_cfg() {
    ToyEmbedderConfig cfg;
    cfg.steps = 400;
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("cell statistics on block images") {
    Tensor flat({3, 4, 4});
    flat.fill(0.25);
    Tensor s = cell_stats(flat, 2, 2);
    REQUIRE(s.shape == Shape{12});
    for (Scalar v : s.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    // Left half dark, right half bright: a 1x2 grid picks the halves apart.
    Tensor halves({3, 4, 4});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < 4; ++y)
            for (int64_t x = 2; x < 4; ++x) halves.at(c, y, x) = 1.0;
    Tensor hs = cell_stats(halves, 1, 2);
    REQUIRE(hs.shape == Shape{6});
    for (int64_t c = 0; c < 3; ++c) {
        CHECK(hs[c * 2 + 0] == doctest::Approx(0.0));
        CHECK(hs[c * 2 + 1] == doctest::Approx(1.0));
    }

    CHECK_THROWS_AS(cell_stats(flat, 0, 2), DataError);
    CHECK_THROWS_AS(cell_stats(flat, 8, 2), DataError);
    CHECK_THROWS_AS(cell_stats(Tensor({1, 4, 4}), 2, 2), DataError);
}

TEST_CASE("raw pixel extractor flattens a resized image") {
    RawPixelExtractor ex;
    CHECK(ex.name() == "raw-pixel");
    CHECK(ex.dim() == 3 * 16 * 8);
    auto rng = make_rng(3);
    Tensor img = Tensor::randn({3, 32, 16}, rng, 0.1, 0.5);
    Tensor a = ex.extract(img), b = ex.extract(img);
    REQUIRE(a.shape == Shape{ex.dim()});
    CHECK(max_abs_diff(a, b) == 0.0);

    Tensor other = Tensor::randn({3, 32, 16}, rng, 0.1, 0.5);
    CHECK(max_abs_diff(a, ex.extract(other)) > 0.0);
}

TEST_CASE("toy embedder fits the corpus identities deterministically") {
    TempDir dir("embed_train");
    ToyCorpus corpus = write_toy_corpus(dir.path.string(), small_cfg());

    ToyEmbedder e = train_toy_embedder(corpus.vi, embed_cfg());
    CHECK(e.dim() == 32);
    CHECK(e.classes.size() == 4);
    CHECK(e.train_accuracy >= 0.95);

    // Same seed and data reproduce the model up to BLAS kernel scheduling:
    // the matrix backend picks summation paths by buffer alignment, which
    // depends on heap history, so identical runs can differ at the last ulp.
    ToyEmbedder again = train_toy_embedder(corpus.vi, embed_cfg());
    Tensor img = read_png(corpus.vi.records.front().image_path);
    CHECK(max_abs_diff(e.extract(img), again.extract(img)) <= 1e-12);
}

TEST_CASE("embedding keeps same-identity cross-modality pairs closest") {
    TempDir dir("embed_sep");
    ToyCorpus corpus = write_toy_corpus(dir.path.string(), small_cfg());

    ToyEmbedder e = train_toy_embedder(corpus.vi, embed_cfg());
    FeatureSet fs = features_of_corpus(corpus.vi, e);
    ClassDistances cd = class_distances(fs);
    CHECK(cd.intra.mean < cd.inter.mean);
}

TEST_CASE("modality classifier separates the toy modalities") {
    TempDir dir("modality_clf");
    ToyCorpus corpus = write_toy_corpus(dir.path.string(), small_cfg());

    ModalityClassifier clf = train_modality_classifier(corpus.vi);
    CHECK(clf.train_accuracy >= 0.99);
    CHECK(modality_accuracy(corpus.vi, clf) >= 0.99);

    Tensor vis, ir;
    for (const ReidRecord& r : corpus.vi.records) {
        if (r.modality == Modality::visible && vis.numel() == 0) vis = read_png(r.image_path);
        if (r.modality == Modality::infrared && ir.numel() == 0) ir = read_png(r.image_path);
    }
    CHECK(clf.predict(vis) == Modality::visible);
    CHECK(clf.predict(ir) == Modality::infrared);
    const Scalar p_vis = clf.infrared_probability(vis), p_ir = clf.infrared_probability(ir);
    CHECK(p_vis >= 0.0);
    CHECK(p_ir <= 1.0);
    CHECK(p_ir > p_vis);

    // The external split is visible-only: not trainable material.
    CHECK_THROWS_AS(train_modality_classifier(corpus.ext), DataError);
}

TEST_CASE("modality statistics vanish on channel-equal images") {
    auto rng = make_rng(5);
    Tensor gray({3, 8, 8});
    Tensor plane = Tensor::randn({8, 8}, rng, 0.2, 0.5);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 64; ++i) gray.data[size_t(c * 64 + i)] = plane.data[size_t(i)];
    Tensor s = ModalityClassifier::stats(gray);
    CHECK(s[0] == doctest::Approx(0.0));
    CHECK(s[1] == doctest::Approx(0.0));
    CHECK(s[2] == doctest::Approx(0.0));
    CHECK(s[3] == doctest::Approx(0.0));
    CHECK(s[5] > 0.0);  // luma still varies spatially
}

TEST_CASE("corpus feature sets carry the record labels") {
    TempDir dir("corpus_features");
    ToyCorpusConfig cfg = small_cfg();
    cfg.vi_identities = 2;
    cfg.images_per_cell = 2;
    ToyCorpus corpus = write_toy_corpus(dir.path.string(), cfg);

    RawPixelExtractor ex;
    FeatureSet fs = features_of_corpus(corpus.vi, ex);
    CHECK(fs.rows() == int64_t(corpus.vi.records.size()));
    CHECK(fs.normalized);
    CHECK_NOTHROW(fs.validate());
    for (size_t i = 0; i < corpus.vi.records.size(); ++i) {
        CHECK(fs.identities[i] == corpus.vi.records[i].identity);
        CHECK(fs.modalities[i] == corpus.vi.records[i].modality);
        CHECK(fs.cameras[i] == corpus.vi.records[i].camera_id);
    }

    FeatureSet raw = features_of_corpus(corpus.vi, ex, false);
    CHECK(!raw.normalized);
}

TEST_CASE("feature training rejects degenerate corpora") {
    CHECK_THROWS_AS(train_toy_embedder(ReidCorpus{}, embed_cfg()), DataError);
    CHECK_THROWS_AS(train_modality_classifier(ReidCorpus{}), DataError);
    RawPixelExtractor ex;
    CHECK_THROWS_AS(features_of_corpus(ReidCorpus{}, ex), DataError);

    ToyEmbedderConfig bad = embed_cfg();
    bad.steps = 0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = embed_cfg();
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
}
