#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dive/errors.hpp"
#include "dive/image_io.hpp"
#include "dive/rng.hpp"
#include "dive/trainer.hpp"
#include "doctest.h"
#include "temp_dir.hpp"

using namespace dive;
using dive::testing::TempDir;

namespace {

TrainConfig small_cfg() {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 4;
    cfg.total_steps = 10;
    cfg.height = 8;
    cfg.width = 8;
    cfg.seed = 17;
    cfg.checkpoint_every = 5;
    cfg.lora_rank = 4;
    return cfg;
}

TokenRegistry small_registry() {
    TokenRegistry reg = TokenRegistry::create(64, 3);
    reg.register_identity(1, 101);
    reg.register_identity(2, 102);
    reg.register_view(Modality::visible, 0, "toy");
    reg.register_view(Modality::infrared, 0, "toy");
    return reg;
}

std::vector<TrainingExample> small_examples(const TokenRegistry& reg, int n = 6) {
    auto rng = make_rng(71);
    std::vector<TrainingExample> ex;
    for (int i = 0; i < n; ++i) {
        TrainingExample e;
        e.image = Tensor::randn({3, 8, 8}, rng);
        for (auto& v : e.image.data) v = std::tanh(v);
        e.identity_row = reg.row_of_identity(1 + i % 2);
        e.view_row =
            reg.row_of_view(i % 4 < 2 ? Modality::visible : Modality::infrared, 0, "toy");
        ex.push_back(std::move(e));
    }
    return ex;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(Scalar)) == 0;
}

Tensor ramp_image(int64_t h, int64_t w, Scalar lo, Scalar hi) {
    Tensor img = Tensor::zeros({3, h, w});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                img.at(c, y, x) = lo + (hi - lo) * Scalar(y * w + x) / Scalar(h * w - 1);
    return img;
}

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg = small_cfg();
    CHECK_NOTHROW(cfg.validate());
    cfg.learning_rate = 0.0;  // degenerate but legal: optimizer must stand still
    CHECK_NOTHROW(cfg.validate());
    cfg.learning_rate = -1e-5;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = small_cfg();
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = small_cfg();
    cfg.height = 30;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = small_cfg();
    cfg.width = 6;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = small_cfg();
    cfg.checkpoint_every = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("batch indices are a pure function of seed and step") {
    const auto a = batch_indices(9, 42, 100, 16);
    const auto b = batch_indices(9, 42, 100, 16);
    CHECK(a == b);
    CHECK(a.size() == 16);
    for (int64_t i : a) {
        CHECK(i >= 0);
        CHECK(i < 100);
    }
    CHECK(batch_indices(9, 43, 100, 16) != a);
    CHECK(batch_indices(10, 42, 100, 16) != a);
    CHECK_THROWS_AS(batch_indices(9, 42, 0, 16), UsageError);
}

TEST_CASE("horizontal flip reverses columns and is an involution") {
    Tensor img = Tensor::zeros({1, 1, 3});
    img.at(0, 0, 0) = 1.0;
    img.at(0, 0, 1) = 2.0;
    img.at(0, 0, 2) = 3.0;
    Tensor f = flip_horizontal(img);
    CHECK(f.at(0, 0, 0) == 3.0);
    CHECK(f.at(0, 0, 1) == 2.0);
    CHECK(f.at(0, 0, 2) == 1.0);
    auto rng = make_rng(4);
    Tensor r = Tensor::randn({3, 5, 7}, rng);
    CHECK(bits_equal(flip_horizontal(flip_horizontal(r)), r));
}

TEST_CASE("corpus registration shares identity tokens across modalities") {
    TempDir dir("trainer_corpus");
    auto png = [&](const std::string& name) {
        const std::string p = dir.file(name);
        write_png(p, ramp_image(8, 8, 0.1, 0.9));
        return p;
    };
    ReidCorpus vi = ReidCorpus::from_records(
        {{png("v0.png"), 5, Modality::visible, 0, "sysu", false},
         {png("v1.png"), 5, Modality::infrared, 1, "sysu", false},
         {png("v2.png"), 7, Modality::visible, 0, "sysu", false}});
    ReidCorpus ext = ReidCorpus::from_records(
        {{png("e0.png"), 5, Modality::visible, 2, "market", false}});

    TokenRegistry reg = TokenRegistry::create(64, 3);
    const int64_t offset = register_corpus_tokens(reg, vi, ext, 77);
    CHECK(offset == 8);  // external ids shifted past the VI range
    CHECK(reg.has_identity(5));
    CHECK(reg.has_identity(7));
    CHECK(reg.has_identity(5 + offset));

    const auto ex = build_training_set(vi, ext, reg, offset, 8, 8);
    REQUIRE(ex.size() == 4);
    // same identity, both modalities -> same identity token, different views
    CHECK(ex[0].identity_row == ex[1].identity_row);
    CHECK(ex[0].view_row != ex[1].view_row);
    // external identity 5 does not share the VI identity-5 token
    CHECK(ex[3].identity_row != ex[0].identity_row);
    CHECK(ex[3].view_row == reg.row_of_view(Modality::visible, 2, "market"));
    for (const auto& e : ex) {
        CHECK(e.image.shape == Shape{3, 8, 8});
        for (Scalar v : e.image.data) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }
    // pixel mapping is [0,1] -> [-1,1]
    CHECK(ex[0].image.data.front() < -0.5);
    CHECK(ex[0].image.data.back() > 0.5);
}

TEST_CASE("external-only registration uses no offset; empty corpora are empty") {
    TempDir dir("trainer_ext");
    const std::string p = dir.file("e.png");
    write_png(p, ramp_image(16, 8, 0.0, 1.0));
    ReidCorpus ext =
        ReidCorpus::from_records({{p, 3, Modality::visible, 1, "market", false}});
    ReidCorpus empty;

    TokenRegistry reg = TokenRegistry::create(64, 3);
    const int64_t offset = register_corpus_tokens(reg, empty, ext, 77);
    CHECK(offset == 0);
    const auto ex = build_training_set(empty, ext, reg, offset, 8, 8);
    REQUIRE(ex.size() == 1);
    CHECK(ex[0].image.shape == Shape{3, 8, 8});  // resized from 16x8

    CHECK(build_training_set(empty, empty, reg, 0, 8, 8).empty());

    TokenRegistry bare = TokenRegistry::create(64, 3);
    CHECK_THROWS(build_training_set(empty, ext, bare, 0, 8, 8));
}

TEST_CASE("training is deterministic given the seed") {
    TrainConfig cfg = small_cfg();
    TokenRegistry reg = small_registry();
    const auto ex = small_examples(reg);

    Trainer a(cfg, make_model(cfg, reg, 99));
    Trainer b(cfg, make_model(cfg, reg, 99));
    const auto ra = a.run(ex);
    const auto rb = b.run(ex);
    REQUIRE(ra.curve.size() == 10);
    REQUIRE(rb.curve.size() == 10);
    for (size_t i = 0; i < ra.curve.size(); ++i) {
        CHECK(ra.curve[i].step == rb.curve[i].step);
        CHECK(ra.curve[i].loss == rb.curve[i].loss);  // bit-identical
        CHECK(std::isfinite(ra.curve[i].loss));
    }
    CHECK(bits_equal(a.model().reg.table, b.model().reg.table));
    CHECK(bits_equal(a.model().adapters.blocks[0].q.a, b.model().adapters.blocks[0].q.a));
}

TEST_CASE("zero learning rate leaves every parameter bit-identical") {
    TrainConfig cfg = small_cfg();
    cfg.learning_rate = 0.0;
    TokenRegistry reg = small_registry();
    const auto ex = small_examples(reg);
    Trainer t(cfg, make_model(cfg, reg, 99));
    const Tensor table0 = t.model().reg.table;
    const Tensor qa0 = t.model().adapters.blocks[0].q.a;
    const Tensor kb0 = t.model().adapters.blocks[0].k.b;
    t.run(ex);
    CHECK(bits_equal(t.model().reg.table, table0));
    CHECK(bits_equal(t.model().adapters.blocks[0].q.a, qa0));
    CHECK(bits_equal(t.model().adapters.blocks[0].k.b, kb0));
}

TEST_CASE("frozen rows and trunk stay fixed while trainable leaves move") {
    TrainConfig cfg = small_cfg();
    TokenRegistry reg = small_registry();
    const auto ex = small_examples(reg);
    Trainer t(cfg, make_model(cfg, reg, 99));

    const ModelBundle& m = t.model();
    const Tensor table0 = m.reg.table;
    const Tensor stem0 = m.den.stem.w;
    const Tensor wq0 = m.den.wq.w;
    const Tensor qb0 = m.adapters.blocks[0].q.b;
    t.run(ex);

    CHECK(bits_equal(m.den.stem.w, stem0));
    CHECK(bits_equal(m.den.wq.w, wq0));
    CHECK_FALSE(bits_equal(m.adapters.blocks[0].q.b, qb0));

    const int64_t d = m.reg.d_text;
    bool trainable_moved = false;
    for (int64_t rix = 0; rix < m.reg.rows(); ++rix) {
        bool same = true;
        for (int64_t c = 0; c < d; ++c)
            if (m.reg.table.at(rix, c) != table0.at(rix, c)) same = false;
        if (m.reg.trainable[size_t(rix)]) {
            if (!same) trainable_moved = true;
        } else {
            CHECK(same);  // frozen rows are bit-identical after training
        }
    }
    CHECK(trainable_moved);
}

TEST_CASE("non-finite loss aborts with step and batch diagnostics") {
    TrainConfig cfg = small_cfg();
    TokenRegistry reg = small_registry();
    auto ex = small_examples(reg, 1);
    ex[0].image.at(0, 0, 0) = std::numeric_limits<Scalar>::quiet_NaN();
    Trainer t(cfg, make_model(cfg, reg, 99));
    try {
        t.run_step(ex, 3);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step 3") != std::string::npos);
        CHECK(msg.find("batch indices") != std::string::npos);
        CHECK(msg.find('0') != std::string::npos);
    }
}

TEST_CASE("checkpoints carry only trainable changes between steps") {
    TempDir dir("trainer_ckpt");
    TrainConfig cfg = small_cfg();
    TokenRegistry reg = small_registry();
    const auto ex = small_examples(reg);
    Trainer t(cfg, make_model(cfg, reg, 99));
    t.run(ex, dir.path.string());

    CheckpointReader a(dir.file("ckpt_000005.dive"));
    CheckpointReader b(dir.file("ckpt_000010.dive"));
    // frozen denoiser: bit-identical across checkpoints
    int64_t weight_keys = 0;
    for (const auto& key : a.keys_with_prefix("denoiser/")) {
        if (!a.is_tensor(key)) continue;
        CHECK(bits_equal(a.tensor(key), b.tensor(key)));
        ++weight_keys;
    }
    CHECK(weight_keys > 10);
    // adapters move
    CHECK_FALSE(bits_equal(a.tensor("adapters/0/q.b"), b.tensor("adapters/0/q.b")));
    // frozen table rows equal, trainable rows move
    const Tensor ta = a.tensor("registry/table");
    const Tensor tb = b.tensor("registry/table");
    const TokenRegistry loaded = [&] {
        CheckpointReader r(dir.file("ckpt_000005.dive"));
        return load_registry(r);
    }();
    bool moved = false;
    for (int64_t rix = 0; rix < loaded.rows(); ++rix) {
        bool same = true;
        for (int64_t c = 0; c < loaded.d_text; ++c)
            if (ta.at(rix, c) != tb.at(rix, c)) same = false;
        if (loaded.trainable[size_t(rix)])
            moved = moved || !same;
        else
            CHECK(same);
    }
    CHECK(moved);
}

TEST_CASE("resume replays the unbroken run's batch order and losses") {
    TempDir dir("trainer_resume");
    TokenRegistry reg = small_registry();
    const auto ex = small_examples(reg);

    TrainConfig cfg20 = small_cfg();
    cfg20.total_steps = 20;
    Trainer unbroken(cfg20, make_model(cfg20, reg, 99));
    const auto full = unbroken.run(ex);
    REQUIRE(full.curve.size() == 20);

    TrainConfig cfg10 = cfg20;
    cfg10.total_steps = 10;
    Trainer half(cfg10, make_model(cfg10, reg, 99));
    half.run(ex);
    const std::string ckpt = dir.file("half.dive");
    half.save(ckpt);

    auto resumed = Trainer::load(ckpt, &cfg20);
    CHECK(resumed->step() == 10);
    const auto tail = resumed->run(ex);
    REQUIRE(tail.curve.size() == 10);
    for (size_t i = 0; i < tail.curve.size(); ++i) {
        CHECK(tail.curve[i].step == full.curve[10 + i].step);
        // float32 checkpoint storage costs a few low bits; batch order and
        // trajectory must match to high precision
        CHECK(tail.curve[i].loss ==
              doctest::Approx(full.curve[10 + i].loss).epsilon(1e-4));
    }
}

TEST_CASE("loss curve file holds one step per line and appends on resume") {
    TempDir dir("trainer_curve");
    TokenRegistry reg = small_registry();
    const auto ex = small_examples(reg);
    TrainConfig cfg = small_cfg();
    Trainer t(cfg, make_model(cfg, reg, 99));
    const std::string curve_path = dir.file("loss.tsv");
    const auto res = t.run(ex, "", curve_path);

    std::ifstream in(curve_path);
    std::string line;
    int64_t lines = 0;
    while (std::getline(in, line)) {
        std::istringstream row(line);
        int64_t step = -1;
        Scalar loss = -1.0;
        char tab = 0;
        row >> step;
        row.get(tab);
        row >> loss;
        CHECK(tab == '\t');
        CHECK(step == lines + 1);
        CHECK(loss == res.curve[size_t(lines)].loss);
        ++lines;
    }
    CHECK(lines == 10);
}

TEST_CASE("trainer checkpoint round-trips the config") {
    TempDir dir("trainer_cfgrt");
    TrainConfig cfg = small_cfg();
    cfg.horizontal_flip = false;
    cfg.seed = 12345;
    TokenRegistry reg = small_registry();
    Trainer t(cfg, make_model(cfg, reg, 99));
    const std::string path = dir.file("t.dive");
    t.save(path);
    auto loaded = Trainer::load(path);
    CHECK(loaded->config().learning_rate == cfg.learning_rate);
    CHECK(loaded->config().batch_size == cfg.batch_size);
    CHECK(loaded->config().total_steps == cfg.total_steps);
    CHECK(loaded->config().height == cfg.height);
    CHECK(loaded->config().width == cfg.width);
    CHECK(loaded->config().horizontal_flip == cfg.horizontal_flip);
    CHECK(loaded->config().seed == cfg.seed);
    CHECK(loaded->config().checkpoint_every == cfg.checkpoint_every);
    CHECK(loaded->config().lora_rank == cfg.lora_rank);
    CHECK(loaded->model().reg.rows() == t.model().reg.rows());
}

TEST_CASE("bilinear resize preserves constants and interpolates a ramp") {
    Tensor c = Tensor::full({3, 4, 4}, 0.37);
    Tensor up = resize_bilinear(c, 8, 8);
    for (Scalar v : up.data) CHECK(v == doctest::Approx(0.37));
    Tensor ramp = ramp_image(4, 4, 0.0, 1.0);
    Tensor down = resize_bilinear(ramp, 2, 2);
    CHECK(down.shape == Shape{3, 2, 2});
    // downsampling a monotone ramp keeps monotonicity
    CHECK(down.at(0, 0, 0) < down.at(0, 1, 1));
}
