#include <cstring>
#include <filesystem>

#include "dive/errors.hpp"
#include "dive/prompt.hpp"
#include "dive/rng.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace dive;
using dive::testing::fd_gradient;
using dive::testing::max_rel_err;

namespace {

TokenRegistry small_registry(uint64_t seed = 11) {
    TokenRegistry reg = TokenRegistry::create(32, seed);
    reg.register_identity(0, seed_combine(seed, "id0"));
    reg.register_identity(1, seed_combine(seed, "id1"));
    reg.register_view(Modality::visible, 0, "toy");
    reg.register_view(Modality::infrared, 0, "toy");
    return reg;
}

}  // namespace

TEST_CASE("identity registration is deterministic and collision-checked") {
    TokenRegistry reg = TokenRegistry::create(32, 5);
    const int64_t r0 = reg.register_identity(0, 1234);
    CHECK_THROWS_AS(reg.register_identity(0, 999), DataError);
    const int64_t r1 = reg.register_identity(1, 5678);
    CHECK(reg.tokens[size_t(r0)].surface != reg.tokens[size_t(r1)].surface);
    CHECK(reg.tokens[size_t(r0)].surface.size() == 8);
    for (char c : reg.tokens[size_t(r0)].surface) CHECK(std::isalnum(uint8_t(c)));

    // Same seed in a fresh registry draws the same surface.
    TokenRegistry reg2 = TokenRegistry::create(32, 5);
    const int64_t s0 = reg2.register_identity(0, 1234);
    CHECK(reg.tokens[size_t(r0)].surface == reg2.tokens[size_t(s0)].surface);
}

TEST_CASE("identity rows start near the base-vocabulary mean") {
    TokenRegistry reg = TokenRegistry::create(64, 9);
    Tensor mean = Tensor::zeros({64});
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 64; ++j) mean.data[size_t(j)] += reg.table.at(i, j) / 4.0;
    Scalar norm_mean = 0.0;
    for (int64_t i = 0; i < 4; ++i) {
        Scalar sq = 0.0;
        for (int64_t j = 0; j < 64; ++j) sq += reg.table.at(i, j) * reg.table.at(i, j);
        norm_mean += std::sqrt(sq) / 4.0;
    }
    const int64_t r = reg.register_identity(0, 42);
    Scalar dist = 0.0;
    for (int64_t j = 0; j < 64; ++j)
        dist += (reg.table.at(r, j) - mean.data[size_t(j)]) *
                (reg.table.at(r, j) - mean.data[size_t(j)]);
    // Offset from the mean is Gaussian with sigma = 0.02 * mean base row
    // norm per element; its norm concentrates near sigma * sqrt(d).
    const Scalar expected = 0.02 * norm_mean * std::sqrt(64.0);
    CHECK(std::sqrt(dist) > 0.2 * expected);
    CHECK(std::sqrt(dist) < 3.0 * expected);
    CHECK(reg.trainable[size_t(r)] == 1);
}

TEST_CASE("view tokens are fixed per (dataset, modality, camera) and frozen") {
    TokenRegistry a = TokenRegistry::create(32, 1);
    TokenRegistry b = TokenRegistry::create(32, 99);  // different registry seed
    const int64_t ra = a.register_view(Modality::infrared, 1, "sysu");
    const int64_t rb = b.register_view(Modality::infrared, 1, "sysu");
    CHECK(a.tokens[size_t(ra)].surface == b.tokens[size_t(rb)].surface);
    CHECK(a.trainable[size_t(ra)] == 0);
    CHECK_THROWS_AS(a.register_view(Modality::infrared, 1, "sysu"), DataError);

    // Different cameras get different surfaces.
    const int64_t ra2 = a.register_view(Modality::infrared, 0, "sysu");
    CHECK(a.tokens[size_t(ra)].surface != a.tokens[size_t(ra2)].surface);
}

TEST_CASE("sysu-shaped registry carries 4 visible and 2 infrared view tokens") {
    TokenRegistry reg = TokenRegistry::create(32, 3);
    for (int64_t c = 0; c < 4; ++c) reg.register_view(Modality::visible, c, "sysu");
    for (int64_t c = 0; c < 2; ++c) reg.register_view(Modality::infrared, c, "sysu");
    int vis = 0, ir = 0;
    for (const auto& t : reg.tokens)
        if (t.kind == TokenKind::modality_view)
            (t.modality == Modality::visible ? vis : ir)++;
    CHECK(vis == 4);
    CHECK(ir == 2);
}

TEST_CASE("prompt template is byte-exact") {
    TokenRegistry reg = small_registry();
    PromptSpec spec{reg.row_of_identity(0), reg.row_of_view(Modality::infrared, 0, "toy")};
    const std::string id_surf = reg.tokens[size_t(spec.identity_row)].surface;
    const std::string view_surf = reg.tokens[size_t(spec.view_row)].surface;
    CHECK(prompt_string(reg, spec) == "a " + view_surf + " photo of " + id_surf + " person");
    CHECK(prompt_string(reg, spec, PromptVariant::identity_only) ==
          "a photo of " + id_surf + " person");
    CHECK(prompt_string(reg, spec, PromptVariant::modality_only) ==
          "a " + view_surf + " photo of person");
    CHECK(build_prompt(reg, spec) == build_prompt(reg, spec));
}

TEST_CASE("build_prompt validates token kinds") {
    TokenRegistry reg = small_registry();
    PromptSpec swapped{reg.row_of_view(Modality::visible, 0, "toy"), reg.row_of_identity(0)};
    CHECK_THROWS_AS(build_prompt(reg, swapped), DataError);
    PromptSpec missing{-1, reg.row_of_view(Modality::visible, 0, "toy")};
    CHECK_THROWS_AS(build_prompt(reg, missing), DataError);
}

TEST_CASE("lookup-mode encoder returns embedding rows unchanged") {
    TokenRegistry reg = small_registry();
    PromptEncoder enc = PromptEncoder::create(32, 7, PromptEncoder::Mode::lookup);
    const int64_t row = reg.row_of_identity(0);
    Tensor out = enc.encode(reg.table, {row}, nullptr);
    for (int64_t j = 0; j < 32; ++j) CHECK(out.at(0, j) == reg.table.at(row, j));
}

TEST_CASE("mixing encoder depends on position and locality") {
    TokenRegistry reg = small_registry();
    PromptEncoder enc = PromptEncoder::create(32, 7);
    const int64_t a = reg.word_row("a"), photo = reg.word_row("photo");
    Tensor e1 = enc.encode(reg.table, {a, photo}, nullptr);
    Tensor e2 = enc.encode(reg.table, {photo, a}, nullptr);
    // Same multiset of tokens, different order -> different conditioning.
    CHECK(max_abs_diff(e1, e2) > 1e-6);

    // Perturbing a used row changes the output; an unused row does not.
    PromptSpec spec{reg.row_of_identity(0), reg.row_of_view(Modality::visible, 0, "toy")};
    auto toks = build_prompt(reg, spec);
    Tensor base_out = enc.encode(reg.table, toks, nullptr);
    TokenRegistry reg2 = reg;
    reg2.table.at(reg.row_of_identity(0), 3) += 0.5;
    CHECK(max_abs_diff(enc.encode(reg2.table, toks, nullptr), base_out) > 1e-6);
    TokenRegistry reg3 = reg;
    reg3.table.at(reg.row_of_identity(1), 3) += 0.5;  // identity 1 not in prompt
    CHECK(max_abs_diff(enc.encode(reg3.table, toks, nullptr), base_out) == 0.0);
}

TEST_CASE("vocabulary isolation: registering tokens never changes base encodings") {
    TokenRegistry reg = TokenRegistry::create(32, 21);
    PromptEncoder enc = PromptEncoder::create(32, 7);
    std::vector<int64_t> base_tokens{reg.word_row("a"), reg.word_row("photo"),
                                     reg.word_row("of"), reg.word_row("person")};
    Tensor before = enc.encode(reg.table, base_tokens, nullptr);
    for (int64_t p = 0; p < 5; ++p) reg.register_identity(p, seed_combine(21, p));
    reg.register_view(Modality::infrared, 0, "toy");
    Tensor after = enc.encode(reg.table, base_tokens, nullptr);
    CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("encoder backward matches finite differences for trainable rows") {
    for (auto mode : {PromptEncoder::Mode::lookup, PromptEncoder::Mode::mixing}) {
        TokenRegistry reg = small_registry();
        PromptEncoder enc = PromptEncoder::create(32, 7, mode);
        PromptSpec spec{reg.row_of_identity(0), reg.row_of_view(Modality::infrared, 0, "toy")};
        auto toks = build_prompt(reg, spec);
        auto rng = make_rng(3);
        Tensor r = Tensor::randn({int64_t(toks.size()), 32}, rng);

        EncodeCtx ctx;
        enc.encode(reg.table, toks, &ctx);
        Tensor table_grad = Tensor::zeros(reg.table.shape);
        enc.backward(ctx, r, table_grad);

        auto loss = [&] { return dot(enc.encode(reg.table, toks, nullptr), r); };
        Tensor fd = fd_gradient(loss, reg.table, 1e-5);
        CHECK(max_rel_err(fd, table_grad) < 1e-4);
    }
}

TEST_CASE("mask_frozen zeroes exactly the frozen rows") {
    TokenRegistry reg = small_registry();
    Tensor g = Tensor::full(reg.table.shape, 1.0);
    reg.mask_frozen(g);
    for (int64_t i = 0; i < reg.rows(); ++i) {
        const bool expect_live = reg.trainable[size_t(i)] == 1;
        for (int64_t j = 0; j < reg.d_text; ++j)
            CHECK(g.at(i, j) == (expect_live ? 1.0 : 0.0));
    }
}

TEST_CASE("registry serialization round-trips at 32-bit precision") {
    namespace fs = std::filesystem;
    TokenRegistry reg = small_registry();
    const auto path = fs::temp_directory_path() / "dive_registry_rt.ckpt";
    CheckpointWriter w;
    save_registry(reg, w);
    w.save(path.string());
    CheckpointReader r(path.string());
    TokenRegistry reg2 = load_registry(r);
    fs::remove(path);

    REQUIRE(reg2.rows() == reg.rows());
    CHECK(reg2.d_text == reg.d_text);
    for (int64_t i = 0; i < reg.rows(); ++i) {
        CHECK(reg2.tokens[size_t(i)].surface == reg.tokens[size_t(i)].surface);
        CHECK(reg2.tokens[size_t(i)].kind == reg.tokens[size_t(i)].kind);
        CHECK(reg2.trainable[size_t(i)] == reg.trainable[size_t(i)]);
        for (int64_t j = 0; j < reg.d_text; ++j)
            CHECK(float(reg2.table.at(i, j)) == float(reg.table.at(i, j)));
    }
    CHECK(reg2.row_of_identity(0) == reg.row_of_identity(0));
    CHECK(reg2.row_of_view(Modality::infrared, 0, "toy") ==
          reg.row_of_view(Modality::infrared, 0, "toy"));
}
