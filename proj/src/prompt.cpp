#include "dive/prompt.hpp"

#include <sstream>

#include "dive/errors.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

const char* kBaseWords[] = {"a", "photo", "of", "person"};

std::string draw_surface(std::mt19937_64& rng) {
    static const char alphabet[] =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    std::uniform_int_distribution<int> pick(0, 61);
    std::string s(8, '\0');
    for (auto& c : s) c = alphabet[pick(rng)];
    return s;
}

std::string view_key(Modality k, int64_t camera_id, const std::string& dataset_id) {
    return dataset_id + "|" + to_string(k) + "|" + std::to_string(camera_id);
}

}  // namespace

TokenRegistry TokenRegistry::create(int64_t d_text, uint64_t seed) {
    TokenRegistry reg;
    reg.d_text = d_text;
    auto rng = make_rng(seed_combine(seed, "base_vocab"));
    const Scalar std = 1.0 / std::sqrt(Scalar(d_text));
    for (const char* w : kBaseWords) {
        PlaceholderToken tok;
        tok.surface = w;
        tok.kind = TokenKind::word;
        reg.add_token(std::move(tok), Tensor::randn({d_text}, rng, std), false);
    }
    return reg;
}

int64_t TokenRegistry::add_token(PlaceholderToken tok, const Tensor& row, bool trainable_row) {
    if (by_surface.count(tok.surface))
        throw DataError("token surface already registered: " + tok.surface);
    const int64_t idx = rows();
    Tensor grown = Tensor::zeros({idx + 1, d_text});
    std::copy(table.data.begin(), table.data.end(), grown.data.begin());
    std::copy(row.data.begin(), row.data.end(), grown.data.begin() + idx * d_text);
    table = std::move(grown);
    trainable.push_back(trainable_row ? 1 : 0);
    by_surface[tok.surface] = idx;
    tokens.push_back(std::move(tok));
    return idx;
}

int64_t TokenRegistry::register_identity(int64_t p, uint64_t rng_seed) {
    if (identity_rows_.count(p))
        throw DataError("identity " + std::to_string(p) + " already registered");
    auto rng = make_rng(rng_seed);
    std::string surface;
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 100) throw DataError("could not draw a fresh token surface");
        surface = draw_surface(rng);
        if (!by_surface.count(surface)) break;
    }
    // Mean of the base-vocabulary rows plus small noise; keeps new rows on the
    // same scale as the frozen vocabulary.
    Tensor row = Tensor::zeros({d_text});
    Scalar norm_sum = 0.0;
    const int64_t n_base = int64_t(std::size(kBaseWords));
    for (int64_t i = 0; i < n_base; ++i) {
        Scalar sq = 0.0;
        for (int64_t j = 0; j < d_text; ++j) {
            row.data[size_t(j)] += table.at(i, j) / Scalar(n_base);
            sq += table.at(i, j) * table.at(i, j);
        }
        norm_sum += std::sqrt(sq);
    }
    const Scalar sigma = 0.02 * (norm_sum / Scalar(n_base));
    std::normal_distribution<Scalar> noise(0.0, sigma);
    for (auto& v : row.data) v += noise(rng);

    PlaceholderToken tok;
    tok.surface = surface;
    tok.kind = TokenKind::identity;
    tok.identity = p;
    const int64_t idx = add_token(std::move(tok), row, true);
    identity_rows_[p] = idx;
    return idx;
}

int64_t TokenRegistry::register_view(Modality k, int64_t camera_id,
                                     const std::string& dataset_id) {
    const std::string key = view_key(k, camera_id, dataset_id);
    if (view_rows_.count(key)) throw DataError("view token already registered: " + key);
    // Surface and row derive from the (dataset, modality, camera) triple so
    // checkpoints are portable across runs.
    auto rng = make_rng(seed_combine(seed_combine(0x76696577ull, key), "view_token"));
    std::string surface;
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 100) throw DataError("could not draw a fresh view surface");
        surface = draw_surface(rng);
        if (!by_surface.count(surface)) break;
    }
    Tensor row = Tensor::randn({d_text}, rng, 1.0 / std::sqrt(Scalar(d_text)));

    PlaceholderToken tok;
    tok.surface = surface;
    tok.kind = TokenKind::modality_view;
    tok.modality = k;
    tok.camera_id = camera_id;
    tok.dataset_id = dataset_id;
    const int64_t idx = add_token(std::move(tok), row, false);
    view_rows_[key] = idx;
    return idx;
}

int64_t TokenRegistry::word_row(const std::string& word) const {
    auto it = by_surface.find(word);
    if (it == by_surface.end()) throw DataError("unknown word token: " + word);
    return it->second;
}

int64_t TokenRegistry::row_of_identity(int64_t p) const {
    auto it = identity_rows_.find(p);
    if (it == identity_rows_.end())
        throw DataError("identity " + std::to_string(p) + " has no registered token");
    return it->second;
}

int64_t TokenRegistry::row_of_view(Modality k, int64_t camera_id,
                                   const std::string& dataset_id) const {
    auto it = view_rows_.find(view_key(k, camera_id, dataset_id));
    if (it == view_rows_.end())
        throw DataError("view token not registered: " + view_key(k, camera_id, dataset_id));
    return it->second;
}

void TokenRegistry::mask_frozen(Tensor& table_grad) const {
    require_shape(table_grad, table.shape, "embedding gradient");
    for (int64_t i = 0; i < rows(); ++i)
        if (!trainable[size_t(i)])
            std::fill_n(table_grad.data.begin() + i * d_text, d_text, 0.0);
}

std::string to_string(PromptVariant v) {
    switch (v) {
        case PromptVariant::full: return "full";
        case PromptVariant::identity_only: return "identity_only";
        case PromptVariant::modality_only: return "modality_only";
    }
    return "full";
}

PromptVariant parse_prompt_variant(const std::string& s) {
    if (s == "full") return PromptVariant::full;
    if (s == "identity_only") return PromptVariant::identity_only;
    if (s == "modality_only") return PromptVariant::modality_only;
    throw DataError("unknown prompt variant '" + s + "'");
}

std::vector<int64_t> build_prompt(const TokenRegistry& reg, const PromptSpec& spec,
                                  PromptVariant variant) {
    auto check = [&](int64_t row, TokenKind kind, const char* what) {
        if (row < 0 || row >= reg.rows())
            throw DataError(std::string("prompt uses an unregistered ") + what + " token");
        if (reg.tokens[size_t(row)].kind != kind)
            throw DataError(std::string("prompt ") + what + " slot has wrong token kind");
    };
    std::vector<int64_t> seq;
    const int64_t a = reg.word_row("a"), photo = reg.word_row("photo"), of = reg.word_row("of"),
                  person = reg.word_row("person");
    switch (variant) {
        case PromptVariant::full:
            check(spec.view_row, TokenKind::modality_view, "view");
            check(spec.identity_row, TokenKind::identity, "identity");
            seq = {a, spec.view_row, photo, of, spec.identity_row, person};
            break;
        case PromptVariant::identity_only:
            check(spec.identity_row, TokenKind::identity, "identity");
            seq = {a, photo, of, spec.identity_row, person};
            break;
        case PromptVariant::modality_only:
            check(spec.view_row, TokenKind::modality_view, "view");
            seq = {a, spec.view_row, photo, of, person};
            break;
    }
    return seq;
}

std::string prompt_string(const TokenRegistry& reg, const PromptSpec& spec,
                          PromptVariant variant) {
    std::string out;
    for (int64_t row : build_prompt(reg, spec, variant)) {
        if (!out.empty()) out += ' ';
        out += reg.tokens[size_t(row)].surface;
    }
    return out;
}

PromptEncoder PromptEncoder::create(int64_t d_text, uint64_t seed, Mode mode) {
    PromptEncoder enc;
    enc.mode = mode;
    enc.d_text = d_text;
    enc.seed = seed;
    auto rng = make_rng(seed_combine(seed, "prompt_encoder"));
    enc.wq = nn::Linear::init(d_text, d_text, rng, false);
    enc.wk = nn::Linear::init(d_text, d_text, rng, false);
    enc.wv = nn::Linear::init(d_text, d_text, rng, false);
    enc.wo = nn::Linear::init(d_text, d_text, rng, false);
    return enc;
}

Tensor PromptEncoder::encode(const Tensor& table, const std::vector<int64_t>& token_rows,
                             EncodeCtx* ctx) const {
    const int64_t s = int64_t(token_rows.size()), d = table.size(1);
    if (d != d_text) throw DataError("embedding table width does not match encoder");
    Tensor e = Tensor::zeros({s, d});
    for (int64_t i = 0; i < s; ++i) {
        const int64_t row = token_rows[size_t(i)];
        if (row < 0 || row >= table.size(0)) throw DataError("prompt token has no embedding row");
        std::copy_n(table.data.begin() + row * d, d, e.data.begin() + i * d);
    }
    if (ctx) ctx->rows = token_rows;
    if (mode == Mode::lookup) {
        if (ctx) ctx->x = e;
        return e;
    }
    Tensor x = e;
    Tensor pos = nn::positional_encoding(s, d);
    x.add_(pos, 1.0);
    Tensor q = wq.forward(x), k = wk.forward(x), v = wv.forward(x);
    nn::AttentionCtx attn_ctx;
    Tensor ao = nn::attention_forward(q, k, v, heads, ctx ? &ctx->attn : &attn_ctx);
    Tensor out = wo.forward(ao);
    out.add_(x, 1.0);  // residual
    if (ctx) {
        ctx->x = std::move(x);
        ctx->attn_out = std::move(ao);
    }
    return out;
}

void PromptEncoder::backward(const EncodeCtx& ctx, const Tensor& gout,
                             Tensor& table_grad) const {
    const int64_t s = int64_t(ctx.rows.size()), d = d_text;
    Tensor gx;
    if (mode == Mode::lookup) {
        gx = gout;
    } else {
        // Non-const copies only to call Linear::backward; weights stay frozen
        // (trainable=false) so no weight gradients accumulate.
        auto& self = const_cast<PromptEncoder&>(*this);
        Tensor gao = self.wo.backward(ctx.attn_out, gout);
        Tensor gq, gk, gv;
        nn::attention_backward(ctx.attn, gao, gq, gk, gv);
        gx = gout;  // residual branch
        gx.add_(self.wq.backward(ctx.x, gq), 1.0);
        gx.add_(self.wk.backward(ctx.x, gk), 1.0);
        gx.add_(self.wv.backward(ctx.x, gv), 1.0);
    }
    for (int64_t i = 0; i < s; ++i) {
        const int64_t row = ctx.rows[size_t(i)];
        for (int64_t j = 0; j < d; ++j) table_grad.at(row, j) += gx.at(i, j);
    }
}

void save_registry(const TokenRegistry& reg, CheckpointWriter& w) {
    w.put_i64("registry/d_text", reg.d_text);
    w.put_tensor("registry/table", reg.table);
    std::ostringstream toks;
    for (const auto& t : reg.tokens) {
        toks << t.surface << '\t' << int(t.kind) << '\t' << t.identity << '\t'
             << to_string(t.modality) << '\t' << t.camera_id << '\t' << t.dataset_id << '\n';
    }
    w.put_string("registry/tokens", toks.str());
}

TokenRegistry load_registry(const CheckpointReader& r) {
    TokenRegistry reg;
    reg.d_text = r.i64("registry/d_text");
    reg.table = r.tensor("registry/table");
    std::istringstream toks(r.string("registry/tokens"));
    std::string line;
    int64_t idx = 0;
    while (std::getline(toks, line)) {
        std::istringstream ls(line);
        PlaceholderToken t;
        std::string kind_s, modality_s, identity_s, camera_s;
        std::getline(ls, t.surface, '\t');
        std::getline(ls, kind_s, '\t');
        std::getline(ls, identity_s, '\t');
        std::getline(ls, modality_s, '\t');
        std::getline(ls, camera_s, '\t');
        std::getline(ls, t.dataset_id, '\t');
        t.kind = TokenKind(std::stoi(kind_s));
        t.identity = std::stoll(identity_s);
        t.modality = parse_modality(modality_s);
        t.camera_id = std::stoll(camera_s);
        reg.by_surface[t.surface] = idx;
        reg.trainable.push_back(t.kind == TokenKind::identity ? 1 : 0);
        if (t.kind == TokenKind::identity) reg.identity_rows_[t.identity] = idx;
        if (t.kind == TokenKind::modality_view)
            reg.view_rows_[t.dataset_id + "|" + to_string(t.modality) + "|" +
                           std::to_string(t.camera_id)] = idx;
        reg.tokens.push_back(std::move(t));
        ++idx;
    }
    if (idx != reg.table.size(0)) throw DataError("registry token list does not match table rows");
    return reg;
}

}  // namespace dive
