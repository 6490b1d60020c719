#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dive/checkpoint.hpp"
#include "dive/nn.hpp"
#include "dive/reid_dataset.hpp"
#include "dive/tensor.hpp"

namespace dive {

enum class TokenKind { word, identity, modality_view };

struct PlaceholderToken {
    std::string surface;  // 8-char alphanumeric for placeholders; literal text for words
    TokenKind kind = TokenKind::word;
    int64_t identity = -1;  // identity tokens
    Modality modality = Modality::visible;  // view tokens
    int64_t camera_id = -1;
    std::string dataset_id;
};

// Token table with one embedding row per token. Word and view rows are
// frozen; identity rows are trainable.
struct TokenRegistry {
    int64_t d_text = 256;
    std::vector<PlaceholderToken> tokens;
    Tensor table;  // (rows, d_text)
    std::vector<uint8_t> trainable;
    std::unordered_map<std::string, int64_t> by_surface;

    static TokenRegistry create(int64_t d_text, uint64_t seed);

    int64_t register_identity(int64_t p, uint64_t rng_seed);
    int64_t register_view(Modality k, int64_t camera_id, const std::string& dataset_id);

    int64_t rows() const { return int64_t(tokens.size()); }
    int64_t word_row(const std::string& word) const;
    int64_t row_of_identity(int64_t p) const;
    int64_t row_of_view(Modality k, int64_t camera_id, const std::string& dataset_id) const;
    bool has_identity(int64_t p) const { return identity_rows_.count(p) > 0; }

    // Zeroes gradient rows of frozen tokens so the optimizer never moves them.
    void mask_frozen(Tensor& table_grad) const;

  private:
    std::map<int64_t, int64_t> identity_rows_;
    std::map<std::string, int64_t> view_rows_;  // "dataset|modality|camera" -> row
    int64_t add_token(PlaceholderToken tok, const Tensor& row, bool trainable_row);
    friend TokenRegistry load_registry(const CheckpointReader& r);
};

struct PromptSpec {
    int64_t identity_row = -1;
    int64_t view_row = -1;
};

enum class PromptVariant { full, identity_only, modality_only };
std::string to_string(PromptVariant v);
PromptVariant parse_prompt_variant(const std::string& s);

// Token-id sequence for "a {view} photo of {identity} person" (variants drop
// one placeholder each).
std::vector<int64_t> build_prompt(const TokenRegistry& reg, const PromptSpec& spec,
                                  PromptVariant variant = PromptVariant::full);
std::string prompt_string(const TokenRegistry& reg, const PromptSpec& spec,
                          PromptVariant variant = PromptVariant::full);

// Conditioning encoder: trainable lookup plus an optional fixed mixing block
// (frozen single self-attention with positional encoding and residual).
struct EncodeCtx {
    std::vector<int64_t> rows;
    Tensor x;         // lookup + positional encoding
    Tensor attn_out;  // attention output before the frozen output projection
    nn::AttentionCtx attn;
};

struct PromptEncoder {
    enum class Mode { lookup, mixing };
    Mode mode = Mode::mixing;
    int64_t d_text = 256;
    int64_t heads = 4;
    uint64_t seed = 0;
    nn::Linear wq, wk, wv, wo;  // frozen weights, no bias

    static PromptEncoder create(int64_t d_text, uint64_t seed, Mode mode = Mode::mixing);
    Tensor encode(const Tensor& table, const std::vector<int64_t>& token_rows,
                  EncodeCtx* ctx) const;
    // Routes conditioning gradients back to embedding rows (all rows; the
    // registry's mask_frozen decides which ones the optimizer may use).
    void backward(const EncodeCtx& ctx, const Tensor& gout, Tensor& table_grad) const;
};

void save_registry(const TokenRegistry& reg, CheckpointWriter& w);
TokenRegistry load_registry(const CheckpointReader& r);

}  // namespace dive
