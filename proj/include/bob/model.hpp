#pragma once

// Encoder E, generation decoder D1 and consistency decoder D2.
//
// All sublayers are post-norm: LayerNorm(x + Sublayer(x)). D1 attends
// causally over the target prefix and cross-attends to the encoder output.
// D2 alternates attention over the persona embeddings and over R1, with no
// causal mask unless ModelConfig::d2_causal is set.

#include <cstddef>
#include <string>
#include <vector>

#include "bob/tensor.hpp"

namespace bob {

enum class Ablation { full, no_ul, e_d1, e_only };
enum class Activation { relu, gelu };
/// What D2 reads as the persona representation P.
enum class PersonaSource { embeddings, encoder };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& name);

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t hidden_size = 64;
    std::size_t num_heads = 4;
    std::size_t ffn_size = 256;
    std::size_t vocab_size = 128;
    std::size_t max_len = 64;
    double dropout = 0.1;
    double init_std = 0.02;
    Ablation ablation = Ablation::full;
    Activation activation = Activation::relu;
    bool tie_embeddings = true;
    bool d2_causal = false;
    /// LayerNorm over the summed token/type/position embeddings.
    bool embedding_norm = true;
    PersonaSource persona_source = PersonaSource::embeddings;

    std::size_t head_dim() const { return hidden_size / num_heads; }
    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    /// BERT-base sized stacks: 12 layers, hidden 768.
    static ModelConfig bert_base_preset();
};

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

struct AttentionParams {
    Linear query;
    Linear key;
    Linear value;
    Linear output;
};

struct FeedForwardParams {
    Linear up;
    Linear down;
};

struct EncoderLayer {
    AttentionParams self_attn;
    LayerNormParams self_norm;
    FeedForwardParams ffn;
    LayerNormParams ffn_norm;
};

struct GenerationLayer {
    AttentionParams self_attn;
    LayerNormParams self_norm;
    AttentionParams cross_attn;
    LayerNormParams cross_norm;
    FeedForwardParams ffn;
    LayerNormParams ffn_norm;
};

/// One D2 layer: p = FFN(MHA(r, P, P)); r' = FFN(MHA(p, R1, R1)).
struct UnderstandingLayer {
    AttentionParams persona_attn;
    LayerNormParams persona_norm;
    FeedForwardParams persona_ffn;
    LayerNormParams persona_ffn_norm;
    AttentionParams response_attn;
    LayerNormParams response_norm;
    FeedForwardParams response_ffn;
    LayerNormParams response_ffn_norm;
};

enum class ParamGroup { theta, gamma };

struct NamedParameter {
    std::string name;
    Tensor tensor;
    ParamGroup group;
};

class BobModel {
public:
    explicit BobModel(ModelConfig config, std::uint64_t seed = 0);

    const ModelConfig& config() const { return config_; }

    /// Deterministic order; names are prefixed theta.* or gamma.*.
    std::vector<NamedParameter> named_parameters() const;
    std::size_t parameter_count() const;
    void zero_grad() const;
    bool all_finite() const;

    Tensor token_embedding;     // [vocab, hidden]
    Tensor type_embedding;      // [2, hidden]
    Tensor position_embedding;  // [max_len, hidden]
    /// Only populated when ModelConfig::embedding_norm is set.
    LayerNormParams embedding_norm;
    std::vector<EncoderLayer> encoder;
    std::vector<GenerationLayer> d1;
    std::vector<UnderstandingLayer> d2;
    /// Only populated when embeddings are untied.
    Tensor d1_projection;  // [hidden, vocab]
    Tensor d2_projection;  // [hidden, vocab]

private:
    ModelConfig config_;
};

/// Dropout is applied only when training and an rng is supplied.
struct ForwardMode {
    bool training = false;
    Rng* rng = nullptr;

    double dropout_rate(const ModelConfig& c) const { return training && rng ? c.dropout : 0.0; }
};

// ---------------------------------------------------------------------------
// Input assembly

/// Encoder input for one example: persona tokens, [s], query tokens.
struct InputSequence {
    std::vector<int> ids;
    std::vector<int> type_ids;
    std::vector<int> position_ids;
    std::vector<std::uint8_t> padding_mask;
    /// Length of the type-0 segment (personas plus separator).
    std::size_t persona_length = 0;
    /// Persona tokens dropped to fit max_len.
    std::size_t truncated = 0;
};

class InputTooLong : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Lays out personas in order, then [s], then the query. Oldest persona
/// tokens are dropped first when the total exceeds max_len; throws
/// InputTooLong when the query and separator alone do not fit.
InputSequence build_input(const std::vector<std::vector<int>>& personas, const std::vector<int>& query,
                          const ModelConfig& config);

/// Padded batch of encoder inputs, row-major [batch, length].
struct EncoderInput {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<int> ids;
    std::vector<int> type_ids;
    std::vector<int> position_ids;
    std::vector<std::uint8_t> padding_mask;
    /// Type-0 segment, padded to its own width, for the persona view P.
    std::size_t persona_width = 0;
    std::vector<int> persona_ids;
    std::vector<int> persona_positions;
    std::vector<std::uint8_t> persona_mask;
};

EncoderInput pad_inputs(const std::vector<InputSequence>& sequences);

/// Padded decoder token rows [batch, length] with a padding mask.
struct TokenRows {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<int> ids;
    std::vector<std::uint8_t> padding_mask;
};

TokenRows pad_rows(const std::vector<std::vector<int>>& rows);

// ---------------------------------------------------------------------------
// Forward passes

struct EncodedBatch {
    Tensor hidden;   // H [batch, length, hidden]
    Tensor persona;  // P [batch, persona_width, hidden]
    BoolTensor padding_mask;  // [batch, length]
    BoolTensor persona_mask;  // [batch, persona_width]
};

/// token + type + position embeddings for an encoder batch.
Tensor embed_inputs(const BobModel& model, const EncoderInput& input);
/// Raw embeddings of the type-0 segment, read through detached tables.
Tensor persona_embeddings(const BobModel& model, std::span<const int> ids, std::span<const int> positions,
                          std::size_t batch, std::size_t width);
/// token + position embeddings for decoder-side rows. `detached` reads
/// constant copies of the tables.
Tensor embed_targets(const BobModel& model, const TokenRows& rows, bool detached = false);

EncodedBatch encode(const BobModel& model, const EncoderInput& input, const ForwardMode& mode);

struct DecoderOutput {
    Tensor hidden;  // [batch, t, hidden]
    Tensor logits;  // [batch, t, vocab]
};

struct D1Options {
    /// Replaces the cross-attention sublayer output with zeros.
    bool skip_cross_attention = false;
};

DecoderOutput decode_d1(const BobModel& model, const TokenRows& target, const EncodedBatch& encoded,
                        const ForwardMode& mode, const D1Options& options = {});

/// Never sees the query: only P, R1 and their masks.
DecoderOutput decode_d2(const BobModel& model, const Tensor& persona, const BoolTensor& persona_mask,
                        const Tensor& r1, const BoolTensor& r1_mask, const ForwardMode& mode);

/// Encoder outputs projected to the vocabulary, for the encoder-only ablation.
Tensor encoder_logits(const BobModel& model, const EncodedBatch& encoded);

// ---------------------------------------------------------------------------
// Building blocks, exposed for tests.

Tensor linear(const Tensor& x, const Linear& layer);

/// softmax(Q K^T / sqrt(d_head) masked) V per head, heads concatenated,
/// then the output projection. query [b, tq, h], key/value [b, tk, h];
/// mask broadcastable to [b, heads, tq, tk], true = blocked.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, const BoolTensor& mask,
                            const AttentionParams& params, std::size_t num_heads);

/// [b, 1, 1, tk] mask from a [b, tk] key padding mask.
BoolTensor key_padding_mask(const BoolTensor& padding, std::size_t batch, std::size_t keys);
/// [b, 1, t, t] combining left-to-right masking with key padding.
BoolTensor causal_mask(const BoolTensor& padding, std::size_t batch, std::size_t length);

}  // namespace bob
