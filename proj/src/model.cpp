#include "bob/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bob/special_tokens.hpp"

namespace bob {

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_ul: return "no_ul";
        case Ablation::e_d1: return "e_d1";
        case Ablation::e_only: return "e_only";
    }
    return "full";
}

Ablation parse_ablation(const std::string& name) {
    if (name == "full") return Ablation::full;
    if (name == "no_ul") return Ablation::no_ul;
    if (name == "e_d1") return Ablation::e_d1;
    if (name == "e_only") return Ablation::e_only;
    throw std::invalid_argument("unknown ablation '" + name + "' (expected full, no_ul, e_d1 or e_only)");
}

void ModelConfig::validate() const {
    if (hidden_size == 0 || num_heads == 0 || ffn_size == 0 || vocab_size == 0 || max_len == 0) {
        throw std::invalid_argument("model sizes must be positive");
    }
    if (hidden_size % num_heads != 0) {
        throw std::invalid_argument("hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " +
                                    std::to_string(num_heads));
    }
    if (vocab_size <= static_cast<std::size_t>(token::num_reserved)) {
        throw std::invalid_argument("vocab_size must exceed the reserved ids");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
    if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
}

ModelConfig ModelConfig::bert_base_preset() {
    ModelConfig c;
    c.num_layers = 12;
    c.hidden_size = 768;
    c.num_heads = 12;
    c.ffn_size = 3072;
    c.vocab_size = 30522;
    c.max_len = 512;
    c.dropout = 0.1;
    c.activation = Activation::gelu;
    return c;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tensor normal_param(const Shape& shape, double std_dev, Rng& rng) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = std_dev * standard_normal(rng);
    return Tensor::from(shape, std::move(values), true);
}

Linear make_linear(std::size_t in, std::size_t out, double std_dev, Rng& rng) {
    return {normal_param({in, out}, std_dev, rng), Tensor::zeros({out}, true)};
}

LayerNormParams make_norm(std::size_t width) {
    return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

AttentionParams make_attention(const ModelConfig& c, Rng& rng) {
    const auto h = c.hidden_size;
    AttentionParams a;
    a.query = make_linear(h, h, c.init_std, rng);
    a.key = make_linear(h, h, c.init_std, rng);
    a.value = make_linear(h, h, c.init_std, rng);
    a.output = make_linear(h, h, c.init_std, rng);
    return a;
}

FeedForwardParams make_ffn(const ModelConfig& c, Rng& rng) {
    return {make_linear(c.hidden_size, c.ffn_size, c.init_std, rng),
            make_linear(c.ffn_size, c.hidden_size, c.init_std, rng)};
}

void push_linear(std::vector<NamedParameter>& out, const std::string& prefix, const Linear& l, ParamGroup g) {
    out.push_back({prefix + ".weight", l.weight, g});
    out.push_back({prefix + ".bias", l.bias, g});
}

void push_norm(std::vector<NamedParameter>& out, const std::string& prefix, const LayerNormParams& n, ParamGroup g) {
    out.push_back({prefix + ".gain", n.gain, g});
    out.push_back({prefix + ".bias", n.bias, g});
}

void push_attention(std::vector<NamedParameter>& out, const std::string& prefix, const AttentionParams& a,
                    ParamGroup g) {
    push_linear(out, prefix + ".query", a.query, g);
    push_linear(out, prefix + ".key", a.key, g);
    push_linear(out, prefix + ".value", a.value, g);
    push_linear(out, prefix + ".output", a.output, g);
}

void push_ffn(std::vector<NamedParameter>& out, const std::string& prefix, const FeedForwardParams& f, ParamGroup g) {
    push_linear(out, prefix + ".up", f.up, g);
    push_linear(out, prefix + ".down", f.down, g);
}

}  // namespace

BobModel::BobModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const auto& c = config_;
    token_embedding = normal_param({c.vocab_size, c.hidden_size}, c.init_std, rng);
    type_embedding = normal_param({2, c.hidden_size}, c.init_std, rng);
    position_embedding = normal_param({c.max_len, c.hidden_size}, c.init_std, rng);
    if (c.embedding_norm) embedding_norm = make_norm(c.hidden_size);
    for (std::size_t i = 0; i < c.num_layers; ++i) {
        EncoderLayer l;
        l.self_attn = make_attention(c, rng);
        l.self_norm = make_norm(c.hidden_size);
        l.ffn = make_ffn(c, rng);
        l.ffn_norm = make_norm(c.hidden_size);
        encoder.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < c.num_layers; ++i) {
        GenerationLayer l;
        l.self_attn = make_attention(c, rng);
        l.self_norm = make_norm(c.hidden_size);
        l.cross_attn = make_attention(c, rng);
        l.cross_norm = make_norm(c.hidden_size);
        l.ffn = make_ffn(c, rng);
        l.ffn_norm = make_norm(c.hidden_size);
        d1.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < c.num_layers; ++i) {
        UnderstandingLayer l;
        l.persona_attn = make_attention(c, rng);
        l.persona_norm = make_norm(c.hidden_size);
        l.persona_ffn = make_ffn(c, rng);
        l.persona_ffn_norm = make_norm(c.hidden_size);
        l.response_attn = make_attention(c, rng);
        l.response_norm = make_norm(c.hidden_size);
        l.response_ffn = make_ffn(c, rng);
        l.response_ffn_norm = make_norm(c.hidden_size);
        d2.push_back(std::move(l));
    }
    if (!c.tie_embeddings) {
        d1_projection = normal_param({c.hidden_size, c.vocab_size}, c.init_std, rng);
        d2_projection = normal_param({c.hidden_size, c.vocab_size}, c.init_std, rng);
    }
}

std::vector<NamedParameter> BobModel::named_parameters() const {
    std::vector<NamedParameter> out;
    const auto theta = ParamGroup::theta;
    const auto gamma = ParamGroup::gamma;
    out.push_back({"theta.embed.token", token_embedding, theta});
    out.push_back({"theta.embed.type", type_embedding, theta});
    out.push_back({"theta.embed.position", position_embedding, theta});
    if (embedding_norm.gain.defined()) push_norm(out, "theta.embed.norm", embedding_norm, theta);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
        const std::string p = "theta.encoder.layer" + std::to_string(i);
        push_attention(out, p + ".self_attn", encoder[i].self_attn, theta);
        push_norm(out, p + ".self_norm", encoder[i].self_norm, theta);
        push_ffn(out, p + ".ffn", encoder[i].ffn, theta);
        push_norm(out, p + ".ffn_norm", encoder[i].ffn_norm, theta);
    }
    for (std::size_t i = 0; i < d1.size(); ++i) {
        const std::string p = "theta.d1.layer" + std::to_string(i);
        push_attention(out, p + ".self_attn", d1[i].self_attn, theta);
        push_norm(out, p + ".self_norm", d1[i].self_norm, theta);
        push_attention(out, p + ".cross_attn", d1[i].cross_attn, theta);
        push_norm(out, p + ".cross_norm", d1[i].cross_norm, theta);
        push_ffn(out, p + ".ffn", d1[i].ffn, theta);
        push_norm(out, p + ".ffn_norm", d1[i].ffn_norm, theta);
    }
    if (d1_projection.defined()) out.push_back({"theta.d1.projection", d1_projection, theta});
    for (std::size_t i = 0; i < d2.size(); ++i) {
        const std::string p = "gamma.d2.layer" + std::to_string(i);
        push_attention(out, p + ".persona_attn", d2[i].persona_attn, gamma);
        push_norm(out, p + ".persona_norm", d2[i].persona_norm, gamma);
        push_ffn(out, p + ".persona_ffn", d2[i].persona_ffn, gamma);
        push_norm(out, p + ".persona_ffn_norm", d2[i].persona_ffn_norm, gamma);
        push_attention(out, p + ".response_attn", d2[i].response_attn, gamma);
        push_norm(out, p + ".response_norm", d2[i].response_norm, gamma);
        push_ffn(out, p + ".response_ffn", d2[i].response_ffn, gamma);
        push_norm(out, p + ".response_ffn_norm", d2[i].response_ffn_norm, gamma);
    }
    if (d2_projection.defined()) out.push_back({"gamma.d2.projection", d2_projection, gamma});
    return out;
}

std::size_t BobModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
}

void BobModel::zero_grad() const {
    for (auto& p : named_parameters()) p.tensor.clear_grad();
}

bool BobModel::all_finite() const {
    for (const auto& p : named_parameters()) {
        for (double v : p.tensor.data()) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Input assembly

InputSequence build_input(const std::vector<std::vector<int>>& personas, const std::vector<int>& query,
                          const ModelConfig& config) {
    if (query.size() + 1 > config.max_len) {
        throw InputTooLong("query of " + std::to_string(query.size()) + " tokens does not fit max_len " +
                           std::to_string(config.max_len));
    }
    std::vector<int> persona_tokens;
    for (const auto& p : personas) persona_tokens.insert(persona_tokens.end(), p.begin(), p.end());
    const std::size_t budget = config.max_len - query.size() - 1;
    InputSequence seq;
    if (persona_tokens.size() > budget) {
        seq.truncated = persona_tokens.size() - budget;
        persona_tokens.erase(persona_tokens.begin(), persona_tokens.begin() + static_cast<std::ptrdiff_t>(seq.truncated));
    }
    seq.ids = persona_tokens;
    seq.ids.push_back(token::sep);
    seq.persona_length = seq.ids.size();
    seq.ids.insert(seq.ids.end(), query.begin(), query.end());
    seq.type_ids.assign(seq.ids.size(), 1);
    std::fill_n(seq.type_ids.begin(), seq.persona_length, 0);
    seq.position_ids.resize(seq.ids.size());
    for (std::size_t i = 0; i < seq.ids.size(); ++i) seq.position_ids[i] = static_cast<int>(i);
    seq.padding_mask.assign(seq.ids.size(), 0);
    return seq;
}

EncoderInput pad_inputs(const std::vector<InputSequence>& sequences) {
    if (sequences.empty()) throw std::invalid_argument("pad_inputs: empty batch");
    EncoderInput in;
    in.batch = sequences.size();
    for (const auto& s : sequences) {
        in.length = std::max(in.length, s.ids.size());
        in.persona_width = std::max(in.persona_width, s.persona_length);
    }
    const std::size_t n = in.batch * in.length;
    in.ids.assign(n, token::pad);
    in.type_ids.assign(n, 0);
    in.position_ids.assign(n, 0);
    in.padding_mask.assign(n, 1);
    const std::size_t pn = in.batch * in.persona_width;
    in.persona_ids.assign(pn, token::pad);
    in.persona_positions.assign(pn, 0);
    in.persona_mask.assign(pn, 1);
    for (std::size_t b = 0; b < in.batch; ++b) {
        const auto& s = sequences[b];
        for (std::size_t j = 0; j < s.ids.size(); ++j) {
            const std::size_t k = b * in.length + j;
            in.ids[k] = s.ids[j];
            in.type_ids[k] = s.type_ids[j];
            in.position_ids[k] = s.position_ids[j];
            in.padding_mask[k] = s.padding_mask[j];
        }
        for (std::size_t j = 0; j < s.persona_length; ++j) {
            const std::size_t k = b * in.persona_width + j;
            in.persona_ids[k] = s.ids[j];
            in.persona_positions[k] = s.position_ids[j];
            in.persona_mask[k] = 0;
        }
    }
    return in;
}

TokenRows pad_rows(const std::vector<std::vector<int>>& rows) {
    if (rows.empty()) throw std::invalid_argument("pad_rows: empty batch");
    TokenRows out;
    out.batch = rows.size();
    for (const auto& r : rows) out.length = std::max(out.length, r.size());
    if (out.length == 0) throw std::invalid_argument("pad_rows: all rows empty");
    out.ids.assign(out.batch * out.length, token::pad);
    out.padding_mask.assign(out.batch * out.length, 1);
    for (std::size_t b = 0; b < out.batch; ++b) {
        for (std::size_t j = 0; j < rows[b].size(); ++j) {
            out.ids[b * out.length + j] = rows[b][j];
            out.padding_mask[b * out.length + j] = 0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blocks

Tensor linear(const Tensor& x, const Linear& layer) { return add(matmul(x, layer.weight), layer.bias); }

namespace {

Tensor activation(const Tensor& x, Activation a) { return a == Activation::gelu ? gelu(x) : relu(x); }

Tensor feed_forward(const Tensor& x, const FeedForwardParams& f, Activation a) {
    return linear(activation(linear(x, f.up), a), f.down);
}

Tensor maybe_dropout(const Tensor& x, double rate, const ForwardMode& mode) {
    return rate > 0.0 ? dropout(x, rate, *mode.rng) : x;
}

Tensor add_norm(const Tensor& x, const Tensor& sublayer, const LayerNormParams& norm, double rate,
                const ForwardMode& mode) {
    return layer_norm(add(x, maybe_dropout(sublayer, rate, mode)), norm.gain, norm.bias);
}

// [b, t, h] -> [b * heads, t, d]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t b = x.dim(0), t = x.dim(1), h = x.dim(2), d = h / heads;
    Tensor y = transpose(reshape(x, {b, t, heads, d}), 1, 2);
    return reshape(y, {b * heads, t, d});
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
    const std::size_t t = x.dim(1), d = x.dim(2);
    Tensor y = transpose(reshape(x, {batch, heads, t, d}), 1, 2);
    return reshape(y, {batch, t, heads * d});
}

Tensor project_vocab(const Tensor& hidden, const Tensor& embedding_table, const Tensor& untied) {
    if (untied.defined()) return matmul(hidden, untied);
    return matmul(hidden, embedding_table, true);
}

}  // namespace

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, const BoolTensor& mask,
                            const AttentionParams& params, std::size_t num_heads) {
    if (query.rank() != 3 || key.rank() != 3 || value.rank() != 3 || key.shape() != value.shape() ||
        query.dim(0) != key.dim(0) || query.dim(2) != key.dim(2)) {
        throw DimensionError("multi_head_attention: query " + shape_str(query.shape()) + ", key " +
                             shape_str(key.shape()) + ", value " + shape_str(value.shape()));
    }
    const std::size_t batch = query.dim(0), tq = query.dim(1), tk = key.dim(1), hidden = query.dim(2);
    if (num_heads == 0 || hidden % num_heads != 0) {
        throw DimensionError("multi_head_attention: hidden " + std::to_string(hidden) + " not divisible into " +
                             std::to_string(num_heads) + " heads");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hidden / num_heads));
    Tensor q = split_heads(linear(query, params.query), num_heads);
    Tensor k = split_heads(linear(key, params.key), num_heads);
    Tensor v = split_heads(linear(value, params.value), num_heads);
    Tensor scores = reshape(scale(matmul(q, k, true), inv_sqrt_d), {batch, num_heads, tq, tk});
    scores = masked_fill(scores, mask, -1e9);
    Tensor weights = reshape(softmax(scores, 3), {batch * num_heads, tq, tk});
    Tensor context = merge_heads(matmul(weights, v), batch, num_heads);
    return linear(context, params.output);
}

BoolTensor key_padding_mask(const BoolTensor& padding, std::size_t batch, std::size_t keys) {
    if (padding.numel() != batch * keys) {
        throw DimensionError("key_padding_mask: padding " + shape_str(padding.shape) + " for " +
                             std::to_string(batch) + "x" + std::to_string(keys));
    }
    return BoolTensor({batch, 1, 1, keys}, padding.data);
}

BoolTensor causal_mask(const BoolTensor& padding, std::size_t batch, std::size_t length) {
    if (padding.numel() != batch * length) {
        throw DimensionError("causal_mask: padding " + shape_str(padding.shape) + " for " + std::to_string(batch) +
                             "x" + std::to_string(length));
    }
    BoolTensor m({batch, 1, length, length}, false);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < length; ++i) {
            for (std::size_t j = 0; j < length; ++j) {
                m.data[(b * length + i) * length + j] = (j > i || padding.data[b * length + j]) ? 1 : 0;
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Embeddings

namespace {

Tensor finish_embedding(const BobModel& model, const Tensor& summed, bool detached) {
    const auto& norm = model.embedding_norm;
    if (!norm.gain.defined()) return summed;
    if (detached) return layer_norm(summed, norm.gain.detach(), norm.bias.detach());
    return layer_norm(summed, norm.gain, norm.bias);
}

}  // namespace

Tensor embed_inputs(const BobModel& model, const EncoderInput& input) {
    const Shape idx{input.batch, input.length};
    Tensor tok = embedding(model.token_embedding, input.ids, idx);
    Tensor typ = embedding(model.type_embedding, input.type_ids, idx);
    Tensor pos = embedding(model.position_embedding, input.position_ids, idx);
    return finish_embedding(model, add(add(tok, typ), pos), false);
}

Tensor persona_embeddings(const BobModel& model, std::span<const int> ids, std::span<const int> positions,
                          std::size_t batch, std::size_t width) {
    const Shape idx{batch, width};
    const std::vector<int> types(ids.size(), 0);
    Tensor tok = embedding(model.token_embedding.detach(), ids, idx);
    Tensor typ = embedding(model.type_embedding.detach(), types, idx);
    Tensor pos = embedding(model.position_embedding.detach(), positions, idx);
    return finish_embedding(model, add(add(tok, typ), pos), true);
}

Tensor embed_targets(const BobModel& model, const TokenRows& rows, bool detached) {
    if (rows.length > model.config().max_len) {
        throw InputTooLong("target of " + std::to_string(rows.length) + " positions exceeds max_len " +
                           std::to_string(model.config().max_len));
    }
    const Shape idx{rows.batch, rows.length};
    std::vector<int> positions(rows.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % rows.length);
    const Tensor tok_table = detached ? model.token_embedding.detach() : model.token_embedding;
    const Tensor pos_table = detached ? model.position_embedding.detach() : model.position_embedding;
    return finish_embedding(model, add(embedding(tok_table, rows.ids, idx), embedding(pos_table, positions, idx)),
                            detached);
}

// ---------------------------------------------------------------------------
// Stacks

EncodedBatch encode(const BobModel& model, const EncoderInput& input, const ForwardMode& mode) {
    const auto& c = model.config();
    const double rate = mode.dropout_rate(c);
    EncodedBatch out;
    out.padding_mask = BoolTensor({input.batch, input.length}, input.padding_mask);
    out.persona_mask = BoolTensor({input.batch, input.persona_width}, input.persona_mask);
    const BoolTensor mask = key_padding_mask(out.padding_mask, input.batch, input.length);

    Tensor h = maybe_dropout(embed_inputs(model, input), rate, mode);
    for (const auto& layer : model.encoder) {
        h = add_norm(h, multi_head_attention(h, h, h, mask, layer.self_attn, c.num_heads), layer.self_norm, rate, mode);
        h = add_norm(h, feed_forward(h, layer.ffn, c.activation), layer.ffn_norm, rate, mode);
    }
    out.hidden = h;

    if (c.persona_source == PersonaSource::encoder) {
        std::vector<int> rows(input.batch * input.persona_width);
        for (std::size_t b = 0; b < input.batch; ++b) {
            for (std::size_t j = 0; j < input.persona_width; ++j) {
                const std::size_t src = input.persona_mask[b * input.persona_width + j] ? 0 : j;
                rows[b * input.persona_width + j] = static_cast<int>(b * input.length + src);
            }
        }
        Tensor flat = reshape(h, {input.batch * input.length, c.hidden_size});
        out.persona = embedding(flat, rows, {input.batch, input.persona_width});
    } else {
        out.persona =
            persona_embeddings(model, input.persona_ids, input.persona_positions, input.batch, input.persona_width);
    }
    return out;
}

DecoderOutput decode_d1(const BobModel& model, const TokenRows& target, const EncodedBatch& encoded,
                        const ForwardMode& mode, const D1Options& options) {
    const auto& c = model.config();
    const double rate = mode.dropout_rate(c);
    const std::size_t batch = target.batch;
    if (encoded.hidden.dim(0) != batch) {
        throw DimensionError("decode_d1: target batch " + std::to_string(batch) + " vs encoder output " +
                             shape_str(encoded.hidden.shape()));
    }
    const BoolTensor target_pad({batch, target.length}, target.padding_mask);
    const BoolTensor self_mask = causal_mask(target_pad, batch, target.length);
    const BoolTensor cross_mask = key_padding_mask(encoded.padding_mask, batch, encoded.hidden.dim(1));

    Tensor r = maybe_dropout(embed_targets(model, target), rate, mode);
    for (const auto& layer : model.d1) {
        r = add_norm(r, multi_head_attention(r, r, r, self_mask, layer.self_attn, c.num_heads), layer.self_norm, rate,
                     mode);
        if (options.skip_cross_attention) {
            r = layer_norm(r, layer.cross_norm.gain, layer.cross_norm.bias);
        } else {
            Tensor ctx = multi_head_attention(r, encoded.hidden, encoded.hidden, cross_mask, layer.cross_attn,
                                              c.num_heads);
            r = add_norm(r, ctx, layer.cross_norm, rate, mode);
        }
        r = add_norm(r, feed_forward(r, layer.ffn, c.activation), layer.ffn_norm, rate, mode);
    }
    return {r, project_vocab(r, model.token_embedding, model.d1_projection)};
}

DecoderOutput decode_d2(const BobModel& model, const Tensor& persona, const BoolTensor& persona_mask,
                        const Tensor& r1, const BoolTensor& r1_mask, const ForwardMode& mode) {
    const auto& c = model.config();
    const double rate = mode.dropout_rate(c);
    const std::size_t batch = r1.dim(0);
    const std::size_t length = r1.dim(1);
    if (persona.dim(0) != batch) {
        throw DimensionError("decode_d2: persona " + shape_str(persona.shape()) + " vs R1 " + shape_str(r1.shape()));
    }
    const BoolTensor p_mask = key_padding_mask(persona_mask, batch, persona.dim(1));
    const BoolTensor r_mask = c.d2_causal ? causal_mask(r1_mask, batch, length) : key_padding_mask(r1_mask, batch, length);

    Tensor r = r1;
    for (const auto& layer : model.d2) {
        Tensor p = add_norm(r, multi_head_attention(r, persona, persona, p_mask, layer.persona_attn, c.num_heads),
                            layer.persona_norm, rate, mode);
        p = add_norm(p, feed_forward(p, layer.persona_ffn, c.activation), layer.persona_ffn_norm, rate, mode);
        r = add_norm(p, multi_head_attention(p, r1, r1, r_mask, layer.response_attn, c.num_heads),
                     layer.response_norm, rate, mode);
        r = add_norm(r, feed_forward(r, layer.response_ffn, c.activation), layer.response_ffn_norm, rate, mode);
    }
    return {r, project_vocab(r, model.token_embedding.detach(), model.d2_projection)};
}

Tensor encoder_logits(const BobModel& model, const EncodedBatch& encoded) {
    return project_vocab(encoded.hidden, model.token_embedding, model.d1_projection);
}

}  // namespace bob
