#include "bob/objectives.hpp"

#include <cmath>

#include "bob/special_tokens.hpp"

namespace bob {

void TrainConfig::validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw std::invalid_argument("adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

TrainConfig TrainConfig::bert_base_preset() {
    TrainConfig c;
    c.lr = 2e-5;
    return c;
}

NonFiniteLoss::NonFiniteLoss(std::string term, double value)
    : std::runtime_error("non-finite loss in term " + term + " (" + std::to_string(value) + "); step aborted"),
      term_(std::move(term)) {}

// ---------------------------------------------------------------------------

std::size_t count_targets(std::span<const int> targets) {
    std::size_t n = 0;
    for (int t : targets) n += t >= 0 ? 1 : 0;
    return n;
}

namespace {

Tensor flatten_logits(const Tensor& logits) {
    const std::size_t v = logits.shape().back();
    return reshape(logits, {logits.numel() / v, v});
}

Tensor token_mean(const Tensor& per_token, std::span<const int> targets) {
    const std::size_t n = count_targets(targets);
    if (n == 0) throw std::invalid_argument("no scored tokens in batch");
    return scale(sum(per_token), 1.0 / static_cast<double>(n));
}

}  // namespace

Tensor mean_token_nll(const Tensor& logits, std::span<const int> targets) {
    return token_mean(cross_entropy(flatten_logits(logits), targets), targets);
}

Tensor mean_token_unlikelihood(const Tensor& logits, std::span<const int> targets) {
    return token_mean(unlikelihood(flatten_logits(logits), targets), targets);
}

// ---------------------------------------------------------------------------

DialogueForward dialogue_forward(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode,
                                 bool run_d2) {
    DialogueForward f;
    f.encoded = encode(model, batch.encoder, mode);
    f.d1 = decode_d1(model, batch.target_in, f.encoded, mode);
    if (run_d2) {
        const BoolTensor r1_mask({batch.target_in.batch, batch.target_in.length}, batch.target_in.padding_mask);
        f.d2 = decode_d2(model, f.encoded.persona, f.encoded.persona_mask, f.d1.hidden, r1_mask, mode);
    }
    return f;
}

Tensor nll_d1(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode) {
    return mean_token_nll(dialogue_forward(model, batch, mode, false).d1.logits, batch.target_out);
}

Tensor nll_d2(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode) {
    return mean_token_nll(dialogue_forward(model, batch, mode, true).d2.logits, batch.target_out);
}

Tensor inference_logits(const BobModel& model, const InferenceBatch& batch, const ForwardMode& mode) {
    const auto& c = model.config();
    Tensor persona;
    const BoolTensor persona_mask({batch.batch, batch.premise_width}, batch.premise_mask);
    if (c.persona_source == PersonaSource::encoder) {
        std::vector<InputSequence> seqs;
        for (std::size_t b = 0; b < batch.batch; ++b) {
            InputSequence s;
            for (std::size_t j = 0; j < batch.premise_width; ++j) {
                if (batch.premise_mask[b * batch.premise_width + j]) break;
                s.ids.push_back(batch.premise_ids[b * batch.premise_width + j]);
            }
            s.persona_length = s.ids.size();
            s.type_ids.assign(s.ids.size(), 0);
            s.position_ids.resize(s.ids.size());
            for (std::size_t j = 0; j < s.ids.size(); ++j) s.position_ids[j] = static_cast<int>(j);
            s.padding_mask.assign(s.ids.size(), 0);
            seqs.push_back(std::move(s));
        }
        persona = encode(model, pad_inputs(seqs), mode).persona;
    } else {
        persona = persona_embeddings(model, batch.premise_ids, batch.premise_positions, batch.batch,
                                     batch.premise_width);
    }
    const Tensor hypothesis = embed_targets(model, batch.hypothesis_in, true);
    const BoolTensor hyp_mask({batch.hypothesis_in.batch, batch.hypothesis_in.length}, batch.hypothesis_in.padding_mask);
    return decode_d2(model, persona, persona_mask, hypothesis, hyp_mask, mode).logits;
}

Tensor ul_positive(const BobModel& model, const InferenceBatch& batch, const ForwardMode& mode) {
    return mean_token_nll(inference_logits(model, batch, mode), batch.hypothesis_out);
}

Tensor ul_negative(const BobModel& model, const InferenceBatch& batch, const ForwardMode& mode) {
    return mean_token_unlikelihood(inference_logits(model, batch, mode), batch.hypothesis_out);
}

InputSequence masked_lm_input(const TokenizedDialogue& example, std::size_t position, const ModelConfig& config) {
    if (position > example.response.size()) throw std::out_of_range("masked_lm_input: position past eos");
    std::vector<int> tail = example.query;
    tail.push_back(token::sep);
    tail.insert(tail.end(), example.response.begin(), example.response.begin() + static_cast<std::ptrdiff_t>(position));
    tail.push_back(token::mask);
    return build_input(example.personas, tail, config);
}

Tensor masked_lm_loss(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode, Rng& rng) {
    const auto& c = model.config();
    std::vector<InputSequence> seqs;
    std::vector<int> targets;
    for (const auto& ex : batch.examples) {
        const std::size_t n = ex.response.size() + 1;
        const std::size_t k = std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
        seqs.push_back(masked_lm_input(ex, k, c));
        targets.push_back(k < ex.response.size() ? ex.response[k] : token::eos);
    }
    const EncoderInput input = pad_inputs(seqs);
    const EncodedBatch enc = encode(model, input, mode);
    std::vector<int> rows;
    for (std::size_t b = 0; b < seqs.size(); ++b) rows.push_back(static_cast<int>(b * input.length + seqs[b].ids.size() - 1));
    Tensor flat = reshape(enc.hidden, {input.batch * input.length, c.hidden_size});
    Tensor picked = embedding(flat, rows, {seqs.size()});
    EncodedBatch view;
    view.hidden = picked;
    return mean_token_nll(encoder_logits(model, view), targets);
}

InferenceSplit split_inference(const std::vector<InferencePair>& pairs) {
    InferenceSplit split;
    for (const auto& p : pairs) {
        if (p.label == NliLabel::entail) split.positive.push_back(p);
        if (p.label == NliLabel::contradict) split.negative.push_back(p);
    }
    return split;
}

// ---------------------------------------------------------------------------

void adam_step(std::span<Tensor> params, AdamState& state, const TrainConfig& config) {
    if (state.slots.size() < params.size()) state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.has_grad()) continue;
        AdamSlot& slot = state.slots[i];
        const std::size_t n = p.numel();
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        }
        ++slot.t;
        const double b1 = config.adam_beta1;
        const double b2 = config.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(slot.t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(slot.t));
        auto g = p.grad();
        auto w = p.mutable_data();
        for (std::size_t j = 0; j < n; ++j) {
            slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * g[j];
            slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * g[j] * g[j];
            const double m_hat = slot.m[j] / c1;
            const double v_hat = slot.v[j] / c2;
            w[j] -= config.lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
        }
    }
}

LossBreakdown training_step(BobModel& model, AdamState& state, const DialogueBatch& dialogue,
                            const InferenceBatch* positive, const InferenceBatch* negative, const TrainConfig& config,
                            Rng& rng) {
    const Ablation ablation = model.config().ablation;
    model.zero_grad();
    const ForwardMode mode{true, &rng};

    Tensor t_nll_d1;
    Tensor t_nll_d2;
    Tensor t_ul_pos;
    Tensor t_ul_neg;
    if (ablation == Ablation::e_only) {
        t_nll_d1 = masked_lm_loss(model, dialogue, mode, rng);
    } else {
        const bool run_d2 = ablation != Ablation::e_d1;
        DialogueForward f = dialogue_forward(model, dialogue, mode, run_d2);
        t_nll_d1 = mean_token_nll(f.d1.logits, dialogue.target_out);
        if (run_d2) t_nll_d2 = mean_token_nll(f.d2.logits, dialogue.target_out);
        if (ablation == Ablation::full) {
            if (positive) t_ul_pos = ul_positive(model, *positive, mode);
            if (negative) t_ul_neg = ul_negative(model, *negative, mode);
        }
    }

    LossBreakdown out;
    const auto value = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
    out.nll_d1 = value(t_nll_d1);
    out.nll_d2 = value(t_nll_d2);
    out.ul_pos = value(t_ul_pos);
    out.ul_neg = value(t_ul_neg);
    out.l1 = out.nll_d1 + config.alpha * out.nll_d2;
    out.l2 = config.beta * out.ul_pos + (1.0 - config.beta) * out.ul_neg;
    out.total = out.l1 + out.l2;

    const std::pair<const char*, double> terms[] = {
        {"nll_d1", out.nll_d1}, {"nll_d2", out.nll_d2}, {"ul_pos", out.ul_pos}, {"ul_neg", out.ul_neg}};
    for (const auto& [name, v] : terms) {
        if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
    }

    Tensor total = t_nll_d1;
    if (t_nll_d2.defined()) total = add(total, scale(t_nll_d2, config.alpha));
    if (t_ul_pos.defined()) total = add(total, scale(t_ul_pos, config.beta));
    if (t_ul_neg.defined()) total = add(total, scale(t_ul_neg, 1.0 - config.beta));
    backward(total);

    std::vector<Tensor> params;
    for (auto& p : model.named_parameters()) params.push_back(p.tensor);
    adam_step(params, state, config);
    return out;
}

// ---------------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    // splitmix64 over a combined key
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1) + 0xBF58476D1CE4E5B9ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

TrainingData prepare_training_data(const std::vector<DialogueExample>& dialogues,
                                   const std::vector<InferencePair>& inference, const Vocab& vocab) {
    TrainingData data;
    for (const auto& d : dialogues) data.dialogues.push_back(tokenize_dialogue(d, vocab));
    const InferenceSplit split = split_inference(inference);
    for (const auto& p : split.positive) data.positives.push_back({tokenize(p.premise, vocab), tokenize(p.hypothesis, vocab)});
    for (const auto& p : split.negative) data.negatives.push_back({tokenize(p.premise, vocab), tokenize(p.hypothesis, vocab)});
    return data;
}

Trainer::Trainer(BobModel& model, TrainConfig config, TrainingData data)
    : model_(model), config_(std::move(config)), data_(std::move(data)), rng_(derive_seed(config_.seed, 0, 0)) {
    config_.validate();
    if (data_.dialogues.empty()) throw DataError("no dialogue examples to train on");
}

void Trainer::restore(AdamState adam, Rng rng, std::size_t steps) {
    adam_ = std::move(adam);
    rng_ = rng;
    steps_ = steps;
}

const DialogueBatch& Trainer::dialogue_batch(std::size_t step) {
    auto& s = dialogue_stream_;
    // The epoch size does not depend on the shuffle, so plan epoch 0 once to learn it.
    if (s.epoch == static_cast<std::size_t>(-1)) {
        s.epoch_batches = make_batches(data_.dialogues, model_.config(), config_.batch_size,
                                       derive_seed(config_.seed, 1, 0)).batches;
        s.epoch = 0;
        if (s.epoch_batches.empty()) throw DataError("every dialogue example was skipped");
    }
    const std::size_t per_epoch = s.epoch_batches.size();
    const std::size_t epoch = step / per_epoch;
    if (epoch != s.epoch) {
        s.epoch_batches = make_batches(data_.dialogues, model_.config(), config_.batch_size,
                                       derive_seed(config_.seed, 1, epoch)).batches;
        s.epoch = epoch;
    }
    return s.epoch_batches[step % per_epoch];
}

const InferenceBatch* Trainer::pair_batch(Stream<InferenceBatch>& s, const std::vector<TokenizedPair>& items,
                                          std::uint64_t stream_id, std::size_t step) {
    if (items.empty()) return nullptr;
    if (s.epoch == static_cast<std::size_t>(-1)) {
        s.epoch_batches =
            make_pair_batches(items, model_.config(), config_.batch_size, derive_seed(config_.seed, stream_id, 0)).batches;
        s.epoch = 0;
    }
    if (s.epoch_batches.empty()) return nullptr;
    const std::size_t per_epoch = s.epoch_batches.size();
    const std::size_t epoch = step / per_epoch;
    if (epoch != s.epoch) {
        s.epoch_batches = make_pair_batches(items, model_.config(), config_.batch_size,
                                            derive_seed(config_.seed, stream_id, epoch)).batches;
        s.epoch = epoch;
    }
    return &s.epoch_batches[step % per_epoch];
}

LossBreakdown Trainer::step() {
    const DialogueBatch& dialogue = dialogue_batch(steps_);
    const InferenceBatch* pos = nullptr;
    const InferenceBatch* neg = nullptr;
    if (model_.config().ablation == Ablation::full) {
        pos = pair_batch(positive_stream_, data_.positives, 2, steps_);
        neg = pair_batch(negative_stream_, data_.negatives, 3, steps_);
    }
    LossBreakdown out = training_step(model_, adam_, dialogue, pos, neg, config_, rng_);
    ++steps_;
    return out;
}

}  // namespace bob
