#pragma once

// Training objectives: response NLL through D1 and D2, likelihood and
// unlikelihood on premise/hypothesis pairs through D2 alone, Adam, and the
// per-step procedure that sums L1 = NLL_D1 + alpha * NLL_D2 with
// L2 = beta * UL+ + (1 - beta) * UL- before one optimiser update.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bob/data.hpp"
#include "bob/model.hpp"

namespace bob {

struct TrainConfig {
    double alpha = 5e-3;
    double beta = 0.1;
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 8;
    std::size_t max_steps = 2000;
    std::uint64_t seed = 17;

    void validate() const;
    /// Fine-tuning rate for pretrained-size stacks.
    static TrainConfig bert_base_preset();
};

struct LossBreakdown {
    double nll_d1 = 0.0;
    double nll_d2 = 0.0;
    double ul_pos = 0.0;
    double ul_neg = 0.0;
    double l1 = 0.0;
    double l2 = 0.0;
    double total = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(std::string term, double value);
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

// ---------------------------------------------------------------------------
// Token-level losses, averaged over non-ignored targets (target < 0).

std::size_t count_targets(std::span<const int> targets);
/// logits [..., vocab] flattened against targets.
Tensor mean_token_nll(const Tensor& logits, std::span<const int> targets);
Tensor mean_token_unlikelihood(const Tensor& logits, std::span<const int> targets);

// ---------------------------------------------------------------------------
// Model-level losses

struct DialogueForward {
    EncodedBatch encoded;
    DecoderOutput d1;
    DecoderOutput d2;  // undefined tensors when D2 was not run
};

DialogueForward dialogue_forward(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode,
                                 bool run_d2);

Tensor nll_d1(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode);
/// Gradients reach theta through R1.
Tensor nll_d2(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode);

/// D2 logits with the premise as P and the embedded hypothesis in the R1
/// slot. With persona_source = embeddings neither E nor D1 is involved.
Tensor inference_logits(const BobModel& model, const InferenceBatch& batch, const ForwardMode& mode);

Tensor ul_positive(const BobModel& model, const InferenceBatch& batch, const ForwardMode& mode);
Tensor ul_negative(const BobModel& model, const InferenceBatch& batch, const ForwardMode& mode);

/// Encoder-only ablation: predicts one response token from
/// persona [s] query [s] prefix [mask]; `rng` picks the position per example.
Tensor masked_lm_loss(const BobModel& model, const DialogueBatch& batch, const ForwardMode& mode, Rng& rng);

/// Input for predicting response token `position` (0-based; position ==
/// response.size() predicts eos) in the encoder-only ablation.
InputSequence masked_lm_input(const TokenizedDialogue& example, std::size_t position, const ModelConfig& config);

struct InferenceSplit {
    std::vector<InferencePair> positive;  // entailed
    std::vector<InferencePair> negative;  // contradicted
};

/// Neutral pairs are dropped.
InferenceSplit split_inference(const std::vector<InferencePair>& pairs);

// ---------------------------------------------------------------------------
// Optimisation

struct AdamSlot {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
};

struct AdamState {
    std::vector<AdamSlot> slots;  // aligned with BobModel::named_parameters()
};

/// Bias-corrected Adam. Parameters without a gradient buffer are skipped.
void adam_step(std::span<Tensor> params, AdamState& state, const TrainConfig& config);

/// One optimisation step. pos/neg may be null, in which case their terms
/// are zero. Throws NonFiniteLoss before touching parameters.
LossBreakdown training_step(BobModel& model, AdamState& state, const DialogueBatch& dialogue,
                            const InferenceBatch* positive, const InferenceBatch* negative, const TrainConfig& config,
                            Rng& rng);

// ---------------------------------------------------------------------------
// Loop

struct TrainingData {
    std::vector<TokenizedDialogue> dialogues;
    std::vector<TokenizedPair> positives;
    std::vector<TokenizedPair> negatives;
};

TrainingData prepare_training_data(const std::vector<DialogueExample>& dialogues,
                                   const std::vector<InferencePair>& inference, const Vocab& vocab);

/// Batches for step s come from a per-epoch shuffle keyed on (seed, epoch),
/// so a run resumed at step s sees the same batches as an uninterrupted one.
class Trainer {
public:
    Trainer(BobModel& model, TrainConfig config, TrainingData data);

    LossBreakdown step();
    std::size_t steps_done() const { return steps_; }

    AdamState& optimizer() { return adam_; }
    const AdamState& optimizer() const { return adam_; }
    Rng& rng() { return rng_; }
    const Rng& rng() const { return rng_; }
    const TrainConfig& config() const { return config_; }

    /// For resuming from a checkpoint.
    void restore(AdamState adam, Rng rng, std::size_t steps);

private:
    template <typename Batch>
    struct Stream {
        std::vector<Batch> epoch_batches;
        std::size_t epoch = static_cast<std::size_t>(-1);
    };

    const DialogueBatch& dialogue_batch(std::size_t step);
    const InferenceBatch* pair_batch(Stream<InferenceBatch>& stream, const std::vector<TokenizedPair>& items,
                                     std::uint64_t stream_id, std::size_t step);

    BobModel& model_;
    TrainConfig config_;
    TrainingData data_;
    AdamState adam_;
    Rng rng_;
    std::size_t steps_ = 0;
    Stream<DialogueBatch> dialogue_stream_;
    Stream<InferenceBatch> positive_stream_;
    Stream<InferenceBatch> negative_stream_;
};

/// Mixes a base seed with stream/epoch counters.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace bob
