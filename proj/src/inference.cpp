#include "bob/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bob/objectives.hpp"
#include "bob/special_tokens.hpp"

namespace bob {

void DecodeConfig::validate() const {
    if (max_new_tokens == 0) throw std::invalid_argument("max_new_tokens must be at least 1");
    if (strategy == DecodeStrategy::topk && k == 0) throw std::invalid_argument("top-k decoding needs k >= 1");
}

namespace {

bool emittable(int id) { return id == token::eos || !Vocab::is_special(id); }

// Candidate ids for the next D1 token, best first.
int pick_next(std::span<const double> logits, const DecodeConfig& config, Rng& rng) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (emittable(static_cast<int>(i))) ids.push_back(static_cast<int>(i));
    }
    auto better = [&](int a, int b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
    if (config.strategy == DecodeStrategy::greedy) return *std::min_element(ids.begin(), ids.end(), better);
    const std::size_t k = std::min(config.k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), better);
    ids.resize(k);
    const double top = logits[ids.front()];
    std::vector<double> weights;
    for (int id : ids) weights.push_back(std::exp(logits[id] - top));
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double r = uniform01(rng) * total;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        r -= weights[i];
        if (r < 0.0) return ids[i];
    }
    return ids.back();
}

std::vector<int> strip_eos(std::vector<int> ids) {
    auto it = std::find(ids.begin(), ids.end(), token::eos);
    ids.erase(it, ids.end());
    return ids;
}

std::vector<double> gather_log_probs(const Tensor& logits, std::size_t row0, std::span<const int> targets) {
    const Tensor lp = log_softmax(logits, logits.rank() - 1);
    const std::size_t v = logits.shape().back();
    std::vector<double> out;
    for (std::size_t j = 0; j < targets.size(); ++j) out.push_back(lp.at((row0 + j) * v + static_cast<std::size_t>(targets[j])));
    return out;
}

Generation generate_mlm(const BobModel& model, const std::vector<std::vector<int>>& personas,
                        const std::vector<int>& query, const DecodeConfig& config) {
    Rng rng(config.seed);
    TokenizedDialogue ex{personas, query, {}};
    Generation g;
    const ForwardMode eval;
    while (g.draft_ids.size() < config.max_new_tokens) {
        ex.response = g.draft_ids;
        const InputSequence seq = masked_lm_input(ex, ex.response.size(), model.config());
        const EncodedBatch enc = encode(model, pad_inputs({seq}), eval);
        const Tensor logits = encoder_logits(model, enc);
        const std::size_t v = logits.shape().back();
        const auto row = logits.data().subspan((seq.ids.size() - 1) * v, v);
        const int next = pick_next(row, config, rng);
        if (next == token::eos) break;
        g.draft_ids.push_back(next);
    }
    g.final_ids = g.draft_ids;
    return g;
}

}  // namespace

std::vector<int> refine(const BobModel& model, const Tensor& persona, const BoolTensor& persona_mask,
                        const Tensor& r1, std::size_t length) {
    const BoolTensor r1_mask({r1.dim(0), r1.dim(1)}, false);
    const Tensor logits = decode_d2(model, persona, persona_mask, r1, r1_mask, ForwardMode{}).logits;
    const std::size_t v = logits.shape().back();
    std::vector<int> out;
    for (std::size_t j = 0; j < length; ++j) {
        const auto row = logits.data().subspan(j * v, v);
        int best = -1;
        for (std::size_t i = 0; i < v; ++i) {
            if (Vocab::is_special(static_cast<int>(i))) continue;
            if (best < 0 || row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
        }
        out.push_back(best);
    }
    return out;
}

Generation generate(const BobModel& model, const std::vector<std::vector<int>>& personas,
                    const std::vector<int>& query, const DecodeConfig& config) {
    config.validate();
    if (!model.all_finite()) throw std::runtime_error("model parameters contain NaN or Inf; refusing to generate");
    const auto& c = model.config();
    if (c.ablation == Ablation::e_only) return generate_mlm(model, personas, query, config);

    const ForwardMode eval;
    Rng rng(config.seed);
    const EncodedBatch enc = encode(model, pad_inputs({build_input(personas, query, c)}), eval);
    const std::size_t budget = std::min(config.max_new_tokens, c.max_len - 1);

    Generation g;
    std::vector<int> prefix{token::bos};
    while (g.draft_ids.size() < budget) {
        const DecoderOutput d1 = decode_d1(model, pad_rows({prefix}), enc, eval);
        const std::size_t v = d1.logits.shape().back();
        const auto row = d1.logits.data().subspan((prefix.size() - 1) * v, v);
        const int next = pick_next(row, config, rng);
        if (next == token::eos) break;
        g.draft_ids.push_back(next);
        prefix.push_back(next);
    }

    if (c.ablation == Ablation::e_d1 || g.draft_ids.empty()) {
        g.final_ids = g.draft_ids;
        return g;
    }
    // R1 over [bos, draft...]; position j of D2 predicts draft token j.
    const DecoderOutput d1 = decode_d1(model, pad_rows({prefix}), enc, eval);
    g.final_ids = refine(model, enc.persona, enc.persona_mask, d1.hidden, g.draft_ids.size());
    return g;
}

Generation generate(const BobModel& model, const Vocab& vocab, const std::vector<std::string>& personas,
                    const std::string& query, const DecodeConfig& config) {
    std::vector<std::vector<int>> p;
    for (const auto& s : personas) p.push_back(tokenize(s, vocab));
    Generation g = generate(model, p, tokenize(query, vocab), config);
    g.draft = detokenize(strip_eos(g.draft_ids), vocab);
    g.final_text = detokenize(strip_eos(g.final_ids), vocab);
    return g;
}

ResponseScores score_response(const BobModel& model, const std::vector<std::vector<int>>& personas,
                              const std::vector<int>& query, const std::vector<int>& response) {
    if (response.empty()) throw std::invalid_argument("score_response: empty response");
    const DialogueBatch batch = collate_dialogues({TokenizedDialogue{personas, query, response}}, model.config());
    const DialogueForward f = dialogue_forward(model, batch, ForwardMode{}, true);
    std::vector<int> targets = response;
    targets.push_back(token::eos);
    return {gather_log_probs(f.d1.logits, 0, targets), gather_log_probs(f.d2.logits, 0, targets)};
}

std::vector<double> score_response_mlm(const BobModel& model, const std::vector<std::vector<int>>& personas,
                                       const std::vector<int>& query, const std::vector<int>& response) {
    if (response.empty()) throw std::invalid_argument("score_response_mlm: empty response");
    const TokenizedDialogue ex{personas, query, response};
    std::vector<double> out;
    for (std::size_t k = 0; k <= response.size(); ++k) {
        const InputSequence seq = masked_lm_input(ex, k, model.config());
        const EncodedBatch enc = encode(model, pad_inputs({seq}), ForwardMode{});
        const Tensor logits = encoder_logits(model, enc);
        const int target = k < response.size() ? response[k] : token::eos;
        const std::vector<int> t{target};
        out.push_back(gather_log_probs(logits, seq.ids.size() - 1, t).front());
    }
    return out;
}

}  // namespace bob
