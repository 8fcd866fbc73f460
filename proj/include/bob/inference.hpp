#pragma once

// Two-stage generation: D1 drafts token by token, then D2 rereads the
// draft's hidden states R1 together with the persona and emits one token
// per draft position.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bob/data.hpp"
#include "bob/model.hpp"

namespace bob {

enum class DecodeStrategy { greedy, topk };

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::greedy;
    std::size_t k = 5;
    std::size_t max_new_tokens = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Generation {
    std::vector<int> draft_ids;
    std::vector<int> final_ids;
    std::string draft;
    std::string final_text;
};

/// Throws std::runtime_error when the model holds NaN/Inf parameters.
Generation generate(const BobModel& model, const std::vector<std::vector<int>>& personas,
                    const std::vector<int>& query, const DecodeConfig& config);
Generation generate(const BobModel& model, const Vocab& vocab, const std::vector<std::string>& personas,
                    const std::string& query, const DecodeConfig& config);

/// Stage two in isolation: per-position argmax of D2 over non-reserved ids
/// for the first `length` positions.
std::vector<int> refine(const BobModel& model, const Tensor& persona, const BoolTensor& persona_mask,
                        const Tensor& r1, std::size_t length);

/// Teacher-forced log-probabilities of response + eos under each view.
struct ResponseScores {
    std::vector<double> d1;
    std::vector<double> d2;
};

ResponseScores score_response(const BobModel& model, const std::vector<std::vector<int>>& personas,
                              const std::vector<int>& query, const std::vector<int>& response);

/// Encoder-only view: one masked forward pass per response position.
std::vector<double> score_response_mlm(const BobModel& model, const std::vector<std::vector<int>>& personas,
                                       const std::vector<int>& query, const std::vector<int>& response);

}  // namespace bob
