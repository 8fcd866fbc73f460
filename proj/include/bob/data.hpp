#pragma once

// Vocabulary, tokenizer, JSONL corpora and batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bob/model.hpp"

namespace bob {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Vocab {
public:
    /// Reserved entries only.
    Vocab();

    /// Returns the existing id when the token is already present.
    int add(const std::string& token);
    /// unk for out-of-vocabulary tokens.
    int id(const std::string& token) const;
    const std::string& token(int id) const;
    bool contains(const std::string& token) const { return to_id_.count(token) != 0; }
    std::size_t size() const { return to_token_.size(); }
    const std::vector<std::string>& tokens() const { return to_token_; }

    /// Rebuilds from an id-ordered token list; the reserved prefix must match.
    static Vocab from_tokens(const std::vector<std::string>& tokens);

    static bool is_special(int id);

private:
    std::vector<std::string> to_token_;
    std::unordered_map<std::string, int> to_id_;
};

/// Lowercases and splits on whitespace; each punctuation character becomes
/// its own word.
std::vector<std::string> split_words(std::string_view text);
std::vector<int> tokenize(std::string_view text, const Vocab& vocab);
/// Space-joined words, special tokens omitted.
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Records

struct DialogueExample {
    std::vector<std::string> personas;
    std::string query;
    std::string response;
};

enum class NliLabel { entail, neutral, contradict };

std::string to_string(NliLabel label);
/// Throws DataError naming `record` for anything outside the closed set.
NliLabel parse_label(const std::string& text, const std::string& record);

struct InferencePair {
    std::string premise;
    std::string hypothesis;
    NliLabel label = NliLabel::neutral;
};

/// Held-out persona/query with one consistent and one contradicting response.
struct EvalTuple {
    std::vector<std::string> personas;
    std::string query;
    std::string entailed;
    std::string contradicted;
};

struct LoadError {
    std::size_t line = 0;
    std::string message;
};

template <typename T>
struct LoadResult {
    std::vector<T> items;
    std::vector<LoadError> errors;
    /// Non-blank lines read; items.size() + errors.size() == line_count.
    std::size_t line_count = 0;
};

LoadResult<DialogueExample> load_dialogue_jsonl(const std::filesystem::path& path);
LoadResult<InferencePair> load_inference_jsonl(const std::filesystem::path& path);
LoadResult<EvalTuple> load_eval_jsonl(const std::filesystem::path& path);

void write_dialogue_jsonl(const std::filesystem::path& path, const std::vector<DialogueExample>& items);
void write_inference_jsonl(const std::filesystem::path& path, const std::vector<InferencePair>& items);
void write_eval_jsonl(const std::filesystem::path& path, const std::vector<EvalTuple>& items);

/// Vocabulary over every word of the given corpora, in first-seen order.
Vocab build_vocab(const std::vector<DialogueExample>& dialogues, const std::vector<InferencePair>& inference,
                  const std::vector<EvalTuple>& eval);

// ---------------------------------------------------------------------------
// Batching

struct TokenizedDialogue {
    std::vector<std::vector<int>> personas;
    std::vector<int> query;
    std::vector<int> response;
};

TokenizedDialogue tokenize_dialogue(const DialogueExample& example, const Vocab& vocab);

/// Teacher-forced dialogue batch. target_in is [bos, r...], target_out is
/// [r..., eos] with -1 at padding.
struct DialogueBatch {
    EncoderInput encoder;
    TokenRows target_in;
    std::vector<int> target_out;
    std::vector<TokenizedDialogue> examples;
    std::size_t token_count = 0;
};

/// Premise as the persona segment (premise, [s]); hypothesis on the
/// response side as [h..., eos], aligned with the targets it stands for,
/// since R1 at position j carries the prediction of response token j.
/// The eos position is not scored.
struct InferenceBatch {
    std::size_t batch = 0;
    std::size_t premise_width = 0;
    std::vector<int> premise_ids;
    std::vector<int> premise_positions;
    std::vector<std::uint8_t> premise_mask;
    TokenRows hypothesis_in;
    std::vector<int> hypothesis_out;
    std::size_t token_count = 0;
};

template <typename Batch>
struct BatchPlan {
    std::vector<Batch> batches;
    /// Examples dropped for being empty or not fitting max_len.
    std::size_t skipped = 0;
};

/// Builds one batch from already-tokenized examples, in the given order.
/// Throws InputTooLong or DataError on examples that cannot be batched.
DialogueBatch collate_dialogues(const std::vector<TokenizedDialogue>& examples, const ModelConfig& config);

struct TokenizedPair {
    std::vector<int> premise;
    std::vector<int> hypothesis;
};

InferenceBatch collate_pairs(const std::vector<TokenizedPair>& pairs, const ModelConfig& config);

/// Seeded shuffle, then consecutive batches of batch_size (last may be short).
BatchPlan<DialogueBatch> make_batches(const std::vector<TokenizedDialogue>& examples, const ModelConfig& config,
                                      std::size_t batch_size, std::uint64_t seed);
BatchPlan<DialogueBatch> make_batches(const std::vector<DialogueExample>& examples, const Vocab& vocab,
                                      const ModelConfig& config, std::size_t batch_size, std::uint64_t seed);
BatchPlan<InferenceBatch> make_pair_batches(const std::vector<TokenizedPair>& pairs, const ModelConfig& config,
                                            std::size_t batch_size, std::uint64_t seed);

/// Fisher-Yates permutation of [0, n) driven by `seed`.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

}  // namespace bob
