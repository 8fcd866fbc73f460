#pragma once

// Perplexity, Distinct-n, Delta-P and C.Score, with a pluggable NLI oracle.

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bob/data.hpp"
#include "bob/inference.hpp"
#include "bob/model.hpp"

namespace bob {

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Which decoder's probabilities are scored.
enum class ScoreView { d1, d2, mlm };

std::string to_string(ScoreView view);
ScoreView parse_score_view(const std::string& name);
/// d2 for full/no_ul, d1 for e_d1, mlm for e_only.
ScoreView default_view(Ablation ablation);

/// Teacher-forced log p of each response token followed by eos.
std::vector<double> token_log_probs(const BobModel& model, const Vocab& vocab, const DialogueExample& example,
                                    ScoreView view);

/// exp(-sum log p / count) over every token of every stream.
double perplexity(const std::vector<std::vector<double>>& log_probs);
double perplexity(const BobModel& model, const Vocab& vocab, const std::vector<DialogueExample>& examples,
                  ScoreView view);

/// Unique n-grams over total n-grams, pooled across the corpus.
double distinct_n(const std::vector<std::vector<std::string>>& responses, std::size_t n);
/// Mean of the per-response ratios; responses without an n-gram are skipped.
double distinct_n_per_response(const std::vector<std::vector<std::string>>& responses, std::size_t n);

struct DeltaP {
    double p_ent = 0.0;
    double p_ctd = 0.0;
    double delta = 0.0;
};

DeltaP delta_p(double p_ent, double p_ctd);
DeltaP delta_p(const BobModel& model, const Vocab& vocab, const std::vector<DialogueExample>& entailed,
               const std::vector<DialogueExample>& contradicted, ScoreView view);

/// Mean probability of response tokens (eos excluded).
double mean_token_probability(const BobModel& model, const Vocab& vocab, const std::vector<DialogueExample>& examples,
                              ScoreView view);

class NliOracle {
public:
    virtual ~NliOracle() = default;
    /// -1 contradicts, 0 unrelated, 1 entails.
    virtual int verdict(const std::string& response, const std::string& persona) = 0;
    /// Pairs are (response, persona).
    virtual std::vector<int> verdicts(const std::vector<std::pair<std::string, std::string>>& pairs);
};

/// Closed-world slot/value matcher for the synthetic corpus.
class RuleOracle : public NliOracle {
public:
    int verdict(const std::string& response, const std::string& persona) override;
};

/// Runs `command` with one "persona\thypothesis" line per pair on stdin and
/// expects one "-1", "0" or "1" line per pair on stdout.
class CommandOracle : public NliOracle {
public:
    explicit CommandOracle(std::string command);
    int verdict(const std::string& response, const std::string& persona) override;
    std::vector<int> verdicts(const std::vector<std::pair<std::string, std::string>>& pairs) override;

private:
    std::string command_;
};

struct ScoredResponse {
    std::vector<std::string> personas;
    std::string response;
};

/// Sum of verdicts over every persona sentence.
int c_score(const std::string& response, const std::vector<std::string>& personas, NliOracle& oracle);
/// Mean of per-response sums.
double c_score(const std::vector<ScoredResponse>& responses, NliOracle& oracle);

struct EvalReport {
    std::string ablation;
    std::string view;
    double ppl = 0.0;
    double ppl_d1 = 0.0;
    double dist1 = 0.0;
    double dist2 = 0.0;
    double p_ent = 0.0;
    double p_ctd = 0.0;
    double delta_p = 0.0;
    double c_score = 0.0;
    double c_score_draft = 0.0;
    std::size_t entailed_count = 0;
    std::size_t contradicted_count = 0;
    std::size_t generated_count = 0;

    std::string to_json() const;
};

struct EvalOptions {
    ScoreView view = ScoreView::d2;
    DecodeConfig decode;
};

/// Scores the gold responses of every tuple, generates a reply per tuple
/// and rates it with the oracle. Throws MetricError on an empty eval set.
EvalReport evaluate(const BobModel& model, const Vocab& vocab, const std::vector<EvalTuple>& tuples,
                    NliOracle& oracle, const EvalOptions& options);

}  // namespace bob
