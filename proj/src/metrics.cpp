#include "bob/metrics.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "bob/synth.hpp"
#include "json.hpp"

namespace bob {

std::string to_string(ScoreView view) {
    switch (view) {
        case ScoreView::d1: return "d1";
        case ScoreView::d2: return "d2";
        case ScoreView::mlm: return "mlm";
    }
    return "d2";
}

ScoreView parse_score_view(const std::string& name) {
    if (name == "d1") return ScoreView::d1;
    if (name == "d2") return ScoreView::d2;
    if (name == "mlm") return ScoreView::mlm;
    throw std::invalid_argument("unknown score view '" + name + "' (expected d1, d2 or mlm)");
}

ScoreView default_view(Ablation ablation) {
    switch (ablation) {
        case Ablation::e_d1: return ScoreView::d1;
        case Ablation::e_only: return ScoreView::mlm;
        default: return ScoreView::d2;
    }
}

std::vector<double> token_log_probs(const BobModel& model, const Vocab& vocab, const DialogueExample& example,
                                    ScoreView view) {
    const TokenizedDialogue t = tokenize_dialogue(example, vocab);
    if (view == ScoreView::mlm) return score_response_mlm(model, t.personas, t.query, t.response);
    ResponseScores s = score_response(model, t.personas, t.query, t.response);
    return view == ScoreView::d1 ? std::move(s.d1) : std::move(s.d2);
}

double perplexity(const std::vector<std::vector<double>>& log_probs) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& stream : log_probs) {
        for (double lp : stream) total += lp;
        count += stream.size();
    }
    if (count == 0) throw MetricError("perplexity of an empty corpus is undefined");
    return std::exp(-total / static_cast<double>(count));
}

double perplexity(const BobModel& model, const Vocab& vocab, const std::vector<DialogueExample>& examples,
                  ScoreView view) {
    if (examples.empty()) throw MetricError("perplexity of an empty corpus is undefined");
    std::vector<std::vector<double>> streams;
    for (const auto& ex : examples) streams.push_back(token_log_probs(model, vocab, ex, view));
    return perplexity(streams);
}

namespace {

void collect_ngrams(const std::vector<std::string>& words, std::size_t n, std::set<std::vector<std::string>>& seen,
                    std::size_t& total) {
    if (words.size() < n) return;
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
        seen.emplace(words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i + n));
        ++total;
    }
}

}  // namespace

double distinct_n(const std::vector<std::vector<std::string>>& responses, std::size_t n) {
    if (n == 0) throw std::invalid_argument("distinct_n: n must be at least 1");
    std::set<std::vector<std::string>> seen;
    std::size_t total = 0;
    for (const auto& r : responses) collect_ngrams(r, n, seen, total);
    if (total == 0) throw MetricError("distinct-" + std::to_string(n) + " is undefined: corpus has no n-grams");
    return static_cast<double>(seen.size()) / static_cast<double>(total);
}

double distinct_n_per_response(const std::vector<std::vector<std::string>>& responses, std::size_t n) {
    if (n == 0) throw std::invalid_argument("distinct_n: n must be at least 1");
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& r : responses) {
        std::set<std::vector<std::string>> seen;
        std::size_t total = 0;
        collect_ngrams(r, n, seen, total);
        if (total == 0) continue;
        sum += static_cast<double>(seen.size()) / static_cast<double>(total);
        ++counted;
    }
    if (counted == 0) throw MetricError("distinct-" + std::to_string(n) + " is undefined: corpus has no n-grams");
    return sum / static_cast<double>(counted);
}

DeltaP delta_p(double p_ent, double p_ctd) { return {p_ent, p_ctd, p_ctd - p_ent}; }

DeltaP delta_p(const BobModel& model, const Vocab& vocab, const std::vector<DialogueExample>& entailed,
               const std::vector<DialogueExample>& contradicted, ScoreView view) {
    if (entailed.empty()) throw MetricError("delta-P: entailed bucket is empty");
    if (contradicted.empty()) throw MetricError("delta-P: contradicted bucket is empty");
    return delta_p(perplexity(model, vocab, entailed, view), perplexity(model, vocab, contradicted, view));
}

double mean_token_probability(const BobModel& model, const Vocab& vocab, const std::vector<DialogueExample>& examples,
                              ScoreView view) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& ex : examples) {
        const auto lp = token_log_probs(model, vocab, ex, view);
        for (std::size_t i = 0; i + 1 < lp.size(); ++i) sum += std::exp(lp[i]);
        count += lp.size() - 1;
    }
    if (count == 0) throw MetricError("mean token probability of an empty corpus is undefined");
    return sum / static_cast<double>(count);
}

std::vector<int> NliOracle::verdicts(const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::vector<int> out;
    out.reserve(pairs.size());
    for (const auto& [response, persona] : pairs) out.push_back(verdict(response, persona));
    return out;
}

int RuleOracle::verdict(const std::string& response, const std::string& persona) {
    return synth::rule_verdict(response, persona);
}

CommandOracle::CommandOracle(std::string command) : command_(std::move(command)) {
    if (command_.empty()) throw std::invalid_argument("oracle command is empty");
}

int CommandOracle::verdict(const std::string& response, const std::string& persona) {
    return verdicts({{response, persona}}).front();
}

namespace {

std::string flatten(std::string s) {
    for (char& c : s) {
        if (c == '\t' || c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

std::filesystem::path temp_file(const char* stem) {
    std::string pattern = (std::filesystem::temp_directory_path() / (std::string(stem) + "XXXXXX")).string();
    const int fd = ::mkstemp(pattern.data());
    if (fd < 0) throw std::runtime_error("cannot create a temporary file for the oracle");
    ::close(fd);
    return pattern;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    return out + "'";
}

}  // namespace

std::vector<int> CommandOracle::verdicts(const std::vector<std::pair<std::string, std::string>>& pairs) {
    if (pairs.empty()) return {};
    const auto in_path = temp_file("bob_oracle_in_");
    const auto out_path = temp_file("bob_oracle_out_");
    struct Cleanup {
        std::filesystem::path a, b;
        ~Cleanup() {
            std::error_code ec;
            std::filesystem::remove(a, ec);
            std::filesystem::remove(b, ec);
        }
    } cleanup{in_path, out_path};
    {
        std::ofstream in(in_path);
        for (const auto& [response, persona] : pairs) in << flatten(persona) << '\t' << flatten(response) << '\n';
    }
    const std::string cmd = "(" + command_ + ") < " + shell_quote(in_path.string()) + " > " +
                            shell_quote(out_path.string());
    const int status = std::system(cmd.c_str());
    if (status != 0) throw std::runtime_error("oracle command failed with status " + std::to_string(status));

    std::ifstream out(out_path);
    std::vector<int> result;
    std::string line;
    while (std::getline(out, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line == "-1") result.push_back(-1);
        else if (line == "0") result.push_back(0);
        else if (line == "1") result.push_back(1);
        else throw std::runtime_error("oracle emitted '" + line + "'; expected -1, 0 or 1");
    }
    if (result.size() != pairs.size()) {
        throw std::runtime_error("oracle answered " + std::to_string(result.size()) + " of " +
                                 std::to_string(pairs.size()) + " pairs");
    }
    return result;
}

int c_score(const std::string& response, const std::vector<std::string>& personas, NliOracle& oracle) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& p : personas) pairs.emplace_back(response, p);
    int sum = 0;
    for (int v : oracle.verdicts(pairs)) sum += v;
    return sum;
}

double c_score(const std::vector<ScoredResponse>& responses, NliOracle& oracle) {
    if (responses.empty()) throw MetricError("C.Score of an empty set is undefined");
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& r : responses) {
        for (const auto& p : r.personas) pairs.emplace_back(r.response, p);
    }
    const auto v = oracle.verdicts(pairs);
    double sum = 0.0;
    for (int x : v) sum += x;
    return sum / static_cast<double>(responses.size());
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["ablation"] = ablation;
    j["view"] = view;
    j["ppl"] = ppl;
    j["ppl_d1"] = ppl_d1;
    j["dist1"] = dist1;
    j["dist2"] = dist2;
    j["p_ent"] = p_ent;
    j["p_ctd"] = p_ctd;
    j["delta_p"] = delta_p;
    j["c_score"] = c_score;
    j["c_score_draft"] = c_score_draft;
    j["entailed_count"] = entailed_count;
    j["contradicted_count"] = contradicted_count;
    j["generated_count"] = generated_count;
    return j.dump();
}

EvalReport evaluate(const BobModel& model, const Vocab& vocab, const std::vector<EvalTuple>& tuples,
                    NliOracle& oracle, const EvalOptions& options) {
    if (tuples.empty()) throw MetricError("evaluation needs at least one eval tuple");
    std::vector<DialogueExample> entailed, contradicted;
    for (const auto& t : tuples) {
        if (!t.entailed.empty()) entailed.push_back({t.personas, t.query, t.entailed});
        if (!t.contradicted.empty()) contradicted.push_back({t.personas, t.query, t.contradicted});
    }

    EvalReport r;
    r.ablation = to_string(model.config().ablation);
    r.view = to_string(options.view);
    const DeltaP d = delta_p(model, vocab, entailed, contradicted, options.view);
    r.p_ent = d.p_ent;
    r.p_ctd = d.p_ctd;
    r.delta_p = d.delta;
    r.ppl = d.p_ent;
    r.ppl_d1 = model.config().ablation == Ablation::e_only ? r.ppl : perplexity(model, vocab, entailed, ScoreView::d1);
    r.entailed_count = entailed.size();
    r.contradicted_count = contradicted.size();

    std::vector<std::vector<std::string>> finals;
    std::vector<ScoredResponse> scored, drafts;
    for (const auto& t : tuples) {
        const Generation g = generate(model, vocab, t.personas, t.query, options.decode);
        finals.push_back(split_words(g.final_text));
        scored.push_back({t.personas, g.final_text});
        drafts.push_back({t.personas, g.draft});
    }
    r.generated_count = finals.size();
    r.c_score = c_score(scored, oracle);
    r.c_score_draft = c_score(drafts, oracle);
    try {
        r.dist1 = distinct_n(finals, 1);
        r.dist2 = distinct_n(finals, 2);
    } catch (const MetricError&) {
        r.dist1 = r.dist2 = std::nan("");
    }
    return r;
}

}  // namespace bob
