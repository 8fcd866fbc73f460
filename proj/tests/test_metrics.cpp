#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include "bob/metrics.hpp"
#include "bob/synth.hpp"
#include "support.hpp"

using namespace bob;
using bob::test::random_index;

namespace {

std::vector<std::vector<std::string>> words_of(const std::vector<std::string>& lines) {
    std::vector<std::vector<std::string>> out;
    for (const auto& l : lines) out.push_back(split_words(l));
    return out;
}

double brute_distinct(const std::vector<std::vector<std::string>>& corpus, std::size_t n) {
    std::unordered_set<std::string> unique;
    double total = 0;
    for (const auto& r : corpus) {
        for (std::size_t i = 0; i + n <= r.size(); ++i) {
            std::string key;
            for (std::size_t k = 0; k < n; ++k) key += r[i + k] + '\x1f';
            unique.insert(key);
            total += 1;
        }
    }
    return static_cast<double>(unique.size()) / total;
}

struct Fixture {
    synth::Corpus corpus = synth::generate(6, 5);
    Vocab vocab = build_vocab(corpus.dialogues, corpus.inference, corpus.eval);

    ModelConfig config(bool tied = true) const {
        auto c = bob::test::tiny_config(1, 8, 2, vocab.size());
        c.max_len = 48;
        c.tie_embeddings = tied;
        return c;
    }
};

class FixedOracle : public NliOracle {
public:
    int verdict(const std::string& response, const std::string&) override {
        ++calls;
        return response.empty() ? 0 : (static_cast<int>(response.size()) % 3) - 1;
    }
    int calls = 0;
};

}  // namespace

TEST_CASE("distinct-n examples") {
    CHECK(distinct_n(words_of({"a a a"}), 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(distinct_n(words_of({"a b c"}), 1) == 1.0);
    CHECK(distinct_n(words_of({"a b c"}), 2) == 1.0);
    CHECK(distinct_n(words_of({"a b", "a b"}), 2) == 0.5);
    CHECK_THROWS_AS(distinct_n(words_of({"a", ""}), 2), MetricError);
    CHECK_THROWS_AS(distinct_n({}, 1), MetricError);
    CHECK_THROWS_AS(distinct_n(words_of({"a"}), 0), std::invalid_argument);
    CHECK(distinct_n_per_response(words_of({"a a", "b c"}), 1) == 0.75);
}

TEST_CASE("distinct-n equals a set-based count on random corpora") {
    Rng rng(1);
    const std::vector<std::string> alphabet{"a", "b", "c", "d", "e", "dog", "cat"};
    for (int corpus_id = 0; corpus_id < 50; ++corpus_id) {
        std::vector<std::vector<std::string>> corpus(50);
        for (auto& r : corpus) {
            r.resize(random_index(rng, 9));
            for (auto& w : r) w = alphabet[random_index(rng, alphabet.size())];
        }
        corpus[0] = {"a", "b"};
        for (std::size_t n : {1u, 2u}) {
            const double d = distinct_n(corpus, n);
            CHECK(d == brute_distinct(corpus, n));
            CHECK(d > 0.0);
            CHECK(d <= 1.0);
        }
    }
}

TEST_CASE("perplexity of streams") {
    CHECK(perplexity({{0.0, 0.0}, {0.0}}) == 1.0);
    CHECK(std::abs(perplexity({{std::log(0.25)}, {std::log(0.25), std::log(0.25)}}) - 4.0) < 1e-12);
    CHECK_THROWS_AS(perplexity(std::vector<std::vector<double>>{}), MetricError);
    CHECK_THROWS_AS(perplexity(std::vector<std::vector<double>>{{}}), MetricError);
}

TEST_CASE("perplexity of a uniform model is the vocabulary size") {
    Fixture f;
    BobModel m(f.config(false), 1);
    for (double& v : m.d1_projection.mutable_data()) v = 0.0;
    for (double& v : m.d2_projection.mutable_data()) v = 0.0;
    const double v = static_cast<double>(f.vocab.size());
    for (auto view : {ScoreView::d1, ScoreView::d2}) {
        CHECK(std::abs(perplexity(m, f.vocab, f.corpus.dialogues, view) - v) < 1e-9);
    }
    CHECK_THROWS_AS(perplexity(m, f.vocab, {}, ScoreView::d2), MetricError);
}

TEST_CASE("perplexity against a direct script, and order invariance") {
    Fixture f;
    const BobModel m(f.config(), 2);
    std::vector<DialogueExample> small(f.corpus.dialogues.begin(), f.corpus.dialogues.begin() + 12);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& ex : small) {
        const auto t = tokenize_dialogue(ex, f.vocab);
        for (double lp : score_response(m, t.personas, t.query, t.response).d2) {
            total -= lp;
            ++count;
        }
    }
    const double direct = std::exp(total / static_cast<double>(count));
    const double ppl = perplexity(m, f.vocab, small, ScoreView::d2);
    CHECK(std::abs(ppl - direct) < 1e-9);

    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(small.begin(), small.end(), rng);
        CHECK(std::abs(perplexity(m, f.vocab, small, ScoreView::d2) - ppl) <= 1e-12 * ppl);
    }
}

TEST_CASE("score views") {
    CHECK(default_view(Ablation::full) == ScoreView::d2);
    CHECK(default_view(Ablation::no_ul) == ScoreView::d2);
    CHECK(default_view(Ablation::e_d1) == ScoreView::d1);
    CHECK(default_view(Ablation::e_only) == ScoreView::mlm);
    for (auto v : {ScoreView::d1, ScoreView::d2, ScoreView::mlm}) CHECK(parse_score_view(to_string(v)) == v);
    CHECK_THROWS(parse_score_view("d3"));
}

TEST_CASE("delta-P") {
    const auto d = delta_p(7.3, 83.4);
    CHECK(std::abs(d.delta - 76.1) < 1e-9);
    CHECK(d.p_ent == 7.3);
    CHECK(d.p_ctd == 83.4);

    Fixture f;
    const BobModel m(f.config(), 3);
    std::vector<DialogueExample> bucket;
    for (const auto& t : f.corpus.eval) bucket.push_back({t.personas, t.query, t.entailed});
    const auto same = delta_p(m, f.vocab, bucket, bucket, ScoreView::d2);
    CHECK(same.delta == 0.0);
    CHECK_THROWS_AS(delta_p(m, f.vocab, {}, bucket, ScoreView::d2), MetricError);
    CHECK_THROWS_AS(delta_p(m, f.vocab, bucket, {}, ScoreView::d2), MetricError);
}

TEST_CASE("mean token probability skips eos") {
    Fixture f;
    const BobModel m(f.config(), 4);
    const std::vector<DialogueExample> ex(f.corpus.dialogues.begin(), f.corpus.dialogues.begin() + 3);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& e : ex) {
        const auto t = tokenize_dialogue(e, f.vocab);
        const auto s = score_response(m, t.personas, t.query, t.response).d2;
        for (std::size_t i = 0; i + 1 < s.size(); ++i, ++n) sum += std::exp(s[i]);
    }
    CHECK(std::abs(mean_token_probability(m, f.vocab, ex, ScoreView::d2) - sum / static_cast<double>(n)) < 1e-12);
}

TEST_CASE("c_score examples") {
    struct Scripted : NliOracle {
        std::vector<int> answers;
        std::size_t next = 0;
        int verdict(const std::string&, const std::string&) override { return answers[next++]; }
    };
    Scripted mixed;
    mixed.answers = {1, 0, -1};
    CHECK(c_score("r", {"a", "b", "c"}, mixed) == 0);
    Scripted agree;
    agree.answers = {1, 1};
    CHECK(c_score("r", {"a", "b"}, agree) == 2);
    FixedOracle o;
    CHECK_THROWS_AS(c_score(std::vector<ScoredResponse>{}, o), MetricError);
}

TEST_CASE("c_score against a hand-labelled audit") {
    const std::vector<std::string> a{"i have a dog", "i live in rome", "i work as a chef"};
    const std::vector<std::string> b{"my pet is a fish", "i reside in lima"};
    const std::vector<std::string> d{"i work as a nurse"};
    struct Audit {
        std::vector<std::string> personas;
        std::string response;
        int expected;
    };
    const std::vector<Audit> audit{
        {a, "yes i have a dog", 1},
        {a, "i have a cat", -1},
        {a, "i live in rome", 1},
        {a, "i am from oslo", -1},
        {a, "i am a chef", 1},
        {a, "i work as a pilot", -1},
        {a, "i like music", 0},
        {a, "hello there", 0},
        {a, "i have a dog and i live in rome", 2},
        {a, "i have a cat and i live in rome", 0},
        {a, "i have a bird in paris as a nurse", -3},
        {a, "i have a dog in rome as a chef", 3},
        {b, "i own a fish", 1},
        {b, "i have a dog", -1},
        {b, "i live in lima", 1},
        {b, "i live in paris with a fish", 0},
        {b, "i am a baker", 0},
        {{}, "i have a dog", 0},
        {d, "i am a nurse", 1},
        {d, "my job is baker", -1},
    };
    RuleOracle oracle;
    std::vector<ScoredResponse> all;
    double hand_total = 0.0;
    for (const auto& t : audit) {
        CAPTURE(t.response);
        CHECK(c_score(t.response, t.personas, oracle) == t.expected);
        all.push_back({t.personas, t.response});
        hand_total += t.expected;
    }
    CHECK(c_score(all, oracle) == hand_total / 20.0);
}

TEST_CASE("c_score is a response-weighted mean over concatenated corpora") {
    FixedOracle o;
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<ScoredResponse> x, y;
        for (auto* side : {&x, &y}) {
            const std::size_t n = 1 + random_index(rng, 6);
            for (std::size_t i = 0; i < n; ++i) {
                ScoredResponse r;
                r.response = std::string(random_index(rng, 10), 'w');
                r.personas.resize(random_index(rng, 4), "p");
                side->push_back(r);
            }
        }
        std::vector<ScoredResponse> both = x;
        both.insert(both.end(), y.begin(), y.end());
        const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
        const double want = (c_score(x, o) * nx + c_score(y, o) * ny) / (nx + ny);
        CHECK(std::abs(c_score(both, o) - want) < 1e-12);
    }
}

TEST_CASE("command oracle line protocol") {
    CommandOracle echo(R"(awk -F'\t' '{ if ($1 == $2) print 1; else if ($2 == "") print 0; else print -1 }')");
    CHECK(echo.verdicts({{"x", "x"}, {"y", "x"}, {"", "x"}}) == std::vector<int>{1, -1, 0});
    CHECK(echo.verdict("tab\tinside", "tab inside") == 1);
    CHECK(c_score("same", {"same", "other"}, echo) == 0);
    CHECK(echo.verdicts({}).empty());

    CHECK_THROWS_AS(CommandOracle(""), std::invalid_argument);
    CommandOracle bad_token("sed 's/.*/maybe/'");
    CHECK_THROWS_WITH(bad_token.verdict("a", "b"), doctest::Contains("maybe"));
    CommandOracle short_answer("head -n 1 >/dev/null; echo 1");
    CHECK_THROWS_WITH(short_answer.verdicts({{"a", "b"}, {"c", "d"}}), doctest::Contains("1 of 2"));
    CommandOracle failing("exit 3");
    CHECK_THROWS_AS(failing.verdict("a", "b"), std::runtime_error);

    // rule oracle driven through the protocol agrees with the in-process one
    const auto corpus = synth::generate(4, 1);
    RuleOracle rule;
    CommandOracle ones("sed 's/.*/1/'");
    for (const auto& t : corpus.eval) {
        CHECK(c_score(t.entailed, t.personas, rule) == 1);
        CHECK(c_score(t.contradicted, t.personas, rule) == -1);
        CHECK(c_score(t.entailed, t.personas, ones) == static_cast<int>(t.personas.size()));
    }
}

TEST_CASE("evaluation report") {
    Fixture f;
    const BobModel m(f.config(), 7);
    RuleOracle oracle;
    EvalOptions opts;
    opts.decode.max_new_tokens = 6;
    const auto r = evaluate(m, f.vocab, f.corpus.eval, oracle, opts);
    CHECK(r.delta_p == r.p_ctd - r.p_ent);
    CHECK(r.ppl == r.p_ent);
    CHECK(r.ablation == "full");
    CHECK(r.view == "d2");
    CHECK(r.entailed_count == f.corpus.eval.size());
    CHECK(r.contradicted_count == f.corpus.eval.size());
    CHECK(r.generated_count == f.corpus.eval.size());
    for (double x : {r.dist1, r.dist2}) CHECK((std::isnan(x) || (x >= 0.0 && x <= 1.0)));
    CHECK(std::abs(r.ppl_d1 - perplexity(m, f.vocab, [&] {
                       std::vector<DialogueExample> e;
                       for (const auto& t : f.corpus.eval) e.push_back({t.personas, t.query, t.entailed});
                       return e;
                   }(), ScoreView::d1)) < 1e-12);

    const auto again = evaluate(m, f.vocab, f.corpus.eval, oracle, opts);
    CHECK(again.to_json() == r.to_json());
    CHECK(r.to_json().find("\"delta_p\"") != std::string::npos);
    CHECK_THROWS_AS(evaluate(m, f.vocab, {}, oracle, opts), MetricError);
}
