#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "bob/inference.hpp"
#include "bob/objectives.hpp"
#include "bob/special_tokens.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace bob;
using bob::test::tiny_config;

namespace {

const std::vector<std::vector<int>> personas{{6, 7, 8}, {9, 10}};
const std::vector<int> query{11, 12};

// A model whose greedy draft is non-empty for the fixture inputs.
BobModel talkative_model(ModelConfig c) {
    for (std::uint64_t seed = 0;; ++seed) {
        BobModel m(c, seed);
        DecodeConfig d;
        d.max_new_tokens = 4;
        if (generate(m, personas, query, d).draft_ids.size() >= 2) return m;
    }
}

double log_softmax_at(const oracle::Vec& row, int target) {
    double top = row[0];
    for (double v : row) top = std::max(top, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - top);
    return row[static_cast<std::size_t>(target)] - top - std::log(z);
}

}  // namespace

TEST_CASE("decode config validation") {
    DecodeConfig c;
    CHECK_NOTHROW(c.validate());
    c.max_new_tokens = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = DecodeConfig{};
    c.strategy = DecodeStrategy::topk;
    c.k = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("greedy generation is deterministic") {
    const auto m = talkative_model(tiny_config(2, 8, 2, 16));
    const DecodeConfig d;
    const auto a = generate(m, personas, query, d);
    const auto b = generate(m, personas, query, d);
    CHECK(a.draft_ids == b.draft_ids);
    CHECK(a.final_ids == b.final_ids);
    CHECK(a.final_ids.size() == a.draft_ids.size());
}

TEST_CASE("generated ids are never reserved") {
    const auto m = talkative_model(tiny_config(2, 8, 2, 16));
    DecodeConfig d;
    d.strategy = DecodeStrategy::topk;
    d.k = 16;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        d.seed = seed;
        const auto g = generate(m, personas, query, d);
        CHECK(g.draft_ids.size() <= d.max_new_tokens);
        for (int id : g.draft_ids) CHECK_FALSE(Vocab::is_special(id));
        for (int id : g.final_ids) CHECK_FALSE(Vocab::is_special(id));
    }
}

TEST_CASE("max_new_tokens = 1 gives one token per stage") {
    const auto m = talkative_model(tiny_config(2, 8, 2, 16));
    DecodeConfig d;
    d.max_new_tokens = 1;
    const auto g = generate(m, personas, query, d);
    CHECK(g.draft_ids.size() == 1);
    CHECK(g.final_ids.size() == 1);
}

TEST_CASE("top-k sampling") {
    const auto m = talkative_model(tiny_config(2, 8, 2, 16));
    DecodeConfig greedy, top1, sampled;
    top1.strategy = sampled.strategy = DecodeStrategy::topk;
    top1.k = 1;
    sampled.k = 8;
    sampled.seed = 3;
    CHECK(generate(m, personas, query, top1).draft_ids == generate(m, personas, query, greedy).draft_ids);
    CHECK(generate(m, personas, query, sampled).draft_ids == generate(m, personas, query, sampled).draft_ids);
}

TEST_CASE("greedy decoding terminates within max_len") {
    auto c = tiny_config(1, 8, 2, 16);
    c.max_len = 6;
    const BobModel m(c, 1);
    DecodeConfig d;
    d.max_new_tokens = 100;
    const auto g = generate(m, {{6}}, {7}, d);
    CHECK(g.draft_ids.size() <= c.max_len - 1);
}

TEST_CASE("refinement never reads the query") {
    const auto c = tiny_config(2, 8, 2, 16);
    const BobModel m(c, 2);
    const ForwardMode eval;
    const auto a = encode(m, pad_inputs({build_input(personas, {11}, c)}), eval);
    const auto b = encode(m, pad_inputs({build_input(personas, {12, 13, 14}, c)}), eval);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto r1 = bob::test::random_tensor({1, 4, 8}, rng, false);
        CHECK(refine(m, a.persona, a.persona_mask, r1, 4) == refine(m, b.persona, b.persona_mask, r1, 4));
    }
}

TEST_CASE("ablations") {
    auto c = tiny_config(2, 8, 2, 16);
    c.ablation = Ablation::e_d1;
    const auto ed1 = talkative_model(c);
    const auto g = generate(ed1, personas, query, DecodeConfig{});
    CHECK(g.final_ids == g.draft_ids);

    c.ablation = Ablation::e_only;
    const BobModel enc(c, 4);
    DecodeConfig d;
    d.max_new_tokens = 3;
    const auto e = generate(enc, personas, query, d);
    CHECK(e.draft_ids.size() <= 3);
    CHECK(e.final_ids == e.draft_ids);
}

TEST_CASE("NaN parameters are refused") {
    BobModel m(tiny_config(1, 8, 2, 16), 5);
    m.d2[0].response_ffn.up.weight.mutable_data()[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(generate(m, personas, query, DecodeConfig{}), doctest::Contains("NaN"), std::runtime_error);
}

TEST_CASE("string interface") {
    const auto m = talkative_model(tiny_config(2, 8, 2, 16));
    Vocab v;
    for (const char* w : {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}) v.add(w);
    const auto g = generate(m, v, {"a b c", "d e"}, "f g", DecodeConfig{});
    CHECK(g.final_text == detokenize(g.final_ids, v));
    CHECK(g.draft == detokenize(g.draft_ids, v));
    CHECK_NOTHROW(generate(m, v, {}, "f g", DecodeConfig{}));
}

TEST_CASE("score_response") {
    const auto c = tiny_config(2, 8, 2, 16);
    BobModel m(c, 6);
    const std::vector<int> response{13, 14, 15};
    const auto s = score_response(m, personas, query, response);
    REQUIRE(s.d1.size() == 4);
    REQUIRE(s.d2.size() == 4);
    for (double x : s.d1) CHECK(x <= 0.0);
    for (double x : s.d2) CHECK(x <= 0.0);

    SUBCASE("sum of D1 log-probs is minus the NLL total") {
        const auto batch = collate_dialogues({{personas, query, response}}, c);
        const double nll = nll_d1(m, batch, ForwardMode{}).item();
        double total = 0.0;
        for (double x : s.d1) total += x;
        CHECK(std::abs(total + nll * static_cast<double>(batch.token_count)) < 1e-12);
        double total2 = 0.0;
        for (double x : s.d2) total2 += x;
        CHECK(std::abs(total2 + nll_d2(m, batch, ForwardMode{}).item() * 4.0) < 1e-12);
    }

    SUBCASE("matches an independent softmax-and-index computation") {
        const auto seq = build_input(personas, query, c);
        const auto h = oracle::encoder(m, seq);
        const std::vector<int> target{token::bos, 13, 14, 15};
        const auto d1 = oracle::d1(m, target, h);
        const auto d2 = oracle::d2(m, oracle::persona(m, seq), d1.hidden);
        const std::vector<int> gold{13, 14, 15, token::eos};
        for (std::size_t j = 0; j < gold.size(); ++j) {
            CHECK(std::abs(s.d1[j] - log_softmax_at(d1.logits[j], gold[j])) < 1e-10);
            CHECK(std::abs(s.d2[j] - log_softmax_at(d2.logits[j], gold[j])) < 1e-10);
        }
    }

    CHECK_THROWS_AS(score_response(m, personas, query, {}), std::invalid_argument);
}

TEST_CASE("masked-LM scoring") {
    auto c = tiny_config(2, 8, 2, 16);
    c.ablation = Ablation::e_only;
    const BobModel m(c, 7);
    const auto lp = score_response_mlm(m, personas, query, {13, 14});
    REQUIRE(lp.size() == 3);
    for (double x : lp) CHECK(x <= 0.0);
    CHECK_THROWS_AS(score_response_mlm(m, personas, query, {}), std::invalid_argument);
}
