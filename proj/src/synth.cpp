#include "bob/synth.hpp"

#include <algorithm>
#include <stdexcept>

namespace bob::synth {

const std::vector<Slot>& world() {
    static const std::vector<Slot> slots{
        {"pet",
         {"dog", "cat", "bird", "fish"},
         "i have a {}",
         {"i own a {}", "my pet is a {}"},
         {"do you have a pet ?", "what pet do you have ?"},
         {"yes i have a {}", "i have a {}"}},
        {"city",
         {"paris", "rome", "oslo", "lima"},
         "i live in {}",
         {"my home is in {}", "i reside in {}"},
         {"where do you live ?", "which city are you from ?"},
         {"i live in {}", "i am from {}"}},
        {"job",
         {"chef", "pilot", "nurse", "baker"},
         "i work as a {}",
         {"my job is {}", "i am a {}"},
         {"what do you do for work ?", "what is your job ?"},
         {"i work as a {}", "i am a {}"}},
    };
    return slots;
}

namespace {

const std::vector<std::string>& small_talk() {
    static const std::vector<std::string> lines{"i like music", "i enjoy reading books", "the weather is nice today",
                                                "i play the guitar", "i love long walks"};
    return lines;
}

std::size_t pick(Rng& rng, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

template <typename T>
const T& choose(Rng& rng, const std::vector<T>& items) {
    return items[pick(rng, items.size())];
}

std::string other_value(Rng& rng, const Slot& slot, const std::string& value) {
    std::vector<std::string> others;
    for (const auto& v : slot.values) {
        if (v != value) others.push_back(v);
    }
    return choose(rng, others);
}

std::vector<std::string> persona_lines(const Profile& p, Rng& rng) {
    const auto& slots = world();
    std::vector<std::string> lines;
    for (std::size_t s = 0; s < slots.size(); ++s) lines.push_back(fill(slots[s].persona_template, p.values[s]));
    for (std::size_t i = lines.size(); i > 1; --i) std::swap(lines[i - 1], lines[pick(rng, i)]);
    return lines;
}

}  // namespace

std::string fill(const std::string& pattern, const std::string& value) {
    std::string out = pattern;
    const auto at = out.find("{}");
    if (at != std::string::npos) out.replace(at, 2, value);
    return out;
}

std::vector<Fact> parse_facts(std::string_view sentence) {
    const auto& slots = world();
    std::vector<Fact> facts;
    for (const auto& word : split_words(sentence)) {
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const auto& vals = slots[s].values;
            if (std::find(vals.begin(), vals.end(), word) != vals.end()) facts.push_back({s, word});
        }
    }
    return facts;
}

int rule_verdict(std::string_view response, std::string_view persona) {
    const auto said = parse_facts(response);
    const auto known = parse_facts(persona);
    bool agrees = false;
    for (const auto& k : known) {
        for (const auto& s : said) {
            if (s.slot != k.slot) continue;
            if (s.value != k.value) return -1;
            agrees = true;
        }
    }
    return agrees ? 1 : 0;
}

NliLabel rule_label(std::string_view premise, std::string_view hypothesis) {
    switch (rule_verdict(hypothesis, premise)) {
        case 1: return NliLabel::entail;
        case -1: return NliLabel::contradict;
        default: return NliLabel::neutral;
    }
}

Corpus generate(std::size_t num_profiles, std::uint64_t seed) {
    if (num_profiles < 2) throw std::invalid_argument("synth: need at least 2 profiles");
    const auto& slots = world();
    Rng rng(seed);

    std::vector<Profile> combos{{}};
    for (const auto& slot : slots) {
        std::vector<Profile> next;
        for (const auto& c : combos) {
            for (const auto& v : slot.values) {
                Profile p = c;
                p.values.push_back(v);
                next.push_back(std::move(p));
            }
        }
        combos = std::move(next);
    }
    for (std::size_t i = combos.size(); i > 1; --i) std::swap(combos[i - 1], combos[pick(rng, i)]);

    const std::size_t eval_count = std::max<std::size_t>(2, num_profiles / 3);
    Corpus corpus;
    std::size_t cursor = 0;
    auto next_profile = [&]() {
        if (cursor < combos.size()) return combos[cursor++];
        return combos[pick(rng, combos.size())];
    };
    // Reserve held-out combinations first when the world is too small for both.
    std::size_t train_distinct = std::min(num_profiles, combos.size() > eval_count ? combos.size() - eval_count : 0);
    if (train_distinct == 0) train_distinct = std::min(num_profiles, combos.size());
    for (std::size_t i = 0; i < num_profiles; ++i) {
        corpus.train_profiles.push_back(i < train_distinct ? combos[cursor++] : combos[pick(rng, train_distinct)]);
    }
    for (std::size_t i = 0; i < eval_count; ++i) corpus.eval_profiles.push_back(next_profile());

    for (const auto& profile : corpus.train_profiles) {
        const auto personas = persona_lines(profile, rng);
        for (std::size_t s = 0; s < slots.size(); ++s) {
            for (const auto& q : slots[s].queries) {
                corpus.dialogues.push_back({personas, q, fill(choose(rng, slots[s].responses), profile.values[s])});
            }
        }
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const auto& slot = slots[s];
            const auto& value = profile.values[s];
            const std::string premise = fill(slot.persona_template, value);
            corpus.inference.push_back({premise, fill(choose(rng, slot.paraphrases), value), NliLabel::entail});

            std::vector<std::string> forms = slot.paraphrases;
            forms.push_back(slot.persona_template);
            corpus.inference.push_back(
                {premise, fill(choose(rng, forms), other_value(rng, slot, value)), NliLabel::contradict});

            std::string neutral;
            if (uniform01(rng) < 0.5) {
                neutral = choose(rng, small_talk());
            } else {
                const std::size_t other = (s + 1 + pick(rng, slots.size() - 1)) % slots.size();
                neutral = fill(slots[other].persona_template, choose(rng, slots[other].values));
            }
            corpus.inference.push_back({premise, neutral, NliLabel::neutral});
        }
    }

    for (const auto& profile : corpus.eval_profiles) {
        const auto personas = persona_lines(profile, rng);
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const auto& slot = slots[s];
            const auto& response = choose(rng, slot.responses);
            corpus.eval.push_back({personas, choose(rng, slot.queries), fill(response, profile.values[s]),
                                   fill(response, other_value(rng, slot, profile.values[s]))});
        }
    }
    return corpus;
}

}  // namespace bob::synth
