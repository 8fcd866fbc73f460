#pragma once

// Closed-world persona corpus: every profile fixes one value per slot
// (pet, city, job), and every generated sentence mentions at most one
// slot value, so entailment and contradiction can be decided by rule.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bob/data.hpp"

namespace bob::synth {

struct Slot {
    std::string name;
    std::vector<std::string> values;
    /// Canonical persona sentence; "{}" marks the value.
    std::string persona_template;
    /// Paraphrases with the same meaning, used for entailed hypotheses.
    std::vector<std::string> paraphrases;
    std::vector<std::string> queries;
    std::vector<std::string> responses;
};

const std::vector<Slot>& world();

struct Fact {
    std::size_t slot = 0;
    std::string value;

    bool operator==(const Fact&) const = default;
};

/// Slot values mentioned in a sentence, in order of appearance.
std::vector<Fact> parse_facts(std::string_view sentence);

/// +1 entail, -1 contradict, 0 unrelated: compares the slot values the
/// response mentions against those of the persona sentence.
int rule_verdict(std::string_view response, std::string_view persona);

/// Rule label for a premise/hypothesis pair.
NliLabel rule_label(std::string_view premise, std::string_view hypothesis);

std::string fill(const std::string& pattern, const std::string& value);

struct Profile {
    std::vector<std::string> values;  // one per slot
};

struct Corpus {
    std::vector<DialogueExample> dialogues;
    std::vector<InferencePair> inference;
    std::vector<EvalTuple> eval;
    std::vector<Profile> train_profiles;
    std::vector<Profile> eval_profiles;
};

/// num_profiles >= 2. Eval tuples come from profiles disjoint from the
/// training ones whenever the world has enough value combinations.
Corpus generate(std::size_t num_profiles, std::uint64_t seed);

}  // namespace bob::synth
