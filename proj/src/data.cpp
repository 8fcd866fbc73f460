#include "bob/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include "json.hpp"

#include "bob/special_tokens.hpp"

namespace bob {

using json = nlohmann::ordered_json;

namespace {

const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> tokens{"[pad]", "[unk]", "[s]", "[bos]", "[eos]", "[mask]"};
    return tokens;
}

}  // namespace

Vocab::Vocab() {
    for (const auto& t : reserved_tokens()) add(t);
}

int Vocab::add(const std::string& token) {
    auto it = to_id_.find(token);
    if (it != to_id_.end()) return it->second;
    const int id = static_cast<int>(to_token_.size());
    to_token_.push_back(token);
    to_id_.emplace(token, id);
    return id;
}

int Vocab::id(const std::string& token) const {
    auto it = to_id_.find(token);
    return it == to_id_.end() ? token::unk : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= to_token_.size()) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return to_token_[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
    const auto& reserved = reserved_tokens();
    if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
        throw DataError("vocabulary does not start with the reserved tokens");
    }
    Vocab v;
    for (std::size_t i = reserved.size(); i < tokens.size(); ++i) {
        if (v.contains(tokens[i])) throw DataError("duplicate vocabulary entry '" + tokens[i] + "'");
        v.add(tokens[i]);
    }
    return v;
}

bool Vocab::is_special(int id) { return id >= 0 && id < token::num_reserved; }

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    auto flush = [&]() {
        if (!current.empty()) {
            words.push_back(current);
            current.clear();
        }
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c) && c != '\'') {
            flush();
            words.emplace_back(1, ch);
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return words;
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (Vocab::is_special(id)) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.token(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Records

std::string to_string(NliLabel label) {
    switch (label) {
        case NliLabel::entail: return "entail";
        case NliLabel::neutral: return "neutral";
        case NliLabel::contradict: return "contradict";
    }
    return "neutral";
}

NliLabel parse_label(const std::string& text, const std::string& record) {
    if (text == "entail") return NliLabel::entail;
    if (text == "neutral") return NliLabel::neutral;
    if (text == "contradict") return NliLabel::contradict;
    throw DataError(record + ": unknown label '" + text + "'");
}

namespace {

std::string require_string(const json& obj, const char* field) {
    auto it = obj.find(field);
    if (it == obj.end()) throw DataError(std::string("missing field '") + field + "'");
    if (!it->is_string()) throw DataError(std::string("field '") + field + "' must be a string");
    return it->get<std::string>();
}

std::vector<std::string> require_strings(const json& obj, const char* field) {
    auto it = obj.find(field);
    if (it == obj.end()) throw DataError(std::string("missing field '") + field + "'");
    if (!it->is_array()) throw DataError(std::string("field '") + field + "' must be an array of strings");
    std::vector<std::string> out;
    for (const auto& v : *it) {
        if (!v.is_string()) throw DataError(std::string("field '") + field + "' must be an array of strings");
        out.push_back(v.get<std::string>());
    }
    return out;
}

bool blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

template <typename T, typename Parse>
LoadResult<T> load_jsonl(const std::filesystem::path& path, Parse parse) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path.string());
    LoadResult<T> result;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (blank(line)) continue;
        ++result.line_count;
        try {
            const json obj = json::parse(line);
            if (!obj.is_object()) throw DataError("line is not a JSON object");
            result.items.push_back(parse(obj, number));
        } catch (const json::exception& e) {
            result.errors.push_back({number, std::string("invalid JSON: ") + e.what()});
        } catch (const DataError& e) {
            result.errors.push_back({number, e.what()});
        }
    }
    return result;
}

void write_lines(const std::filesystem::path& path, const std::vector<json>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& r : rows) out << r.dump() << '\n';
    if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

LoadResult<DialogueExample> load_dialogue_jsonl(const std::filesystem::path& path) {
    return load_jsonl<DialogueExample>(path, [](const json& obj, std::size_t) {
        DialogueExample ex;
        ex.personas = require_strings(obj, "personas");
        ex.query = require_string(obj, "query");
        ex.response = require_string(obj, "response");
        if (split_words(ex.response).empty()) throw DataError("empty response");
        return ex;
    });
}

LoadResult<InferencePair> load_inference_jsonl(const std::filesystem::path& path) {
    return load_jsonl<InferencePair>(path, [](const json& obj, std::size_t line) {
        InferencePair p;
        p.premise = require_string(obj, "premise");
        p.hypothesis = require_string(obj, "hypothesis");
        p.label = parse_label(require_string(obj, "label"), "line " + std::to_string(line));
        return p;
    });
}

LoadResult<EvalTuple> load_eval_jsonl(const std::filesystem::path& path) {
    return load_jsonl<EvalTuple>(path, [](const json& obj, std::size_t) {
        EvalTuple t;
        t.personas = require_strings(obj, "personas");
        t.query = require_string(obj, "query");
        t.entailed = require_string(obj, "entailed");
        t.contradicted = require_string(obj, "contradicted");
        return t;
    });
}

void write_dialogue_jsonl(const std::filesystem::path& path, const std::vector<DialogueExample>& items) {
    std::vector<json> rows;
    for (const auto& ex : items) {
        rows.push_back(json{{"personas", ex.personas}, {"query", ex.query}, {"response", ex.response}});
    }
    write_lines(path, rows);
}

void write_inference_jsonl(const std::filesystem::path& path, const std::vector<InferencePair>& items) {
    std::vector<json> rows;
    for (const auto& p : items) {
        rows.push_back(json{{"premise", p.premise}, {"hypothesis", p.hypothesis}, {"label", to_string(p.label)}});
    }
    write_lines(path, rows);
}

void write_eval_jsonl(const std::filesystem::path& path, const std::vector<EvalTuple>& items) {
    std::vector<json> rows;
    for (const auto& t : items) {
        rows.push_back(json{{"personas", t.personas},
                            {"query", t.query},
                            {"entailed", t.entailed},
                            {"contradicted", t.contradicted}});
    }
    write_lines(path, rows);
}

Vocab build_vocab(const std::vector<DialogueExample>& dialogues, const std::vector<InferencePair>& inference,
                  const std::vector<EvalTuple>& eval) {
    Vocab v;
    auto take = [&](const std::string& text) {
        for (const auto& w : split_words(text)) v.add(w);
    };
    for (const auto& ex : dialogues) {
        for (const auto& p : ex.personas) take(p);
        take(ex.query);
        take(ex.response);
    }
    for (const auto& p : inference) {
        take(p.premise);
        take(p.hypothesis);
    }
    for (const auto& t : eval) {
        for (const auto& p : t.personas) take(p);
        take(t.query);
        take(t.entailed);
        take(t.contradicted);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Batching

TokenizedDialogue tokenize_dialogue(const DialogueExample& example, const Vocab& vocab) {
    TokenizedDialogue t;
    for (const auto& p : example.personas) t.personas.push_back(tokenize(p, vocab));
    t.query = tokenize(example.query, vocab);
    t.response = tokenize(example.response, vocab);
    return t;
}

DialogueBatch collate_dialogues(const std::vector<TokenizedDialogue>& examples, const ModelConfig& config) {
    if (examples.empty()) throw DataError("collate_dialogues: empty batch");
    std::vector<InputSequence> inputs;
    std::vector<std::vector<int>> targets;
    for (const auto& ex : examples) {
        if (ex.response.empty()) throw DataError("empty response");
        if (ex.response.size() + 1 > config.max_len) {
            throw InputTooLong("response of " + std::to_string(ex.response.size()) + " tokens exceeds max_len");
        }
        inputs.push_back(build_input(ex.personas, ex.query, config));
        std::vector<int> row{token::bos};
        row.insert(row.end(), ex.response.begin(), ex.response.end());
        targets.push_back(std::move(row));
    }
    DialogueBatch batch;
    batch.encoder = pad_inputs(inputs);
    batch.target_in = pad_rows(targets);
    const std::size_t t = batch.target_in.length;
    batch.target_out.assign(examples.size() * t, -1);
    for (std::size_t b = 0; b < examples.size(); ++b) {
        const auto& r = examples[b].response;
        for (std::size_t j = 0; j < r.size(); ++j) batch.target_out[b * t + j] = r[j];
        batch.target_out[b * t + r.size()] = token::eos;
        batch.token_count += r.size() + 1;
    }
    batch.examples = examples;
    return batch;
}

InferenceBatch collate_pairs(const std::vector<TokenizedPair>& pairs, const ModelConfig& config) {
    if (pairs.empty()) throw DataError("collate_pairs: empty batch");
    InferenceBatch batch;
    batch.batch = pairs.size();
    std::vector<std::vector<int>> hyps;
    for (const auto& p : pairs) {
        if (p.hypothesis.empty()) throw DataError("empty hypothesis");
        if (p.premise.size() + 1 > config.max_len || p.hypothesis.size() + 1 > config.max_len) {
            throw InputTooLong("inference pair exceeds max_len");
        }
        batch.premise_width = std::max(batch.premise_width, p.premise.size() + 1);
        std::vector<int> row = p.hypothesis;
        row.push_back(token::eos);
        hyps.push_back(std::move(row));
    }
    const std::size_t w = batch.premise_width;
    batch.premise_ids.assign(pairs.size() * w, token::pad);
    batch.premise_positions.assign(pairs.size() * w, 0);
    batch.premise_mask.assign(pairs.size() * w, 1);
    for (std::size_t b = 0; b < pairs.size(); ++b) {
        const auto& prem = pairs[b].premise;
        for (std::size_t j = 0; j <= prem.size(); ++j) {
            batch.premise_ids[b * w + j] = j < prem.size() ? prem[j] : token::sep;
            batch.premise_positions[b * w + j] = static_cast<int>(j);
            batch.premise_mask[b * w + j] = 0;
        }
    }
    batch.hypothesis_in = pad_rows(hyps);
    const std::size_t t = batch.hypothesis_in.length;
    batch.hypothesis_out.assign(pairs.size() * t, -1);
    for (std::size_t b = 0; b < pairs.size(); ++b) {
        const auto& h = pairs[b].hypothesis;
        for (std::size_t j = 0; j < h.size(); ++j) batch.hypothesis_out[b * t + j] = h[j];
        batch.token_count += h.size();
    }
    return batch;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    return idx;
}

namespace {

template <typename Batch, typename Item, typename Fits, typename Collate>
BatchPlan<Batch> plan_batches(const std::vector<Item>& items, std::size_t batch_size, std::uint64_t seed, Fits fits,
                              Collate collate) {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    BatchPlan<Batch> plan;
    std::vector<Item> pending;
    for (std::size_t i : shuffled_indices(items.size(), seed)) {
        if (!fits(items[i])) {
            ++plan.skipped;
            continue;
        }
        pending.push_back(items[i]);
        if (pending.size() == batch_size) {
            plan.batches.push_back(collate(pending));
            pending.clear();
        }
    }
    if (!pending.empty()) plan.batches.push_back(collate(pending));
    return plan;
}

}  // namespace

BatchPlan<DialogueBatch> make_batches(const std::vector<TokenizedDialogue>& examples, const ModelConfig& config,
                                      std::size_t batch_size, std::uint64_t seed) {
    auto fits = [&](const TokenizedDialogue& ex) {
        if (ex.response.empty() || ex.response.size() + 1 > config.max_len) return false;
        return ex.query.size() + 1 <= config.max_len;
    };
    auto collate = [&](const std::vector<TokenizedDialogue>& b) { return collate_dialogues(b, config); };
    return plan_batches<DialogueBatch>(examples, batch_size, seed, fits, collate);
}

BatchPlan<DialogueBatch> make_batches(const std::vector<DialogueExample>& examples, const Vocab& vocab,
                                      const ModelConfig& config, std::size_t batch_size, std::uint64_t seed) {
    std::vector<TokenizedDialogue> tokenized;
    tokenized.reserve(examples.size());
    for (const auto& ex : examples) tokenized.push_back(tokenize_dialogue(ex, vocab));
    return make_batches(tokenized, config, batch_size, seed);
}

BatchPlan<InferenceBatch> make_pair_batches(const std::vector<TokenizedPair>& pairs, const ModelConfig& config,
                                            std::size_t batch_size, std::uint64_t seed) {
    auto fits = [&](const TokenizedPair& p) {
        return !p.hypothesis.empty() && p.premise.size() + 1 <= config.max_len &&
               p.hypothesis.size() + 1 <= config.max_len;
    };
    auto collate = [&](const std::vector<TokenizedPair>& b) { return collate_pairs(b, config); };
    return plan_batches<InferenceBatch>(pairs, batch_size, seed, fits, collate);
}

}  // namespace bob
