#include "bob/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace bob {

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

std::string to_string(PersonaSource s) { return s == PersonaSource::encoder ? "encoder" : "embeddings"; }

namespace {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& expected) {
    throw ConfigError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

std::size_t read_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) bad(key, v, "a non-negative integer");
    return out;
}

std::uint64_t read_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) bad(key, v, "an unsigned integer");
    return out;
}

double read_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) bad(key, v, "a number");
    return out;
}

bool read_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad(key, v, "true or false");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table{
        {"num_layers", [](RunConfig& c, auto& k, auto& v) { c.model.num_layers = read_size(k, v); }},
        {"hidden_size", [](RunConfig& c, auto& k, auto& v) { c.model.hidden_size = read_size(k, v); }},
        {"num_heads", [](RunConfig& c, auto& k, auto& v) { c.model.num_heads = read_size(k, v); }},
        {"ffn_size", [](RunConfig& c, auto& k, auto& v) { c.model.ffn_size = read_size(k, v); }},
        {"vocab_size", [](RunConfig& c, auto& k, auto& v) { c.model.vocab_size = read_size(k, v); }},
        {"max_len", [](RunConfig& c, auto& k, auto& v) { c.model.max_len = read_size(k, v); }},
        {"dropout", [](RunConfig& c, auto& k, auto& v) { c.model.dropout = read_double(k, v); }},
        {"init_std", [](RunConfig& c, auto& k, auto& v) { c.model.init_std = read_double(k, v); }},
        {"ablation",
         [](RunConfig& c, auto& k, auto& v) {
             try {
                 c.model.ablation = parse_ablation(v);
             } catch (const std::invalid_argument&) {
                 bad(k, v, "one of full, no_ul, e_d1, e_only");
             }
         }},
        {"activation",
         [](RunConfig& c, auto& k, auto& v) {
             if (v == "relu") c.model.activation = Activation::relu;
             else if (v == "gelu") c.model.activation = Activation::gelu;
             else bad(k, v, "relu or gelu");
         }},
        {"tie_embeddings", [](RunConfig& c, auto& k, auto& v) { c.model.tie_embeddings = read_bool(k, v); }},
        {"d2_causal", [](RunConfig& c, auto& k, auto& v) { c.model.d2_causal = read_bool(k, v); }},
        {"embedding_norm", [](RunConfig& c, auto& k, auto& v) { c.model.embedding_norm = read_bool(k, v); }},
        {"persona_source",
         [](RunConfig& c, auto& k, auto& v) {
             if (v == "embeddings") c.model.persona_source = PersonaSource::embeddings;
             else if (v == "encoder") c.model.persona_source = PersonaSource::encoder;
             else bad(k, v, "embeddings or encoder");
         }},
        {"alpha", [](RunConfig& c, auto& k, auto& v) { c.train.alpha = read_double(k, v); }},
        {"beta", [](RunConfig& c, auto& k, auto& v) { c.train.beta = read_double(k, v); }},
        {"lr", [](RunConfig& c, auto& k, auto& v) { c.train.lr = read_double(k, v); }},
        {"adam_beta1", [](RunConfig& c, auto& k, auto& v) { c.train.adam_beta1 = read_double(k, v); }},
        {"adam_beta2", [](RunConfig& c, auto& k, auto& v) { c.train.adam_beta2 = read_double(k, v); }},
        {"adam_eps", [](RunConfig& c, auto& k, auto& v) { c.train.adam_eps = read_double(k, v); }},
        {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = read_size(k, v); }},
        {"max_steps", [](RunConfig& c, auto& k, auto& v) { c.train.max_steps = read_size(k, v); }},
        {"seed", [](RunConfig& c, auto& k, auto& v) { c.train.seed = read_u64(k, v); }},
    };
    return table;
}

}  // namespace

std::string to_config_text(const RunConfig& config) {
    const auto& m = config.model;
    const auto& t = config.train;
    std::ostringstream out;
    out << "num_layers=" << m.num_layers << '\n'
        << "hidden_size=" << m.hidden_size << '\n'
        << "num_heads=" << m.num_heads << '\n'
        << "ffn_size=" << m.ffn_size << '\n'
        << "vocab_size=" << m.vocab_size << '\n'
        << "max_len=" << m.max_len << '\n'
        << "dropout=" << format_double(m.dropout) << '\n'
        << "init_std=" << format_double(m.init_std) << '\n'
        << "ablation=" << to_string(m.ablation) << '\n'
        << "activation=" << to_string(m.activation) << '\n'
        << "tie_embeddings=" << (m.tie_embeddings ? "true" : "false") << '\n'
        << "d2_causal=" << (m.d2_causal ? "true" : "false") << '\n'
        << "embedding_norm=" << (m.embedding_norm ? "true" : "false") << '\n'
        << "persona_source=" << to_string(m.persona_source) << '\n'
        << "alpha=" << format_double(t.alpha) << '\n'
        << "beta=" << format_double(t.beta) << '\n'
        << "lr=" << format_double(t.lr) << '\n'
        << "adam_beta1=" << format_double(t.adam_beta1) << '\n'
        << "adam_beta2=" << format_double(t.adam_beta2) << '\n'
        << "adam_eps=" << format_double(t.adam_eps) << '\n'
        << "batch_size=" << t.batch_size << '\n'
        << "max_steps=" << t.max_steps << '\n'
        << "seed=" << t.seed << '\n';
    return out.str();
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
    const auto& table = setters();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(config, key, value);
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const std::string s = trim(line);
        if (s.empty() || s.front() == '#') continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(number) + ": expected key=value, got '" + s + "'");
        }
        apply_setting(base, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    return base;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config_text(text.str(), std::move(base));
}

}  // namespace bob
