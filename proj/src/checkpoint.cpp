#include "bob/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace bob {

namespace {

constexpr char magic[8] = {'B', 'O', 'B', 'C', 'K', 'P', 'T', '1'};

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(std::string_view s) {
        u64(s.size());
        out_.append(s);
    }
    void doubles(std::span<const double> v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    void raw(const char* p, std::size_t n) { out_.append(p, n); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    std::uint64_t u(int bytes, const char* what) {
        need(static_cast<std::size_t>(bytes), what);
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
        return v;
    }
    std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(u(4, what)); }
    std::uint64_t u64(const char* what) { return u(8, what); }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char* what) {
        const std::uint64_t n = u64(what);
        need(n, what);
        std::string s(in_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::vector<double> doubles(const char* what) {
        const std::uint64_t n = u64(what);
        if (n > (in_.size() - pos_) / 8) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
        std::vector<double> v(n);
        for (auto& x : v) x = f64(what);
        return v;
    }
    std::string_view raw(std::size_t n, const char* what) {
        need(n, what);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
    if (!ck.model) throw CheckpointError("checkpoint has no model");
    Writer w;
    w.raw(magic, sizeof magic);
    w.u32(checkpoint_version);
    RunConfig config = ck.config;
    config.model = ck.model->config();
    w.str(to_config_text(config));

    w.u64(ck.vocab.size());
    for (const auto& t : ck.vocab.tokens()) w.str(t);

    const auto params = ck.model->named_parameters();
    w.u64(params.size());
    for (const auto& p : params) {
        w.str(p.name);
        w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::size_t d : p.tensor.shape()) w.u64(d);
        for (double x : p.tensor.data()) w.f64(x);
    }

    w.u64(ck.adam.slots.size());
    for (const auto& s : ck.adam.slots) {
        w.u64(s.t);
        w.doubles(s.m);
        w.doubles(s.v);
    }

    std::ostringstream rng;
    rng << ck.rng;
    w.str(rng.str());
    w.u64(ck.step);
    return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    Reader r(bytes);
    if (std::memcmp(r.raw(sizeof magic, "magic").data(), magic, sizeof magic) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    const std::uint32_t version = r.u32("version");
    if (version != checkpoint_version) {
        throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(checkpoint_version) + ")");
    }
    Checkpoint ck;
    try {
        ck.config = parse_config_text(r.str("config"));
        ck.config.model.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
    }

    const std::uint64_t vocab_size = r.u64("vocab size");
    if (vocab_size > bytes.size()) throw CheckpointError("checkpoint vocabulary size is corrupt");
    std::vector<std::string> tokens(vocab_size);
    for (auto& t : tokens) t = r.str("vocab entry");
    try {
        ck.vocab = Vocab::from_tokens(tokens);
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint vocabulary is invalid: ") + e.what());
    }

    if (ck.vocab.size() > ck.config.model.vocab_size) {
        throw CheckpointError("checkpoint vocabulary has " + std::to_string(ck.vocab.size()) +
                              " entries but the model only " + std::to_string(ck.config.model.vocab_size));
    }
    ck.model = std::make_shared<BobModel>(ck.config.model, 0);
    auto params = ck.model->named_parameters();
    const std::uint64_t count = r.u64("parameter count");
    if (count != params.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " parameters; the configured model has " +
                              std::to_string(params.size()));
    }
    for (auto& p : params) {
        const std::string name = r.str("parameter name");
        if (name != p.name) throw CheckpointError("expected parameter " + p.name + ", found " + name);
        Shape shape(r.u32("parameter rank"));
        for (auto& d : shape) d = r.u64("parameter shape");
        if (shape != p.tensor.shape()) {
            throw CheckpointError("parameter " + name + " has shape " + shape_str(shape) + ", expected " +
                                  shape_str(p.tensor.shape()));
        }
        for (double& x : p.tensor.mutable_data()) x = r.f64("parameter values");
    }

    const std::uint64_t slots = r.u64("optimizer slot count");
    if (slots > bytes.size()) throw CheckpointError("optimizer slot count is corrupt");
    ck.adam.slots.resize(slots);
    if (!ck.adam.slots.empty() && ck.adam.slots.size() != params.size()) {
        throw CheckpointError("optimizer state does not match the parameter list");
    }
    for (auto& s : ck.adam.slots) {
        s.t = r.u64("optimizer step");
        s.m = r.doubles("optimizer moments");
        s.v = r.doubles("optimizer moments");
    }

    std::istringstream rng(r.str("rng state"));
    rng >> ck.rng;
    if (rng.fail()) throw CheckpointError("checkpoint rng state is corrupt");
    ck.step = r.u64("step");
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const std::string bytes = serialize_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str());
}

}  // namespace bob
