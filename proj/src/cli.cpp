#include "bob/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "bob/synth.hpp"
#include "json.hpp"

namespace bob::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* dialogue_file = "dialogue.jsonl";
constexpr const char* inference_file = "inference.jsonl";
constexpr const char* eval_file = "eval.jsonl";

template <typename T>
std::vector<T> take(LoadResult<T> result, const fs::path& path, std::ostream& err) {
    for (const auto& e : result.errors) err << "warning: " << path.string() << ":" << e.line << ": " << e.message << '\n';
    return std::move(result.items);
}

std::vector<std::string> split_personas(const std::vector<std::string>& raw) {
    std::vector<std::string> out;
    for (const auto& item : raw) {
        std::size_t start = 0;
        while (start <= item.size()) {
            const auto bar = item.find('|', start);
            const auto piece = item.substr(start, bar == std::string::npos ? std::string::npos : bar - start);
            if (piece.find_first_not_of(" \t") != std::string::npos) out.push_back(piece);
            if (bar == std::string::npos) break;
            start = bar + 1;
        }
    }
    return out;
}

}  // namespace

std::uint64_t default_seed(std::uint64_t fallback) {
    const char* env = std::getenv("BOB_SEED");
    if (!env || !*env) return fallback;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    return end && *end == '\0' ? static_cast<std::uint64_t>(v) : fallback;
}

Corpora load_corpora(const fs::path& dir, bool need_training, std::ostream& err) {
    Corpora c;
    const auto require = [&](const fs::path& p) {
        if (!fs::exists(p)) throw DataError("missing corpus file " + p.string());
    };
    if (need_training) {
        require(dir / dialogue_file);
        require(dir / inference_file);
    }
    if (fs::exists(dir / dialogue_file)) c.dialogues = take(load_dialogue_jsonl(dir / dialogue_file), dir / dialogue_file, err);
    if (fs::exists(dir / inference_file)) {
        c.inference = take(load_inference_jsonl(dir / inference_file), dir / inference_file, err);
    }
    if (fs::exists(dir / eval_file)) c.eval = take(load_eval_jsonl(dir / eval_file), dir / eval_file, err);
    if (need_training && c.dialogues.empty()) throw DataError("no usable dialogue examples in " + dir.string());
    return c;
}

std::string loss_log_line(std::size_t step, const LossBreakdown& loss) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["nll_d1"] = loss.nll_d1;
    j["nll_d2"] = loss.nll_d2;
    j["ul_pos"] = loss.ul_pos;
    j["ul_neg"] = loss.ul_neg;
    j["l1"] = loss.l1;
    j["l2"] = loss.l2;
    j["total"] = loss.total;
    return j.dump();
}

SynthCounts cmd_synth(const SynthOptions& options, std::ostream& out) {
    const synth::Corpus corpus = synth::generate(options.profiles, options.seed);
    std::error_code ec;
    fs::create_directories(options.out, ec);
    if (ec || !fs::is_directory(options.out)) throw DataError("cannot create output directory " + options.out.string());
    write_dialogue_jsonl(options.out / dialogue_file, corpus.dialogues);
    write_inference_jsonl(options.out / inference_file, corpus.inference);
    write_eval_jsonl(options.out / eval_file, corpus.eval);
    SynthCounts counts{corpus.dialogues.size(), corpus.inference.size(), corpus.eval.size()};
    out << "dialogues " << counts.dialogues << "\ninference " << counts.inference << "\neval " << counts.eval << '\n';
    return counts;
}

Checkpoint cmd_train(const TrainOptions& options, std::ostream& out) {
    const Corpora corpora = load_corpora(options.data, true, std::cerr);
    Checkpoint ck;
    if (options.resume) {
        ck = load_checkpoint(*options.resume);
        if (options.ablation && parse_ablation(*options.ablation) != ck.config.model.ablation) {
            throw ConfigError("--ablation " + *options.ablation + " differs from the resumed checkpoint's " +
                              to_string(ck.config.model.ablation));
        }
        if (options.seed && *options.seed != ck.config.train.seed) {
            throw ConfigError("--seed differs from the resumed checkpoint's seed");
        }
        for (const auto& kv : options.set) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos || kv.substr(0, eq) != "max_steps") {
                throw ConfigError("only max_steps may be changed when resuming");
            }
            apply_setting(ck.config, "max_steps", kv.substr(eq + 1));
        }
    } else {
        RunConfig config;
        config.train.seed = default_seed(config.train.seed);
        if (options.config) config = load_config_file(*options.config, config);
        for (const auto& kv : options.set) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            apply_setting(config, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (options.ablation) config.model.ablation = parse_ablation(*options.ablation);
        if (options.seed) config.train.seed = *options.seed;
        ck.vocab = build_vocab(corpora.dialogues, corpora.inference, corpora.eval);
        config.model.vocab_size = ck.vocab.size();
        config.model.validate();
        config.train.validate();
        ck.config = config;
        ck.model = std::make_shared<BobModel>(config.model, derive_seed(config.train.seed, 4, 0));
    }
    if (options.steps) ck.config.train.max_steps = *options.steps;

    Trainer trainer(*ck.model, ck.config.train, prepare_training_data(corpora.dialogues, corpora.inference, ck.vocab));
    if (options.resume) trainer.restore(ck.adam, ck.rng, ck.step);

    std::ofstream log;
    if (options.log) {
        log.open(*options.log, options.resume ? std::ios::app : std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open loss log " + options.log->string());
    }
    const auto snapshot = [&]() {
        ck.adam = trainer.optimizer();
        ck.rng = trainer.rng();
        ck.step = trainer.steps_done();
    };

    LossBreakdown last;
    while (trainer.steps_done() < ck.config.train.max_steps) {
        last = trainer.step();
        const std::size_t step = trainer.steps_done();
        if (log.is_open()) log << loss_log_line(step, last) << '\n' << std::flush;
        if (options.checkpoint_every > 0 && step % options.checkpoint_every == 0) {
            snapshot();
            save_checkpoint(options.out, ck);
        }
    }
    snapshot();
    save_checkpoint(options.out, ck);
    out << "trained " << to_string(ck.config.model.ablation) << " to step " << ck.step << ", final loss "
        << last.total << ", checkpoint " << options.out.string() << '\n';
    return ck;
}

Generation cmd_generate(const GenerateOptions& options, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(options.checkpoint);
    const Generation g = generate(*ck.model, ck.vocab, split_personas(options.personas), options.query, options.decode);
    if (options.show_draft) out << "draft: " << g.draft << "\nfinal: " << g.final_text << '\n';
    else out << g.final_text << '\n';
    return g;
}

EvalReport cmd_eval(const EvalCommandOptions& options, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(options.checkpoint);
    const Corpora corpora = load_corpora(options.data, false, std::cerr);
    if (corpora.eval.empty()) throw MetricError("no eval tuples in " + (options.data / eval_file).string());
    std::unique_ptr<NliOracle> oracle;
    if (options.oracle) oracle = std::make_unique<CommandOracle>(*options.oracle);
    else oracle = std::make_unique<RuleOracle>();
    EvalOptions eval;
    eval.view = options.view ? parse_score_view(*options.view) : default_view(ck.config.model.ablation);
    eval.decode = options.decode;
    const EvalReport report = evaluate(*ck.model, ck.vocab, corpora.eval, *oracle, eval);
    const std::string json = report.to_json();
    if (options.report) {
        std::ofstream f(*options.report, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write report " + options.report->string());
        f << json << '\n';
    }
    out << json << '\n';
    return report;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Persona-consistent dialogue: encoder, drafting decoder and consistency decoder"};
    app.require_subcommand(1);

    SynthOptions synth_opts;
    synth_opts.seed = default_seed(synth_opts.seed);
    auto* synth = app.add_subcommand("synth", "write a synthetic persona corpus");
    synth->add_option("--out", synth_opts.out, "output directory")->required();
    synth->add_option("--profiles", synth_opts.profiles, "number of training profiles")->check(CLI::Range(2, 100000));
    synth->add_option("--seed", synth_opts.seed, "generator seed (default: BOB_SEED or 17)");

    TrainOptions train_opts;
    std::string train_ablation, train_config, train_resume, train_log;
    std::size_t train_steps = 0;
    std::uint64_t train_seed = 0;
    auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
    auto* o_config = train->add_option("--config", train_config, "key=value config file");
    train->add_option("--data", train_opts.data, "corpus directory")->required();
    auto* o_ablation = train->add_option("--ablation", train_ablation, "full, no_ul, e_d1 or e_only");
    train->add_option("--out", train_opts.out, "checkpoint path")->required();
    auto* o_steps = train->add_option("--steps", train_steps, "override max_steps");
    auto* o_seed = train->add_option("--seed", train_seed, "training seed (default: BOB_SEED or config)");
    auto* o_resume = train->add_option("--resume", train_resume, "continue from this checkpoint");
    auto* o_log = train->add_option("--log", train_log, "JSONL loss log");
    train->add_option("--set", train_opts.set, "key=value config override (repeatable)");
    train->add_option("--checkpoint-every", train_opts.checkpoint_every, "also checkpoint every N steps");

    GenerateOptions gen_opts;
    std::string gen_strategy = "greedy";
    auto* gen = app.add_subcommand("generate", "print a response for a persona and query");
    gen->add_option("--ckpt", gen_opts.checkpoint, "checkpoint path")->required();
    gen->add_option("--personas", gen_opts.personas, "persona sentences, '|' separated or repeated");
    gen->add_option("--query", gen_opts.query, "user query")->required();
    gen->add_flag("--show-draft", gen_opts.show_draft, "also print the first-stage draft");
    gen->add_option("--strategy", gen_strategy, "greedy or topk")->check(CLI::IsMember({"greedy", "topk"}));
    gen->add_option("--k", gen_opts.decode.k, "top-k size");
    gen->add_option("--max-new-tokens", gen_opts.decode.max_new_tokens, "length cap");
    gen_opts.decode.seed = default_seed(0);
    gen->add_option("--seed", gen_opts.decode.seed, "sampling seed");

    EvalCommandOptions eval_opts;
    std::string eval_oracle, eval_view, eval_report;
    auto* ev = app.add_subcommand("eval", "score a checkpoint on held-out tuples");
    ev->add_option("--ckpt", eval_opts.checkpoint, "checkpoint path")->required();
    ev->add_option("--data", eval_opts.data, "corpus directory")->required();
    auto* o_oracle = ev->add_option("--oracle", eval_oracle, "external referee command");
    auto* o_view = ev->add_option("--view", eval_view, "d1, d2 or mlm");
    auto* o_report = ev->add_option("--report", eval_report, "also write the report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*synth) {
            cmd_synth(synth_opts, out);
        } else if (*train) {
            if (*o_config) train_opts.config = train_config;
            if (*o_ablation) train_opts.ablation = train_ablation;
            if (*o_steps) train_opts.steps = train_steps;
            if (*o_seed) train_opts.seed = train_seed;
            if (*o_resume) train_opts.resume = train_resume;
            if (*o_log) train_opts.log = train_log;
            cmd_train(train_opts, out);
        } else if (*gen) {
            gen_opts.decode.strategy = gen_strategy == "topk" ? DecodeStrategy::topk : DecodeStrategy::greedy;
            cmd_generate(gen_opts, out);
        } else if (*ev) {
            if (*o_oracle) eval_opts.oracle = eval_oracle;
            if (*o_view) eval_opts.view = eval_view;
            if (*o_report) eval_opts.report = eval_report;
            cmd_eval(eval_opts, out);
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace bob::cli
