#pragma once

// Subcommands of the `bob` tool, callable directly for tests.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bob/checkpoint.hpp"
#include "bob/inference.hpp"
#include "bob/metrics.hpp"

namespace bob::cli {

struct SynthOptions {
    std::filesystem::path out;
    std::size_t profiles = 30;
    std::uint64_t seed = 17;
};

struct SynthCounts {
    std::size_t dialogues = 0;
    std::size_t inference = 0;
    std::size_t eval = 0;
};

SynthCounts cmd_synth(const SynthOptions& options, std::ostream& out);

struct TrainOptions {
    std::optional<std::filesystem::path> config;
    std::filesystem::path data;
    std::optional<std::string> ablation;
    std::filesystem::path out;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> resume;
    std::optional<std::filesystem::path> log;
    /// key=value overrides applied after the config file.
    std::vector<std::string> set;
    /// Also write a checkpoint every this many steps (0 disables).
    std::size_t checkpoint_every = 0;
};

/// Returns the final checkpoint that was written to options.out.
Checkpoint cmd_train(const TrainOptions& options, std::ostream& out);

struct GenerateOptions {
    std::filesystem::path checkpoint;
    std::vector<std::string> personas;
    std::string query;
    bool show_draft = false;
    DecodeConfig decode;
};

Generation cmd_generate(const GenerateOptions& options, std::ostream& out);

struct EvalCommandOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path data;
    std::optional<std::string> oracle;
    std::optional<std::string> view;
    std::optional<std::filesystem::path> report;
    DecodeConfig decode;
};

EvalReport cmd_eval(const EvalCommandOptions& options, std::ostream& out);

/// Dialogue, inference and eval corpora under `dir`, with loader warnings
/// written to `err`.
struct Corpora {
    std::vector<DialogueExample> dialogues;
    std::vector<InferencePair> inference;
    std::vector<EvalTuple> eval;
};

Corpora load_corpora(const std::filesystem::path& dir, bool need_training, std::ostream& err);

/// One JSON object: the step index followed by every LossBreakdown field.
std::string loss_log_line(std::size_t step, const LossBreakdown& loss);

/// Seed default: BOB_SEED when set and numeric, otherwise `fallback`.
std::uint64_t default_seed(std::uint64_t fallback);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bob::cli
