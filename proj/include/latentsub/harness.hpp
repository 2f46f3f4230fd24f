#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/attacks.hpp"
#include "latentsub/generator.hpp"
#include "latentsub/membership.hpp"
#include "latentsub/oracle.hpp"
#include "latentsub/substitute.hpp"
#include "latentsub/toy_data.hpp"

namespace latentsub {

// ---- target training ----------------------------------------------------------

struct TargetRecipe {
    TargetNetSpec arch;
    std::int64_t epochs = 15;
    std::int64_t batch_size = 64;
    double learning_rate = 1e-3;
    double validation_fraction = 0.2;
    ToyStyle style = ToyStyle::Private;

    nlohmann::json to_json() const;
    static TargetRecipe from_json(const nlohmann::json& j);
};

struct TargetTrainReport {
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
    std::int64_t train_size = 0;
    std::int64_t validation_size = 0;
    std::string checkpoint_digest; ///< digest of the weights file
    std::vector<std::int64_t> train_indices; ///< dataset rows the model was fitted on

    nlohmann::json to_json() const;
};

/// Renders the dataset, holds out a seeded validation split, trains a TargetNet
/// with Adam and writes a checkpoint loadable by open_local_oracle. The
/// checkpoint meta records the dataset spec and the training rows so that the
/// member set can be regenerated exactly.
TargetTrainReport train_target(const ToyDatasetSpec& dataset, const TargetRecipe& recipe, std::uint64_t seed,
                               const std::filesystem::path& stem);

/// The images a target checkpoint was fitted on, rebuilt from its meta.
ImageBatch target_training_data(const nlohmann::json& checkpoint_meta);

// ---- ASR ------------------------------------------------------------------------

struct AsrEntry {
    std::string method;
    std::int64_t n_suc = 0;
    std::int64_t n_all = 0;
    std::optional<double> asr; ///< undefined when no sample is eligible
    double mean_l2 = 0.0;
    double mean_linf = 0.0;

    nlohmann::json to_json() const;
};

struct AsrReport {
    AttackGoal goal;
    std::vector<AsrEntry> entries;
    QueryLedger ledger;

    std::int64_t n_qb() const { return ledger.attack_queries(); }
    nlohmann::json to_json() const;
};

/// Queries the oracle (EVAL stage) on the originals and the adversarials.
/// Eligible samples: the clean oracle label equals the true label (and, for a
/// targeted goal, the true label is not the target). Success: the label changed
/// (non-targeted) or equals the target (targeted).
AsrEntry evaluate_asr(BlackBox& oracle, const AdversarialBatch& advs, const AttackGoal& goal);

// ---- experiment configuration ---------------------------------------------------

enum class BackendKind { Identity, Autoencoder };

struct BackendConfig {
    BackendKind kind = BackendKind::Autoencoder;
    double strength = 0.25;
    std::int64_t stride = 2; ///< identity backend only
    AutoencoderSpec autoencoder;
    AutoencoderTrainConfig training;
    std::filesystem::path checkpoint; ///< reused when it exists, written after training otherwise
};

struct ExperimentConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    OutputMode mode = OutputMode::Probability;
    std::int64_t budget = 20000;

    ToyDatasetSpec dataset;
    TargetRecipe target;
    std::filesystem::path target_checkpoint; ///< reused when it exists

    BackendConfig backend;

    std::int64_t codebook_size = 10;
    std::int64_t max_candidates_per_class = 50;
    MembershipConfig membership;

    TrainConfig train;
    SubstituteSpec substitute;

    std::vector<AttackConfig> attacks;
    std::int64_t eval_samples = 500;
    std::int64_t curve_points = 5; ///< ASR measurements along training (first attack only)

    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Reads a sectioned key = value file ([section] headers, '#' or ';'
/// comments, optionally quoted string values). Unknown keys are rejected.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(const std::string& text);

/// Defaults for the desk-scale toy stack.
ExperimentConfig default_experiment();

// ---- pipeline ---------------------------------------------------------------------

/// Loads the target named by the config, training and saving it first when
/// the checkpoint does not exist yet.
std::shared_ptr<MeteredOracle> prepare_oracle(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                                              nlohmann::json* target_meta = nullptr);
/// Loads or trains the generator backend and applies the configured strength.
std::shared_ptr<GeneratorBackend> prepare_backend(const ExperimentConfig& cfg, const ClassSpace& classes);
/// Held-out private-style images used for ASR evaluation.
ImageBatch evaluation_set(const ExperimentConfig& cfg);

struct CurvePoint {
    std::int64_t step = 0;
    std::int64_t n_qb = 0;
    std::optional<double> asr;
};

struct RunSummary {
    std::filesystem::path run_dir;
    std::string status;
    std::string name;
    std::uint64_t seed = 0;
    std::string arm;
    std::string mode;
    std::int64_t codebook_size = 0;
    QueryLedger ledger;
    std::int64_t stage1_candidates = 0;
    AsrReport report;
    std::vector<CurvePoint> curve;
    double final_agreement = 0.0;   ///< substitute vs oracle labels on the evaluation set
    std::uint64_t lca_invocations = 0; ///< LCA calls made by this run
    std::int64_t recorded_images = 0;  ///< images seen by the recording wrapper (all stages)

    nlohmann::json to_json() const;
    static RunSummary from_json(const nlohmann::json& j);
};

/// Stage 1, Stage 2, attacks and evaluation. Writes config.json, manifest.json,
/// codebook/, checkpoints/, metrics.jsonl, adversarial archives, report.json
/// and SVG plots into `run_dir`. On failure the manifest records the error
/// and the exception propagates.
RunSummary run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

/// Returns the stored summary when `run_dir` holds a finished run whose
/// config.json equals `cfg`; runs the pipeline otherwise.
RunSummary reuse_or_run(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

// ---- presets ------------------------------------------------------------------------
// Preset runs go through reuse_or_run, so an interrupted preset resumes where it stopped.

struct PresetRow {
    std::string label;
    std::optional<double> x; ///< numeric position on a sweep axis
    std::vector<RunSummary> runs;
    std::optional<double> median_asr() const;
    nlohmann::json to_json() const;
};

struct PresetResult {
    std::string preset;
    std::vector<PresetRow> rows;
    nlohmann::json to_json() const;
};

/// Trains the shared target and backend once and points `cfg` at them.
void prepare_shared_artifacts(ExperimentConfig& cfg, const std::filesystem::path& dir);

/// Baseline, members-only and full-LCA arms, one run per seed.
PresetResult run_ablation_lca(ExperimentConfig cfg, const std::vector<std::uint64_t>& seeds,
                              const std::filesystem::path& dir);
/// One run per codebook size.
PresetResult run_codebook_sweep(ExperimentConfig cfg, const std::vector<std::int64_t>& sizes,
                                const std::filesystem::path& dir);
/// Probability and label-only runs on the same seeds.
PresetResult run_label_only_parity(ExperimentConfig cfg, const std::vector<std::uint64_t>& seeds,
                                   const std::filesystem::path& dir);

/// Writes preset.json, a markdown table and an SVG chart for a preset result.
void write_preset_report(const PresetResult& result, const std::filesystem::path& dir);
/// Re-renders report.md and plots of a run or preset directory from its JSON files.
std::string render_report(const std::filesystem::path& dir);

// ---- plots ----------------------------------------------------------------------------

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

/// Static SVG line chart.
void write_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::filesystem::path& path);
/// Static SVG bar chart.
void write_bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values,
                     const std::string& title, const std::string& y_label, const std::filesystem::path& path);

/// Per-class accuracy of `net` against reference labels.
std::vector<double> per_class_accuracy(ClassifierNet& net, const ImageBatch& batch,
                                       const std::vector<std::int64_t>& labels, std::int64_t num_classes);

} // namespace latentsub
