#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/generator.hpp"
#include "latentsub/lca.hpp"
#include "latentsub/membership.hpp"
#include "latentsub/models.hpp"
#include "latentsub/oracle.hpp"

namespace latentsub {

enum class DepthPreset { Toy, ResNet34Like };
std::string_view to_string(DepthPreset preset);
DepthPreset parse_depth_preset(std::string_view text);

struct SubstituteSpec {
    DepthPreset preset = DepthPreset::Toy;
    std::int64_t num_classes = 10;
    std::int64_t in_channels = 3;

    nlohmann::json to_json() const;
    static SubstituteSpec from_json(const nlohmann::json& j);
};

/// Residual block with two learnable scalar gains:
///   y = relu(alpha * F(x) + beta * shortcut(x))
/// where F is conv-bn-relu-conv-bn and the shortcut is the identity or a
/// strided 1x1 conv-bn projection. Both gains start at 1.
class AdaptiveResBlockImpl : public torch::nn::Module {
public:
    AdaptiveResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

    torch::Tensor alpha;
    torch::Tensor beta;

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
    torch::nn::Sequential projection_{nullptr};
};
TORCH_MODULE(AdaptiveResBlock);

/// The substitute classifier: a conv stem, residual stages of adaptive blocks,
/// global average pooling and a linear head with num_classes outputs.
class SubstituteNetImpl : public ClassifierNet {
public:
    explicit SubstituteNetImpl(const SubstituteSpec& spec);
    torch::Tensor forward(torch::Tensor x) override;
    std::int64_t num_classes() const override { return spec_.num_classes; }
    const SubstituteSpec& spec() const { return spec_; }
    std::vector<AdaptiveResBlock>& blocks() { return blocks_; }

private:
    SubstituteSpec spec_;
    torch::nn::Conv2d stem_{nullptr};
    torch::nn::BatchNorm2d stem_bn_{nullptr};
    std::vector<AdaptiveResBlock> blocks_;
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(SubstituteNet);

struct LossConfig {
    double lambda1 = 1.0; ///< cross-entropy weight
    double lambda2 = 1.0; ///< probability MSE weight
    bool hard_labels = false;

    void validate() const;
    /// The configuration actually used against an oracle of `mode`: label-only
    /// targets force hard-label CE and lambda2 = 0.
    LossConfig for_mode(OutputMode mode) const;
    nlohmann::json to_json() const;
    static LossConfig from_json(const nlohmann::json& j);
};

/// Teacher answers for one batch, as tensors.
struct TeacherTargets {
    OutputMode mode = OutputMode::Probability;
    torch::Tensor probs;  ///< B x N (probability mode only)
    torch::Tensor labels; ///< B, int64

    static TeacherTargets from_outputs(const std::vector<OracleOutput>& outputs, std::int64_t num_classes);
};

/// Probability targets: lambda1 * soft CE + lambda2 * MSE(softmax(logits), probs),
/// the CE summed over classes and the MSE averaged over classes, both averaged
/// over the batch. Label-only targets: lambda1 * hard CE; lambda2 > 0 is rejected.
/// The result has the dtype of `logits`.
torch::Tensor substitute_loss(const torch::Tensor& logits, const TeacherTargets& targets, const LossConfig& cfg);

/// Where stage-2 training images come from.
enum class DataArm {
    Lca,            ///< augmented codebook latents decoded by the generator
    MembersOnly,    ///< codebook latents decoded without augmentation
    PromptBaseline, ///< plain prompted generation, no membership filter, no augmentation
};
std::string_view to_string(DataArm arm);
DataArm parse_data_arm(std::string_view text);

struct TrainConfig {
    std::int64_t batch_size = 32;
    double learning_rate = 1e-3;
    std::optional<std::int64_t> max_steps; ///< unset: train until the budget runs out
    std::int64_t checkpoint_every = 0;     ///< 0: only the final checkpoint
    std::int64_t queue_depth = 4;
    DataArm arm = DataArm::Lca;
    lca::SamplerConfig sampler;
    LossConfig loss;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct StepMetrics {
    std::int64_t step = 0;
    double loss = 0.0;
    double agreement = 0.0; ///< fraction of the batch where argmax(S) equals the oracle label
    QueryLedger ledger;

    nlohmann::json to_json() const;
};

struct TrainState {
    std::int64_t step = 0;
    double running_loss = 0.0; ///< exponential moving average, factor 0.9
    QueryLedger ledger;        ///< ledger as of the last consumed batch
    std::vector<std::string> lineage;
    bool budget_exhausted = false;

    nlohmann::json to_json() const;
};

/// Files a training run writes; either may be empty to skip it.
struct TrainOutputs {
    std::filesystem::path checkpoint_dir;
    std::filesystem::path metrics_file; ///< JSON lines, appended
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

/// Called after every checkpoint-sized interval with the model in its current state.
using CheckpointHook = std::function<void(const TrainState&, SubstituteNet&)>;

struct TrainResult {
    SubstituteNet model{nullptr};
    TrainState state;
    std::vector<StepMetrics> metrics;
};

/// Stage 2. A producer thread builds batches (decoded latents for the LCA and
/// members-only arms, prompted images for the baseline) and queries the oracle
/// under STAGE2; the calling thread runs Adam on the distillation loss. Stops
/// when max_steps is reached or the oracle refuses a batch for lack of budget.
/// `resume` continues from a checkpoint written by an earlier call.
TrainResult train_substitute(const Codebook& codebook, GeneratorBackend& generator, BlackBox& oracle,
                             const SubstituteSpec& spec, const TrainConfig& cfg, const TrainOutputs& outputs = {},
                             const std::optional<std::filesystem::path>& resume = {},
                             const CheckpointHook& hook = {});

/// Images for training step `step` (batch order fixed by seed and step alone).
ImageBatch make_training_batch(const Codebook& codebook, GeneratorBackend& generator, const TrainConfig& cfg,
                               std::int64_t step);

void save_substitute(SubstituteNet& net, const nlohmann::json& meta, const std::filesystem::path& stem);
SubstituteNet load_substitute(const std::filesystem::path& stem, nlohmann::json* meta = nullptr);

/// Fraction of `batch` on which argmax(net) equals `labels`.
double label_agreement(ClassifierNet& net, const ImageBatch& batch, const std::vector<std::int64_t>& labels);

} // namespace latentsub
