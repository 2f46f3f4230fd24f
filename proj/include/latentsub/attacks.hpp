#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/image_batch.hpp"
#include "latentsub/models.hpp"

namespace latentsub {

enum class AttackMethod { Fgsm, Bim, Pgd };
enum class Norm { Linf, L2 };
enum class GoalKind { NonTarget, Target };

std::string_view to_string(AttackMethod method);
std::string_view to_string(Norm norm);
AttackMethod parse_attack_method(std::string_view text);
Norm parse_norm(std::string_view text);

struct AttackGoal {
    GoalKind kind = GoalKind::NonTarget;
    std::int64_t target_class = 0; ///< used when kind == Target

    static AttackGoal non_target() { return {}; }
    static AttackGoal target(std::int64_t cls) { return {GoalKind::Target, cls}; }
    std::string describe() const;
    nlohmann::json to_json() const;
    static AttackGoal from_json(const nlohmann::json& j);
};

struct AttackConfig {
    AttackMethod method = AttackMethod::Pgd;
    double epsilon = 8.0 / 255.0;
    double alpha = 2.0 / 255.0;
    std::int64_t steps = 10;
    Norm norm = Norm::Linf;
    AttackGoal goal;
    bool random_start = false; ///< PGD only
    std::uint64_t seed = 0;    ///< random start only

    /// FGSM forces steps = 1 and alpha = epsilon.
    static AttackConfig fgsm(double epsilon, Norm norm = Norm::Linf, AttackGoal goal = {});
    void validate() const;
    /// Copy with FGSM's fixed step settings applied.
    AttackConfig normalized() const;
    nlohmann::json to_json() const;
    static AttackConfig from_json(const nlohmann::json& j);
};

struct AdversarialBatch {
    ImageBatch originals;
    ImageBatch adversarials;
    std::vector<double> l2;
    std::vector<double> linf;
    std::vector<std::int64_t> pred_before; ///< substitute predictions
    std::vector<std::int64_t> pred_after;
    AttackConfig config;

    std::int64_t size() const { return originals.size(); }
    /// Archive: originals, adversarials, l2, linf, predictions + config in meta.
    void save(const std::filesystem::path& stem) const;
    static AdversarialBatch load(const std::filesystem::path& stem);
};

class NonFiniteGradient : public Error {
public:
    NonFiniteGradient(const std::string& what, std::int64_t sample) : Error(what), sample_(sample) {}
    std::int64_t sample() const { return sample_; }

private:
    std::int64_t sample_;
};

/// White-box attack on `model`. NON_TARGET ascends the cross-entropy of the
/// batch labels (the model's own clean predictions when the batch is
/// unlabeled); TARGET descends the cross-entropy of the target class. LINF
/// steps follow the gradient sign; L2 steps follow the per-sample normalized
/// gradient. Each iterate is projected onto the epsilon ball around the
/// original and clamped to [0,1]. The ball bound is re-checked on the output.
AdversarialBatch attack(ClassifierNet& model, const ImageBatch& batch, const AttackConfig& cfg);

struct PerturbationStats {
    double mean_l2 = 0.0;
    double mean_linf = 0.0;
};
PerturbationStats perturbation_stats(const AdversarialBatch& advs);

/// Per-sample L2 and L-infinity norms of a - b over flattened pixels.
std::pair<std::vector<double>, std::vector<double>> perturbation_norms(const torch::Tensor& a,
                                                                       const torch::Tensor& b);

/// Fraction of samples whose substitute prediction moved as the goal wants
/// (changed label for NON_TARGET, target label for TARGET).
double fooling_rate(const AdversarialBatch& advs);

} // namespace latentsub
