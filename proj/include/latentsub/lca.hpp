#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/generator.hpp"
#include "latentsub/membership.hpp"

/// Latent code augmentation: chains of single-code transforms (each kind used
/// at most once per chain) and two-code fusions, all acting on latent grids.
namespace latentsub::lca {

enum class SingleKind {
    Translate,
    Pad,
    Rotate,
    Crop,
    Scale,
    Affine,
    Erase,
    GaussBlur,
    GaussNoise,
    SaltPepper,
};
inline constexpr int kSingleKinds = 10;

enum class MultiKind { Mixup, Cutmix, Ricap };
inline constexpr int kMultiKinds = 3;

std::string_view to_string(SingleKind kind);
std::string_view to_string(MultiKind kind);
SingleKind parse_single_kind(std::string_view text);
MultiKind parse_multi_kind(std::string_view text);

/// One single-code operation. Parameter meaning per kind (latent-cell units):
///   Translate  p0 = dy, p1 = dx (whole cells)                 identity (0, 0)
///   Pad        p0 = zero border in cells, then resize back    identity 0
///   Rotate     p0 = degrees about the grid centre             identity 0
///   Crop       p0 = kept fraction, p1/p2 = window position    identity p0 = 1
///   Scale      p0 = zoom factor about the centre              identity 1
///   Affine     p0 = shear along x, p1 = shear along y         identity (0, 0)
///   Erase      p0..p3 = y0, x0, h, w of a zeroed box          identity h*w = 0
///   GaussBlur  p0 = kernel sigma in cells                     identity 0
///   GaussNoise p0 = noise std relative to the code's std      identity 0
///   SaltPepper p0 = fraction of cells set to mean +/- 3 std   identity 0
/// `seed` drives the two noise kinds.
struct SingleOp {
    SingleKind kind = SingleKind::Translate;
    std::array<double, 4> params{};
    std::uint64_t seed = 0;

    static SingleOp identity(SingleKind kind);
    nlohmann::json to_json() const;
    static SingleOp from_json(const nlohmann::json& j);
};

/// Two-code fusion.
///   Mixup  p0 = lambda weight of the first code
///   Cutmix p0..p3 = y0, x0, h, w of the box taken from the second code
///   Ricap  p0, p1 = split row and column; top-left and bottom-right
///          quadrants come from the first code, the other two from the second
struct MultiOp {
    MultiKind kind = MultiKind::Mixup;
    std::array<double, 4> params{};

    nlohmann::json to_json() const;
    static MultiOp from_json(const nlohmann::json& j);
};

/// Throws InvalidArgument when the op's parameters are outside its valid range
/// for a latent of the given spatial size.
void validate(const SingleOp& op, std::int64_t height, std::int64_t width);
void validate(const MultiOp& op, std::int64_t height, std::int64_t width);

LatentCode apply_single(const LatentCode& code, const SingleOp& op);
LatentCode apply_multi(const LatentCode& first, const LatentCode& second, const MultiOp& op);

enum class Branch { Single, Multi };

struct Chain {
    std::int64_t slot = 0; ///< codebook entry the chain starts from
    std::vector<SingleOp> ops;
};

/// A replayable recipe for one augmented code.
struct AugmentationPlan {
    Branch branch = Branch::Single;
    std::int64_t class_index = 0;
    std::vector<Chain> chains; ///< one chain (Single) or two (Multi)
    std::optional<MultiOp> multi;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static AugmentationPlan from_json(const nlohmann::json& j);
};

/// Sampling ranges; all spatial quantities are fractions of the latent extent.
struct SamplerConfig {
    double p_single = 0.5;
    std::int64_t max_chain = kSingleKinds;
    double translate_frac = 0.25;
    double pad_frac = 0.125;
    double rotate_deg = 30.0;
    double crop_keep_min = 0.7;
    double scale_min = 0.8;
    double scale_max = 1.2;
    double shear = 0.2;
    double erase_area_max = 0.25;
    double blur_sigma_min = 0.5;
    double blur_sigma_max = 1.5;
    double noise_max = 0.1;
    double salt_pepper_max = 0.02;

    void validate() const;
    nlohmann::json to_json() const;
    static SamplerConfig from_json(const nlohmann::json& j);
};

/// Draws single-op magnitudes for `kind` from the configured ranges.
SingleOp sample_single_op(SingleKind kind, std::int64_t height, std::int64_t width, const SamplerConfig& cfg,
                          std::uint64_t seed);

/// Draws a plan for `class_index`: Single with probability p_single (always
/// Single when the class holds one code), chain length t uniform on
/// [1, max_chain], kinds drawn without replacement.
AugmentationPlan sample_plan(const Codebook& codebook, std::int64_t class_index, std::uint64_t seed,
                             const SamplerConfig& cfg = {});

/// Replays a plan against the codebook; result is tagged Augmented.
LatentCode execute_plan(const AugmentationPlan& plan, const Codebook& codebook);

/// Number of sample_plan + execute_plan calls made in this process.
std::uint64_t invocation_count();

} // namespace latentsub::lca
