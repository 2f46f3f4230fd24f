#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/generator.hpp"
#include "latentsub/oracle.hpp"

namespace latentsub {

struct MembershipConfig {
    double sigma = 0.03; ///< Gaussian noise std in [0,1] pixel units, at most 0.25
    double u = 1e-3;     ///< distance threshold (probability mode)
    OutputMode mode = OutputMode::Probability;
    std::uint64_t seed = 0;
    std::int64_t noise_draws = 1; ///< distances are averaged over this many noisy copies

    void validate() const;
    nlohmann::json to_json() const;
};

/// x_hat = clamp(x + N(0, sigma^2), 0, 1). Image i draws its noise from
/// derive_seed(seed, first_index + i), so results do not depend on batching.
ImageBatch perturb(const ImageBatch& batch, double sigma, std::uint64_t seed, std::int64_t first_index = 0);

/// Probability mode: mean squared error between the two probability vectors.
/// Label-only mode: 0 if the labels agree, +inf otherwise.
double decision_distance(const OracleOutput& clean, const OracleOutput& noisy);

struct MembershipResult {
    ImageBatch members;
    std::vector<std::int64_t> kept;      ///< indices into the candidate batch
    std::vector<double> distances;       ///< one per candidate
    std::vector<std::int64_t> clean_labels;
};

/// Queries the oracle on the clean batch and on noisy_draws perturbed copies
/// (all tagged Stage1) and keeps the candidates whose distance is within the
/// threshold and whose clean label matches their intended label (when the
/// batch is labeled).
MembershipResult filter_members(const ImageBatch& batch, BlackBox& oracle, const MembershipConfig& cfg,
                                std::int64_t first_index = 0);

/// Per-class store of at most `capacity` member latent codes.
class Codebook {
public:
    Codebook(std::int64_t num_classes, std::int64_t capacity, std::string fingerprint,
             BackendDescriptor descriptor);

    void append(LatentCode code);
    const std::vector<LatentCode>& entries(std::int64_t class_index) const;
    const LatentCode& entry(std::int64_t class_index, std::int64_t slot) const;
    std::int64_t count(std::int64_t class_index) const;
    std::int64_t total() const;
    std::int64_t capacity() const { return capacity_; }
    std::int64_t num_classes() const { return static_cast<std::int64_t>(entries_.size()); }
    const std::string& fingerprint() const { return fingerprint_; }
    const BackendDescriptor& descriptor() const { return descriptor_; }
    bool full(std::int64_t class_index) const { return count(class_index) >= capacity_; }

    /// Throws unless `backend` produced these codes.
    void check_backend(const GeneratorBackend& backend) const;

    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }

    /// Writes `<dir>/codebook.json` and one archive per class.
    void save(const std::filesystem::path& dir, const nlohmann::json& config_echo = {}) const;
    static Codebook load(const std::filesystem::path& dir);

private:
    std::vector<std::vector<LatentCode>> entries_;
    std::int64_t capacity_;
    std::string fingerprint_;
    BackendDescriptor descriptor_;
    bool frozen_ = false;
};

struct ClassFill {
    std::int64_t class_index = 0;
    std::int64_t generated = 0;
    std::int64_t accepted = 0;
    bool underfilled = false;
};

struct Stage1Result {
    Codebook codebook;
    QueryLedger ledger;
    std::vector<ClassFill> fills;
    std::vector<std::int64_t> underfilled_classes;

    std::int64_t generated() const;
    nlohmann::json summary() const;
};

/// Stage 1: for each class, generate candidates one at a time (candidate j of
/// class c is seeded by derive_seed(seed, c, j)), filter them in chunks sized
/// to the remaining capacity, encode survivors and append them until the
/// class holds `capacity` codes or `max_candidates_per_class` were tried.
/// Underfilled classes are reported, not fatal.
Stage1Result build_codebook(GeneratorBackend& generator, BlackBox& oracle, const MembershipConfig& cfg,
                            std::int64_t capacity, std::int64_t max_candidates_per_class = 50);

} // namespace latentsub
