#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <string>
#include <unistd.h>
#include <vector>

#include "latentsub/harness.hpp"

namespace latentsub::testing {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
        : path_(std::filesystem::temp_directory_path() /
                ("latentsub_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++)))
    {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    static std::atomic<int>& counter()
    {
        static std::atomic<int> c{0};
        return c;
    }
    std::filesystem::path path_;
};

/// Answers every image with the same probability vector (or label).
class FixedClassifier : public ClassifierBackend {
public:
    explicit FixedClassifier(std::vector<double> probs) : probs_(std::move(probs)) {}
    std::vector<OracleOutput> classify(const torch::Tensor& pixels, OutputMode mode) override
    {
        std::vector<OracleOutput> out;
        for (std::int64_t i = 0; i < pixels.size(0); ++i) {
            auto o = OracleOutput::from_probabilities(probs_);
            out.push_back(mode == OutputMode::Probability ? o : o.label_only());
        }
        return out;
    }
    std::int64_t num_classes() const override { return static_cast<std::int64_t>(probs_.size()); }

private:
    std::vector<double> probs_;
};

/// Returns a fresh random probability vector on every call, so no two
/// answers for the same image agree.
class JitterClassifier : public ClassifierBackend {
public:
    explicit JitterClassifier(std::int64_t n) : n_(n) {}
    std::vector<OracleOutput> classify(const torch::Tensor& pixels, OutputMode mode) override
    {
        const auto logits = torch::randn({pixels.size(0), n_});
        return outputs_from_logits(logits, mode);
    }
    std::int64_t num_classes() const override { return n_; }

private:
    std::int64_t n_;
};

/// logits = W * flatten(x) + b, with W and b set by the test.
class LinearNet : public ClassifierNet {
public:
    LinearNet(std::int64_t in_features, std::int64_t classes) : classes_(classes)
    {
        weight = register_parameter("weight", torch::zeros({classes, in_features}));
        bias = register_parameter("bias", torch::zeros({classes}));
    }
    torch::Tensor forward(torch::Tensor x) override
    {
        return torch::nn::functional::linear(x.flatten(1), weight, bias);
    }
    std::int64_t num_classes() const override { return classes_; }

    torch::Tensor weight, bias;

private:
    std::int64_t classes_;
};

/// Experiment config sized for unit tests: small dataset, short training.
inline ExperimentConfig small_experiment()
{
    auto cfg = default_experiment();
    cfg.dataset.samples_per_class = 60;
    cfg.target.epochs = 20;
    cfg.target.batch_size = 32;
    cfg.backend.kind = BackendKind::Identity;
    cfg.budget = 1200;
    cfg.eval_samples = 60;
    cfg.curve_points = 2;
    cfg.max_candidates_per_class = 8;
    cfg.codebook_size = 3;
    return cfg;
}

/// A target trained once per test process and shared by every test that needs one.
inline const std::filesystem::path& shared_target()
{
    static TempDir dir("shared_target");
    static const std::filesystem::path stem = [] {
        const auto cfg = small_experiment();
        const auto p = dir / "target";
        train_target(cfg.dataset, cfg.target, 11, p);
        return p;
    }();
    return stem;
}

} // namespace latentsub::testing
