#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "latentsub/archive.hpp"

namespace latentsub {

/// A differentiable image classifier producing logits (B x N) from pixels
/// (B x C x H x W). Both the target stand-in and the substitute derive from it.
class ClassifierNet : public torch::nn::Module {
public:
    virtual torch::Tensor forward(torch::Tensor x) = 0;
    virtual std::int64_t num_classes() const = 0;
};

struct TargetNetSpec {
    std::int64_t num_classes = 10;
    std::int64_t in_channels = 3;
    std::int64_t image_size = 32;
    std::int64_t width1 = 16;
    std::int64_t width2 = 32;
    std::int64_t hidden = 64;
};

/// Two conv stages (conv-relu-conv-relu-maxpool) followed by a two-layer head.
class TargetNetImpl : public ClassifierNet {
public:
    explicit TargetNetImpl(const TargetNetSpec& spec);
    torch::Tensor forward(torch::Tensor x) override;
    std::int64_t num_classes() const override { return spec_.num_classes; }
    const TargetNetSpec& spec() const { return spec_; }

private:
    TargetNetSpec spec_;
    torch::nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr}, c4{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TargetNet);

/// Copies every parameter and buffer of `module` into `archive` under `prefix`.
void store_module(const torch::nn::Module& module, TensorArchive& archive, const std::string& prefix = "");

/// Restores parameters and buffers stored by store_module; names and shapes must match.
void restore_module(torch::nn::Module& module, const TensorArchive& archive, const std::string& prefix = "");

/// Seeds the global torch generator; all model construction in the library goes
/// through this so that initial weights are a function of the run seed.
void seed_torch(std::uint64_t seed);

/// Runs `net` in eval mode without gradients on `pixels`, in chunks.
torch::Tensor predict_logits(ClassifierNet& net, const torch::Tensor& pixels, std::int64_t chunk = 256);

} // namespace latentsub
