#include "latentsub/models.hpp"

namespace latentsub {

namespace nn = torch::nn;

TargetNetImpl::TargetNetImpl(const TargetNetSpec& spec) : spec_(spec)
{
    if (spec.num_classes < 2)
        throw InvalidArgument("a classifier needs at least 2 classes");
    if (spec.image_size % 4 != 0)
        throw InvalidArgument("target net image size must be divisible by 4");
    c1 = register_module("c1", nn::Conv2d(nn::Conv2dOptions(spec.in_channels, spec.width1, 3).padding(1)));
    c2 = register_module("c2", nn::Conv2d(nn::Conv2dOptions(spec.width1, spec.width1, 3).padding(1)));
    c3 = register_module("c3", nn::Conv2d(nn::Conv2dOptions(spec.width1, spec.width2, 3).padding(1)));
    c4 = register_module("c4", nn::Conv2d(nn::Conv2dOptions(spec.width2, spec.width2, 3).padding(1)));
    const auto spatial = spec.image_size / 4;
    fc1 = register_module("fc1", nn::Linear(spec.width2 * spatial * spatial, spec.hidden));
    fc2 = register_module("fc2", nn::Linear(spec.hidden, spec.num_classes));
}

torch::Tensor TargetNetImpl::forward(torch::Tensor x)
{
    x = torch::relu(c1(x));
    x = torch::max_pool2d(torch::relu(c2(x)), 2);
    x = torch::relu(c3(x));
    x = torch::max_pool2d(torch::relu(c4(x)), 2);
    x = torch::relu(fc1(x.flatten(1)));
    return fc2(x);
}

void store_module(const torch::nn::Module& module, TensorArchive& archive, const std::string& prefix)
{
    for (const auto& p : module.named_parameters(true))
        archive.put(prefix + p.key(), p.value());
    for (const auto& b : module.named_buffers(true))
        archive.put(prefix + b.key(), b.value());
}

void restore_module(torch::nn::Module& module, const TensorArchive& archive, const std::string& prefix)
{
    torch::NoGradGuard guard;
    auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
        const auto& src = archive.get(prefix + name);
        if (src.sizes() != dst.sizes())
            throw ShapeMismatch("checkpoint tensor '" + name + "' has shape " + c10::str(src.sizes()) +
                                ", model expects " + c10::str(dst.sizes()));
        dst.copy_(src.to(dst.scalar_type()));
    };
    for (auto& p : module.named_parameters(true))
        copy_into(p.key(), p.value());
    for (auto& b : module.named_buffers(true))
        copy_into(b.key(), b.value());
}

void seed_torch(std::uint64_t seed)
{
    torch::manual_seed(seed & 0x7fffffffffffffffULL);
}

torch::Tensor predict_logits(ClassifierNet& net, const torch::Tensor& pixels, std::int64_t chunk)
{
    torch::NoGradGuard guard;
    const bool was_training = net.is_training();
    net.eval();
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < pixels.size(0); i += chunk)
        parts.push_back(net.forward(pixels.slice(0, i, std::min(i + chunk, pixels.size(0)))));
    net.train(was_training);
    if (parts.empty())
        return torch::zeros({0, net.num_classes()});
    return torch::cat(parts, 0);
}

} // namespace latentsub
