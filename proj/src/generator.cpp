#include "latentsub/generator.hpp"

#include <cmath>
#include <sstream>

#include "latentsub/archive.hpp"
#include "latentsub/models.hpp"

namespace latentsub {

namespace nn = torch::nn;

std::string_view to_string(LatentSource source)
{
    switch (source) {
    case LatentSource::Generated: return "generated";
    case LatentSource::Encoded: return "encoded";
    case LatentSource::Augmented: return "augmented";
    }
    return "unknown";
}

LatentSource parse_latent_source(std::string_view text)
{
    if (text == "generated") return LatentSource::Generated;
    if (text == "encoded") return LatentSource::Encoded;
    if (text == "augmented") return LatentSource::Augmented;
    throw InvalidArgument("unknown latent source '" + std::string(text) + "'");
}

void BackendDescriptor::validate() const
{
    if (latent_channels <= 0 || latent_height <= 0 || latent_width <= 0 || stride <= 0)
        throw InvalidArgument("backend descriptor has non-positive dimensions");
    if (image_size != latent_height * stride || image_size != latent_width * stride)
        throw InvalidArgument("backend descriptor violates image_size = H_z * s = W_z * s");
}

nlohmann::json BackendDescriptor::to_json() const
{
    return {{"name", name},
            {"latent_shape", latent_shape()},
            {"stride", stride},
            {"image_size", image_size},
            {"image_channels", image_channels}};
}

BackendDescriptor BackendDescriptor::from_json(const nlohmann::json& j)
{
    BackendDescriptor d;
    d.name = j.at("name").get<std::string>();
    const auto shape = j.at("latent_shape").get<std::vector<std::int64_t>>();
    if (shape.size() != 3)
        throw InvalidArgument("latent_shape must have 3 entries");
    d.latent_channels = shape[0];
    d.latent_height = shape[1];
    d.latent_width = shape[2];
    d.stride = j.at("stride").get<std::int64_t>();
    d.image_size = j.at("image_size").get<std::int64_t>();
    d.image_channels = j.value("image_channels", std::int64_t{3});
    d.validate();
    return d;
}

std::string GeneratorBackend::fingerprint() const
{
    const auto& d = descriptor();
    std::ostringstream os;
    os << d.name << ":" << d.latent_channels << "x" << d.latent_height << "x" << d.latent_width << "/s"
       << d.stride << "/img" << d.image_size;
    return os.str();
}

void GeneratorBackend::set_strength(double strength)
{
    if (!(strength >= 0.0 && strength <= 1.0))
        throw InvalidArgument("generation strength must lie in [0,1]");
    strength_ = strength;
}

ImageBatch GeneratorBackend::decode_with_strength(std::span<const LatentCode> codes, std::uint64_t seed,
                                                  double strength)
{
    std::vector<std::uint64_t> seeds(codes.size());
    for (std::size_t i = 0; i < seeds.size(); ++i)
        seeds[i] = derive_seed(seed, i);
    return decode_seeded(codes, seeds, strength);
}

torch::Tensor GeneratorBackend::prompt_guided_latents(std::span<const LatentCode> codes,
                                                    std::span<const std::uint64_t> image_seeds, double strength)
{
    if (image_seeds.size() != codes.size())
        throw ShapeMismatch("one image seed per latent code is required");
    auto z = stack_codes(codes);
    if (strength <= 0.0)
        return z;
    std::vector<ImageBatch> prompts;
    prompts.reserve(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i)
        prompts.push_back(text_to_images(codes[i].class_index, 1, derive_seed(image_seeds[i], 0x9a)));
    const auto prompted = stack_codes(encode(ImageBatch::concat(prompts)));
    return z.mul(1.0 - strength).add_(prompted, strength);
}

void GeneratorBackend::check_images(const ImageBatch& batch) const
{
    const auto& d = descriptor();
    if (batch.size() > 0 && (batch.channels() != d.image_channels || batch.height() != d.image_size ||
                             batch.width() != d.image_size))
        throw ShapeMismatch("backend '" + d.name + "' expects " + std::to_string(d.image_channels) + " x " +
                            std::to_string(d.image_size) + " x " + std::to_string(d.image_size) + " images");
}

void GeneratorBackend::check_codes(std::span<const LatentCode> codes) const
{
    const auto expected = descriptor().latent_shape();
    for (const auto& c : codes) {
        if (!c.values.defined() || c.values.sizes().vec() != expected)
            throw ShapeMismatch("latent code shape does not match backend '" + descriptor().name + "'");
        if (c.class_index < 0 || c.class_index >= classes_.num_classes())
            throw InvalidArgument("latent code class index out of range");
    }
}

torch::Tensor stack_codes(std::span<const LatentCode> codes)
{
    std::vector<torch::Tensor> values;
    values.reserve(codes.size());
    for (const auto& c : codes)
        values.push_back(c.values);
    return torch::stack(values);
}

namespace {

std::vector<std::int64_t> class_tags(std::span<const LatentCode> codes)
{
    std::vector<std::int64_t> tags;
    tags.reserve(codes.size());
    for (const auto& c : codes)
        tags.push_back(c.class_index);
    return tags;
}

std::vector<LatentCode> to_codes(const torch::Tensor& latents, const ImageBatch& batch)
{
    std::vector<LatentCode> codes;
    codes.reserve(static_cast<std::size_t>(latents.size(0)));
    for (std::int64_t i = 0; i < latents.size(0); ++i)
        codes.push_back({latents[i].contiguous(), batch.has_labels() ? batch.label(i) : 0, LatentSource::Encoded});
    return codes;
}

} // namespace

IdentityBackend::IdentityBackend(ClassSpace classes, std::int64_t image_size, std::int64_t stride)
    : GeneratorBackend(std::move(classes))
{
    if (stride <= 0 || image_size % stride != 0)
        throw InvalidArgument("identity backend stride must divide the image size");
    descriptor_ = {"identity_downsample", 3, image_size / stride, image_size / stride, stride, image_size, 3};
    descriptor_.validate();
}

ImageBatch IdentityBackend::text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed)
{
    classes_.name(class_index);
    return render_toy_class(class_index, classes_.num_classes(), descriptor_.image_size, ToyStyle::Prior, count,
                            seed);
}

std::vector<LatentCode> IdentityBackend::encode(const ImageBatch& batch)
{
    check_images(batch);
    if (batch.size() == 0)
        return {};
    auto latents = torch::avg_pool2d(batch.pixels(), descriptor_.stride, descriptor_.stride);
    return to_codes(latents, batch);
}

ImageBatch IdentityBackend::decode_seeded(std::span<const LatentCode> codes,
                                          std::span<const std::uint64_t> image_seeds, double strength)
{
    check_codes(codes);
    if (codes.empty())
        return ImageBatch::empty(3, descriptor_.image_size, descriptor_.image_size);
    auto z = prompt_guided_latents(codes, image_seeds, strength);
    const auto s = descriptor_.stride;
    auto images = z.repeat_interleave(s, 2).repeat_interleave(s, 3).clamp(0.0, 1.0);
    return ImageBatch(images, class_tags(codes), classes_.num_classes());
}

ConvAutoencoderImpl::ConvAutoencoderImpl(const AutoencoderSpec& spec) : spec_(spec)
{
    const auto w = spec.width;
    const auto wz = spec.width * 3 / 2;
    encoder_ = register_module(
        "encoder", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, w, 3).padding(1)), nn::ReLU(),
                                  nn::Conv2d(nn::Conv2dOptions(w, wz, 4).stride(2).padding(1)), nn::ReLU(),
                                  nn::Conv2d(nn::Conv2dOptions(wz, wz, 3).padding(1)), nn::ReLU(),
                                  nn::Conv2d(nn::Conv2dOptions(wz, spec.latent_channels, 1))));
    class_embed_ = register_module("class_embed", nn::Embedding(spec.num_classes, spec.class_embedding));
    decoder_head_ = register_module(
        "decoder_head",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(spec.latent_channels + spec.class_embedding, wz, 3).padding(1)),
                       nn::ReLU(), nn::Conv2d(nn::Conv2dOptions(wz, wz, 3).padding(1)), nn::ReLU()));
    decoder_tail_ = register_module(
        "decoder_tail", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(wz, w, 3).padding(1)), nn::ReLU(),
                                       nn::Conv2d(nn::Conv2dOptions(w, 3, 3).padding(1)), nn::Sigmoid()));
}

torch::Tensor ConvAutoencoderImpl::encode(const torch::Tensor& images)
{
    return encoder_->forward(images);
}

torch::Tensor ConvAutoencoderImpl::decode(const torch::Tensor& latents, const torch::Tensor& classes)
{
    auto emb = class_embed_->forward(classes)
                   .unsqueeze(-1)
                   .unsqueeze(-1)
                   .expand({latents.size(0), spec_.class_embedding, latents.size(2), latents.size(3)});
    auto h = decoder_head_->forward(torch::cat({latents, emb}, 1));
    h = torch::upsample_nearest2d(h, std::vector<std::int64_t>{latents.size(2) * 2, latents.size(3) * 2});
    return decoder_tail_->forward(h);
}

namespace {
std::string module_digest(const torch::nn::Module& m)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : m.named_parameters(true)) {
        auto t = p.value().detach().contiguous();
        const auto* bytes = static_cast<const unsigned char*>(t.data_ptr());
        for (std::int64_t i = 0; i < t.numel() * static_cast<std::int64_t>(t.element_size()); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}
} // namespace

ConvAutoencoderBackend::ConvAutoencoderBackend(ClassSpace classes, ConvAutoencoder model)
    : GeneratorBackend(std::move(classes)), model_(std::move(model))
{
    const auto& s = model_->spec();
    if (s.num_classes != classes_.num_classes())
        throw InvalidArgument("autoencoder class count does not match the class space");
    descriptor_ = {"conv_autoencoder", s.latent_channels, s.image_size / 2, s.image_size / 2, 2, s.image_size, 3};
    descriptor_.validate();
    model_->eval();
    weights_digest_ = module_digest(*model_);
}

std::shared_ptr<ConvAutoencoderBackend> ConvAutoencoderBackend::train(const ClassSpace& classes,
                                                                      const AutoencoderSpec& spec,
                                                                      const AutoencoderTrainConfig& cfg)
{
    if (spec.num_classes != classes.num_classes())
        throw InvalidArgument("autoencoder class count does not match the class space");
    seed_torch(derive_seed(cfg.seed, 0xae));
    ConvAutoencoder model(spec);
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
    model->train();
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<torch::Tensor> imgs;
        std::vector<std::int64_t> labels;
        for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
            const auto cls = static_cast<std::int64_t>(derive_seed(cfg.seed, 1, static_cast<std::uint64_t>(step),
                                                                   static_cast<std::uint64_t>(i)) %
                                                       static_cast<std::uint64_t>(spec.num_classes));
            const auto s = derive_seed(cfg.seed, 2, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i));
            imgs.push_back(render_toy_image(cls, spec.num_classes, spec.image_size, ToyStyle::Prior, s));
            labels.push_back(cls);
        }
        auto x = torch::stack(imgs);
        auto y = torch::tensor(labels, torch::kInt64);
        auto recon = model->decode(model->encode(x), y);
        auto loss = torch::mse_loss(recon, x);
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    model->eval();
    return std::make_shared<ConvAutoencoderBackend>(classes, model);
}

void ConvAutoencoderBackend::save(const std::filesystem::path& stem) const
{
    TensorArchive archive;
    store_module(*model_, archive);
    const auto& s = model_->spec();
    archive.meta()["kind"] = "generator_backend";
    archive.meta()["descriptor"] = descriptor_.to_json();
    archive.meta()["spec"] = {{"num_classes", s.num_classes},
                              {"image_size", s.image_size},
                              {"latent_channels", s.latent_channels},
                              {"width", s.width},
                              {"class_embedding", s.class_embedding}};
    archive.meta()["classes"] = classes_.names();
    archive.save(stem);
}

std::shared_ptr<ConvAutoencoderBackend> ConvAutoencoderBackend::load(const std::filesystem::path& stem)
{
    auto archive = TensorArchive::load(stem);
    if (archive.meta().value("kind", "") != "generator_backend")
        throw IoError(stem.string() + " is not a generator backend checkpoint");
    const auto& js = archive.meta().at("spec");
    AutoencoderSpec spec;
    spec.num_classes = js.at("num_classes").get<std::int64_t>();
    spec.image_size = js.at("image_size").get<std::int64_t>();
    spec.latent_channels = js.at("latent_channels").get<std::int64_t>();
    spec.width = js.at("width").get<std::int64_t>();
    spec.class_embedding = js.at("class_embedding").get<std::int64_t>();
    ConvAutoencoder model(spec);
    restore_module(*model, archive);
    return std::make_shared<ConvAutoencoderBackend>(
        ClassSpace(archive.meta().at("classes").get<std::vector<std::string>>()), model);
}

ImageBatch ConvAutoencoderBackend::text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed)
{
    classes_.name(class_index);
    return render_toy_class(class_index, classes_.num_classes(), descriptor_.image_size, ToyStyle::Prior, count,
                            seed);
}

std::vector<LatentCode> ConvAutoencoderBackend::encode(const ImageBatch& batch)
{
    check_images(batch);
    if (batch.size() == 0)
        return {};
    torch::NoGradGuard guard;
    return to_codes(model_->encode(batch.pixels()), batch);
}

ImageBatch ConvAutoencoderBackend::decode_seeded(std::span<const LatentCode> codes,
                                                 std::span<const std::uint64_t> image_seeds, double strength)
{
    check_codes(codes);
    if (codes.empty())
        return ImageBatch::empty(3, descriptor_.image_size, descriptor_.image_size);
    torch::NoGradGuard guard;
    auto z = prompt_guided_latents(codes, image_seeds, strength);
    auto tags = class_tags(codes);
    auto images = model_->decode(z, torch::tensor(tags, torch::kInt64)).clamp(0.0, 1.0);
    return ImageBatch(images, std::move(tags), classes_.num_classes());
}

std::string ConvAutoencoderBackend::fingerprint() const
{
    return GeneratorBackend::fingerprint() + "#" + weights_digest_;
}

double ConvAutoencoderBackend::reconstruction_mse(const ImageBatch& batch)
{
    torch::NoGradGuard guard;
    auto tags = batch.has_labels() ? *batch.labels() : std::vector<std::int64_t>(batch.size(), 0);
    auto recon = model_->decode(model_->encode(batch.pixels()), torch::tensor(tags, torch::kInt64));
    return torch::mse_loss(recon, batch.pixels()).item<double>();
}

torch::Tensor translate(const torch::Tensor& t, std::int64_t dy, std::int64_t dx)
{
    const auto h = t.size(-2), w = t.size(-1);
    auto out = torch::zeros_like(t);
    if (std::abs(dy) >= h || std::abs(dx) >= w)
        return out;
    const auto sy0 = std::max<std::int64_t>(0, -dy), sy1 = std::min(h, h - dy);
    const auto sx0 = std::max<std::int64_t>(0, -dx), sx1 = std::min(w, w - dx);
    out.slice(-2, sy0 + dy, sy1 + dy).slice(-1, sx0 + dx, sx1 + dx).copy_(t.slice(-2, sy0, sy1).slice(-1, sx0, sx1));
    return out;
}

EquivarianceReport check_equivariance(GeneratorBackend& backend, const ImageBatch& batch, std::int64_t dy,
                                      std::int64_t dx)
{
    const auto s = backend.descriptor().stride;
    if (dy % s != 0 || dx % s != 0)
        throw InvalidArgument("equivariance shift (" + std::to_string(dy) + ", " + std::to_string(dx) +
                              ") is not a multiple of the stride " + std::to_string(s));
    const auto shifted = ImageBatch(translate(batch.pixels(), dy, dx), batch.labels());
    const auto lhs = stack_codes(backend.encode(shifted));
    const auto rhs = translate(stack_codes(backend.encode(batch)), dy / s, dx / s);

    const auto margin = backend.edge_margin();
    const auto my = margin + std::abs(dy / s), mx = margin + std::abs(dx / s);
    const auto h = lhs.size(2), w = lhs.size(3);
    if (2 * my >= h || 2 * mx >= w)
        throw InvalidArgument("shift leaves no interior to compare");
    auto a = lhs.slice(2, my, h - my).slice(3, mx, w - mx).flatten(1).to(torch::kFloat64);
    auto b = rhs.slice(2, my, h - my).slice(3, mx, w - mx).flatten(1).to(torch::kFloat64);

    EquivarianceReport report;
    report.max_abs_diff = (a - b).abs().max().item<double>();
    report.exact = torch::equal(a, b);
    auto cos = torch::cosine_similarity(a, b, 1, 1e-12);
    report.interior_cosine = cos.mean().item<double>();
    report.min_interior_cosine = cos.min().item<double>();
    return report;
}

} // namespace latentsub
