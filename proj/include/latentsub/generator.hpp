#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/image_batch.hpp"
#include "latentsub/toy_data.hpp"

namespace latentsub {

enum class LatentSource { Generated, Encoded, Augmented };
std::string_view to_string(LatentSource source);
LatentSource parse_latent_source(std::string_view text);

/// A class-tagged latent tensor (C_z x H_z x W_z, float32).
struct LatentCode {
    torch::Tensor values;
    std::int64_t class_index = 0;
    LatentSource source = LatentSource::Encoded;
};

/// Geometry of a generator backend's latent space.
struct BackendDescriptor {
    std::string name;
    std::int64_t latent_channels = 0;
    std::int64_t latent_height = 0;
    std::int64_t latent_width = 0;
    std::int64_t stride = 1;
    std::int64_t image_size = 0;
    std::int64_t image_channels = 3;

    /// Checks image_size == H_z * s == W_z * s.
    void validate() const;
    std::vector<std::int64_t> latent_shape() const { return {latent_channels, latent_height, latent_width}; }
    nlohmann::json to_json() const;
    static BackendDescriptor from_json(const nlohmann::json& j);
};

/// The pluggable generator: prompt-to-image, encoder and latent-guided decoder.
class GeneratorBackend {
public:
    explicit GeneratorBackend(ClassSpace classes) : classes_(std::move(classes)) {}
    virtual ~GeneratorBackend() = default;

    virtual const BackendDescriptor& descriptor() const = 0;

    /// `count` images prompted by the class name; labels are set to `class_index`.
    virtual ImageBatch text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed) = 0;

    /// One latent per image, in batch order, source = Encoded, class tag taken
    /// from the batch labels (0 when unlabeled).
    virtual std::vector<LatentCode> encode(const ImageBatch& batch) = 0;

    /// Decodes with an explicit strength in [0,1]: each code is first moved a
    /// `strength` fraction of the way toward the latent of a fresh prompted
    /// sample of its class (0 keeps the code, 1 is plain prompted generation).
    /// The class of each code is also passed to the decoder as guidance.
    /// Code i uses the image seed derive_seed(seed, i).
    ImageBatch decode_with_strength(std::span<const LatentCode> codes, std::uint64_t seed, double strength);

    /// Same as decode_with_strength with one explicit seed per code.
    virtual ImageBatch decode_seeded(std::span<const LatentCode> codes, std::span<const std::uint64_t> image_seeds,
                                     double strength) = 0;

    /// Decodes with the backend's configured strength.
    ImageBatch latents_to_images(std::span<const LatentCode> codes, std::uint64_t seed)
    {
        return decode_with_strength(codes, seed, strength_);
    }

    /// Identifies the backend and its weights; codes are only valid for the
    /// backend whose fingerprint produced them.
    virtual std::string fingerprint() const;

    /// Latent cells near each border that are affected by zero padding.
    virtual std::int64_t edge_margin() const { return 0; }

    double strength() const { return strength_; }
    void set_strength(double strength);
    const ClassSpace& classes() const { return classes_; }

protected:
    /// (1 - strength) * code + strength * encode(prompted sample of the code's class),
    /// the prompted sample of code i drawn with derive_seed(image_seeds[i], 0x9a).
    torch::Tensor prompt_guided_latents(std::span<const LatentCode> codes, std::span<const std::uint64_t> image_seeds,
                                        double strength);
    void check_images(const ImageBatch& batch) const;
    void check_codes(std::span<const LatentCode> codes) const;

    ClassSpace classes_;
    double strength_ = 0.0;
};

/// Analytic backend: latent = s x s block average of the image, decoder =
/// nearest-neighbour upsampling. Prompted generation renders the toy prior.
class IdentityBackend : public GeneratorBackend {
public:
    IdentityBackend(ClassSpace classes, std::int64_t image_size = 32, std::int64_t stride = 2);

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    ImageBatch text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed) override;
    std::vector<LatentCode> encode(const ImageBatch& batch) override;
    ImageBatch decode_seeded(std::span<const LatentCode> codes, std::span<const std::uint64_t> image_seeds,
                             double strength) override;

private:
    BackendDescriptor descriptor_;
};

struct AutoencoderSpec {
    std::int64_t num_classes = 10;
    std::int64_t image_size = 32;
    std::int64_t latent_channels = 4;
    std::int64_t width = 32;
    std::int64_t class_embedding = 8;
};

/// Pooling-free conv autoencoder. One stride-2 convolution sets the spatial
/// stride; everything else is stride-1, so shifts by the stride commute with
/// encoding away from the borders. The decoder sees the class as an extra
/// embedding broadcast over the latent grid.
class ConvAutoencoderImpl : public torch::nn::Module {
public:
    explicit ConvAutoencoderImpl(const AutoencoderSpec& spec);
    torch::Tensor encode(const torch::Tensor& images);
    torch::Tensor decode(const torch::Tensor& latents, const torch::Tensor& classes);
    const AutoencoderSpec& spec() const { return spec_; }

private:
    AutoencoderSpec spec_;
    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Embedding class_embed_{nullptr};
    torch::nn::Sequential decoder_head_{nullptr};
    torch::nn::Sequential decoder_tail_{nullptr};
};
TORCH_MODULE(ConvAutoencoder);

struct AutoencoderTrainConfig {
    std::int64_t steps = 1500;
    std::int64_t batch_size = 32;
    double learning_rate = 2e-3;
    std::uint64_t seed = 0;
};

class ConvAutoencoderBackend : public GeneratorBackend {
public:
    ConvAutoencoderBackend(ClassSpace classes, ConvAutoencoder model);

    /// Trains on the toy prior only (never on a target's data).
    static std::shared_ptr<ConvAutoencoderBackend> train(const ClassSpace& classes, const AutoencoderSpec& spec,
                                                         const AutoencoderTrainConfig& cfg);
    static std::shared_ptr<ConvAutoencoderBackend> load(const std::filesystem::path& stem);
    void save(const std::filesystem::path& stem) const;

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    ImageBatch text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed) override;
    std::vector<LatentCode> encode(const ImageBatch& batch) override;
    ImageBatch decode_seeded(std::span<const LatentCode> codes, std::span<const std::uint64_t> image_seeds,
                             double strength) override;
    std::string fingerprint() const override;
    std::int64_t edge_margin() const override { return 2; }

    /// Mean squared reconstruction error per pixel over `batch`.
    double reconstruction_mse(const ImageBatch& batch);

private:
    ConvAutoencoder model_;
    BackendDescriptor descriptor_;
    std::string weights_digest_;
};

/// Client for a remote latent-diffusion server exposing /generate, /img2img
/// and /encode. Latent-guided generation sends one /img2img request per code
/// with at most `max_in_flight` outstanding.
class RemoteGeneratorBackend : public GeneratorBackend {
public:
    RemoteGeneratorBackend(ClassSpace classes, BackendDescriptor descriptor, std::string host, int port,
                           double strength = 0.5, int max_in_flight = 4, int timeout_seconds = 120);

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    ImageBatch text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed) override;
    std::vector<LatentCode> encode(const ImageBatch& batch) override;
    ImageBatch decode_seeded(std::span<const LatentCode> codes, std::span<const std::uint64_t> image_seeds,
                             double strength) override;

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

    BackendDescriptor descriptor_;
    std::string host_;
    int port_;
    int max_in_flight_;
    int timeout_seconds_;
};

/// Shifts the last two axes by (dy, dx) whole cells, filling vacated cells with zeros.
torch::Tensor translate(const torch::Tensor& t, std::int64_t dy, std::int64_t dx);

struct EquivarianceReport {
    bool exact = false;
    double interior_cosine = 0.0;     ///< mean over images
    double min_interior_cosine = 0.0; ///< worst image
    double max_abs_diff = 0.0;
};

/// Compares encode(translate(x, dy, dx)) with translate(encode(x), dy/s, dx/s)
/// on the latent interior (border cells within edge_margin() + shift excluded).
EquivarianceReport check_equivariance(GeneratorBackend& backend, const ImageBatch& batch, std::int64_t dy,
                                      std::int64_t dx);

/// Stacks code values into an N x C_z x H_z x W_z tensor.
torch::Tensor stack_codes(std::span<const LatentCode> codes);

} // namespace latentsub
