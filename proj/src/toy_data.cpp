#include "latentsub/toy_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

namespace latentsub {

namespace {

constexpr int kShapes = 6;
constexpr int kColors = 10;
// The world is rendered washed out: every pixel is pulled halfway toward
// mid-gray, which keeps classes separable but small perturbations meaningful.
constexpr float kContrast = 0.5f;

constexpr std::array<const char*, kShapes> kShapeNames = {"circle", "square", "triangle",
                                                          "cross",  "ring",   "bar"};
constexpr std::array<const char*, kColors> kColorNames = {"red",    "green",  "blue",  "yellow", "magenta",
                                                          "cyan",   "orange", "purple", "white", "pink"};
constexpr std::array<std::array<float, 3>, kColors> kPalette = {{{0.92f, 0.16f, 0.14f},
                                                                 {0.18f, 0.80f, 0.22f},
                                                                 {0.20f, 0.32f, 0.95f},
                                                                 {0.95f, 0.86f, 0.16f},
                                                                 {0.86f, 0.22f, 0.86f},
                                                                 {0.16f, 0.86f, 0.90f},
                                                                 {0.98f, 0.55f, 0.08f},
                                                                 {0.52f, 0.18f, 0.92f},
                                                                 {0.94f, 0.94f, 0.92f},
                                                                 {0.98f, 0.58f, 0.72f}}};

struct ClassLook {
    int shape;
    int color;
};

ClassLook class_look(std::int64_t cls)
{
    // The first ten classes have distinct colors, and classes whose colors are
    // close (red/orange/pink, blue/purple) also differ in shape. All 36
    // (shape, color) pairs are distinct.
    const auto c = static_cast<int>(cls);
    return {(c + 5 * (c / kShapes)) % kShapes, c % kColors};
}

struct Params {
    float cx, cy, radius, angle;
    std::array<float, 3> color;
    std::array<float, 3> background;
    float grad_amp, grad_dir;
    float noise;
    bool distractor = false;
    ClassLook distractor_look{};
    float dx = 0, dy = 0, dr = 0, dalpha = 0;
};

float uniform(std::mt19937_64& rng, float lo, float hi)
{
    return std::uniform_real_distribution<float>(lo, hi)(rng);
}

// Signed distance (negative inside) of a unit-scale shape at point (x, y).
float shape_distance(int shape, float x, float y)
{
    switch (shape) {
    case 0: // circle
        return std::hypot(x, y) - 1.0f;
    case 1: { // square
        const float qx = std::abs(x) - 0.82f, qy = std::abs(y) - 0.82f;
        return std::hypot(std::max(qx, 0.0f), std::max(qy, 0.0f)) + std::min(std::max(qx, qy), 0.0f);
    }
    case 2: { // equilateral triangle pointing up
        const float k = std::sqrt(3.0f);
        float px = std::abs(x) - 1.0f;
        float py = -y + 1.0f / k;
        if (px + k * py > 0.0f) {
            const float nx = (px - k * py) / 2.0f;
            const float ny = (-k * px - py) / 2.0f;
            px = nx;
            py = ny;
        }
        px -= std::clamp(px, -2.0f, 0.0f);
        return -std::hypot(px, py) * (py < 0.0f ? -1.0f : 1.0f);
    }
    case 3: { // cross: union of two bars
        auto bar = [](float a, float b) {
            const float qx = std::abs(a) - 1.0f, qy = std::abs(b) - 0.3f;
            return std::hypot(std::max(qx, 0.0f), std::max(qy, 0.0f)) + std::min(std::max(qx, qy), 0.0f);
        };
        return std::min(bar(x, y), bar(y, x));
    }
    case 4: // ring
        return std::abs(std::hypot(x, y) - 0.72f) - 0.26f;
    default: { // bar
        const float qx = std::abs(x) - 1.0f, qy = std::abs(y) - 0.38f;
        return std::hypot(std::max(qx, 0.0f), std::max(qy, 0.0f)) + std::min(std::max(qx, qy), 0.0f);
    }
    }
}

Params sample_params(std::int64_t cls, std::int64_t num_classes, ToyStyle style, std::mt19937_64& rng)
{
    const auto look = class_look(cls);
    Params p{};
    const auto& base = kPalette[static_cast<std::size_t>(look.color)];
    if (style == ToyStyle::Private) {
        p.cx = 0.5f + uniform(rng, -0.12f, 0.12f);
        p.cy = 0.5f + uniform(rng, -0.12f, 0.12f);
        p.radius = uniform(rng, 0.22f, 0.32f);
        p.angle = uniform(rng, -25.0f, 25.0f);
        const float bright = uniform(rng, 0.85f, 1.0f);
        for (int c = 0; c < 3; ++c)
            p.color[c] = std::clamp(base[c] * bright + uniform(rng, -0.08f, 0.08f), 0.0f, 1.0f);
        const float gray = uniform(rng, 0.08f, 0.30f);
        for (int c = 0; c < 3; ++c)
            p.background[c] = gray + uniform(rng, -0.04f, 0.04f);
        p.grad_amp = uniform(rng, 0.0f, 0.08f);
        p.grad_dir = uniform(rng, 0.0f, 2.0f * std::numbers::pi_v<float>);
        p.noise = 0.03f;
    } else {
        p.cx = 0.5f + uniform(rng, -0.22f, 0.22f);
        p.cy = 0.5f + uniform(rng, -0.22f, 0.22f);
        p.radius = uniform(rng, 0.14f, 0.40f);
        p.angle = uniform(rng, -45.0f, 45.0f);
        const float bright = uniform(rng, 0.6f, 1.0f);
        for (int c = 0; c < 3; ++c)
            p.color[c] = std::clamp(base[c] * bright + uniform(rng, -0.2f, 0.2f), 0.0f, 1.0f);
        if (uniform(rng, 0.0f, 1.0f) < 0.6f) {
            for (int c = 0; c < 3; ++c)
                p.background[c] = uniform(rng, 0.0f, 0.85f);
        } else {
            const float gray = uniform(rng, 0.05f, 0.35f);
            for (int c = 0; c < 3; ++c)
                p.background[c] = gray + uniform(rng, -0.05f, 0.05f);
        }
        p.grad_amp = uniform(rng, 0.0f, 0.25f);
        p.grad_dir = uniform(rng, 0.0f, 2.0f * std::numbers::pi_v<float>);
        p.noise = uniform(rng, 0.0f, 0.08f);
        if (uniform(rng, 0.0f, 1.0f) < 0.3f) {
            p.distractor = true;
            const auto other = std::uniform_int_distribution<std::int64_t>(0, num_classes - 1)(rng);
            p.distractor_look = class_look(other);
            p.dx = uniform(rng, 0.1f, 0.9f);
            p.dy = uniform(rng, 0.1f, 0.9f);
            p.dr = uniform(rng, 0.08f, 0.16f);
            p.dalpha = uniform(rng, 0.3f, 0.7f);
        }
    }
    return p;
}

void composite_shape(torch::TensorAccessor<float, 3>& img, std::int64_t size, int shape,
                     const std::array<float, 3>& color, float cx, float cy, float radius,
                     float angle_deg, float opacity)
{
    const float a = angle_deg * std::numbers::pi_v<float> / 180.0f;
    const float ca = std::cos(a), sa = std::sin(a);
    const float aa = 1.0f / (static_cast<float>(size) * radius); // ~1 px edge in unit coordinates
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const float u = (static_cast<float>(x) + 0.5f) / static_cast<float>(size) - cx;
            const float v = (static_cast<float>(y) + 0.5f) / static_cast<float>(size) - cy;
            const float lx = (ca * u + sa * v) / radius;
            const float ly = (-sa * u + ca * v) / radius;
            const float d = shape_distance(shape, lx, ly);
            const float cover = std::clamp(0.5f - d / (2.0f * aa), 0.0f, 1.0f) * opacity;
            if (cover <= 0.0f)
                continue;
            for (int c = 0; c < 3; ++c)
                img[c][y][x] = img[c][y][x] * (1.0f - cover) + color[c] * cover;
        }
    }
}

} // namespace

void ToyDatasetSpec::validate() const
{
    if (num_classes < 2 || num_classes > kShapes * kColors)
        throw InvalidArgument("toy dataset supports 2..36 classes");
    if (image_size < 8)
        throw InvalidArgument("toy images must be at least 8 px, got " + std::to_string(image_size));
    if (samples_per_class < 1)
        throw InvalidArgument("samples_per_class must be positive");
}

ClassSpace toy_class_space(std::int64_t num_classes)
{
    if (num_classes < 2 || num_classes > kShapes * kColors)
        throw InvalidArgument("toy class space supports 2..36 classes");
    std::vector<std::string> names;
    for (std::int64_t i = 0; i < num_classes; ++i) {
        const auto look = class_look(i);
        names.push_back(std::string(kColorNames[static_cast<std::size_t>(look.color)]) + "-" +
                        kShapeNames[static_cast<std::size_t>(look.shape)]);
    }
    return ClassSpace(std::move(names));
}

torch::Tensor render_toy_image(std::int64_t cls, std::int64_t num_classes, std::int64_t size,
                               ToyStyle style, std::uint64_t seed)
{
    if (size < 8)
        throw InvalidArgument("toy images must be at least 8 px");
    if (cls < 0 || cls >= num_classes)
        throw InvalidArgument("class index out of range");
    std::mt19937_64 rng(seed);
    const auto p = sample_params(cls, num_classes, style, rng);

    auto img = torch::empty({3, size, size}, torch::kFloat32);
    auto acc = img.accessor<float, 3>();
    const float gx = std::cos(p.grad_dir), gy = std::sin(p.grad_dir);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const float u = (static_cast<float>(x) + 0.5f) / static_cast<float>(size) - 0.5f;
            const float v = (static_cast<float>(y) + 0.5f) / static_cast<float>(size) - 0.5f;
            const float g = p.grad_amp * (gx * u + gy * v) * 2.0f;
            for (int c = 0; c < 3; ++c)
                acc[c][y][x] = p.background[c] + g;
        }
    }
    if (p.distractor) {
        composite_shape(acc, size, p.distractor_look.shape,
                        kPalette[static_cast<std::size_t>(p.distractor_look.color)], p.dx, p.dy, p.dr,
                        0.0f, p.dalpha);
    }
    const auto look = class_look(cls);
    composite_shape(acc, size, look.shape, p.color, p.cx, p.cy, p.radius, p.angle, 1.0f);

    if (p.noise > 0.0f) {
        std::normal_distribution<float> n(0.0f, p.noise);
        auto* data = img.data_ptr<float>();
        for (std::int64_t i = 0; i < img.numel(); ++i)
            data[i] += n(rng);
    }
    img.clamp_(0.0f, 1.0f);
    return img.sub_(0.5f).mul_(kContrast).add_(0.5f);
}

ImageBatch render_toy_class(std::int64_t cls, std::int64_t num_classes, std::int64_t size,
                            ToyStyle style, std::int64_t count, std::uint64_t seed,
                            std::int64_t first_index)
{
    if (count < 0)
        throw InvalidArgument("count must be non-negative");
    if (count == 0)
        return ImageBatch::empty(3, size, size);
    std::vector<torch::Tensor> imgs;
    imgs.reserve(static_cast<std::size_t>(count));
    for (std::int64_t j = 0; j < count; ++j) {
        const auto s = derive_seed(seed, static_cast<std::uint64_t>(cls),
                                   static_cast<std::uint64_t>(first_index + j),
                                   style == ToyStyle::Private ? 1 : 2);
        imgs.push_back(render_toy_image(cls, num_classes, size, style, s));
    }
    return ImageBatch(torch::stack(imgs), std::vector<std::int64_t>(static_cast<std::size_t>(count), cls),
                      num_classes);
}

ImageBatch generate_toy_dataset(const ToyDatasetSpec& spec, ToyStyle style)
{
    spec.validate();
    const auto total = spec.num_classes * spec.samples_per_class;
    auto pixels = torch::empty({total, 3, spec.image_size, spec.image_size}, torch::kFloat32);
    std::vector<std::int64_t> labels(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) {
        const auto cls = i % spec.num_classes;
        const auto j = i / spec.num_classes;
        const auto s = derive_seed(spec.seed, static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(j),
                                   style == ToyStyle::Private ? 1 : 2);
        pixels[i].copy_(render_toy_image(cls, spec.num_classes, spec.image_size, style, s));
        labels[static_cast<std::size_t>(i)] = cls;
    }
    return ImageBatch(pixels, std::move(labels), spec.num_classes);
}

} // namespace latentsub
