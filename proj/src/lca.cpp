#include "latentsub/lca.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>

namespace latentsub::lca {

namespace {

std::atomic<std::uint64_t> g_invocations{0};

constexpr std::array<const char*, kSingleKinds> kSingleNames = {
    "translate", "pad", "rotate", "crop", "scale", "affine", "erase", "gauss_blur", "gauss_noise", "salt_pepper"};
constexpr std::array<const char*, kMultiKinds> kMultiNames = {"mixup", "cutmix", "ricap"};

bool is_integer(double v) { return std::isfinite(v) && std::floor(v) == v; }

void require(bool ok, SingleKind kind, const std::string& what)
{
    if (!ok)
        throw InvalidArgument(std::string("invalid ") + kSingleNames[static_cast<int>(kind)] + " magnitude: " + what);
}

// Bilinear resampling with zero fill outside the grid. `source` maps an output
// cell (y, x) to fractional source coordinates.
torch::Tensor warp(const torch::Tensor& code, const std::function<std::pair<double, double>(double, double)>& source)
{
    const auto C = code.size(0), H = code.size(1), W = code.size(2);
    auto src = code.contiguous();
    auto out = torch::zeros_like(src);
    auto in_a = src.accessor<float, 3>();
    auto out_a = out.accessor<float, 3>();
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            const auto [sy, sx] = source(static_cast<double>(y), static_cast<double>(x));
            const auto y0 = static_cast<std::int64_t>(std::floor(sy));
            const auto x0 = static_cast<std::int64_t>(std::floor(sx));
            const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
            const std::array<std::int64_t, 2> ys{y0, y0 + 1}, xs{x0, x0 + 1};
            const std::array<double, 2> wy{1.0 - fy, fy}, wx{1.0 - fx, fx};
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int i = 0; i < 2; ++i) {
                    if (wy[i] == 0.0 || ys[i] < 0 || ys[i] >= H)
                        continue;
                    for (int j = 0; j < 2; ++j) {
                        if (wx[j] == 0.0 || xs[j] < 0 || xs[j] >= W)
                            continue;
                        acc += wy[i] * wx[j] * static_cast<double>(in_a[c][ys[i]][xs[j]]);
                    }
                }
                out_a[c][y][x] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

torch::Tensor gaussian_blur(const torch::Tensor& code, double sigma)
{
    const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    for (std::int64_t i = -radius; i <= radius; ++i)
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    const auto C = code.size(0), H = code.size(1), W = code.size(2);
    auto pass = [&](const torch::Tensor& in, bool along_x) {
        auto src = in.contiguous();
        auto out = torch::empty_like(src);
        auto a = src.accessor<float, 3>();
        auto o = out.accessor<float, 3>();
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    double acc = 0.0, norm = 0.0;
                    for (std::int64_t d = -radius; d <= radius; ++d) {
                        const auto yy = along_x ? y : y + d;
                        const auto xx = along_x ? x + d : x;
                        if (yy < 0 || yy >= H || xx < 0 || xx >= W)
                            continue;
                        const auto w = k[static_cast<std::size_t>(d + radius)];
                        acc += w * static_cast<double>(a[c][yy][xx]);
                        norm += w;
                    }
                    o[c][y][x] = static_cast<float>(acc / norm);
                }
        return out;
    };
    return pass(pass(code, true), false);
}

struct Box {
    std::int64_t y0, x0, h, w;
};

Box box_from(const std::array<double, 4>& p)
{
    return {static_cast<std::int64_t>(p[0]), static_cast<std::int64_t>(p[1]), static_cast<std::int64_t>(p[2]),
            static_cast<std::int64_t>(p[3])};
}

bool box_inside(const std::array<double, 4>& p, std::int64_t H, std::int64_t W)
{
    if (!is_integer(p[0]) || !is_integer(p[1]) || !is_integer(p[2]) || !is_integer(p[3]))
        return false;
    const auto b = box_from(p);
    return b.y0 >= 0 && b.x0 >= 0 && b.h >= 0 && b.w >= 0 && b.y0 + b.h <= H && b.x0 + b.w <= W;
}

} // namespace

std::string_view to_string(SingleKind kind) { return kSingleNames[static_cast<std::size_t>(kind)]; }
std::string_view to_string(MultiKind kind) { return kMultiNames[static_cast<std::size_t>(kind)]; }

SingleKind parse_single_kind(std::string_view text)
{
    for (int i = 0; i < kSingleKinds; ++i)
        if (text == kSingleNames[static_cast<std::size_t>(i)])
            return static_cast<SingleKind>(i);
    throw InvalidArgument("unknown single-code op '" + std::string(text) + "'");
}

MultiKind parse_multi_kind(std::string_view text)
{
    for (int i = 0; i < kMultiKinds; ++i)
        if (text == kMultiNames[static_cast<std::size_t>(i)])
            return static_cast<MultiKind>(i);
    throw InvalidArgument("unknown multi-code op '" + std::string(text) + "'");
}

SingleOp SingleOp::identity(SingleKind kind)
{
    SingleOp op;
    op.kind = kind;
    if (kind == SingleKind::Crop || kind == SingleKind::Scale)
        op.params[0] = 1.0;
    return op;
}

nlohmann::json SingleOp::to_json() const
{
    return {{"kind", std::string(lca::to_string(kind))}, {"params", params}, {"seed", seed}};
}

SingleOp SingleOp::from_json(const nlohmann::json& j)
{
    SingleOp op;
    op.kind = parse_single_kind(j.at("kind").get<std::string>());
    op.params = j.at("params").get<std::array<double, 4>>();
    op.seed = j.value("seed", std::uint64_t{0});
    return op;
}

nlohmann::json MultiOp::to_json() const
{
    return {{"kind", std::string(lca::to_string(kind))}, {"params", params}};
}

MultiOp MultiOp::from_json(const nlohmann::json& j)
{
    MultiOp op;
    op.kind = parse_multi_kind(j.at("kind").get<std::string>());
    op.params = j.at("params").get<std::array<double, 4>>();
    return op;
}

void validate(const SingleOp& op, std::int64_t H, std::int64_t W)
{
    const auto& p = op.params;
    for (double v : p)
        require(std::isfinite(v), op.kind, "non-finite parameter");
    switch (op.kind) {
    case SingleKind::Translate:
        require(is_integer(p[0]) && is_integer(p[1]) && std::abs(p[0]) < static_cast<double>(H) &&
                    std::abs(p[1]) < static_cast<double>(W),
                op.kind, "shift must be whole cells smaller than the extent");
        break;
    case SingleKind::Pad:
        require(is_integer(p[0]) && p[0] >= 0 && p[0] <= static_cast<double>(std::min(H, W)) / 2.0, op.kind,
                "border must be whole cells in [0, extent/2]");
        break;
    case SingleKind::Rotate:
        require(p[0] >= -180.0 && p[0] <= 180.0, op.kind, "angle must lie in [-180, 180]");
        break;
    case SingleKind::Crop:
        require(p[0] > 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0 && p[2] >= 0.0 && p[2] <= 1.0, op.kind,
                "kept fraction in (0,1], position in [0,1]");
        require(std::lround(p[0] * static_cast<double>(H)) >= 1 && std::lround(p[0] * static_cast<double>(W)) >= 1,
                op.kind, "crop window vanishes");
        break;
    case SingleKind::Scale:
        require(p[0] >= 0.5 && p[0] <= 2.0, op.kind, "factor must lie in [0.5, 2]");
        break;
    case SingleKind::Affine:
        require(std::abs(p[0]) <= 0.5 && std::abs(p[1]) <= 0.5, op.kind, "shear must lie in [-0.5, 0.5]");
        break;
    case SingleKind::Erase:
        require(box_inside(p, H, W), op.kind, "box must be whole cells inside the extent");
        break;
    case SingleKind::GaussBlur:
        require(p[0] >= 0.0 && p[0] <= 3.0, op.kind, "sigma must lie in [0, 3]");
        break;
    case SingleKind::GaussNoise:
        require(p[0] >= 0.0 && p[0] <= 1.0, op.kind, "relative std must lie in [0, 1]");
        break;
    case SingleKind::SaltPepper:
        require(p[0] >= 0.0 && p[0] <= 0.2, op.kind, "fraction must lie in [0, 0.2]");
        break;
    }
}

void validate(const MultiOp& op, std::int64_t H, std::int64_t W)
{
    const auto& p = op.params;
    switch (op.kind) {
    case MultiKind::Mixup:
        if (!(p[0] >= 0.0 && p[0] <= 1.0))
            throw InvalidArgument("mixup lambda must lie in [0,1]");
        break;
    case MultiKind::Cutmix:
        if (!box_inside(p, H, W))
            throw InvalidArgument("cutmix box must be whole cells inside the latent extent");
        break;
    case MultiKind::Ricap:
        if (!is_integer(p[0]) || !is_integer(p[1]) || p[0] < 0 || p[1] < 0 || p[0] > static_cast<double>(H) ||
            p[1] > static_cast<double>(W))
            throw InvalidArgument("ricap split point must be whole cells inside the latent extent");
        break;
    }
}

LatentCode apply_single(const LatentCode& code, const SingleOp& op)
{
    const auto H = code.values.size(1), W = code.values.size(2);
    validate(op, H, W);
    const double cy = static_cast<double>(H - 1) / 2.0, cx = static_cast<double>(W - 1) / 2.0;
    const auto& p = op.params;
    const auto& z = code.values;
    torch::Tensor out;
    switch (op.kind) {
    case SingleKind::Translate:
        out = translate(z, static_cast<std::int64_t>(p[0]), static_cast<std::int64_t>(p[1]));
        break;
    case SingleKind::Pad: {
        const double pad = p[0];
        const double sy = (static_cast<double>(H) + 2.0 * pad) / static_cast<double>(H);
        const double sx = (static_cast<double>(W) + 2.0 * pad) / static_cast<double>(W);
        out = pad == 0.0 ? z.clone() : warp(z, [&](double y, double x) {
            return std::pair{(y + 0.5) * sy - 0.5 - pad, (x + 0.5) * sx - 0.5 - pad};
        });
        break;
    }
    case SingleKind::Rotate: {
        const double deg = p[0];
        const double quarter = deg / 90.0;
        if (quarter == std::round(quarter) && H == W) {
            // exact quarter turns (counter-clockwise for positive angles)
            out = torch::rot90(z, static_cast<std::int64_t>(quarter), {1, 2}).contiguous();
        } else {
            const double a = deg * std::numbers::pi / 180.0;
            const double ca = std::cos(a), sa = std::sin(a);
            out = warp(z, [&](double y, double x) {
                const double dy = y - cy, dx = x - cx;
                return std::pair{cy + ca * dy - sa * dx, cx + sa * dy + ca * dx};
            });
        }
        break;
    }
    case SingleKind::Crop: {
        const auto kh = std::lround(p[0] * static_cast<double>(H));
        const auto kw = std::lround(p[0] * static_cast<double>(W));
        const double y0 = std::round(p[1] * static_cast<double>(H - kh));
        const double x0 = std::round(p[2] * static_cast<double>(W - kw));
        const double ry = static_cast<double>(kh) / static_cast<double>(H);
        const double rx = static_cast<double>(kw) / static_cast<double>(W);
        out = (kh == H && kw == W) ? z.clone() : warp(z, [&](double y, double x) {
            return std::pair{y0 + (y + 0.5) * ry - 0.5, x0 + (x + 0.5) * rx - 0.5};
        });
        break;
    }
    case SingleKind::Scale: {
        const double f = p[0];
        out = f == 1.0 ? z.clone() : warp(z, [&](double y, double x) {
            return std::pair{cy + (y - cy) / f, cx + (x - cx) / f};
        });
        break;
    }
    case SingleKind::Affine: {
        const double shx = p[0], shy = p[1];
        out = (shx == 0.0 && shy == 0.0) ? z.clone() : warp(z, [&](double y, double x) {
            return std::pair{y + shy * (x - cx), x + shx * (y - cy)};
        });
        break;
    }
    case SingleKind::Erase: {
        out = z.clone();
        const auto b = box_from(p);
        if (b.h > 0 && b.w > 0)
            out.slice(1, b.y0, b.y0 + b.h).slice(2, b.x0, b.x0 + b.w).zero_();
        break;
    }
    case SingleKind::GaussBlur:
        out = p[0] == 0.0 ? z.clone() : gaussian_blur(z, p[0]);
        break;
    case SingleKind::GaussNoise: {
        out = z.clone();
        if (p[0] > 0.0) {
            auto gen = at::make_generator<at::CPUGeneratorImpl>(op.seed);
            const double sd = z.std().item<double>();
            out.add_(at::randn(z.sizes(), gen, torch::kFloat32) * (p[0] * sd));
        }
        break;
    }
    case SingleKind::SaltPepper: {
        out = z.clone();
        if (p[0] > 0.0) {
            auto gen = at::make_generator<at::CPUGeneratorImpl>(op.seed);
            auto u = at::rand({H, W}, gen, torch::kFloat64);
            auto sign = at::rand({H, W}, gen, torch::kFloat64);
            const auto mean = z.mean({1, 2});
            const auto sd = z.flatten(1).std(1);
            auto ua = u.accessor<double, 2>();
            auto sa = sign.accessor<double, 2>();
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    if (ua[y][x] >= p[0])
                        continue;
                    const double s = sa[y][x] < 0.5 ? -3.0 : 3.0;
                    out.select(1, y).select(1, x).copy_(mean + sd * s);
                }
        }
        break;
    }
    }
    return {out.contiguous(), code.class_index, LatentSource::Augmented};
}

LatentCode apply_multi(const LatentCode& first, const LatentCode& second, const MultiOp& op)
{
    if (first.class_index != second.class_index)
        throw InvalidArgument("multi-code augmentation needs two codes of the same class");
    if (first.values.sizes() != second.values.sizes())
        throw ShapeMismatch("multi-code augmentation needs two codes of the same shape");
    const auto H = first.values.size(1), W = first.values.size(2);
    validate(op, H, W);
    const auto& p = op.params;
    torch::Tensor out;
    switch (op.kind) {
    case MultiKind::Mixup:
        if (p[0] == 1.0)
            out = first.values.clone();
        else if (p[0] == 0.0)
            out = second.values.clone();
        else
            out = first.values * static_cast<float>(p[0]) + second.values * static_cast<float>(1.0 - p[0]);
        break;
    case MultiKind::Cutmix: {
        out = first.values.clone();
        const auto b = box_from(p);
        if (b.h > 0 && b.w > 0)
            out.slice(1, b.y0, b.y0 + b.h)
                .slice(2, b.x0, b.x0 + b.w)
                .copy_(second.values.slice(1, b.y0, b.y0 + b.h).slice(2, b.x0, b.x0 + b.w));
        break;
    }
    case MultiKind::Ricap: {
        const auto py = static_cast<std::int64_t>(p[0]), px = static_cast<std::int64_t>(p[1]);
        out = first.values.clone();
        out.slice(1, 0, py).slice(2, px, W).copy_(second.values.slice(1, 0, py).slice(2, px, W));
        out.slice(1, py, H).slice(2, 0, px).copy_(second.values.slice(1, py, H).slice(2, 0, px));
        break;
    }
    }
    return {out.contiguous(), first.class_index, LatentSource::Augmented};
}

nlohmann::json AugmentationPlan::to_json() const
{
    nlohmann::json chains_json = nlohmann::json::array();
    for (const auto& c : chains) {
        nlohmann::json ops = nlohmann::json::array();
        for (const auto& op : c.ops)
            ops.push_back(op.to_json());
        chains_json.push_back({{"slot", c.slot}, {"ops", ops}});
    }
    return {{"branch", branch == Branch::Single ? "single" : "multi"},
            {"class", class_index},
            {"chains", chains_json},
            {"multi", multi ? multi->to_json() : nlohmann::json()},
            {"seed", seed}};
}

AugmentationPlan AugmentationPlan::from_json(const nlohmann::json& j)
{
    AugmentationPlan plan;
    const auto branch = j.at("branch").get<std::string>();
    if (branch != "single" && branch != "multi")
        throw InvalidArgument("unknown plan branch '" + branch + "'");
    plan.branch = branch == "single" ? Branch::Single : Branch::Multi;
    plan.class_index = j.at("class").get<std::int64_t>();
    for (const auto& c : j.at("chains")) {
        Chain chain;
        chain.slot = c.at("slot").get<std::int64_t>();
        for (const auto& op : c.at("ops"))
            chain.ops.push_back(SingleOp::from_json(op));
        plan.chains.push_back(std::move(chain));
    }
    if (!j.at("multi").is_null())
        plan.multi = MultiOp::from_json(j.at("multi"));
    plan.seed = j.value("seed", std::uint64_t{0});
    return plan;
}

void SamplerConfig::validate() const
{
    if (!(p_single >= 0.0 && p_single <= 1.0))
        throw ConfigError("p_single must lie in [0,1]");
    if (max_chain < 1 || max_chain > kSingleKinds)
        throw ConfigError("max_chain must lie in [1, 10]");
    if (translate_frac < 0 || translate_frac >= 1 || pad_frac < 0 || pad_frac > 0.5 || rotate_deg < 0 ||
        rotate_deg > 180 || crop_keep_min <= 0 || crop_keep_min > 1 || scale_min < 0.5 || scale_max > 2 ||
        scale_min > scale_max || shear < 0 || shear > 0.5 || erase_area_max < 0 || erase_area_max > 1 ||
        blur_sigma_min < 0 || blur_sigma_max > 3 || blur_sigma_min > blur_sigma_max || noise_max < 0 ||
        noise_max > 1 || salt_pepper_max < 0 || salt_pepper_max > 0.2)
        throw ConfigError("augmentation sampling range out of bounds");
}

nlohmann::json SamplerConfig::to_json() const
{
    return {{"p_single", p_single},       {"max_chain", max_chain},       {"translate_frac", translate_frac},
            {"pad_frac", pad_frac},       {"rotate_deg", rotate_deg},     {"crop_keep_min", crop_keep_min},
            {"scale_min", scale_min},     {"scale_max", scale_max},       {"shear", shear},
            {"erase_area_max", erase_area_max}, {"blur_sigma_min", blur_sigma_min},
            {"blur_sigma_max", blur_sigma_max}, {"noise_max", noise_max}, {"salt_pepper_max", salt_pepper_max}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j)
{
    SamplerConfig c;
    c.p_single = j.value("p_single", c.p_single);
    c.max_chain = j.value("max_chain", c.max_chain);
    c.translate_frac = j.value("translate_frac", c.translate_frac);
    c.pad_frac = j.value("pad_frac", c.pad_frac);
    c.rotate_deg = j.value("rotate_deg", c.rotate_deg);
    c.crop_keep_min = j.value("crop_keep_min", c.crop_keep_min);
    c.scale_min = j.value("scale_min", c.scale_min);
    c.scale_max = j.value("scale_max", c.scale_max);
    c.shear = j.value("shear", c.shear);
    c.erase_area_max = j.value("erase_area_max", c.erase_area_max);
    c.blur_sigma_min = j.value("blur_sigma_min", c.blur_sigma_min);
    c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
    c.noise_max = j.value("noise_max", c.noise_max);
    c.salt_pepper_max = j.value("salt_pepper_max", c.salt_pepper_max);
    c.validate();
    return c;
}

SingleOp sample_single_op(SingleKind kind, std::int64_t H, std::int64_t W, const SamplerConfig& cfg,
                          std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto uint = [&](std::int64_t lo, std::int64_t hi) {
        return static_cast<double>(std::uniform_int_distribution<std::int64_t>(lo, hi)(rng));
    };
    SingleOp op = SingleOp::identity(kind);
    auto& p = op.params;
    switch (kind) {
    case SingleKind::Translate: {
        const auto ty = static_cast<std::int64_t>(std::round(cfg.translate_frac * static_cast<double>(H)));
        const auto tx = static_cast<std::int64_t>(std::round(cfg.translate_frac * static_cast<double>(W)));
        p[0] = uint(-ty, ty);
        p[1] = uint(-tx, tx);
        break;
    }
    case SingleKind::Pad:
        p[0] = uint(0, std::max<std::int64_t>(1, std::llround(cfg.pad_frac * static_cast<double>(std::min(H, W)))));
        break;
    case SingleKind::Rotate:
        p[0] = uni(-cfg.rotate_deg, cfg.rotate_deg);
        break;
    case SingleKind::Crop:
        p[0] = uni(cfg.crop_keep_min, 1.0);
        p[1] = uni(0.0, 1.0);
        p[2] = uni(0.0, 1.0);
        break;
    case SingleKind::Scale:
        p[0] = uni(cfg.scale_min, cfg.scale_max);
        break;
    case SingleKind::Affine:
        p[0] = uni(-cfg.shear, cfg.shear);
        p[1] = uni(-cfg.shear, cfg.shear);
        break;
    case SingleKind::Erase: {
        const double area = uni(0.0, cfg.erase_area_max) * static_cast<double>(H * W);
        const double aspect = std::exp(uni(std::log(0.5), std::log(2.0)));
        const auto h = std::clamp<std::int64_t>(std::llround(std::sqrt(area * aspect)), 0, H);
        const auto w = std::clamp<std::int64_t>(std::llround(std::sqrt(area / aspect)), 0, W);
        p[2] = static_cast<double>(h);
        p[3] = static_cast<double>(w);
        p[0] = uint(0, H - h);
        p[1] = uint(0, W - w);
        break;
    }
    case SingleKind::GaussBlur:
        p[0] = uni(cfg.blur_sigma_min, cfg.blur_sigma_max);
        break;
    case SingleKind::GaussNoise:
        p[0] = uni(0.0, cfg.noise_max);
        op.seed = derive_seed(seed, 0x6e);
        break;
    case SingleKind::SaltPepper:
        p[0] = uni(0.0, cfg.salt_pepper_max);
        op.seed = derive_seed(seed, 0x5a);
        break;
    }
    return op;
}

namespace {

Chain sample_chain(std::int64_t slot, std::int64_t H, std::int64_t W, const SamplerConfig& cfg, std::mt19937_64& rng)
{
    Chain chain;
    chain.slot = slot;
    const auto t = std::uniform_int_distribution<std::int64_t>(1, cfg.max_chain)(rng);
    std::vector<SingleKind> pool;
    for (int i = 0; i < kSingleKinds; ++i)
        pool.push_back(static_cast<SingleKind>(i));
    for (std::int64_t i = 0; i < t; ++i) {
        const auto pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
        const auto kind = pool[pick];
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        chain.ops.push_back(sample_single_op(kind, H, W, cfg, rng()));
    }
    return chain;
}

} // namespace

AugmentationPlan sample_plan(const Codebook& codebook, std::int64_t class_index, std::uint64_t seed,
                             const SamplerConfig& cfg)
{
    ++g_invocations;
    cfg.validate();
    const auto n = codebook.count(class_index);
    if (n == 0)
        throw InvalidArgument("class " + std::to_string(class_index) + " has no codebook entries");
    const auto H = codebook.descriptor().latent_height, W = codebook.descriptor().latent_width;
    std::mt19937_64 rng(seed);
    AugmentationPlan plan;
    plan.class_index = class_index;
    plan.seed = seed;
    const bool single = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.p_single || n < 2;
    if (single) {
        plan.branch = Branch::Single;
        const auto slot = std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng);
        plan.chains.push_back(sample_chain(slot, H, W, cfg, rng));
        return plan;
    }
    plan.branch = Branch::Multi;
    const auto i = std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng);
    auto j = std::uniform_int_distribution<std::int64_t>(0, n - 2)(rng);
    if (j >= i)
        ++j;
    plan.chains.push_back(sample_chain(i, H, W, cfg, rng));
    plan.chains.push_back(sample_chain(j, H, W, cfg, rng));

    MultiOp op;
    op.kind = static_cast<MultiKind>(std::uniform_int_distribution<int>(0, kMultiKinds - 1)(rng));
    switch (op.kind) {
    case MultiKind::Mixup:
        op.params[0] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        break;
    case MultiKind::Cutmix: {
        const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const double side = std::sqrt(1.0 - lambda);
        const auto h = std::clamp<std::int64_t>(std::llround(side * static_cast<double>(H)), 0, H);
        const auto w = std::clamp<std::int64_t>(std::llround(side * static_cast<double>(W)), 0, W);
        op.params = {static_cast<double>(std::uniform_int_distribution<std::int64_t>(0, H - h)(rng)),
                     static_cast<double>(std::uniform_int_distribution<std::int64_t>(0, W - w)(rng)),
                     static_cast<double>(h), static_cast<double>(w)};
        break;
    }
    case MultiKind::Ricap:
        op.params[0] = static_cast<double>(std::uniform_int_distribution<std::int64_t>(1, H - 1)(rng));
        op.params[1] = static_cast<double>(std::uniform_int_distribution<std::int64_t>(1, W - 1)(rng));
        break;
    }
    plan.multi = op;
    return plan;
}

LatentCode execute_plan(const AugmentationPlan& plan, const Codebook& codebook)
{
    ++g_invocations;
    const std::size_t expected = plan.branch == Branch::Single ? 1 : 2;
    if (plan.chains.size() != expected)
        throw InvalidArgument("plan has the wrong number of chains for its branch");
    if (plan.branch == Branch::Multi && !plan.multi)
        throw InvalidArgument("multi-code plan lacks its fusion op");
    std::vector<LatentCode> results;
    for (const auto& chain : plan.chains) {
        if (chain.ops.empty() || chain.ops.size() > static_cast<std::size_t>(kSingleKinds))
            throw InvalidArgument("chain length must lie in [1, 10]");
        std::array<bool, kSingleKinds> seen{};
        LatentCode z = codebook.entry(plan.class_index, chain.slot);
        for (const auto& op : chain.ops) {
            auto& flag = seen[static_cast<std::size_t>(op.kind)];
            if (flag)
                throw InvalidArgument("chain repeats the op kind '" + std::string(to_string(op.kind)) + "'");
            flag = true;
            z = apply_single(z, op);
        }
        results.push_back(std::move(z));
    }
    if (plan.branch == Branch::Single)
        return results.front();
    return apply_multi(results[0], results[1], *plan.multi);
}

std::uint64_t invocation_count() { return g_invocations.load(); }

} // namespace latentsub::lca
