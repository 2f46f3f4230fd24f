#include <doctest.h>

#include <ATen/CPUGeneratorImpl.h>
#include <set>

#include "../support.hpp"
#include "latentsub/lca.hpp"

using namespace latentsub;
using namespace latentsub::lca;

namespace {

LatentCode random_code(std::int64_t cls = 0, std::uint64_t seed = 1)
{
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return {at::randn({3, 16, 16}, gen, torch::kFloat32), cls, LatentSource::Encoded};
}

Codebook random_codebook(std::int64_t per_class, std::int64_t classes = 4)
{
    IdentityBackend backend(toy_class_space(classes), 32, 2);
    Codebook book(classes, per_class, backend.fingerprint(), backend.descriptor());
    for (std::int64_t c = 0; c < classes; ++c)
        for (std::int64_t s = 0; s < per_class; ++s)
            book.append(random_code(c, derive_seed(c, s)));
    book.freeze();
    return book;
}

} // namespace

TEST_CASE("every single-code kind has an exact identity setting")
{
    const auto z = random_code();
    for (int k = 0; k < kSingleKinds; ++k) {
        const auto kind = static_cast<SingleKind>(k);
        CAPTURE(to_string(kind));
        const auto out = apply_single(z, SingleOp::identity(kind));
        CHECK(torch::equal(out.values, z.values));
        CHECK(out.source == LatentSource::Augmented);
        CHECK(out.class_index == z.class_index);
        CHECK(parse_single_kind(to_string(kind)) == kind);
    }
}

TEST_CASE("four quarter turns restore the code")
{
    const auto z = random_code();
    SingleOp rot = SingleOp::identity(SingleKind::Rotate);
    rot.params[0] = 90.0;
    auto out = z;
    for (int i = 0; i < 4; ++i)
        out = apply_single(out, rot);
    CHECK(torch::equal(out.values, z.values));
    CHECK_FALSE(torch::equal(apply_single(z, rot).values, z.values));
}

TEST_CASE("gaussian noise matches its reference formula")
{
    const auto z = random_code();
    SingleOp op = SingleOp::identity(SingleKind::GaussNoise);
    op.params[0] = 0.1;
    op.seed = 77;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(77);
    const auto expected = z.values + at::randn(z.values.sizes(), gen, torch::kFloat32) * (0.1 * z.values.std().item<double>());
    CHECK(torch::allclose(apply_single(z, op).values, expected, 0.0, 1e-6));
}

TEST_CASE("salt and pepper cells sit three standard deviations from the mean")
{
    const auto z = random_code();
    SingleOp op = SingleOp::identity(SingleKind::SaltPepper);
    op.params[0] = 0.2;
    op.seed = 5;
    const auto out = apply_single(z, op).values;
    const auto changed = (out != z.values).any(0);
    CHECK(changed.sum().item<std::int64_t>() > 10);
    const auto mean = z.values.mean({1, 2});
    const auto sd = z.values.flatten(1).std(1);
    const auto dev = ((out - mean.view({3, 1, 1})) / sd.view({3, 1, 1})).abs();
    CHECK(torch::allclose(dev.masked_select(changed.unsqueeze(0).expand_as(dev)),
                          torch::full({changed.sum().item<std::int64_t>() * 3}, 3.0f), 0.0, 1e-4));
}

TEST_CASE("mixup and cutmix endpoints")
{
    const auto a = random_code(2, 1), b = random_code(2, 2);
    MultiOp mix{MultiKind::Mixup, {1.0, 0, 0, 0}};
    CHECK(torch::equal(apply_multi(a, b, mix).values, a.values));
    mix.params[0] = 0.0;
    CHECK(torch::equal(apply_multi(a, b, mix).values, b.values));
    mix.params[0] = 0.5;
    CHECK(torch::allclose(apply_multi(a, b, mix).values, (a.values + b.values) / 2, 0.0, 1e-6));

    const MultiOp full{MultiKind::Cutmix, {0, 0, 16, 16}};
    CHECK(torch::equal(apply_multi(a, b, full).values, b.values));
    const MultiOp none{MultiKind::Cutmix, {3, 3, 0, 0}};
    CHECK(torch::equal(apply_multi(a, b, none).values, a.values));

    const MultiOp ricap{MultiKind::Ricap, {4, 10, 0, 0}};
    const auto r = apply_multi(a, b, ricap).values;
    CHECK(torch::equal(r.slice(1, 0, 4).slice(2, 0, 10), a.values.slice(1, 0, 4).slice(2, 0, 10)));
    CHECK(torch::equal(r.slice(1, 0, 4).slice(2, 10, 16), b.values.slice(1, 0, 4).slice(2, 10, 16)));
    CHECK(torch::equal(r.slice(1, 4, 16).slice(2, 0, 10), b.values.slice(1, 4, 16).slice(2, 0, 10)));
    CHECK(torch::equal(r.slice(1, 4, 16).slice(2, 10, 16), a.values.slice(1, 4, 16).slice(2, 10, 16)));

    CHECK_THROWS(apply_multi(a, random_code(3), mix));
}

TEST_CASE("out-of-range magnitudes are rejected")
{
    SingleOp t = SingleOp::identity(SingleKind::Translate);
    t.params[0] = 0.5;
    CHECK_THROWS_AS(validate(t, 16, 16), InvalidArgument);
    t.params[0] = 16;
    CHECK_THROWS_AS(validate(t, 16, 16), InvalidArgument);
    SingleOp e = SingleOp::identity(SingleKind::Erase);
    e.params = {10, 10, 8, 2};
    CHECK_THROWS_AS(validate(e, 16, 16), InvalidArgument);
    SingleOp n = SingleOp::identity(SingleKind::GaussNoise);
    n.params[0] = std::nan("");
    CHECK_THROWS_AS(validate(n, 16, 16), InvalidArgument);
    CHECK_THROWS_AS(validate(MultiOp{MultiKind::Mixup, {1.5, 0, 0, 0}}, 16, 16), InvalidArgument);
    CHECK_THROWS_AS(validate(MultiOp{MultiKind::Ricap, {4, 17, 0, 0}}, 16, 16), InvalidArgument);
    CHECK_THROWS_AS(validate(MultiOp{MultiKind::Ricap, {2.5, 4, 0, 0}}, 16, 16), InvalidArgument);
    CHECK_THROWS_AS(parse_single_kind("warp"), InvalidArgument);

    SamplerConfig cfg;
    cfg.max_chain = 11;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sampled plans respect the chain and branch rules")
{
    const auto book = random_codebook(3);
    int singles = 0;
    std::set<int> lengths;
    for (std::uint64_t s = 0; s < 10000; ++s) {
        const auto plan = sample_plan(book, static_cast<std::int64_t>(s % 4), s);
        REQUIRE(plan.chains.size() == (plan.branch == Branch::Single ? 1u : 2u));
        CHECK(plan.multi.has_value() == (plan.branch == Branch::Multi));
        if (plan.branch == Branch::Single)
            ++singles;
        else
            CHECK(plan.chains[0].slot != plan.chains[1].slot);
        for (const auto& chain : plan.chains) {
            REQUIRE(!chain.ops.empty());
            REQUIRE(chain.ops.size() <= static_cast<std::size_t>(kSingleKinds));
            lengths.insert(static_cast<int>(chain.ops.size()));
            std::set<SingleKind> kinds;
            for (const auto& op : chain.ops) {
                kinds.insert(op.kind);
                CHECK_NOTHROW(validate(op, 16, 16));
            }
            CHECK(kinds.size() == chain.ops.size());
        }
        if (plan.multi)
            CHECK_NOTHROW(validate(*plan.multi, 16, 16));
    }
    CHECK(lengths.size() == 10);
    CHECK(singles > 4700);
    CHECK(singles < 5300);
}

TEST_CASE("a class holding one code always takes the single branch")
{
    const auto book = random_codebook(1);
    for (std::uint64_t s = 0; s < 200; ++s)
        CHECK(sample_plan(book, 1, s).branch == Branch::Single);
}

TEST_CASE("plans are deterministic, replayable and diverse")
{
    const auto book = random_codebook(3);
    const auto p1 = sample_plan(book, 2, 99);
    const auto p2 = sample_plan(book, 2, 99);
    CHECK(p1.to_json() == p2.to_json());
    const auto replay = AugmentationPlan::from_json(p1.to_json());
    CHECK(torch::equal(execute_plan(replay, book).values, execute_plan(p1, book).values));

    std::set<std::string> seen;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        const auto code = execute_plan(sample_plan(book, 0, s), book);
        CHECK(code.class_index == 0);
        CHECK(code.source == LatentSource::Augmented);
        CHECK(torch::isfinite(code.values).all().item<bool>());
        const auto bytes = code.values.contiguous();
        seen.emplace(static_cast<const char*>(bytes.data_ptr()), static_cast<std::size_t>(bytes.nbytes()));
    }
    CHECK(seen.size() >= 900);
}

TEST_CASE("empty classes and the invocation counter")
{
    IdentityBackend backend(toy_class_space(4), 32, 2);
    Codebook empty(4, 2, backend.fingerprint(), backend.descriptor());
    CHECK_THROWS_AS(sample_plan(empty, 0, 1), InvalidArgument);

    const auto book = random_codebook(2);
    const auto before = invocation_count();
    execute_plan(sample_plan(book, 0, 3), book);
    CHECK(invocation_count() - before == 2);
}
