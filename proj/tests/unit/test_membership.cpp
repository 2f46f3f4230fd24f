#include <doctest.h>

#include <limits>

#include "../support.hpp"

using namespace latentsub;
using namespace latentsub::testing;

namespace {

std::shared_ptr<MeteredOracle> make_oracle(std::shared_ptr<ClassifierBackend> backend, OutputMode mode)
{
    OracleConfig oc;
    oc.mode = mode;
    return std::make_shared<MeteredOracle>(std::move(backend), oc);
}

/// Returns one scripted probability vector per image, with the clean and the
/// noisy query of image i answered from the i-th pair.
class ScriptedClassifier : public ClassifierBackend {
public:
    explicit ScriptedClassifier(std::vector<std::pair<std::vector<double>, std::vector<double>>> script)
        : script_(std::move(script))
    {
    }
    std::vector<OracleOutput> classify(const torch::Tensor& pixels, OutputMode) override
    {
        std::vector<OracleOutput> out;
        for (std::int64_t i = 0; i < pixels.size(0); ++i) {
            const auto& pair = script_.at(static_cast<std::size_t>(i));
            out.push_back(OracleOutput::from_probabilities(calls_ == 0 ? pair.first : pair.second));
        }
        ++calls_;
        return out;
    }
    std::int64_t num_classes() const override { return 3; }

private:
    std::vector<std::pair<std::vector<double>, std::vector<double>>> script_;
    int calls_ = 0;
};

} // namespace

TEST_CASE("perturbation is seeded per image and vanishes as sigma goes to zero")
{
    const auto batch = generate_toy_dataset({10, 32, 1, 2});
    CHECK(torch::equal(perturb(batch, 0.0, 1).pixels(), batch.pixels()));
    CHECK(torch::equal(perturb(batch, 0.03, 1).pixels(), perturb(batch, 0.03, 1).pixels()));
    CHECK_FALSE(torch::equal(perturb(batch, 0.03, 1).pixels(), perturb(batch, 0.03, 2).pixels()));
    // the same image gets the same noise whichever batch it travels in
    const auto tail = perturb(batch.slice(4, 10), 0.03, 1, 4);
    CHECK(torch::equal(tail.pixels(), perturb(batch, 0.03, 1).pixels().slice(0, 4, 10)));
}

TEST_CASE("perturbation noise has the requested standard deviation")
{
    const ImageBatch mid(torch::full({4, 3, 32, 32}, 0.5f));
    const auto noisy = perturb(mid, 0.05, 3);
    const auto d = (noisy.pixels() - mid.pixels()).flatten();
    const auto unclamped = d.index({(noisy.pixels().flatten() > 0.0f) & (noisy.pixels().flatten() < 1.0f)});
    REQUIRE(unclamped.numel() > 10000);
    CHECK(unclamped.std().item<double>() == doctest::Approx(0.05).epsilon(0.1));
}

TEST_CASE("decision distance")
{
    const auto a = OracleOutput::from_probabilities({0.7, 0.2, 0.1});
    const auto b = OracleOutput::from_probabilities({0.6, 0.3, 0.1});
    CHECK(decision_distance(a, a) == 0.0);
    CHECK(decision_distance(a, b) == doctest::Approx(0.02 / 3.0).epsilon(1e-12));
    CHECK(decision_distance(OracleOutput::from_label(4), OracleOutput::from_label(4)) == 0.0);
    CHECK(decision_distance(OracleOutput::from_label(4), OracleOutput::from_label(7)) ==
          std::numeric_limits<double>::infinity());
    CHECK_THROWS(decision_distance(a, OracleOutput::from_label(0)));
}

TEST_CASE("threshold keeps candidates within u")
{
    // distances 5e-4 and 2e-3 against u = 1e-3
    const double d1 = std::sqrt(5e-4 * 3.0 / 2.0);
    const double d2 = std::sqrt(2e-3 * 3.0 / 2.0);
    auto backend = std::make_shared<ScriptedClassifier>(std::vector<std::pair<std::vector<double>, std::vector<double>>>{
        {{0.6, 0.3, 0.1}, {0.6 - d1, 0.3 + d1, 0.1}},
        {{0.6, 0.3, 0.1}, {0.6 - d2, 0.3 + d2, 0.1}},
    });
    auto oracle = make_oracle(backend, OutputMode::Probability);
    MembershipConfig mc;
    mc.u = 1e-3;
    const auto r = filter_members(ImageBatch(torch::zeros({2, 3, 8, 8})), *oracle, mc);
    CHECK(r.distances[0] == doctest::Approx(5e-4));
    CHECK(r.distances[1] == doctest::Approx(2e-3));
    CHECK(r.kept == std::vector<std::int64_t>{0});
    CHECK(r.members.size() == 1);
    CHECK(oracle->snapshot_ledger().n_stage1 == 4);
}

TEST_CASE("filtering G candidates costs exactly 2G stage-one queries")
{
    auto oracle = open_local_oracle(shared_target(), {});
    const auto batch = generate_toy_dataset({10, 32, 20, 3}, ToyStyle::Prior);
    MembershipConfig mc;
    filter_members(batch, *oracle, mc);
    CHECK(oracle->snapshot_ledger().n_stage1 == 2 * batch.size());
    CHECK(oracle->snapshot_ledger().n_stage2 == 0);
}

TEST_CASE("label-only filtering against a constant classifier keeps every class match")
{
    auto oracle = make_oracle(std::make_shared<FixedClassifier>(std::vector<double>{0.2, 0.8}), OutputMode::LabelOnly);
    MembershipConfig mc;
    mc.mode = OutputMode::LabelOnly;
    const ImageBatch batch(torch::rand({6, 3, 8, 8}), std::vector<std::int64_t>{1, 0, 1, 1, 0, 1}, 2);
    const auto r = filter_members(batch, *oracle, mc);
    CHECK(r.kept == std::vector<std::int64_t>{0, 2, 3, 5});
    mc.mode = OutputMode::Probability;
    CHECK_THROWS_AS(filter_members(batch, *oracle, mc), ConfigError);
}

TEST_CASE("membership config bounds")
{
    MembershipConfig mc;
    mc.sigma = 0.3;
    CHECK_THROWS_AS(mc.validate(), ConfigError);
    mc.sigma = 0.03;
    mc.u = -1.0;
    CHECK_THROWS_AS(mc.validate(), ConfigError);
}

TEST_CASE("codebook fills every class to capacity under a lenient threshold")
{
    IdentityBackend backend(toy_class_space(10), 32, 2);
    auto oracle = open_local_oracle(shared_target(), {});
    MembershipConfig mc;
    mc.u = 1.0;
    auto result = build_codebook(backend, *oracle, mc, 10, 200);
    for (std::int64_t c = 0; c < 10; ++c) {
        CHECK(result.codebook.count(c) == 10);
        for (const auto& code : result.codebook.entries(c))
            CHECK(code.class_index == c);
    }
    CHECK(result.underfilled_classes.empty());
    CHECK(result.codebook.frozen());
    CHECK(oracle->snapshot_ledger().n_stage1 == 2 * result.generated());
}

TEST_CASE("a zero threshold against a jittering oracle underfills every class")
{
    IdentityBackend backend(toy_class_space(10), 32, 2);
    auto oracle = make_oracle(std::make_shared<JitterClassifier>(10), OutputMode::Probability);
    MembershipConfig mc;
    mc.u = 0.0;
    const auto result = build_codebook(backend, *oracle, mc, 5, 6);
    CHECK(result.underfilled_classes.size() == 10);
    CHECK(result.codebook.total() == 0);
    CHECK(result.generated() == 60);
    CHECK(result.summary()["underfilled_classes"].size() == 10);
}

TEST_CASE("probability mode with a tight threshold needs more candidates than label-only")
{
    IdentityBackend backend(toy_class_space(10), 32, 2);
    MembershipConfig prob;
    prob.u = 1e-6;
    auto po = open_local_oracle(shared_target(), {});
    const auto p = build_codebook(backend, *po, prob, 5, 50);

    MembershipConfig label = prob;
    label.mode = OutputMode::LabelOnly;
    OracleConfig oc;
    oc.mode = OutputMode::LabelOnly;
    auto lo = open_local_oracle(shared_target(), oc);
    const auto l = build_codebook(backend, *lo, label, 5, 50);
    CHECK(p.generated() > l.generated());
    CHECK(p.ledger.n_stage1 > l.ledger.n_stage1);
}

TEST_CASE("codebook persistence and backend checks")
{
    TempDir dir("codebook");
    IdentityBackend backend(toy_class_space(10), 32, 2);
    auto oracle = open_local_oracle(shared_target(), {});
    MembershipConfig mc;
    mc.u = 1.0;
    const auto result = build_codebook(backend, *oracle, mc, 3, 20);
    result.codebook.save(dir.path(), {{"note", "echo"}});
    const auto back = Codebook::load(dir.path());
    CHECK(back.fingerprint() == result.codebook.fingerprint());
    for (std::int64_t c = 0; c < 10; ++c) {
        REQUIRE(back.count(c) == result.codebook.count(c));
        for (std::int64_t s = 0; s < back.count(c); ++s)
            CHECK(torch::equal(back.entry(c, s).values, result.codebook.entry(c, s).values));
    }
    CHECK_NOTHROW(back.check_backend(backend));
    IdentityBackend other(toy_class_space(10), 32, 4);
    CHECK_THROWS(back.check_backend(other));

    Codebook book(2, 1, backend.fingerprint(), backend.descriptor());
    book.append({torch::zeros({3, 16, 16}), 0, LatentSource::Encoded});
    CHECK_THROWS(book.append({torch::zeros({3, 16, 16}), 0, LatentSource::Encoded}));
    CHECK_THROWS(book.append({torch::zeros({3, 8, 8}), 1, LatentSource::Encoded}));
    book.freeze();
    CHECK_THROWS(book.append({torch::zeros({3, 16, 16}), 1, LatentSource::Encoded}));
}
