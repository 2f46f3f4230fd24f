#include <doctest.h>

#include <thread>

#include "../support.hpp"
#include "latentsub/http_service.hpp"

using namespace latentsub;
using namespace latentsub::testing;

namespace {

std::shared_ptr<MeteredOracle> fixed_oracle(std::optional<std::int64_t> budget,
                                            OutputMode mode = OutputMode::Probability)
{
    OracleConfig oc;
    oc.mode = mode;
    oc.budget = budget;
    return std::make_shared<MeteredOracle>(std::make_shared<FixedClassifier>(std::vector<double>{0.1, 0.7, 0.2}),
                                           oc);
}

ImageBatch blank(std::int64_t n) { return ImageBatch(torch::zeros({n, 3, 8, 8})); }

} // namespace

TEST_CASE("ledger counts every image against its stage")
{
    auto oracle = fixed_oracle(500000);
    CHECK(oracle->snapshot_ledger() == QueryLedger{});
    const auto out = oracle->query(blank(32), Stage::Stage2);
    CHECK(out.size() == 32);
    CHECK(out[0].label() == 1);
    CHECK(oracle->snapshot_ledger().n_stage2 == 32);
    oracle->query(blank(5), Stage::Eval);
    const auto l = oracle->snapshot_ledger();
    CHECK(l.total() == 37);
    CHECK(l.attack_queries() == 32);
    CHECK(*oracle->remaining_budget() == 500000 - 32);
}

TEST_CASE("budget overrun rejects the whole batch and leaves the ledger unchanged")
{
    auto oracle = fixed_oracle(10);
    try {
        oracle->query(blank(32), Stage::Stage1);
        FAIL("expected BudgetExhausted");
    } catch (const BudgetExhausted& e) {
        CHECK(e.requested() == 32);
        CHECK(e.ledger() == QueryLedger{});
    }
    CHECK(oracle->snapshot_ledger() == QueryLedger{});
    oracle->query(blank(10), Stage::Stage1);
    CHECK_THROWS_AS(oracle->query(blank(1), Stage::Stage2), BudgetExhausted);
    // evaluation is metered but never charged
    CHECK_NOTHROW(oracle->query(blank(50), Stage::Eval));
    CHECK(oracle->snapshot_ledger().n_eval == 50);
}

TEST_CASE("stage totals add up to the attack query count")
{
    QueryLedger l;
    l.n_stage1 = 389;
    l.n_stage2 = 499611;
    CHECK(l.attack_queries() == 500000);
    CHECK(QueryLedger::from_json(l.to_json()) == l);
}

TEST_CASE("concurrent queries are counted exactly")
{
    auto oracle = fixed_oracle(std::nullopt);
    std::vector<std::thread> threads;
    for (int t = 0; t < 3; ++t)
        threads.emplace_back([&] { oracle->query(blank(32), Stage::Stage2); });
    for (auto& t : threads)
        t.join();

    auto serial = fixed_oracle(std::nullopt);
    for (int t = 0; t < 3; ++t)
        serial->query(blank(32), Stage::Stage2);
    CHECK(oracle->snapshot_ledger() == serial->snapshot_ledger());
    CHECK(oracle->snapshot_ledger().n_stage2 == 96);
}

TEST_CASE("label-only oracles never return probabilities")
{
    auto oracle = fixed_oracle(std::nullopt, OutputMode::LabelOnly);
    for (const auto& o : oracle->query(blank(3), Stage::Stage2)) {
        CHECK_FALSE(o.probs().has_value());
        CHECK(o.label() == 1);
    }
}

TEST_CASE("restoring a ledger is only allowed before the first query")
{
    auto oracle = fixed_oracle(100);
    QueryLedger l;
    l.n_stage1 = 40;
    oracle->restore_ledger(l);
    CHECK(*oracle->remaining_budget() == 60);
    oracle->query(blank(1), Stage::Stage2);
    CHECK_THROWS(oracle->restore_ledger(l));
}

TEST_CASE("recording wrapper sees exactly what the ledger charges")
{
    auto oracle = fixed_oracle(std::nullopt);
    RecordingOracle rec(*oracle);
    rec.query(blank(4), Stage::Stage1);
    rec.query(blank(6), Stage::Stage2);
    rec.query(blank(2), Stage::Eval);
    CHECK(rec.images_forwarded(Stage::Stage1) == oracle->snapshot_ledger().n_stage1);
    CHECK(rec.images_forwarded(Stage::Stage2) == oracle->snapshot_ledger().n_stage2);
    CHECK(rec.images_forwarded() == 12);
    CHECK(rec.calls().size() == 3);
}

TEST_CASE("softmax outputs are computed in double precision")
{
    const auto logits = torch::tensor({{0.0f, 0.0f}, {1.0f, 3.0f}}).reshape({2, 2});
    const auto out = outputs_from_logits(logits, OutputMode::Probability);
    CHECK((*out[0].probs())[0] == doctest::Approx(0.5));
    CHECK(out[1].label() == 1);
    CHECK((*out[1].probs())[1] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-12));
}

TEST_CASE("remote classifier over HTTP matches the local backend")
{
    auto local = std::make_shared<LocalClassifier>(load_target_checkpoint(shared_target()).ptr());
    auto service = serve_classifier(local, "127.0.0.1", 0);
    RemoteClassifier remote("127.0.0.1", service->port(), local->num_classes());
    const auto images = generate_toy_dataset({10, 32, 1, 5}).pixels();
    const auto a = local->classify(images, OutputMode::Probability);
    const auto b = remote.classify(images, OutputMode::Probability);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label() == b[i].label());
        CHECK(*a[i].probs() == *b[i].probs());
    }
    for (const auto& o : remote.classify(images, OutputMode::LabelOnly))
        CHECK_FALSE(o.probs().has_value());

    OracleConfig oc;
    oc.transport = Transport::Remote;
    MeteredOracle metered(std::make_shared<RemoteClassifier>("127.0.0.1", service->port(), 10), oc);
    metered.query(ImageBatch(images), Stage::Stage2);
    CHECK(metered.snapshot_ledger().n_stage2 == 10);
    service->stop();
}

TEST_CASE("remote classifier reports transport failures after retries")
{
    RemoteClassifier remote("127.0.0.1", 1, 10, 1, 1);
    CHECK_THROWS_AS(remote.classify(torch::zeros({1, 3, 8, 8}), OutputMode::Probability), TransportError);
}

TEST_CASE("target checkpoints round trip through the local oracle")
{
    OracleConfig oc;
    auto oracle = open_local_oracle(shared_target(), oc);
    nlohmann::json meta;
    auto net = load_target_checkpoint(shared_target(), &meta);
    const auto batch = generate_toy_dataset({10, 32, 2, 9});
    const auto out = oracle->query(batch, Stage::Eval);
    const auto logits = predict_logits(*net, batch.pixels());
    for (std::int64_t i = 0; i < batch.size(); ++i)
        CHECK(out[static_cast<std::size_t>(i)].label() == logits[i].argmax().item<std::int64_t>());
    CHECK(meta.contains("train_indices"));
}
