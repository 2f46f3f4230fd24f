#include <doctest.h>

#include <fstream>

#include "../support.hpp"

using namespace latentsub;
using namespace latentsub::testing;

namespace {

/// Oracle over one pixel: label 0 when the pixel is above 0.5, label 1 otherwise.
std::shared_ptr<MeteredOracle> threshold_oracle()
{
    auto net = std::make_shared<LinearNet>(1, 2);
    {
        torch::NoGradGuard guard;
        net->weight.copy_(torch::tensor({{1.0f}, {-1.0f}}));
        net->bias.copy_(torch::tensor({-0.5f, 0.5f}));
    }
    return std::make_shared<MeteredOracle>(std::make_shared<LocalClassifier>(net), OracleConfig{});
}

AdversarialBatch pixel_batch(std::vector<float> clean, std::vector<float> adv, std::vector<std::int64_t> labels)
{
    const auto n = static_cast<std::int64_t>(clean.size());
    AdversarialBatch b{ImageBatch(torch::tensor(clean).view({n, 1, 1, 1}), labels, 2),
                       ImageBatch(torch::tensor(adv).view({n, 1, 1, 1}), labels, 2),
                       {},
                       {},
                       {},
                       {},
                       {}};
    std::tie(b.l2, b.linf) = perturbation_norms(b.adversarials.pixels(), b.originals.pixels());
    return b;
}

} // namespace

TEST_CASE("attack success rate counts eligible label flips")
{
    auto oracle = threshold_oracle();
    const auto advs = pixel_batch({0.8f, 0.8f, 0.8f, 0.8f}, {0.2f, 0.3f, 0.1f, 0.7f}, {0, 0, 0, 0});
    const auto e = evaluate_asr(*oracle, advs, AttackGoal::non_target());
    CHECK(e.n_suc == 3);
    CHECK(e.n_all == 4);
    CHECK(*e.asr == 0.75);
    CHECK(e.method == "pgd-linf");
    // evaluation queries are metered but never charged
    CHECK(oracle->snapshot_ledger().n_eval == 8);
    CHECK(oracle->snapshot_ledger().attack_queries() == 0);

    const auto same = pixel_batch({0.8f, 0.2f}, {0.8f, 0.2f}, {0, 1});
    CHECK(*evaluate_asr(*oracle, same, AttackGoal::non_target()).asr == 0.0);

    // misclassified originals are not eligible; with none left the rate is undefined
    const auto wrong = pixel_batch({0.8f, 0.9f}, {0.1f, 0.1f}, {1, 1});
    const auto none = evaluate_asr(*oracle, wrong, AttackGoal::non_target());
    CHECK(none.n_all == 0);
    CHECK_FALSE(none.asr.has_value());
    CHECK(none.to_json()["asr"].is_null());

    // targeted: samples already in the target class are skipped
    const auto mixed = pixel_batch({0.8f, 0.8f, 0.2f}, {0.2f, 0.6f, 0.2f}, {0, 0, 1});
    const auto t = evaluate_asr(*oracle, mixed, AttackGoal::target(1));
    CHECK(t.n_all == 2);
    CHECK(t.n_suc == 1);
}

TEST_CASE("sectioned config files parse and reject unknown keys")
{
    const std::string text = R"(
# toy experiment
[experiment]
name = "probe"
seed = 4
budget = 5000
mode = label_only

[dataset]
num_classes = 10
samples_per_class = 30

[stage1]
codebook_size = 5
u = 0.002

[attack.fgsm]
method = fgsm
epsilon = 0.03
)";
    const auto cfg = parse_experiment_config(text);
    CHECK(cfg.name == "probe");
    CHECK(cfg.seed == 4);
    CHECK(cfg.budget == 5000);
    CHECK(cfg.mode == OutputMode::LabelOnly);
    CHECK(cfg.dataset.samples_per_class == 30);
    CHECK(cfg.codebook_size == 5);
    CHECK(cfg.membership.u == 0.002);
    REQUIRE(cfg.attacks.size() == 1);
    CHECK(cfg.attacks[0].method == AttackMethod::Fgsm);
    CHECK(cfg.attacks[0].steps == 1);
    CHECK(ExperimentConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());

    CHECK_THROWS_AS(parse_experiment_config("[experiment]\nbudgett = 5\n"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config("[mystery]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config("[dataset]\nnum_classes = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config("[experiment]\nbudget = lots\n"), ConfigError);

    TempDir dir("config");
    std::ofstream(dir / "c.ini") << text;
    CHECK(load_experiment_config(dir / "c.ini").to_json() == cfg.to_json());
    CHECK_THROWS_AS(load_experiment_config(dir / "missing.ini"), IoError);
}

TEST_CASE("a single-class dataset is rejected")
{
    auto cfg = default_experiment();
    cfg.dataset.num_classes = 1;
    CHECK_THROWS(cfg.validate());
    CHECK_THROWS(generate_toy_dataset({1, 32, 4, 0}));
}

TEST_CASE("target training is reproducible and records its member rows")
{
    TempDir dir("target");
    const auto cfg = small_experiment();
    const auto a = train_target(cfg.dataset, cfg.target, 21, dir / "a");
    const auto b = train_target(cfg.dataset, cfg.target, 21, dir / "b");
    CHECK(a.checkpoint_digest == b.checkpoint_digest);
    CHECK(a.train_indices == b.train_indices);
    CHECK(a.train_size + a.validation_size == cfg.dataset.num_classes * cfg.dataset.samples_per_class);
    CHECK(a.train_accuracy > 0.8);

    nlohmann::json meta;
    load_target_checkpoint(dir / "a", &meta);
    const auto members = target_training_data(meta);
    CHECK(members.size() == a.train_size);
}

TEST_CASE("run reports render percentages and norms")
{
    TempDir dir("report");
    RunSummary s;
    s.name = "fmt";
    s.status = "ok";
    s.arm = "lca";
    s.mode = "probability";
    s.final_agreement = 0.5;
    AsrEntry e;
    e.method = "pgd-linf";
    e.n_suc = 9029;
    e.n_all = 10000;
    e.asr = 0.9029;
    e.mean_l2 = 0.91;
    e.mean_linf = 0.0314;
    s.report.entries.push_back(e);
    s.ledger.n_stage1 = 389;
    s.ledger.n_stage2 = 499611;
    {
        std::ofstream out(dir / "report.json");
        out << s.to_json().dump();
    }
    const auto md = render_report(dir.path());
    CHECK(md.find("90.29") != std::string::npos);
    CHECK(md.find("| 0.91 |") != std::string::npos);
    CHECK(md.find("N_QB = 500000") != std::string::npos);
    CHECK(std::filesystem::exists(dir / "report.md"));
    CHECK(RunSummary::from_json(s.to_json()).to_json() == s.to_json());

    TempDir empty("report_empty");
    CHECK_THROWS_AS(render_report(empty.path()), IoError);
}

TEST_CASE("a small end-to-end run stays within budget and writes its artifacts")
{
    TempDir dir("pipeline");
    auto cfg = small_experiment();
    cfg.target_checkpoint = shared_target();
    const auto s = run_pipeline(cfg, dir / "run");
    CHECK(s.status == "ok");
    CHECK(s.ledger.attack_queries() <= cfg.budget);
    CHECK(s.ledger.n_stage1 > 0);
    CHECK(s.ledger.n_stage2 > 0);
    CHECK(s.recorded_images == s.ledger.total());
    CHECK(s.lca_invocations > 0);
    REQUIRE(s.report.entries.size() == 1);
    CHECK(s.report.entries[0].n_all > 0);
    for (const char* f : {"config.json", "manifest.json", "report.json", "report.md", "metrics.jsonl",
                          "codebook/codebook.json", "asr_curve.svg"})
        CHECK_MESSAGE(std::filesystem::exists(dir / "run" / f), f);
    CHECK(s.curve.size() >= 2);
}
