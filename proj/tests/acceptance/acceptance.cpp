// Acceptance checks for the toy stack. Prints one PASS/FAIL line per
// criterion and exits non-zero when any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <algorithm>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "latentsub/harness.hpp"
#include "latentsub/lca.hpp"

using namespace latentsub;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void progress(const std::string& what) { std::cerr << "[acceptance] " << what << std::endl; }

std::string fmt(const char* pattern, double a)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, a);
    return buf;
}

std::string pct(const std::optional<double>& v) { return v ? fmt("%.2f", 100.0 * *v) : std::string("n/a"); }

double relative_error(const torch::Tensor& a, const torch::Tensor& b)
{
    return (a - b).norm().item<double>() / std::max(b.norm().item<double>(), 1e-12);
}

/// Everything the heavy criteria share: one target, one backend, the preset runs.
struct Shared {
    std::filesystem::path root;
    ExperimentConfig base;
    double setup_seconds = 0.0;
    std::optional<PresetResult> ablation;
    std::optional<PresetResult> parity;
    std::optional<PresetResult> sweep;
};

// ---- 1: equivariance -----------------------------------------------------------------

Outcome equivariance(Shared& shared)
{
    const auto start = Clock::now();
    const auto images = generate_toy_dataset({10, 32, 10, 401}, ToyStyle::Prior);
    const std::vector<std::pair<std::int64_t, std::int64_t>> shifts = {{2, 0}, {0, 2}, {2, 2}, {-4, 6}, {6, -2}};

    IdentityBackend identity(toy_class_space(10), 32, 2);
    bool exact = true;
    for (const auto& [dy, dx] : shifts)
        exact = exact && check_equivariance(identity, images, dy, dx).exact;

    auto backend = prepare_backend(shared.base, toy_class_space(10));
    double worst_mean = 1.0, worst_image = 1.0;
    for (const auto& [dy, dx] : shifts) {
        const auto r = check_equivariance(*backend, images, dy, dx);
        worst_mean = std::min(worst_mean, r.interior_cosine);
        worst_image = std::min(worst_image, r.min_interior_cosine);
    }
    Outcome o;
    o.seconds = since(start);
    o.pass = exact && worst_mean >= 0.95 && o.seconds < 60.0;
    o.detail = std::string("identity exact=") + (exact ? "yes" : "no") + ", autoencoder interior cosine " +
               fmt("%.4f", worst_mean) + " (worst shift mean, >= 0.95; worst single image " +
               fmt("%.4f", worst_image) + ") over 100 images";
    return o;
}

// ---- 2: augmentation plans -----------------------------------------------------------

Outcome plan_properties()
{
    const auto start = Clock::now();
    IdentityBackend backend(toy_class_space(10), 32, 2);
    Codebook book(10, 10, backend.fingerprint(), backend.descriptor());
    for (auto& code : backend.encode(generate_toy_dataset({10, 32, 10, 402})))
        book.append(std::move(code));
    book.freeze();

    std::int64_t repeated = 0, bad_length = 0, cross_class = 0, replay_mismatch = 0, multi = 0;
    for (std::uint64_t s = 0; s < 10000; ++s) {
        const auto cls = static_cast<std::int64_t>(s % 10);
        const auto plan = lca::sample_plan(book, cls, derive_seed(402, s));
        for (const auto& chain : plan.chains) {
            std::set<lca::SingleKind> kinds;
            for (const auto& op : chain.ops)
                kinds.insert(op.kind);
            repeated += kinds.size() != chain.ops.size();
            bad_length += chain.ops.empty() || chain.ops.size() > 10;
        }
        if (plan.branch == lca::Branch::Multi) {
            ++multi;
            const auto& a = book.entry(cls, plan.chains.at(0).slot);
            const auto& b = book.entry(cls, plan.chains.at(1).slot);
            cross_class += a.class_index != cls || b.class_index != cls || plan.chains[0].slot == plan.chains[1].slot;
        }
        const auto first = lca::execute_plan(plan, book);
        cross_class += first.class_index != cls;
        const auto again = lca::execute_plan(lca::AugmentationPlan::from_json(plan.to_json()), book);
        const auto resampled = lca::sample_plan(book, cls, derive_seed(402, s));
        replay_mismatch += !torch::equal(first.values, again.values) || resampled.to_json() != plan.to_json();
    }
    Outcome o;
    o.seconds = since(start);
    o.pass = repeated == 0 && bad_length == 0 && cross_class == 0 && replay_mismatch == 0 && o.seconds < 60.0;
    o.detail = "10000 plans (" + std::to_string(multi) + " multi): repeated kinds " + std::to_string(repeated) +
               ", chain length outside [1,10] " + std::to_string(bad_length) + ", cross-class " +
               std::to_string(cross_class) + ", replay mismatches " + std::to_string(replay_mismatch);
    return o;
}

// ---- 3: query ledger -------------------------------------------------------------------

Outcome ledger_exactness(Shared& shared)
{
    const auto start = Clock::now();
    auto oracle = open_local_oracle(shared.base.target_checkpoint, {});
    RecordingOracle recorder(*oracle);
    const std::int64_t g = 57;
    IdentityBackend backend(toy_class_space(10), 32, 2);
    std::vector<ImageBatch> parts;
    for (std::int64_t i = 0; i < g; ++i)
        parts.push_back(backend.text_to_images(i % 10, 1, derive_seed(403, i)));
    filter_members(ImageBatch::concat(parts), recorder, shared.base.membership);
    const auto l = oracle->snapshot_ledger();
    bool ok = l.n_stage1 == 2 * g && recorder.images_forwarded(Stage::Stage1) == 2 * g && l.n_stage2 == 0;
    std::string detail = "stage-1 filter over G=" + std::to_string(g) + " issued " + std::to_string(l.n_stage1) +
                         " queries (recorded " + std::to_string(recorder.images_forwarded(Stage::Stage1)) + ")";

    std::int64_t runs = 0, mismatched = 0;
    auto check_row = [&](const PresetResult& preset) {
        for (const auto& row : preset.rows)
            for (const auto& r : row.runs) {
                ++runs;
                const bool sum_ok = r.report.n_qb() == r.ledger.n_stage1 + r.ledger.n_stage2;
                const bool recorded_ok = r.recorded_images == r.ledger.total();
                const bool stage1_ok = r.arm == to_string(DataArm::PromptBaseline) ? r.ledger.n_stage1 == 0
                                                                   : r.ledger.n_stage1 == 2 * r.stage1_candidates;
                mismatched += !(sum_ok && recorded_ok && stage1_ok && r.ledger.attack_queries() <= shared.base.budget);
            }
    };
    for (const auto* p : {&shared.ablation, &shared.parity, &shared.sweep})
        if (*p)
            check_row(**p);
    ok = ok && runs > 0 && mismatched == 0;
    detail += "; full runs checked " + std::to_string(runs) + ", ledger/recorder mismatches " +
              std::to_string(mismatched);
    Outcome o{ok, detail, since(start)};
    return o;
}

// ---- 4: loss and gradients -------------------------------------------------------------

Outcome loss_checks()
{
    const auto start = Clock::now();
    torch::manual_seed(404);
    const std::int64_t n = 10;
    const LossConfig cfg{1.0, 1.0, false};

    auto probs = torch::softmax(torch::randn({4, n}, torch::kFloat64), 1);
    std::vector<OracleOutput> outs;
    for (std::int64_t i = 0; i < 4; ++i) {
        std::vector<double> row(static_cast<std::size_t>(n));
        for (std::int64_t k = 0; k < n; ++k)
            row[static_cast<std::size_t>(k)] = probs[i][k].item<double>();
        outs.push_back(OracleOutput::from_probabilities(row));
    }
    const auto teacher = TeacherTargets::from_outputs(outs, n);

    // with respect to the logits
    auto logits = torch::randn({4, n}, torch::kFloat64).requires_grad_(true);
    substitute_loss(logits, teacher, cfg).backward();
    const auto analytic = logits.grad().clone();
    auto numeric = torch::zeros_like(analytic);
    const double h = 1e-6;
    {
        torch::NoGradGuard guard;
        auto base = logits.detach().clone();
        for (std::int64_t i = 0; i < base.numel(); ++i) {
            auto up = base.clone(), down = base.clone();
            up.view(-1)[i] += h;
            down.view(-1)[i] -= h;
            numeric.view(-1)[i] = (substitute_loss(up, teacher, cfg).item<double>() -
                                   substitute_loss(down, teacher, cfg).item<double>()) /
                                  (2 * h);
        }
    }
    const double logit_err = relative_error(analytic, numeric);

    // with respect to the substitute's per-block gains, through the whole network
    SubstituteNet net(SubstituteSpec{});
    net->to(torch::kFloat64);
    net->eval();
    const auto images = generate_toy_dataset({10, 32, 1, 404}).pixels().slice(0, 0, 4).to(torch::kFloat64);
    auto objective = [&] { return substitute_loss(net->forward(images), teacher, cfg); };
    net->zero_grad();
    objective().backward();
    double gain_err = 0.0;
    for (auto& block : net->blocks()) {
        for (auto* gain : {&block->alpha, &block->beta}) {
            const double a = gain->grad().item<double>();
            double up = 0.0, down = 0.0;
            {
                torch::NoGradGuard guard;
                const double v = gain->item<double>();
                gain->fill_(v + h);
                up = objective().item<double>();
                gain->fill_(v - h);
                down = objective().item<double>();
                gain->fill_(v);
            }
            const double num = (up - down) / (2 * h);
            gain_err = std::max(gain_err, std::abs(a - num) / std::max(std::abs(num), 1e-8));
        }
    }

    // one-hot teacher matched exactly by the substitute
    auto onehot_logits = torch::full({4, n}, -500.0, torch::kFloat64);
    std::vector<OracleOutput> onehot;
    for (std::int64_t i = 0; i < 4; ++i) {
        onehot_logits[i][i] = 500.0;
        std::vector<double> row(static_cast<std::size_t>(n), 0.0);
        row[static_cast<std::size_t>(i)] = 1.0;
        onehot.push_back(OracleOutput::from_probabilities(row));
    }
    const double zero = substitute_loss(onehot_logits, TeacherTargets::from_outputs(onehot, n), cfg).item<double>();

    // label-only forces lambda2 to zero, and a nonzero lambda2 is rejected outright
    const auto forced = cfg.for_mode(OutputMode::LabelOnly);
    std::vector<OracleOutput> labels;
    for (const auto& o : outs)
        labels.push_back(o.label_only());
    bool rejected = false;
    try {
        substitute_loss(logits.detach(), TeacherTargets::from_outputs(labels, n), cfg);
    } catch (const ConfigError&) {
        rejected = true;
    }

    Outcome o;
    o.seconds = since(start);
    o.pass = logit_err <= 1e-4 && gain_err <= 1e-4 && zero == 0.0 && forced.lambda2 == 0.0 && forced.hard_labels &&
             rejected;
    o.detail = "finite-difference relative error: logits " + fmt("%.2e", logit_err) + ", block gains " +
               fmt("%.2e", gain_err) + " (<= 1e-4); one-hot loss " + fmt("%.1e", zero) +
               "; label-only lambda2 = " + fmt("%.0f", forced.lambda2) + (rejected ? ", lambda2 > 0 rejected" : "");
    return o;
}

// ---- 5: membership inference premise ---------------------------------------------------

Outcome membership_premise(const std::filesystem::path& dir)
{
    const auto start = Clock::now();
    std::vector<double> precisions;
    std::ostringstream per_seed;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        // A deliberately overfit target: few images of the broad style, many epochs.
        // It memorizes its training set and stays unsure about fresh draws.
        ToyDatasetSpec data{10, 32, 20, 500 + seed};
        TargetRecipe recipe;
        recipe.epochs = 100;
        recipe.batch_size = 32;
        recipe.style = ToyStyle::Prior;
        const auto stem = dir / ("overfit_" + std::to_string(seed)) / "target";
        nlohmann::json meta;
        if (!std::filesystem::exists(stem.string() + ".json"))
            train_target(data, recipe, derive_seed(seed, 0x0f), stem);
        load_target_checkpoint(stem, &meta);
        const auto members = target_training_data(meta);

        // 50 members and 50 fresh images from the same distribution
        std::vector<std::int64_t> pick;
        std::mt19937_64 rng(derive_seed(seed, 0x5e1));
        std::vector<std::int64_t> all(static_cast<std::size_t>(members.size()));
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng);
        pick.assign(all.begin(), all.begin() + 50);
        const auto in = members.select(pick);
        auto fresh = generate_toy_dataset({10, 32, 5, 9000 + seed}, ToyStyle::Prior);
        const auto candidates = ImageBatch::concat(std::vector<ImageBatch>{in, fresh});

        auto oracle = open_local_oracle(stem, {});
        MembershipConfig mc;
        mc.sigma = 0.03;
        mc.seed = derive_seed(seed, 0x5e2);
        const auto r = filter_members(candidates, *oracle, mc);
        std::int64_t true_pos = 0;
        for (auto k : r.kept)
            true_pos += k < 50;
        const double precision =
            r.kept.empty() ? 0.0 : static_cast<double>(true_pos) / static_cast<double>(r.kept.size());
        precisions.push_back(precision);
        per_seed << (seed ? ", " : "") << fmt("%.3f", precision) << " (" << r.kept.size() << " kept)";
    }
    std::vector<double> sorted = precisions;
    std::sort(sorted.begin(), sorted.end());
    const double med = sorted[2];
    Outcome o;
    o.seconds = since(start);
    o.pass = med > 0.6 && o.seconds < 300.0;
    o.detail = "median precision " + fmt("%.3f", med) + " (> 0.6) at sigma=0.03, u=" +
               fmt("%g", MembershipConfig{}.u) + "; per seed " + per_seed.str();
    return o;
}

// ---- 6: attacks --------------------------------------------------------------------------

Outcome attack_suite(Shared& shared)
{
    const auto start = Clock::now();
    std::int64_t batches = 0, violations = 0;
    double worst_excess = 0.0;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(shared.root)) {
        const auto p = entry.path();
        if (p.parent_path().filename() != "adversarial" || p.extension() != ".json" ||
            p.string().find(".stats.") != std::string::npos)
            continue;
        const auto advs = AdversarialBatch::load(archive_stem(p));
        ++batches;
        const auto [l2, linf] = perturbation_norms(advs.adversarials.pixels(), advs.originals.pixels());
        const auto& norms = advs.config.norm == Norm::Linf ? linf : l2;
        for (double v : norms) {
            worst_excess = std::max(worst_excess, v - advs.config.epsilon);
            violations += v > advs.config.epsilon + 1e-6;
        }
    }

    const auto& lca_row = shared.ablation->rows.back();
    auto substitute = load_substitute(lca_row.runs.front().run_dir / "substitute");
    const auto eval = evaluation_set(shared.base);
    const auto fgsm = attack(*substitute, eval, AttackConfig::fgsm(8.0 / 255.0));
    AttackConfig bim;
    bim.method = AttackMethod::Bim;
    bim.epsilon = bim.alpha = 8.0 / 255.0;
    bim.steps = 1;
    const bool same = torch::equal(fgsm.adversarials.pixels(), attack(*substitute, eval, bim).adversarials.pixels());

    AttackConfig pgd;
    pgd.epsilon = 8.0 / 255.0;
    pgd.alpha = 2.0 / 255.0;
    pgd.steps = 10;
    const double fooled = fooling_rate(attack(*substitute, eval, pgd));

    Outcome o;
    o.seconds = since(start);
    o.pass = batches > 0 && violations == 0 && same && fooled >= 0.9;
    o.detail = std::to_string(batches) + " emitted batches, ball violations " + std::to_string(violations) +
               " (worst excess " + fmt("%.2e", std::max(0.0, worst_excess)) + "); FGSM == 1-step BIM: " +
               (same ? "bit-equal" : "DIFFERENT") + "; white-box PGD fooling rate on the substitute " +
               pct(fooled) + "% (>= 90)";
    return o;
}

// ---- 7-9: presets -----------------------------------------------------------------------

// Seconds between a run manifest's start and finish stamps, so that reused runs
// still report what they cost when they were computed.
double recorded_runtime(const std::filesystem::path& run_dir)
{
    std::ifstream in(run_dir / "manifest.json");
    const auto m = nlohmann::json::parse(in);
    auto stamp = [](const std::string& text) {
        std::tm tm{};
        std::istringstream(text) >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
        return static_cast<double>(timegm(&tm));
    };
    return stamp(m.at("finished_at").get<std::string>()) - stamp(m.at("started_at").get<std::string>());
}

Outcome ablation_ordering(Shared& shared)
{
    const auto& rows = shared.ablation->rows; // Baseline, w/o LCA, LCA
    const auto base = rows[0].median_asr(), members = rows[1].median_asr(), full = rows[2].median_asr();
    std::ostringstream per_run;
    for (const auto& row : rows) {
        per_run << " " << row.label << " [";
        for (std::size_t i = 0; i < row.runs.size(); ++i)
            per_run << (i ? " " : "") << pct(row.runs[i].report.entries.front().asr);
        per_run << "]";
    }
    Outcome o;
    o.seconds = 0.0;
    for (const auto& row : rows)
        for (const auto& r : row.runs)
            o.seconds += recorded_runtime(r.run_dir);
    o.pass = base && members && full && *full > *members && *members > *base && *full - *base >= 0.05 &&
             o.seconds < 1800.0;
    o.detail = "median ASR LCA " + pct(full) + " / w/o LCA " + pct(members) + " / baseline " + pct(base) +
               " (need LCA > w/o > baseline, LCA - baseline >= 5 points, 9 runs < 1800 s);" + per_run.str();
    return o;
}

Outcome label_only_parity(Shared& shared)
{
    const auto& rows = shared.parity->rows;
    const auto prob = rows[0].median_asr(), label = rows[1].median_asr();
    bool completed = true;
    for (const auto& r : rows[1].runs)
        completed = completed && r.status == "ok" && r.mode == std::string(to_string(OutputMode::LabelOnly));
    Outcome o;
    o.pass = completed && prob && label && std::abs(*prob - *label) <= 0.15;
    o.detail = std::string("label-only runs completed: ") + (completed ? "yes" : "no") + "; median ASR probability " +
               pct(prob) + " vs label-only " + pct(label) + " (gap " +
               (prob && label ? fmt("%.2f", 100.0 * std::abs(*prob - *label)) : std::string("n/a")) +
               " points, <= 15)";
    return o;
}

Outcome codebook_sweep(Shared& shared)
{
    const auto& rows = shared.sweep->rows;
    bool completed = true, monotone = true;
    std::ostringstream curve;
    std::int64_t last = -1;
    for (const auto& row : rows) {
        const auto& r = row.runs.front();
        completed = completed && r.status == "ok";
        monotone = monotone && r.ledger.n_stage1 > last;
        last = r.ledger.n_stage1;
        curve << " " << row.label << ": ASR " << pct(row.median_asr()) << "%, stage-1 " << r.ledger.n_stage1;
    }
    const bool plotted = std::filesystem::exists(shared.root / "sweep" / "asr_vs_m.svg");
    Outcome o;
    o.pass = completed && monotone && plotted;
    o.detail = std::string("completed ") + (completed ? "yes" : "no") + ", stage-1 monotone " +
               (monotone ? "yes" : "no") + ", curve written " + (plotted ? "yes" : "no") + ";" + curve.str();
    return o;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance checks"};
    std::filesystem::path work = "acceptance_work";
    bool fresh = false;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    app.add_option("--work-dir", work, "Directory for trained models and runs (reused between invocations)");
    app.add_flag("--fresh", fresh, "Delete the work directory first");
    app.add_option("--seeds", seeds, "Seeds for the ablation and parity presets")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    try {
        if (fresh)
            std::filesystem::remove_all(work);
        std::filesystem::create_directories(work);
        torch::set_num_threads(1);

        Shared shared;
        shared.root = work;
        shared.base = default_experiment();
        shared.base.name = "acceptance";
        const auto t = Clock::now();
        progress("preparing the shared target and generator backend");
        prepare_shared_artifacts(shared.base, work);
        shared.setup_seconds = since(t);

        progress("ablation preset (baseline, w/o LCA, LCA)");
        shared.ablation = run_ablation_lca(shared.base, seeds, work / "ablation");

        progress("label-only runs");
        PresetResult parity{"label-only-parity", {}};
        parity.rows.push_back({std::string(to_string(OutputMode::Probability)), std::nullopt, shared.ablation->rows.back().runs});
        const std::string label_only(to_string(OutputMode::LabelOnly));
        PresetRow label_row{label_only, std::nullopt, {}};
        for (const auto seed : seeds) {
            auto c = shared.base;
            c.seed = seed;
            c.mode = OutputMode::LabelOnly;
            c.membership.mode = OutputMode::LabelOnly;
            c.train.arm = DataArm::Lca;
            c.name = shared.base.name + "-" + label_only + "-" + std::to_string(seed);
            label_row.runs.push_back(reuse_or_run(c, work / "parity" / label_only / ("seed_" + std::to_string(seed))));
        }
        parity.rows.push_back(std::move(label_row));
        write_preset_report(parity, work / "parity");
        shared.parity = parity;

        progress("codebook sweep");
        shared.sweep = run_codebook_sweep(shared.base, {2, 5, 10, 20}, work / "sweep");

        progress("property checks");
        const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
            {"equivariance", [&] { return equivariance(shared); }},
            {"augmentation plans", [] { return plan_properties(); }},
            {"query ledger", [&] { return ledger_exactness(shared); }},
            {"loss and gradients", [] { return loss_checks(); }},
            {"membership inference premise", [&] { return membership_premise(work / "membership"); }},
            {"attack suite", [&] { return attack_suite(shared); }},
            {"ablation ordering", [&] { return ablation_ordering(shared); }},
            {"label-only parity", [&] { return label_only_parity(shared); }},
            {"codebook sweep", [&] { return codebook_sweep(shared); }},
        };
        std::vector<std::string> lines;
        int failures = 0;
        for (std::size_t i = 0; i < criteria.size(); ++i) {
            progress("criterion " + std::to_string(i + 1));
            Outcome o;
            try {
                o = criteria[i].second();
            } catch (const std::exception& e) {
                o = {false, std::string("error: ") + e.what(), 0.0};
            }
            failures += !o.pass;
            std::ostringstream line;
            line << (o.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " (" << criteria[i].first
                 << "): " << o.detail << " [" << fmt("%.1f", o.seconds) << " s]";
            lines.push_back(line.str());
        }
        std::cout << "shared setup " << fmt("%.1f", shared.setup_seconds) << " s, work dir " << work.string() << "\n";
        for (const auto& l : lines)
            std::cout << l << "\n";
        std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
                  << std::endl;
        return failures ? 1 : 0;
    } catch (const std::exception& e) {
        std::cerr << "acceptance aborted: " << e.what() << std::endl;
        return 2;
    }
}
