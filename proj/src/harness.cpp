#include "latentsub/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <torch/version.h>

#include "latentsub/archive.hpp"
#include "latentsub/image_io.hpp"
#include "latentsub/lca.hpp"

#ifndef LATENTSUB_VERSION
#define LATENTSUB_VERSION "0.0.0"
#endif

namespace latentsub {

using Json = nlohmann::json;

namespace {

std::string utc_now()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

void write_json(const Json& j, const std::filesystem::path& path)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

Json read_json(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot read " + path.string());
    return Json::parse(in);
}

bool archive_exists(const std::filesystem::path& stem)
{
    return !stem.empty() && std::filesystem::exists(archive_stem(stem).string() + ".json");
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(); }

std::optional<double> optional_from(const Json& j)
{
    if (j.is_null())
        return std::nullopt;
    return j.get<double>();
}

std::optional<double> median(std::vector<double> v)
{
    if (v.empty())
        return std::nullopt;
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string percent(const std::optional<double>& v)
{
    if (!v)
        return "n/a";
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * *v;
    return s.str();
}

Json versions()
{
    return {{"latentsub", LATENTSUB_VERSION},
            {"torch", std::to_string(TORCH_VERSION_MAJOR) + "." + std::to_string(TORCH_VERSION_MINOR) + "." +
                          std::to_string(TORCH_VERSION_PATCH)},
            {"compiler", __VERSION__}};
}

} // namespace

// ---- target training ----------------------------------------------------------

nlohmann::json TargetTrainReport::to_json() const
{
    return {{"train_accuracy", train_accuracy},
            {"validation_accuracy", validation_accuracy},
            {"train_size", train_size},
            {"validation_size", validation_size},
            {"checkpoint_digest", checkpoint_digest}};
}

TargetTrainReport train_target(const ToyDatasetSpec& dataset, const TargetRecipe& recipe, std::uint64_t seed,
                               const std::filesystem::path& stem)
{
    if (dataset.num_classes < 2)
        throw InvalidArgument("a target needs at least 2 classes");
    dataset.validate();
    if (recipe.epochs < 1 || recipe.batch_size < 1)
        throw ConfigError("target recipe needs positive epochs and batch size");
    const auto data = generate_toy_dataset(dataset, recipe.style);
    const auto total = data.size();

    std::vector<std::int64_t> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 split_rng(derive_seed(seed, 0x5b1));
    std::shuffle(order.begin(), order.end(), split_rng);
    const auto n_val = std::clamp<std::int64_t>(
        std::llround(recipe.validation_fraction * static_cast<double>(total)), 1, total - 1);
    std::vector<std::int64_t> val_idx(order.begin(), order.begin() + n_val);
    std::vector<std::int64_t> train_idx(order.begin() + n_val, order.end());
    std::sort(train_idx.begin(), train_idx.end());
    const auto train = data.select(train_idx);
    const auto val = data.select(val_idx);

    auto arch = recipe.arch;
    arch.num_classes = dataset.num_classes;
    arch.image_size = dataset.image_size;
    seed_torch(derive_seed(seed, 0x7a9));
    TargetNet net(arch);
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(recipe.learning_rate));
    const auto labels = torch::tensor(*train.labels(), torch::kInt64);
    for (std::int64_t epoch = 0; epoch < recipe.epochs; ++epoch) {
        net->train();
        std::vector<std::int64_t> perm(static_cast<std::size_t>(train.size()));
        std::iota(perm.begin(), perm.end(), 0);
        std::mt19937_64 rng(derive_seed(seed, 0xe90c, static_cast<std::uint64_t>(epoch)));
        std::shuffle(perm.begin(), perm.end(), rng);
        const auto perm_t = torch::tensor(perm, torch::kInt64);
        for (std::int64_t b = 0; b < train.size(); b += recipe.batch_size) {
            const auto idx = perm_t.slice(0, b, std::min(b + recipe.batch_size, train.size()));
            const auto loss =
                torch::nn::functional::cross_entropy(net->forward(train.pixels().index_select(0, idx)),
                                                     labels.index_select(0, idx));
            if (!std::isfinite(loss.item<double>()))
                throw TrainingDiverged("target training diverged in epoch " + std::to_string(epoch));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    net->eval();

    TargetTrainReport report;
    report.train_size = train.size();
    report.validation_size = val.size();
    report.train_accuracy = label_agreement(*net, train, *train.labels());
    report.validation_accuracy = label_agreement(*net, val, *val.labels());
    report.train_indices = train_idx;

    if (stem.has_parent_path())
        std::filesystem::create_directories(stem.parent_path());
    const Json meta = {{"dataset",
                        {{"num_classes", dataset.num_classes},
                         {"image_size", dataset.image_size},
                         {"samples_per_class", dataset.samples_per_class},
                         {"seed", dataset.seed},
                         {"style", recipe.style == ToyStyle::Private ? "private" : "prior"}}},
                       {"recipe", recipe.to_json()},
                       {"seed", seed},
                       {"train_indices", train_idx},
                       {"train_accuracy", report.train_accuracy},
                       {"validation_accuracy", report.validation_accuracy}};
    save_target_checkpoint(net, meta, stem);
    report.checkpoint_digest = file_digest(archive_stem(stem).string() + ".bin");
    return report;
}

ImageBatch target_training_data(const nlohmann::json& meta)
{
    const auto& d = meta.at("dataset");
    ToyDatasetSpec spec;
    spec.num_classes = d.at("num_classes").get<std::int64_t>();
    spec.image_size = d.at("image_size").get<std::int64_t>();
    spec.samples_per_class = d.at("samples_per_class").get<std::int64_t>();
    spec.seed = d.at("seed").get<std::uint64_t>();
    const auto style = d.value("style", std::string("private")) == "prior" ? ToyStyle::Prior : ToyStyle::Private;
    const auto idx = meta.at("train_indices").get<std::vector<std::int64_t>>();
    return generate_toy_dataset(spec, style).select(idx);
}

// ---- ASR ------------------------------------------------------------------------

nlohmann::json AsrEntry::to_json() const
{
    return {{"method", method},     {"n_suc", n_suc},         {"n_all", n_all},
            {"asr", optional_json(asr)}, {"mean_l2", mean_l2}, {"mean_linf", mean_linf}};
}

nlohmann::json AsrReport::to_json() const
{
    Json entries_json = Json::array();
    for (const auto& e : entries)
        entries_json.push_back(e.to_json());
    return {{"goal", goal.to_json()}, {"entries", entries_json}, {"ledger", ledger.to_json()}, {"n_qb", n_qb()}};
}

namespace {

AsrEntry asr_entry_from_json(const Json& j)
{
    AsrEntry e;
    e.method = j.at("method").get<std::string>();
    e.n_suc = j.at("n_suc").get<std::int64_t>();
    e.n_all = j.at("n_all").get<std::int64_t>();
    e.asr = optional_from(j.at("asr"));
    e.mean_l2 = j.value("mean_l2", 0.0);
    e.mean_linf = j.value("mean_linf", 0.0);
    return e;
}

AsrReport asr_report_from_json(const Json& j)
{
    AsrReport r;
    r.goal = AttackGoal::from_json(j.at("goal"));
    for (const auto& e : j.at("entries"))
        r.entries.push_back(asr_entry_from_json(e));
    r.ledger = QueryLedger::from_json(j.at("ledger"));
    return r;
}

std::string method_label(const AttackConfig& a)
{
    return std::string(to_string(a.method)) + "-" + std::string(to_string(a.norm));
}

} // namespace

AsrEntry evaluate_asr(BlackBox& oracle, const AdversarialBatch& advs, const AttackGoal& goal)
{
    AsrEntry entry;
    entry.method = method_label(advs.config);
    const auto stats = perturbation_stats(advs);
    entry.mean_l2 = stats.mean_l2;
    entry.mean_linf = stats.mean_linf;
    if (advs.size() == 0)
        return entry;
    const auto clean = oracle.query(advs.originals, Stage::Eval);
    const auto adv = oracle.query(advs.adversarials, Stage::Eval);
    for (std::int64_t i = 0; i < advs.size(); ++i) {
        const auto c = clean[static_cast<std::size_t>(i)].label();
        const auto a = adv[static_cast<std::size_t>(i)].label();
        const auto truth = advs.originals.has_labels() ? advs.originals.label(i) : c;
        if (c != truth)
            continue;
        if (goal.kind == GoalKind::Target && truth == goal.target_class)
            continue;
        ++entry.n_all;
        const bool success = goal.kind == GoalKind::Target ? a == goal.target_class : a != c;
        entry.n_suc += success ? 1 : 0;
    }
    if (entry.n_all > 0)
        entry.asr = static_cast<double>(entry.n_suc) / static_cast<double>(entry.n_all);
    return entry;
}

std::vector<double> per_class_accuracy(ClassifierNet& net, const ImageBatch& batch,
                                       const std::vector<std::int64_t>& labels, std::int64_t num_classes)
{
    if (static_cast<std::int64_t>(labels.size()) != batch.size())
        throw ShapeMismatch("one reference label per image is required");
    std::vector<double> hits(static_cast<std::size_t>(num_classes), 0.0), counts(hits.size(), 0.0);
    if (batch.size() == 0)
        return hits;
    const auto pred = predict_logits(net, batch.pixels()).argmax(1).contiguous();
    const auto* p = pred.data_ptr<std::int64_t>();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        counts.at(c) += 1.0;
        hits[c] += p[i] == labels[i] ? 1.0 : 0.0;
    }
    for (std::size_t c = 0; c < hits.size(); ++c)
        hits[c] = counts[c] > 0 ? hits[c] / counts[c] : std::nan("");
    return hits;
}

// ---- pipeline building blocks -------------------------------------------------------

std::shared_ptr<MeteredOracle> prepare_oracle(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                                              nlohmann::json* target_meta)
{
    const auto stem = cfg.target_checkpoint.empty() ? run_dir / "target" / "model" : cfg.target_checkpoint;
    if (!archive_exists(stem))
        train_target(cfg.dataset, cfg.target, derive_seed(cfg.dataset.seed, 0x7a46e7), stem);
    Json meta;
    auto net = load_target_checkpoint(archive_stem(stem), &meta);
    if (net->num_classes() != cfg.dataset.num_classes)
        throw ConfigError("target checkpoint has " + std::to_string(net->num_classes()) + " classes, config says " +
                          std::to_string(cfg.dataset.num_classes));
    if (target_meta)
        *target_meta = meta;
    OracleConfig oc;
    oc.mode = cfg.mode;
    oc.transport = Transport::Local;
    oc.budget = cfg.budget;
    return std::make_shared<MeteredOracle>(std::make_shared<LocalClassifier>(net.ptr()), oc);
}

std::shared_ptr<GeneratorBackend> prepare_backend(const ExperimentConfig& cfg, const ClassSpace& classes)
{
    std::shared_ptr<GeneratorBackend> backend;
    if (cfg.backend.kind == BackendKind::Identity) {
        backend = std::make_shared<IdentityBackend>(classes, cfg.dataset.image_size, cfg.backend.stride);
    } else if (archive_exists(cfg.backend.checkpoint)) {
        backend = ConvAutoencoderBackend::load(archive_stem(cfg.backend.checkpoint));
    } else {
        auto spec = cfg.backend.autoencoder;
        spec.num_classes = classes.num_classes();
        spec.image_size = cfg.dataset.image_size;
        auto trained = ConvAutoencoderBackend::train(classes, spec, cfg.backend.training);
        if (!cfg.backend.checkpoint.empty())
            trained->save(cfg.backend.checkpoint);
        backend = trained;
    }
    if (backend->classes().names() != classes.names())
        throw ConfigError("generator backend was built for a different class space");
    backend->set_strength(cfg.backend.strength);
    return backend;
}

ImageBatch evaluation_set(const ExperimentConfig& cfg)
{
    ToyDatasetSpec spec = cfg.dataset;
    spec.samples_per_class = (cfg.eval_samples + spec.num_classes - 1) / spec.num_classes;
    spec.seed = derive_seed(cfg.dataset.seed, 0xe7a1);
    return generate_toy_dataset(spec, cfg.target.style).slice(0, cfg.eval_samples);
}

// ---- run summaries ----------------------------------------------------------------

nlohmann::json RunSummary::to_json() const
{
    Json curve_json = Json::array();
    for (const auto& p : curve)
        curve_json.push_back({{"step", p.step}, {"n_qb", p.n_qb}, {"asr", optional_json(p.asr)}});
    return {{"run_dir", run_dir.string()},
            {"status", status},
            {"name", name},
            {"seed", seed},
            {"arm", arm},
            {"mode", mode},
            {"codebook_size", codebook_size},
            {"ledger", ledger.to_json()},
            {"n_qb", ledger.attack_queries()},
            {"stage1_candidates", stage1_candidates},
            {"report", report.to_json()},
            {"curve", curve_json},
            {"final_agreement", final_agreement},
            {"lca_invocations", lca_invocations},
            {"recorded_images", recorded_images}};
}

RunSummary RunSummary::from_json(const nlohmann::json& j)
{
    RunSummary s;
    s.run_dir = j.at("run_dir").get<std::string>();
    s.status = j.at("status").get<std::string>();
    s.name = j.value("name", std::string());
    s.seed = j.value("seed", std::uint64_t{0});
    s.arm = j.value("arm", std::string());
    s.mode = j.value("mode", std::string());
    s.codebook_size = j.value("codebook_size", std::int64_t{0});
    s.ledger = QueryLedger::from_json(j.at("ledger"));
    s.stage1_candidates = j.value("stage1_candidates", std::int64_t{0});
    s.report = asr_report_from_json(j.at("report"));
    for (const auto& p : j.value("curve", Json::array()))
        s.curve.push_back({p.at("step").get<std::int64_t>(), p.at("n_qb").get<std::int64_t>(),
                           optional_from(p.at("asr"))});
    s.final_agreement = j.value("final_agreement", 0.0);
    s.lca_invocations = j.value("lca_invocations", std::uint64_t{0});
    s.recorded_images = j.value("recorded_images", std::int64_t{0});
    return s;
}

namespace {

void render_run_plots(const RunSummary& s, const std::filesystem::path& dir)
{
    Series curve{"ASR", {}, {}};
    for (const auto& p : s.curve)
        if (p.asr) {
            curve.x.push_back(static_cast<double>(p.n_qb));
            curve.y.push_back(100.0 * *p.asr);
        }
    write_line_chart({curve}, "ASR vs. query budget", "queries (N_QB)", "ASR (%)", dir / "asr_curve.svg");

    const auto metrics_path = dir / "metrics.jsonl";
    if (std::filesystem::exists(metrics_path)) {
        Series loss{"loss", {}, {}}, agree{"agreement", {}, {}};
        std::ifstream in(metrics_path);
        for (std::string line; std::getline(in, line);) {
            if (line.empty())
                continue;
            const auto m = Json::parse(line);
            const auto x = static_cast<double>(m.at("n1").get<std::int64_t>() + m.at("n2").get<std::int64_t>());
            loss.x.push_back(x);
            loss.y.push_back(m.at("loss").get<double>());
            agree.x.push_back(x);
            agree.y.push_back(m.at("agreement").get<double>());
        }
        write_line_chart({loss, agree}, "Substitute training", "queries (N_QB)", "value", dir / "training.svg");
    }
}

std::string run_markdown(const RunSummary& s)
{
    std::ostringstream md;
    md << "# Run `" << s.name << "`\n\n"
       << "- status: " << s.status << "\n"
       << "- arm: " << s.arm << ", mode: " << s.mode << ", seed: " << s.seed << ", M: " << s.codebook_size << "\n"
       << "- queries: stage 1 = " << s.ledger.n_stage1 << ", stage 2 = " << s.ledger.n_stage2
       << ", N_QB = " << s.ledger.attack_queries() << " (evaluation, not charged: " << s.ledger.n_eval << ")\n"
       << "- stage-1 candidates: " << s.stage1_candidates << "\n"
       << "- substitute/oracle agreement on the evaluation set: " << percent(s.final_agreement) << "%\n\n"
       << "| attack | goal | N_suc | N_all | ASR (%) | mean L2 | mean Linf |\n"
       << "|---|---|---|---|---|---|---|\n";
    for (const auto& e : s.report.entries)
        md << "| " << e.method << " | " << s.report.goal.describe() << " | " << e.n_suc << " | " << e.n_all << " | "
           << percent(e.asr) << " | " << std::setprecision(4) << e.mean_l2 << " | " << e.mean_linf << " |\n";
    return md.str();
}

struct StageTimer {
    Json& manifest;
    std::filesystem::path path;

    template <typename F>
    auto run(const std::string& name, F&& body)
    {
        const auto start = std::chrono::steady_clock::now();
        manifest["stages"].push_back({{"name", name}, {"status", "running"}});
        write_json(manifest, path);
        auto finish = [&](const char* status) {
            auto& entry = manifest["stages"].back();
            entry["status"] = status;
            entry["seconds"] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            write_json(manifest, path);
        };
        try {
            if constexpr (std::is_void_v<decltype(body())>) {
                body();
                finish("ok");
            } else {
                auto r = body();
                finish("ok");
                return r;
            }
        } catch (...) {
            finish("failed");
            throw;
        }
    }
};

} // namespace

RunSummary run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& run_dir)
{
    cfg.validate();
    std::filesystem::create_directories(run_dir);
    write_json(cfg.to_json(), run_dir / "config.json");
    Json manifest = {{"format", "latentsub.run"},
                     {"version", 1},
                     {"name", cfg.name},
                     {"status", "running"},
                     {"started_at", utc_now()},
                     {"seeds",
                      {{"experiment", cfg.seed},
                       {"dataset", cfg.dataset.seed},
                       {"membership", derive_seed(cfg.seed, 1)},
                       {"training", derive_seed(cfg.seed, 2)}}},
                     {"versions", versions()},
                     {"config", "config.json"},
                     {"stages", Json::array()},
                     {"artifacts", Json::array()}};
    const auto manifest_path = run_dir / "manifest.json";
    StageTimer timer{manifest, manifest_path};
    auto artifact = [&](const std::string& rel) { manifest["artifacts"].push_back(rel); };

    RunSummary summary;
    summary.run_dir = run_dir;
    summary.name = cfg.name;
    summary.seed = cfg.seed;
    summary.arm = std::string(to_string(cfg.train.arm));
    summary.mode = std::string(to_string(cfg.mode));
    summary.codebook_size = cfg.codebook_size;
    try {
        const auto classes = toy_class_space(cfg.dataset.num_classes);
        Json target_meta;
        auto oracle = timer.run("target", [&] { return prepare_oracle(cfg, run_dir, &target_meta); });
        manifest["target"] = {{"validation_accuracy", target_meta.value("validation_accuracy", 0.0)},
                              {"checkpoint", cfg.target_checkpoint.empty() ? "target/model"
                                                                           : cfg.target_checkpoint.string()}};
        auto generator = timer.run("backend", [&] { return prepare_backend(cfg, classes); });
        manifest["backend"] = {{"fingerprint", generator->fingerprint()}, {"strength", generator->strength()}};
        RecordingOracle recorder(*oracle);
        const auto lca_before = lca::invocation_count();

        MembershipConfig mc = cfg.membership;
        mc.mode = cfg.mode;
        mc.seed = derive_seed(cfg.seed, 1);
        auto codebook = timer.run("stage1", [&] {
            if (cfg.train.arm == DataArm::PromptBaseline) {
                Codebook empty(cfg.dataset.num_classes, cfg.codebook_size, generator->fingerprint(),
                               generator->descriptor());
                empty.freeze();
                return empty;
            }
            auto s1 = build_codebook(*generator, recorder, mc, cfg.codebook_size, cfg.max_candidates_per_class);
            summary.stage1_candidates = s1.generated();
            s1.codebook.save(run_dir / "codebook", {{"membership", mc.to_json()},
                                                    {"codebook_size", cfg.codebook_size},
                                                    {"max_candidates", cfg.max_candidates_per_class}});
            write_json(s1.summary(), run_dir / "stage1.json");
            artifact("codebook/codebook.json");
            artifact("stage1.json");
            return s1.codebook;
        });

        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.seed, 2);
        if (tc.checkpoint_every == 0 && cfg.curve_points > 0) {
            const auto remaining = cfg.budget - oracle->snapshot_ledger().attack_queries();
            auto steps = remaining / tc.batch_size;
            if (tc.max_steps)
                steps = std::min(steps, *tc.max_steps);
            tc.checkpoint_every = std::max<std::int64_t>(1, steps / cfg.curve_points);
        }
        const auto eval = evaluation_set(cfg);
        const auto& curve_attack = cfg.attacks.front();
        // Intermediate curve points use a fixed prefix of the evaluation set to keep them cheap.
        const auto curve_eval = eval.slice(0, std::min<std::int64_t>(eval.size(), 200));
        auto hook = [&](const TrainState& state, SubstituteNet& net) {
            const auto advs = attack(*net, curve_eval, curve_attack);
            const auto entry = evaluate_asr(recorder, advs, curve_attack.goal);
            summary.curve.push_back({state.step, state.ledger.attack_queries(), entry.asr});
        };
        auto trained = timer.run("stage2", [&] {
            return train_substitute(codebook, *generator, recorder, cfg.substitute, tc,
                                    {run_dir / "checkpoints", run_dir / "metrics.jsonl"}, {}, hook);
        });
        auto model = trained.model;
        save_substitute(model, {{"state", trained.state.to_json()}, {"config", tc.to_json()}}, run_dir / "substitute");
        artifact("substitute.json");
        artifact("metrics.jsonl");
        if (trained.state.step > 0) {
            auto preview = make_training_batch(codebook, *generator, tc, 1);
            write_image_grid(preview.slice(0, std::min<std::int64_t>(preview.size(), 32)), 8,
                             run_dir / "training_samples.png");
            artifact("training_samples.png");
        }
        summary.lca_invocations = lca::invocation_count() - lca_before;

        std::vector<AdversarialBatch> adversarial;
        timer.run("attack", [&] {
            for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
                adversarial.push_back(attack(*model, eval, cfg.attacks[i]));
                const auto rel = "adversarial/" + std::to_string(i) + "_" + method_label(cfg.attacks[i]);
                adversarial.back().save(run_dir / rel);
                write_json({{"config", cfg.attacks[i].to_json()},
                            {"mean_l2", perturbation_stats(adversarial.back()).mean_l2},
                            {"mean_linf", perturbation_stats(adversarial.back()).mean_linf},
                            {"substitute_fooling_rate", fooling_rate(adversarial.back())}},
                           run_dir / (rel + ".stats.json"));
                artifact(rel + ".json");
            }
        });

        timer.run("eval", [&] {
            summary.report.goal = cfg.attacks.front().goal;
            for (std::size_t i = 0; i < cfg.attacks.size(); ++i)
                summary.report.entries.push_back(evaluate_asr(recorder, adversarial[i], cfg.attacks[i].goal));
            const auto clean = recorder.query(eval, Stage::Eval);
            std::vector<std::int64_t> oracle_labels;
            for (const auto& o : clean)
                oracle_labels.push_back(o.label());
            summary.final_agreement = label_agreement(*model, eval, oracle_labels);
            const auto acc = per_class_accuracy(*model, eval, *eval.labels(), cfg.dataset.num_classes);
            write_bar_chart(classes.names(), acc, "Substitute per-class accuracy", "accuracy",
                            run_dir / "per_class_accuracy.svg");
            artifact("per_class_accuracy.svg");
        });

        summary.ledger = oracle->snapshot_ledger();
        summary.report.ledger = summary.ledger;
        summary.recorded_images = recorder.images_forwarded();
        summary.status = "ok";
        manifest["ledger"] = summary.ledger.to_json();
        manifest["checks"] = {
            {"n_qb_is_stage_sum", summary.report.n_qb() == summary.ledger.n_stage1 + summary.ledger.n_stage2},
            {"stage1_is_twice_candidates",
             summary.ledger.n_stage1 == (1 + mc.noise_draws) * summary.stage1_candidates},
            {"recorder_matches_ledger",
             recorder.images_forwarded(Stage::Stage1) == summary.ledger.n_stage1 &&
                 recorder.images_forwarded(Stage::Stage2) == summary.ledger.n_stage2 &&
                 recorder.images_forwarded(Stage::Eval) == summary.ledger.n_eval},
            {"lca_invocations", summary.lca_invocations}};
        write_json(summary.to_json(), run_dir / "report.json");
        render_run_plots(summary, run_dir);
        std::ofstream(run_dir / "report.md") << run_markdown(summary);
        for (const auto* f : {"report.json", "report.md", "asr_curve.svg", "training.svg"})
            artifact(f);
        manifest["status"] = "ok";
        manifest["finished_at"] = utc_now();
        write_json(manifest, manifest_path);
    } catch (const std::exception& e) {
        manifest["status"] = "failed";
        manifest["error"] = e.what();
        manifest["finished_at"] = utc_now();
        write_json(manifest, manifest_path);
        throw;
    }
    return summary;
}

RunSummary reuse_or_run(const ExperimentConfig& cfg, const std::filesystem::path& run_dir)
{
    const auto report = run_dir / "report.json";
    const auto manifest = run_dir / "manifest.json";
    if (std::filesystem::exists(report) && std::filesystem::exists(manifest) &&
        std::filesystem::exists(run_dir / "config.json")) {
        try {
            if (read_json(manifest).value("status", "") == "ok" && read_json(run_dir / "config.json") == cfg.to_json())
                return RunSummary::from_json(read_json(report));
        } catch (const std::exception&) {
            // unreadable leftovers are simply recomputed
        }
    }
    return run_pipeline(cfg, run_dir);
}

// ---- presets ------------------------------------------------------------------------

std::optional<double> PresetRow::median_asr() const
{
    std::vector<double> v;
    for (const auto& r : runs)
        if (!r.report.entries.empty() && r.report.entries.front().asr)
            v.push_back(*r.report.entries.front().asr);
    return median(v);
}

nlohmann::json PresetRow::to_json() const
{
    Json runs_json = Json::array();
    for (const auto& r : runs)
        runs_json.push_back(r.to_json());
    return {{"label", label}, {"x", optional_json(x)}, {"median_asr", optional_json(median_asr())}, {"runs", runs_json}};
}

nlohmann::json PresetResult::to_json() const
{
    Json rows_json = Json::array();
    for (const auto& r : rows)
        rows_json.push_back(r.to_json());
    return {{"format", "latentsub.preset"}, {"preset", preset}, {"rows", rows_json}};
}

void prepare_shared_artifacts(ExperimentConfig& cfg, const std::filesystem::path& dir)
{
    if (cfg.target_checkpoint.empty())
        cfg.target_checkpoint = dir / "shared" / "target";
    if (!archive_exists(cfg.target_checkpoint))
        train_target(cfg.dataset, cfg.target, derive_seed(cfg.dataset.seed, 0x7a46e7), cfg.target_checkpoint);
    if (cfg.backend.kind == BackendKind::Autoencoder) {
        if (cfg.backend.checkpoint.empty())
            cfg.backend.checkpoint = dir / "shared" / "backend";
        if (!archive_exists(cfg.backend.checkpoint))
            prepare_backend(cfg, toy_class_space(cfg.dataset.num_classes));
    }
}

namespace {

std::filesystem::path seed_dir(const std::filesystem::path& base, std::uint64_t seed)
{
    return base / ("seed_" + std::to_string(seed));
}

} // namespace

PresetResult run_ablation_lca(ExperimentConfig cfg, const std::vector<std::uint64_t>& seeds,
                              const std::filesystem::path& dir)
{
    prepare_shared_artifacts(cfg, dir);
    PresetResult result{"ablation-lca", {}};
    const std::vector<std::pair<DataArm, std::string>> arms = {
        {DataArm::PromptBaseline, "Baseline"}, {DataArm::MembersOnly, "w/o LCA"}, {DataArm::Lca, "LCA"}};
    for (const auto& [arm, label] : arms) {
        PresetRow row{label, std::nullopt, {}};
        for (const auto seed : seeds) {
            auto c = cfg;
            c.seed = seed;
            c.train.arm = arm;
            c.name = cfg.name + "-" + std::string(to_string(arm)) + "-" + std::to_string(seed);
            row.runs.push_back(reuse_or_run(c, seed_dir(dir / std::string(to_string(arm)), seed)));
        }
        result.rows.push_back(std::move(row));
    }
    write_preset_report(result, dir);
    return result;
}

PresetResult run_codebook_sweep(ExperimentConfig cfg, const std::vector<std::int64_t>& sizes,
                                const std::filesystem::path& dir)
{
    prepare_shared_artifacts(cfg, dir);
    PresetResult result{"codebook-sweep", {}};
    for (const auto m : sizes) {
        auto c = cfg;
        c.codebook_size = m;
        c.train.arm = DataArm::Lca;
        c.name = cfg.name + "-M" + std::to_string(m);
        PresetRow row{"M=" + std::to_string(m), static_cast<double>(m), {}};
        row.runs.push_back(reuse_or_run(c, dir / ("M_" + std::to_string(m))));
        result.rows.push_back(std::move(row));
    }
    write_preset_report(result, dir);
    return result;
}

PresetResult run_label_only_parity(ExperimentConfig cfg, const std::vector<std::uint64_t>& seeds,
                                   const std::filesystem::path& dir)
{
    prepare_shared_artifacts(cfg, dir);
    PresetResult result{"label-only-parity", {}};
    for (const auto mode : {OutputMode::Probability, OutputMode::LabelOnly}) {
        PresetRow row{std::string(to_string(mode)), std::nullopt, {}};
        for (const auto seed : seeds) {
            auto c = cfg;
            c.seed = seed;
            c.mode = mode;
            c.membership.mode = mode;
            c.train.arm = DataArm::Lca;
            c.name = cfg.name + "-" + std::string(to_string(mode)) + "-" + std::to_string(seed);
            row.runs.push_back(reuse_or_run(c, seed_dir(dir / std::string(to_string(mode)), seed)));
        }
        result.rows.push_back(std::move(row));
    }
    write_preset_report(result, dir);
    return result;
}

// ---- reports ---------------------------------------------------------------------------

namespace {

std::string render_preset(const Json& j, const std::filesystem::path& dir)
{
    std::ostringstream md;
    md << "# Preset `" << j.at("preset").get<std::string>() << "`\n\n"
       << "| arm | median ASR (%) | per-run ASR (%) | stage-1 queries | N_QB | agreement (%) |\n"
       << "|---|---|---|---|---|---|\n";
    std::vector<std::string> labels;
    std::vector<double> medians;
    Series asr_vs_x{"median ASR (%)", {}, {}}, n1_vs_x{"stage-1 queries", {}, {}};
    for (const auto& row : j.at("rows")) {
        const auto label = row.at("label").get<std::string>();
        const auto med = optional_from(row.at("median_asr"));
        std::string per_run, n1, nqb, agree;
        double n1_first = 0.0;
        for (const auto& r : row.at("runs")) {
            const auto s = RunSummary::from_json(r);
            const auto first = s.report.entries.empty() ? std::optional<double>{} : s.report.entries.front().asr;
            auto sep = [](std::string& out) {
                if (!out.empty())
                    out += ", ";
            };
            sep(per_run);
            per_run += percent(first);
            sep(n1);
            n1 += std::to_string(s.ledger.n_stage1);
            sep(nqb);
            nqb += std::to_string(s.ledger.attack_queries());
            sep(agree);
            agree += percent(s.final_agreement);
            if (n1_first == 0.0)
                n1_first = static_cast<double>(s.ledger.n_stage1);
        }
        md << "| " << label << " | " << percent(med) << " | " << per_run << " | " << n1 << " | " << nqb << " | "
           << agree << " |\n";
        labels.push_back(label);
        medians.push_back(med ? 100.0 * *med : std::nan(""));
        if (!row.at("x").is_null()) {
            const auto x = row.at("x").get<double>();
            asr_vs_x.x.push_back(x);
            asr_vs_x.y.push_back(med ? 100.0 * *med : std::nan(""));
            n1_vs_x.x.push_back(x);
            n1_vs_x.y.push_back(n1_first);
        }
    }
    write_bar_chart(labels, medians, "Median ASR per arm", "ASR (%)", dir / "preset_asr.svg");
    if (!asr_vs_x.x.empty()) {
        write_line_chart({asr_vs_x}, "ASR vs. codebook size", "codebook size M", "ASR (%)", dir / "asr_vs_m.svg");
        write_line_chart({n1_vs_x}, "Stage-1 queries vs. codebook size", "codebook size M", "queries",
                         dir / "stage1_vs_m.svg");
    }
    return md.str();
}

} // namespace

void write_preset_report(const PresetResult& result, const std::filesystem::path& dir)
{
    const auto j = result.to_json();
    write_json(j, dir / "preset.json");
    std::ofstream(dir / "report.md") << render_preset(j, dir);
}

std::string render_report(const std::filesystem::path& dir)
{
    std::string md;
    if (std::filesystem::exists(dir / "preset.json")) {
        md = render_preset(read_json(dir / "preset.json"), dir);
    } else if (std::filesystem::exists(dir / "report.json")) {
        const auto s = RunSummary::from_json(read_json(dir / "report.json"));
        render_run_plots(s, dir);
        md = run_markdown(s);
    } else {
        throw IoError(dir.string() + " holds neither a run report nor a preset result");
    }
    std::ofstream(dir / "report.md") << md;
    return md;
}

} // namespace latentsub
