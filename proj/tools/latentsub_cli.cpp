#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "latentsub/harness.hpp"
#include "latentsub/http_service.hpp"
#include "latentsub/image_io.hpp"

namespace fs = std::filesystem;
using namespace latentsub;
using Json = nlohmann::json;

namespace {

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides)
{
    // Overrides are "section.key=value" pairs applied on top of the file.
    Json j = path.empty() ? default_experiment().to_json() : load_experiment_config(path).to_json();
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        const auto dot = o.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw ConfigError("override must look like section.key=value, got '" + o + "'");
        const auto section = o.substr(0, dot), key = o.substr(dot + 1, eq - dot - 1), value = o.substr(eq + 1);
        if (section == "attack") {
            for (auto& a : j["attacks"])
                a[key] = value;
        } else {
            j[section][key] = value;
        }
    }
    return ExperimentConfig::from_json(j);
}

void write_json(const Json& j, const fs::path& path)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream(path) << j.dump(2) << "\n";
}

Json read_json(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot read " + path.string());
    return Json::parse(in);
}

std::vector<std::uint64_t> parse_seeds(const std::string& text)
{
    std::vector<std::uint64_t> out;
    std::stringstream s(text);
    for (std::string item; std::getline(s, item, ',');)
        out.push_back(std::stoull(item));
    if (out.empty())
        throw ConfigError("at least one seed is required");
    return out;
}

void print_summary(const RunSummary& s)
{
    std::cout << s.name << ": status " << s.status << ", N_QB " << s.ledger.attack_queries() << " (stage1 "
              << s.ledger.n_stage1 << ", stage2 " << s.ledger.n_stage2 << ")";
    for (const auto& e : s.report.entries)
        std::cout << ", " << e.method << " ASR "
                  << (e.asr ? std::to_string(100.0 * *e.asr) + "%" : std::string("undefined")) << " (" << e.n_suc
                  << "/" << e.n_all << ")";
    std::cout << "\n";
}

std::unique_ptr<HttpService>* g_service = nullptr;

void stop_on_signal(int)
{
    if (g_service && *g_service)
        (*g_service)->stop();
}

void serve_forever(std::unique_ptr<HttpService> service)
{
    std::cout << "listening on port " << service->port() << std::endl;
    g_service = &service;
    std::signal(SIGINT, stop_on_signal);
    std::signal(SIGTERM, stop_on_signal);
    service->wait();
    g_service = nullptr;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Data-free substitute training with latent code augmentation"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "experiment config (INI-style sections or .json)");
        sub->add_option("-s,--set", overrides, "override a config value, section.key=value");
    };

    // train-target
    auto* train_target_cmd = app.add_subcommand("train-target", "train the black-box target model");
    add_config(train_target_cmd);
    std::string out_path;
    std::uint64_t target_seed = 0;
    train_target_cmd->add_option("-o,--out", out_path, "checkpoint stem")->required();
    train_target_cmd->add_option("--seed", target_seed, "training seed");

    // train-backend
    auto* train_backend_cmd = app.add_subcommand("train-backend", "train the autoencoder generator backend");
    add_config(train_backend_cmd);
    train_backend_cmd->add_option("-o,--out", out_path, "checkpoint stem")->required();

    // stage1
    auto* stage1_cmd = app.add_subcommand("stage1", "build the member codebook");
    add_config(stage1_cmd);
    std::string run_dir;
    stage1_cmd->add_option("-r,--run-dir", run_dir, "run directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train the substitute from a codebook");
    add_config(train_cmd);
    train_cmd->add_option("-r,--run-dir", run_dir, "run directory holding codebook/ and stage1.json")->required();
    std::string resume_path;
    train_cmd->add_option("--resume", resume_path, "checkpoint stem to continue from");

    // attack
    auto* attack_cmd = app.add_subcommand("attack", "craft adversarial examples on a substitute");
    add_config(attack_cmd);
    std::string substitute_path, input_path;
    std::size_t attack_index = 0;
    attack_cmd->add_option("--substitute", substitute_path, "substitute checkpoint stem")->required();
    attack_cmd->add_option("--input", input_path, "image batch archive (default: the evaluation set)");
    attack_cmd->add_option("--attack-index", attack_index, "which configured attack to run");
    attack_cmd->add_option("-o,--out", out_path, "adversarial archive stem")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "measure ASR of an adversarial batch on the target");
    add_config(eval_cmd);
    std::string adv_path, target_path;
    eval_cmd->add_option("--adv", adv_path, "adversarial archive stem")->required();
    eval_cmd->add_option("--target", target_path, "target checkpoint stem (default: from the config)");
    eval_cmd->add_option("-o,--out", out_path, "report JSON path");

    // run
    auto* run_cmd = app.add_subcommand("run", "full pipeline or an experiment preset");
    add_config(run_cmd);
    std::string preset, seeds_text = "0,1,2", sizes_text = "2,5,10,20";
    run_cmd->add_option("-o,--out", out_path, "output directory")->required();
    run_cmd->add_option("--preset", preset, "ablation-lca | codebook-sweep | label-only")
        ->check(CLI::IsMember({"ablation-lca", "codebook-sweep", "label-only"}));
    run_cmd->add_option("--seeds", seeds_text, "comma-separated seeds for multi-seed presets");
    run_cmd->add_option("--sizes", sizes_text, "comma-separated codebook sizes for codebook-sweep");

    // report
    auto* report_cmd = app.add_subcommand("report", "re-render report.md and plots of a run or preset");
    std::string report_dir;
    report_cmd->add_option("dir", report_dir, "run or preset directory")->required();

    // lca preview
    auto* lca_cmd = app.add_subcommand("lca", "latent code augmentation tools");
    lca_cmd->require_subcommand(1);
    auto* preview_cmd = lca_cmd->add_subcommand("preview", "decode sampled augmentations to an image grid");
    add_config(preview_cmd);
    std::string codebook_dir;
    std::int64_t preview_n = 16, preview_class = -1;
    std::uint64_t preview_seed = 0;
    preview_cmd->add_option("--codebook", codebook_dir, "codebook directory")->required();
    preview_cmd->add_option("-n", preview_n, "number of samples");
    preview_cmd->add_option("--class", preview_class, "restrict to one class");
    preview_cmd->add_option("--seed", preview_seed, "sampling seed");
    preview_cmd->add_option("-o,--out", out_path, "PNG path")->required();

    // servers
    auto* serve_target_cmd = app.add_subcommand("serve-target", "serve a target checkpoint on POST /classify");
    std::string host = "127.0.0.1";
    int port = 8080;
    serve_target_cmd->add_option("--checkpoint", target_path, "target checkpoint stem")->required();
    serve_target_cmd->add_option("--host", host);
    serve_target_cmd->add_option("--port", port);
    auto* serve_gen_cmd = app.add_subcommand("serve-generator", "serve the configured backend over HTTP");
    add_config(serve_gen_cmd);
    serve_gen_cmd->add_option("--host", host);
    serve_gen_cmd->add_option("--port", port);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_target_cmd) {
            const auto cfg = load_config(config_path, overrides);
            const auto report = train_target(cfg.dataset, cfg.target, target_seed, out_path);
            std::cout << report.to_json().dump(2) << "\n";
        } else if (*train_backend_cmd) {
            auto cfg = load_config(config_path, overrides);
            cfg.backend.kind = BackendKind::Autoencoder;
            cfg.backend.checkpoint = out_path;
            const auto backend = prepare_backend(cfg, toy_class_space(cfg.dataset.num_classes));
            std::cout << "backend " << backend->fingerprint() << " saved to " << out_path << "\n";
        } else if (*stage1_cmd) {
            const auto cfg = load_config(config_path, overrides);
            auto oracle = prepare_oracle(cfg, run_dir);
            auto generator = prepare_backend(cfg, toy_class_space(cfg.dataset.num_classes));
            auto mc = cfg.membership;
            mc.seed = derive_seed(cfg.seed, 1);
            auto result = build_codebook(*generator, *oracle, mc, cfg.codebook_size, cfg.max_candidates_per_class);
            result.codebook.save(fs::path(run_dir) / "codebook",
                                 {{"membership", mc.to_json()}, {"codebook_size", cfg.codebook_size}});
            write_json(result.summary(), fs::path(run_dir) / "stage1.json");
            std::cout << result.summary().dump(2) << "\n";
        } else if (*train_cmd) {
            const auto cfg = load_config(config_path, overrides);
            auto oracle = prepare_oracle(cfg, run_dir);
            oracle->restore_ledger(QueryLedger::from_json(read_json(fs::path(run_dir) / "stage1.json").at("ledger")));
            auto generator = prepare_backend(cfg, toy_class_space(cfg.dataset.num_classes));
            const auto codebook = Codebook::load(fs::path(run_dir) / "codebook");
            auto tc = cfg.train;
            tc.seed = derive_seed(cfg.seed, 2);
            std::optional<fs::path> resume;
            if (!resume_path.empty())
                resume = resume_path;
            auto result = train_substitute(codebook, *generator, *oracle, cfg.substitute, tc,
                                           {fs::path(run_dir) / "checkpoints", fs::path(run_dir) / "metrics.jsonl"},
                                           resume);
            save_substitute(result.model, {{"state", result.state.to_json()}, {"config", tc.to_json()}},
                            fs::path(run_dir) / "substitute");
            std::cout << result.state.to_json().dump(2) << "\n";
        } else if (*attack_cmd) {
            const auto cfg = load_config(config_path, overrides);
            if (attack_index >= cfg.attacks.size())
                throw ConfigError("attack index out of range");
            auto net = load_substitute(substitute_path);
            const auto batch = input_path.empty() ? evaluation_set(cfg) : load_image_batch(input_path);
            const auto advs = attack(*net, batch, cfg.attacks[attack_index]);
            advs.save(out_path);
            const auto stats = perturbation_stats(advs);
            const Json j = {{"config", cfg.attacks[attack_index].to_json()},
                            {"mean_l2", stats.mean_l2},
                            {"mean_linf", stats.mean_linf},
                            {"substitute_fooling_rate", fooling_rate(advs)}};
            write_json(j, archive_stem(out_path).string() + ".stats.json");
            std::cout << j.dump(2) << "\n";
        } else if (*eval_cmd) {
            auto cfg = load_config(config_path, overrides);
            if (!target_path.empty())
                cfg.target_checkpoint = target_path;
            if (cfg.target_checkpoint.empty())
                throw ConfigError("eval needs --target or target.checkpoint in the config");
            OracleConfig oc;
            oc.mode = cfg.mode;
            auto oracle = open_local_oracle(archive_stem(cfg.target_checkpoint), oc);
            const auto advs = AdversarialBatch::load(adv_path);
            AsrReport report;
            report.goal = advs.config.goal;
            report.entries.push_back(evaluate_asr(*oracle, advs, advs.config.goal));
            report.ledger = oracle->snapshot_ledger();
            if (!out_path.empty())
                write_json(report.to_json(), out_path);
            std::cout << report.to_json().dump(2) << "\n";
        } else if (*run_cmd) {
            const auto cfg = load_config(config_path, overrides);
            if (preset.empty()) {
                print_summary(run_pipeline(cfg, out_path));
            } else {
                PresetResult result;
                if (preset == "ablation-lca")
                    result = run_ablation_lca(cfg, parse_seeds(seeds_text), out_path);
                else if (preset == "label-only")
                    result = run_label_only_parity(cfg, parse_seeds(seeds_text), out_path);
                else {
                    std::vector<std::int64_t> sizes;
                    for (auto s : parse_seeds(sizes_text))
                        sizes.push_back(static_cast<std::int64_t>(s));
                    result = run_codebook_sweep(cfg, sizes, out_path);
                }
                for (const auto& row : result.rows)
                    for (const auto& run : row.runs)
                        print_summary(run);
                std::cout << render_report(out_path);
            }
        } else if (*report_cmd) {
            std::cout << render_report(report_dir);
        } else if (*preview_cmd) {
            const auto cfg = load_config(config_path, overrides);
            auto generator = prepare_backend(cfg, toy_class_space(cfg.dataset.num_classes));
            const auto codebook = Codebook::load(codebook_dir);
            codebook.check_backend(*generator);
            std::vector<LatentCode> codes;
            Json plans = Json::array();
            std::vector<std::int64_t> filled;
            for (std::int64_t c = 0; c < codebook.num_classes(); ++c)
                if (codebook.count(c) > 0 && (preview_class < 0 || c == preview_class))
                    filled.push_back(c);
            if (filled.empty())
                throw ConfigError("no codebook class to sample from");
            for (std::int64_t i = 0; i < preview_n; ++i) {
                const auto cls = filled[static_cast<std::size_t>(i) % filled.size()];
                const auto plan = lca::sample_plan(codebook, cls, derive_seed(preview_seed, i), cfg.train.sampler);
                codes.push_back(lca::execute_plan(plan, codebook));
                plans.push_back(plan.to_json());
            }
            const auto images = generator->latents_to_images(codes, derive_seed(preview_seed, 0x9e));
            write_image_grid(images, 8, out_path);
            write_json(plans, fs::path(out_path).replace_extension(".plans.json"));
            std::cout << "wrote " << out_path << "\n";
        } else if (*serve_target_cmd) {
            auto net = load_target_checkpoint(archive_stem(target_path));
            serve_forever(serve_classifier(std::make_shared<LocalClassifier>(net.ptr()), host, port));
        } else if (*serve_gen_cmd) {
            const auto cfg = load_config(config_path, overrides);
            serve_forever(serve_generator(prepare_backend(cfg, toy_class_space(cfg.dataset.num_classes)), host, port));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
