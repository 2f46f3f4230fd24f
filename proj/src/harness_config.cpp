#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "latentsub/harness.hpp"

namespace latentsub {

namespace {

using Json = nlohmann::json;

// Reads `key` from a JSON section, accepting numbers written as strings.
template <typename T>
T field(const Json& section, const char* key, T fallback)
{
    if (!section.contains(key) || section.at(key).is_null())
        return fallback;
    const auto& v = section.at(key);
    if constexpr (std::is_same_v<T, std::string>) {
        return v.is_string() ? v.get<std::string>() : v.dump();
    } else if constexpr (std::is_same_v<T, bool>) {
        if (v.is_boolean())
            return v.get<bool>();
        const auto s = v.is_string() ? v.get<std::string>() : v.dump();
        if (s == "true" || s == "1")
            return true;
        if (s == "false" || s == "0")
            return false;
        throw ConfigError(std::string("'") + key + "' must be true or false");
    } else {
        try {
            if (v.is_string())
                return Json::parse(v.get<std::string>()).get<T>();
            return v.get<T>();
        } catch (const Json::exception&) {
            throw ConfigError(std::string("'") + key + "' has a value of the wrong type: " + v.dump());
        }
    }
}

void check_keys(const Json& section, const std::string& name, const std::set<std::string>& allowed)
{
    if (!section.is_object())
        throw ConfigError("config section [" + name + "] must be a table");
    for (const auto& [key, _] : section.items())
        if (!allowed.count(key))
            throw ConfigError("unknown key '" + key + "' in config section [" + name + "]");
}

const Json& section_of(const Json& j, const char* name)
{
    static const Json empty = Json::object();
    return j.contains(name) ? j.at(name) : empty;
}

std::string goal_text(const AttackGoal& g)
{
    return g.kind == GoalKind::NonTarget ? "non_target" : "target:" + std::to_string(g.target_class);
}

AttackGoal parse_goal(const std::string& text)
{
    if (text == "non_target" || text == "non-target" || text.empty())
        return AttackGoal::non_target();
    if (text.rfind("target:", 0) == 0) {
        try {
            return AttackGoal::target(std::stoll(text.substr(7)));
        } catch (const std::exception&) {
        }
    }
    throw ConfigError("attack goal must be 'non_target' or 'target:<class>', got '" + text + "'");
}

ToyStyle parse_style(const std::string& s)
{
    if (s == "private")
        return ToyStyle::Private;
    if (s == "prior")
        return ToyStyle::Prior;
    throw ConfigError("dataset style must be 'private' or 'prior'");
}

} // namespace

nlohmann::json TargetRecipe::to_json() const
{
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"validation_fraction", validation_fraction},
            {"width1", arch.width1},
            {"width2", arch.width2},
            {"hidden", arch.hidden},
            {"style", style == ToyStyle::Private ? "private" : "prior"}};
}

TargetRecipe TargetRecipe::from_json(const nlohmann::json& j)
{
    TargetRecipe r;
    r.epochs = field(j, "epochs", r.epochs);
    r.batch_size = field(j, "batch_size", r.batch_size);
    r.learning_rate = field(j, "learning_rate", r.learning_rate);
    r.validation_fraction = field(j, "validation_fraction", r.validation_fraction);
    r.arch.width1 = field(j, "width1", r.arch.width1);
    r.arch.width2 = field(j, "width2", r.arch.width2);
    r.arch.hidden = field(j, "hidden", r.arch.hidden);
    r.style = parse_style(field<std::string>(j, "style", "private"));
    return r;
}

void ExperimentConfig::validate() const
{
    if (name.empty() || name.find('/') != std::string::npos)
        throw ConfigError("experiment name must be a non-empty path component");
    if (budget < 1)
        throw ConfigError("query budget must be positive");
    try {
        dataset.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("[dataset] ") + e.what());
    }
    if (target.epochs < 1 || target.batch_size < 1 || !(target.learning_rate > 0.0))
        throw ConfigError("target recipe needs positive epochs, batch size and learning rate");
    if (!(target.validation_fraction > 0.0 && target.validation_fraction < 1.0))
        throw ConfigError("validation_fraction must lie in (0,1)");
    if (!(backend.strength >= 0.0 && backend.strength <= 1.0))
        throw ConfigError("generator strength must lie in [0,1]");
    if (codebook_size < 1)
        throw ConfigError("codebook_size must be at least 1");
    if (max_candidates_per_class < 1)
        throw ConfigError("max_candidates must be positive");
    membership.validate();
    train.validate();
    if (attacks.empty())
        throw ConfigError("at least one [attack.<name>] section is required");
    for (const auto& a : attacks)
        a.validate();
    if (eval_samples < 1)
        throw ConfigError("eval_samples must be positive");
    if (curve_points < 0)
        throw ConfigError("curve_points must be non-negative");
    if (substitute.num_classes != dataset.num_classes)
        throw ConfigError("substitute class count differs from the dataset");
}

nlohmann::json ExperimentConfig::to_json() const
{
    Json attacks_json = Json::array();
    for (const auto& a : attacks)
        attacks_json.push_back({{"method", std::string(to_string(a.method))},
                                {"epsilon", a.epsilon},
                                {"alpha", a.alpha},
                                {"steps", a.steps},
                                {"norm", std::string(to_string(a.norm))},
                                {"goal", goal_text(a.goal)},
                                {"random_start", a.random_start}});
    auto tgt = target.to_json();
    tgt["checkpoint"] = target_checkpoint.string();
    return {
        {"experiment",
         {{"name", name},
          {"seed", seed},
          {"mode", std::string(to_string(mode))},
          {"budget", budget},
          {"eval_samples", eval_samples},
          {"curve_points", curve_points}}},
        {"dataset",
         {{"num_classes", dataset.num_classes},
          {"image_size", dataset.image_size},
          {"samples_per_class", dataset.samples_per_class},
          {"seed", dataset.seed}}},
        {"target", tgt},
        {"backend",
         {{"kind", backend.kind == BackendKind::Identity ? "identity" : "autoencoder"},
          {"strength", backend.strength},
          {"stride", backend.stride},
          {"checkpoint", backend.checkpoint.string()},
          {"latent_channels", backend.autoencoder.latent_channels},
          {"width", backend.autoencoder.width},
          {"class_embedding", backend.autoencoder.class_embedding},
          {"train_steps", backend.training.steps},
          {"train_batch", backend.training.batch_size},
          {"train_lr", backend.training.learning_rate},
          {"train_seed", backend.training.seed}}},
        {"stage1",
         {{"codebook_size", codebook_size},
          {"max_candidates", max_candidates_per_class},
          {"sigma", membership.sigma},
          {"u", membership.u},
          {"noise_draws", membership.noise_draws}}},
        {"lca", train.sampler.to_json()},
        {"train",
         {{"arm", std::string(to_string(train.arm))},
          {"preset", std::string(to_string(substitute.preset))},
          {"batch_size", train.batch_size},
          {"learning_rate", train.learning_rate},
          {"max_steps", train.max_steps ? Json(*train.max_steps) : Json()},
          {"checkpoint_every", train.checkpoint_every},
          {"queue_depth", train.queue_depth},
          {"lambda1", train.loss.lambda1},
          {"lambda2", train.loss.lambda2}}},
        {"attacks", attacks_json},
    };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j)
{
    check_keys(j, "<root>", {"experiment", "dataset", "target", "backend", "stage1", "lca", "train", "attacks"});
    ExperimentConfig c = default_experiment();

    const auto& e = section_of(j, "experiment");
    check_keys(e, "experiment", {"name", "seed", "mode", "budget", "eval_samples", "curve_points"});
    c.name = field<std::string>(e, "name", c.name);
    c.seed = field(e, "seed", c.seed);
    c.mode = parse_output_mode(field<std::string>(e, "mode", std::string(to_string(c.mode))));
    c.budget = field(e, "budget", c.budget);
    c.eval_samples = field(e, "eval_samples", c.eval_samples);
    c.curve_points = field(e, "curve_points", c.curve_points);

    const auto& d = section_of(j, "dataset");
    check_keys(d, "dataset", {"num_classes", "image_size", "samples_per_class", "seed"});
    c.dataset.num_classes = field(d, "num_classes", c.dataset.num_classes);
    c.dataset.image_size = field(d, "image_size", c.dataset.image_size);
    c.dataset.samples_per_class = field(d, "samples_per_class", c.dataset.samples_per_class);
    c.dataset.seed = field(d, "seed", c.dataset.seed);

    const auto& t = section_of(j, "target");
    check_keys(t, "target",
               {"checkpoint", "epochs", "batch_size", "learning_rate", "validation_fraction", "width1", "width2",
                "hidden", "style"});
    c.target = TargetRecipe::from_json(t);
    c.target_checkpoint = field<std::string>(t, "checkpoint", "");

    const auto& b = section_of(j, "backend");
    check_keys(b, "backend",
               {"kind", "strength", "stride", "checkpoint", "latent_channels", "width", "class_embedding",
                "train_steps", "train_batch", "train_lr", "train_seed"});
    const auto kind = field<std::string>(b, "kind", "autoencoder");
    if (kind == "identity")
        c.backend.kind = BackendKind::Identity;
    else if (kind == "autoencoder")
        c.backend.kind = BackendKind::Autoencoder;
    else
        throw ConfigError("backend kind must be 'identity' or 'autoencoder'");
    c.backend.strength = field(b, "strength", c.backend.strength);
    c.backend.stride = field(b, "stride", c.backend.stride);
    c.backend.checkpoint = field<std::string>(b, "checkpoint", "");
    c.backend.autoencoder.latent_channels = field(b, "latent_channels", c.backend.autoencoder.latent_channels);
    c.backend.autoencoder.width = field(b, "width", c.backend.autoencoder.width);
    c.backend.autoencoder.class_embedding = field(b, "class_embedding", c.backend.autoencoder.class_embedding);
    c.backend.training.steps = field(b, "train_steps", c.backend.training.steps);
    c.backend.training.batch_size = field(b, "train_batch", c.backend.training.batch_size);
    c.backend.training.learning_rate = field(b, "train_lr", c.backend.training.learning_rate);
    c.backend.training.seed = field(b, "train_seed", c.backend.training.seed);

    const auto& s = section_of(j, "stage1");
    check_keys(s, "stage1", {"codebook_size", "max_candidates", "sigma", "u", "noise_draws"});
    c.codebook_size = field(s, "codebook_size", c.codebook_size);
    c.max_candidates_per_class = field(s, "max_candidates", c.max_candidates_per_class);
    c.membership.sigma = field(s, "sigma", c.membership.sigma);
    c.membership.u = field(s, "u", c.membership.u);
    c.membership.noise_draws = field(s, "noise_draws", c.membership.noise_draws);

    const auto& l = section_of(j, "lca");
    check_keys(l, "lca",
               {"p_single", "max_chain", "translate_frac", "pad_frac", "rotate_deg", "crop_keep_min", "scale_min",
                "scale_max", "shear", "erase_area_max", "blur_sigma_min", "blur_sigma_max", "noise_max",
                "salt_pepper_max"});
    Json typed = Json::object();
    for (const auto& [key, value] : l.items())
        typed[key] = key == "max_chain" ? Json(field<std::int64_t>(l, key.c_str(), 0))
                                        : Json(field<double>(l, key.c_str(), 0.0));
    c.train.sampler = lca::SamplerConfig::from_json(typed);

    const auto& tr = section_of(j, "train");
    check_keys(tr, "train",
               {"arm", "preset", "batch_size", "learning_rate", "max_steps", "checkpoint_every", "queue_depth",
                "lambda1", "lambda2"});
    c.train.arm = parse_data_arm(field<std::string>(tr, "arm", std::string(to_string(c.train.arm))));
    c.substitute.preset = parse_depth_preset(field<std::string>(tr, "preset", "toy"));
    c.train.batch_size = field(tr, "batch_size", c.train.batch_size);
    c.train.learning_rate = field(tr, "learning_rate", c.train.learning_rate);
    if (tr.contains("max_steps") && !tr.at("max_steps").is_null())
        c.train.max_steps = field<std::int64_t>(tr, "max_steps", 0);
    c.train.checkpoint_every = field(tr, "checkpoint_every", c.train.checkpoint_every);
    c.train.queue_depth = field(tr, "queue_depth", c.train.queue_depth);
    c.train.loss.lambda1 = field(tr, "lambda1", c.train.loss.lambda1);
    c.train.loss.lambda2 = field(tr, "lambda2", c.train.loss.lambda2);

    if (j.contains("attacks")) {
        c.attacks.clear();
        for (const auto& a : j.at("attacks")) {
            check_keys(a, "attack", {"name", "method", "epsilon", "alpha", "steps", "norm", "goal", "random_start"});
            AttackConfig ac;
            ac.method = parse_attack_method(field<std::string>(a, "method", "pgd"));
            if (!a.contains("epsilon"))
                throw ConfigError("every attack needs an explicit epsilon");
            ac.epsilon = field(a, "epsilon", 0.0);
            ac.alpha = field(a, "alpha", ac.method == AttackMethod::Fgsm ? ac.epsilon : ac.epsilon / 4.0);
            ac.steps = field<std::int64_t>(a, "steps", ac.method == AttackMethod::Fgsm ? 1 : 10);
            ac.norm = parse_norm(field<std::string>(a, "norm", "linf"));
            ac.goal = parse_goal(field<std::string>(a, "goal", "non_target"));
            ac.random_start = field(a, "random_start", false);
            c.attacks.push_back(ac.normalized());
        }
    }

    c.membership.mode = c.mode;
    c.substitute.num_classes = c.dataset.num_classes;
    c.target.arch.num_classes = c.dataset.num_classes;
    c.target.arch.image_size = c.dataset.image_size;
    c.backend.autoencoder.num_classes = c.dataset.num_classes;
    c.backend.autoencoder.image_size = c.dataset.image_size;
    c.validate();
    return c;
}

ExperimentConfig default_experiment()
{
    ExperimentConfig c;
    c.attacks = {AttackConfig{AttackMethod::Pgd, 8.0 / 255.0, 2.0 / 255.0, 10, Norm::Linf, {}, false, 0}};
    return c;
}

ExperimentConfig parse_experiment_config(const std::string& text)
{
    // Drop '#' comment lines, which the INI reader does not know about.
    std::istringstream lines(text);
    std::ostringstream cleaned;
    for (std::string line; std::getline(lines, line);) {
        const auto first = line.find_first_not_of(" \t");
        if (first != std::string::npos && line[first] == '#')
            continue;
        cleaned << line << "\n";
    }
    boost::property_tree::ptree tree;
    std::istringstream in(cleaned.str());
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("cannot parse config: ") + e.what());
    }

    auto scalar = [](std::string v) -> Json {
        if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
            return v.substr(1, v.size() - 2);
        return v;
    };
    Json j = Json::object();
    Json attacks = Json::array();
    for (const auto& [section, body] : tree) {
        if (body.empty())
            throw ConfigError("key '" + section + "' appears outside any [section]");
        Json s = Json::object();
        for (const auto& [key, value] : body)
            s[key] = scalar(value.get_value<std::string>());
        if (section.rfind("attack.", 0) == 0) {
            s["name"] = section.substr(7);
            attacks.push_back(s);
        } else {
            j[section] = s;
        }
    }
    if (!attacks.empty())
        j["attacks"] = attacks;
    return ExperimentConfig::from_json(j);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot read config file " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    if (path.extension() == ".json")
        return ExperimentConfig::from_json(Json::parse(buffer.str()));
    return parse_experiment_config(buffer.str());
}

} // namespace latentsub
