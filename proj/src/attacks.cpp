#include "latentsub/attacks.hpp"

#include <cmath>

#include "latentsub/archive.hpp"

namespace latentsub {

std::string_view to_string(AttackMethod method)
{
    switch (method) {
    case AttackMethod::Fgsm:
        return "fgsm";
    case AttackMethod::Bim:
        return "bim";
    case AttackMethod::Pgd:
        return "pgd";
    }
    return "?";
}

std::string_view to_string(Norm norm) { return norm == Norm::Linf ? "linf" : "l2"; }

AttackMethod parse_attack_method(std::string_view text)
{
    if (text == "fgsm" || text == "FGSM")
        return AttackMethod::Fgsm;
    if (text == "bim" || text == "BIM")
        return AttackMethod::Bim;
    if (text == "pgd" || text == "PGD")
        return AttackMethod::Pgd;
    throw ConfigError("unknown attack method '" + std::string(text) + "'");
}

Norm parse_norm(std::string_view text)
{
    if (text == "linf" || text == "LINF" || text == "inf")
        return Norm::Linf;
    if (text == "l2" || text == "L2")
        return Norm::L2;
    throw ConfigError("unknown norm '" + std::string(text) + "'");
}

std::string AttackGoal::describe() const
{
    return kind == GoalKind::NonTarget ? "non_target" : "target:" + std::to_string(target_class);
}

nlohmann::json AttackGoal::to_json() const
{
    if (kind == GoalKind::NonTarget)
        return {{"kind", "non_target"}};
    return {{"kind", "target"}, {"class", target_class}};
}

AttackGoal AttackGoal::from_json(const nlohmann::json& j)
{
    const auto kind = j.value("kind", std::string("non_target"));
    if (kind == "non_target")
        return non_target();
    if (kind == "target")
        return target(j.at("class").get<std::int64_t>());
    throw ConfigError("unknown attack goal '" + kind + "'");
}

AttackConfig AttackConfig::fgsm(double epsilon, Norm norm, AttackGoal goal)
{
    AttackConfig c;
    c.method = AttackMethod::Fgsm;
    c.epsilon = epsilon;
    c.alpha = epsilon;
    c.steps = 1;
    c.norm = norm;
    c.goal = goal;
    return c;
}

void AttackConfig::validate() const
{
    if (!std::isfinite(epsilon) || epsilon < 0.0)
        throw ConfigError("attack epsilon must be finite and non-negative");
    if (steps < 1)
        throw ConfigError("attack steps must be at least 1");
    if (method != AttackMethod::Fgsm) {
        if (!std::isfinite(alpha) || alpha < 0.0)
            throw ConfigError("attack step size must be finite and non-negative");
        if (alpha > epsilon)
            throw ConfigError("attack step size may not exceed epsilon");
    }
    if (goal.kind == GoalKind::Target && goal.target_class < 0)
        throw ConfigError("target class must be non-negative");
}

AttackConfig AttackConfig::normalized() const
{
    AttackConfig c = *this;
    if (c.method == AttackMethod::Fgsm) {
        c.steps = 1;
        c.alpha = c.epsilon;
        c.random_start = false;
    }
    if (c.method != AttackMethod::Pgd)
        c.random_start = false;
    return c;
}

nlohmann::json AttackConfig::to_json() const
{
    return {{"method", std::string(to_string(method))},
            {"epsilon", epsilon},
            {"alpha", alpha},
            {"steps", steps},
            {"norm", std::string(to_string(norm))},
            {"goal", goal.to_json()},
            {"random_start", random_start},
            {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j)
{
    AttackConfig c;
    c.method = parse_attack_method(j.at("method").get<std::string>());
    if (!j.contains("epsilon"))
        throw ConfigError("attack config needs an explicit epsilon");
    c.epsilon = j.at("epsilon").get<double>();
    c.alpha = j.value("alpha", c.method == AttackMethod::Fgsm ? c.epsilon : c.epsilon / 4.0);
    c.steps = j.value("steps", c.method == AttackMethod::Fgsm ? std::int64_t{1} : std::int64_t{10});
    c.norm = parse_norm(j.value("norm", std::string("linf")));
    if (j.contains("goal"))
        c.goal = AttackGoal::from_json(j.at("goal"));
    c.random_start = j.value("random_start", false);
    c.seed = j.value("seed", std::uint64_t{0});
    c = c.normalized();
    c.validate();
    return c;
}

std::pair<std::vector<double>, std::vector<double>> perturbation_norms(const torch::Tensor& a, const torch::Tensor& b)
{
    if (a.sizes() != b.sizes())
        throw ShapeMismatch("perturbation norms need tensors of equal shape");
    const auto diff = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).flatten(1);
    const auto l2 = diff.norm(2, 1).contiguous();
    const auto linf = diff.numel() == 0 ? torch::zeros({a.size(0)}, torch::kFloat64) : diff.abs().amax(1).contiguous();
    return {std::vector<double>(l2.data_ptr<double>(), l2.data_ptr<double>() + l2.numel()),
            std::vector<double>(linf.data_ptr<double>(), linf.data_ptr<double>() + linf.numel())};
}

namespace {

std::vector<std::int64_t> to_vector(const torch::Tensor& t)
{
    const auto c = t.to(torch::kInt64).contiguous();
    return {c.data_ptr<std::int64_t>(), c.data_ptr<std::int64_t>() + c.numel()};
}

// Projects delta onto the epsilon ball of the configured norm.
torch::Tensor project(const torch::Tensor& delta, double epsilon, Norm norm)
{
    if (norm == Norm::Linf)
        return delta.clamp(-epsilon, epsilon);
    const auto n = delta.flatten(1).norm(2, 1).view({-1, 1, 1, 1});
    const auto factor = torch::clamp_max(epsilon / (n + 1e-12), 1.0);
    return delta * factor;
}

torch::Tensor step_direction(const torch::Tensor& grad, Norm norm)
{
    if (norm == Norm::Linf)
        return grad.sign();
    const auto n = grad.flatten(1).norm(2, 1).view({-1, 1, 1, 1});
    return grad / (n + 1e-12);
}

} // namespace

AdversarialBatch attack(ClassifierNet& model, const ImageBatch& batch, const AttackConfig& config)
{
    const auto cfg = config.normalized();
    cfg.validate();
    if (cfg.goal.kind == GoalKind::Target && cfg.goal.target_class >= model.num_classes())
        throw ConfigError("target class " + std::to_string(cfg.goal.target_class) + " is outside the model's classes");

    const bool was_training = model.is_training();
    model.eval();
    AdversarialBatch out;
    out.config = cfg;
    out.originals = batch;
    const auto x0 = batch.pixels();
    const auto B = batch.size();
    if (B == 0) {
        out.adversarials = batch;
        model.train(was_training);
        return out;
    }

    torch::Tensor clean_pred;
    {
        torch::NoGradGuard g;
        clean_pred = model.forward(x0).argmax(1);
    }
    torch::Tensor labels;
    if (cfg.goal.kind == GoalKind::Target)
        labels = torch::full({B}, cfg.goal.target_class, torch::kInt64);
    else if (batch.has_labels())
        labels = torch::tensor(*batch.labels(), torch::kInt64);
    else
        labels = clean_pred;
    const double sign = cfg.goal.kind == GoalKind::Target ? -1.0 : 1.0;

    torch::Tensor x = x0.clone();
    if (cfg.random_start && cfg.epsilon > 0.0) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
        torch::Tensor delta;
        if (cfg.norm == Norm::Linf) {
            delta = (at::rand(x0.sizes(), gen, torch::kFloat32) * 2.0 - 1.0) * cfg.epsilon;
        } else {
            delta = project(at::randn(x0.sizes(), gen, torch::kFloat32) * cfg.epsilon, cfg.epsilon, Norm::L2);
        }
        x = (x0 + delta).clamp(0.0, 1.0);
    }

    for (std::int64_t s = 0; s < cfg.steps; ++s) {
        auto xv = x.detach().requires_grad_(true);
        const auto logits = model.forward(xv);
        // Summed so that each sample's gradient is independent of the batch size.
        const auto loss = torch::nn::functional::cross_entropy(
            logits, labels, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
        const auto grad = torch::autograd::grad({loss}, {xv})[0];
        const auto finite = torch::isfinite(grad).flatten(1).all(1);
        if (!finite.all().item<bool>()) {
            const auto bad = (~finite).nonzero()[0][0].item<std::int64_t>();
            model.train(was_training);
            throw NonFiniteGradient("non-finite input gradient for sample " + std::to_string(bad), bad);
        }
        torch::NoGradGuard g;
        const auto moved = x + step_direction(grad, cfg.norm) * (sign * cfg.alpha);
        x = (x0 + project(moved - x0, cfg.epsilon, cfg.norm)).clamp(0.0, 1.0);
    }

    torch::NoGradGuard g;
    out.adversarials = ImageBatch(x.contiguous(), batch.labels());
    std::tie(out.l2, out.linf) = perturbation_norms(x, x0);
    const auto& bound = cfg.norm == Norm::Linf ? out.linf : out.l2;
    for (std::size_t i = 0; i < bound.size(); ++i)
        if (bound[i] > cfg.epsilon + 1e-6)
            throw Error("adversarial sample " + std::to_string(i) + " left the epsilon ball (" +
                        std::to_string(bound[i]) + " > " + std::to_string(cfg.epsilon) + ")");
    out.pred_before = to_vector(clean_pred);
    out.pred_after = to_vector(model.forward(x).argmax(1));
    model.train(was_training);
    return out;
}

PerturbationStats perturbation_stats(const AdversarialBatch& advs)
{
    PerturbationStats s;
    if (advs.l2.empty())
        return s;
    for (std::size_t i = 0; i < advs.l2.size(); ++i) {
        s.mean_l2 += advs.l2[i];
        s.mean_linf += advs.linf[i];
    }
    s.mean_l2 /= static_cast<double>(advs.l2.size());
    s.mean_linf /= static_cast<double>(advs.linf.size());
    return s;
}

double fooling_rate(const AdversarialBatch& advs)
{
    if (advs.pred_after.empty())
        return 0.0;
    std::int64_t fooled = 0;
    for (std::size_t i = 0; i < advs.pred_after.size(); ++i) {
        if (advs.config.goal.kind == GoalKind::Target)
            fooled += advs.pred_after[i] == advs.config.goal.target_class;
        else
            fooled += advs.pred_after[i] != advs.pred_before[i];
    }
    return static_cast<double>(fooled) / static_cast<double>(advs.pred_after.size());
}

void AdversarialBatch::save(const std::filesystem::path& stem) const
{
    TensorArchive archive;
    archive.put("originals", originals.pixels());
    archive.put("adversarials", adversarials.pixels());
    archive.put("l2", torch::tensor(l2, torch::kFloat64));
    archive.put("linf", torch::tensor(linf, torch::kFloat64));
    archive.put("pred_before", torch::tensor(pred_before, torch::kInt64));
    archive.put("pred_after", torch::tensor(pred_after, torch::kInt64));
    const auto stats = perturbation_stats(*this);
    archive.meta() = {{"kind", "adversarial_batch"},
                      {"config", config.to_json()},
                      {"labels", originals.labels() ? nlohmann::json(*originals.labels()) : nlohmann::json()},
                      {"mean_l2", stats.mean_l2},
                      {"mean_linf", stats.mean_linf}};
    if (stem.has_parent_path())
        std::filesystem::create_directories(stem.parent_path());
    archive.save(stem);
}

AdversarialBatch AdversarialBatch::load(const std::filesystem::path& stem)
{
    const auto archive = TensorArchive::load(stem);
    if (archive.meta().value("kind", "") != "adversarial_batch")
        throw IoError(stem.string() + " does not hold an adversarial batch");
    AdversarialBatch b;
    std::optional<std::vector<std::int64_t>> labels;
    if (!archive.meta().at("labels").is_null())
        labels = archive.meta().at("labels").get<std::vector<std::int64_t>>();
    b.originals = ImageBatch(archive.get("originals"), labels);
    b.adversarials = ImageBatch(archive.get("adversarials"), labels);
    auto doubles = [&](const char* name) {
        const auto t = archive.get(name).contiguous();
        return std::vector<double>(t.data_ptr<double>(), t.data_ptr<double>() + t.numel());
    };
    b.l2 = doubles("l2");
    b.linf = doubles("linf");
    b.pred_before = to_vector(archive.get("pred_before"));
    b.pred_after = to_vector(archive.get("pred_after"));
    b.config = AttackConfig::from_json(archive.meta().at("config"));
    return b;
}

} // namespace latentsub
