#include "latentsub/substitute.hpp"

#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace latentsub {

namespace nn = torch::nn;

std::string_view to_string(DepthPreset preset)
{
    return preset == DepthPreset::Toy ? "toy" : "resnet34_like";
}

DepthPreset parse_depth_preset(std::string_view text)
{
    if (text == "toy")
        return DepthPreset::Toy;
    if (text == "resnet34_like" || text == "resnet34-like" || text == "resnet34")
        return DepthPreset::ResNet34Like;
    throw ConfigError("unknown substitute depth preset '" + std::string(text) + "'");
}

nlohmann::json SubstituteSpec::to_json() const
{
    return {{"preset", std::string(to_string(preset))}, {"num_classes", num_classes}, {"in_channels", in_channels}};
}

SubstituteSpec SubstituteSpec::from_json(const nlohmann::json& j)
{
    SubstituteSpec s;
    s.preset = parse_depth_preset(j.value("preset", std::string("toy")));
    s.num_classes = j.value("num_classes", s.num_classes);
    s.in_channels = j.value("in_channels", s.in_channels);
    return s;
}

AdaptiveResBlockImpl::AdaptiveResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride)
{
    conv1_ = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).stride(stride).padding(1).bias(false)));
    bn1_ = register_module("bn1", nn::BatchNorm2d(out_channels));
    conv2_ = register_module("conv2",
                             nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
    bn2_ = register_module("bn2", nn::BatchNorm2d(out_channels));
    if (stride != 1 || in_channels != out_channels)
        projection_ = register_module(
            "projection",
            nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
                           nn::BatchNorm2d(out_channels)));
    alpha = register_parameter("alpha", torch::ones({1}));
    beta = register_parameter("beta", torch::ones({1}));
}

torch::Tensor AdaptiveResBlockImpl::forward(const torch::Tensor& x)
{
    auto residual = bn2_(conv2_(torch::relu(bn1_(conv1_(x)))));
    auto shortcut = projection_ ? projection_->forward(x) : x;
    return torch::relu(alpha * residual + beta * shortcut);
}

SubstituteNetImpl::SubstituteNetImpl(const SubstituteSpec& spec) : spec_(spec)
{
    if (spec.num_classes < 2)
        throw InvalidArgument("a classifier needs at least 2 classes");
    std::vector<std::int64_t> widths, depths, strides;
    if (spec.preset == DepthPreset::Toy) {
        widths = {16, 32, 64};
        depths = {1, 1, 1};
        strides = {1, 2, 2};
    } else {
        widths = {64, 128, 256, 512};
        depths = {3, 4, 6, 3};
        strides = {1, 2, 2, 2};
    }
    stem_ = register_module("stem", nn::Conv2d(nn::Conv2dOptions(spec.in_channels, widths[0], 3).padding(1).bias(false)));
    stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(widths[0]));
    std::int64_t in = widths[0];
    for (std::size_t s = 0; s < widths.size(); ++s) {
        for (std::int64_t b = 0; b < depths[s]; ++b) {
            const auto stride = b == 0 ? strides[s] : 1;
            auto block = AdaptiveResBlock(in, widths[s], stride);
            blocks_.push_back(
                register_module("stage" + std::to_string(s) + "_block" + std::to_string(b), block));
            in = widths[s];
        }
    }
    head_ = register_module("head", nn::Linear(in, spec.num_classes));
}

torch::Tensor SubstituteNetImpl::forward(torch::Tensor x)
{
    x = torch::relu(stem_bn_(stem_(x)));
    for (auto& block : blocks_)
        x = block(x);
    x = torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1);
    return head_(x);
}

// ---- loss -------------------------------------------------------------------

void LossConfig::validate() const
{
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0))
        throw ConfigError("loss weights must be non-negative");
    if (!(lambda1 + lambda2 > 0.0))
        throw ConfigError("at least one loss weight must be positive");
}

LossConfig LossConfig::for_mode(OutputMode mode) const
{
    LossConfig c = *this;
    if (mode == OutputMode::LabelOnly) {
        c.hard_labels = true;
        c.lambda2 = 0.0;
        if (c.lambda1 == 0.0)
            throw ConfigError("label-only training needs lambda1 > 0");
    }
    c.validate();
    return c;
}

nlohmann::json LossConfig::to_json() const
{
    return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"hard_labels", hard_labels}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j)
{
    LossConfig c;
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.hard_labels = j.value("hard_labels", c.hard_labels);
    c.validate();
    return c;
}

TeacherTargets TeacherTargets::from_outputs(const std::vector<OracleOutput>& outputs, std::int64_t num_classes)
{
    TeacherTargets t;
    const auto B = static_cast<std::int64_t>(outputs.size());
    t.mode = outputs.empty() ? OutputMode::Probability : outputs.front().mode();
    t.labels = torch::empty({B}, torch::kInt64);
    auto la = t.labels.accessor<std::int64_t, 1>();
    if (t.mode == OutputMode::Probability) {
        t.probs = torch::empty({B, num_classes}, torch::kFloat64);
        auto pa = t.probs.accessor<double, 2>();
        for (std::int64_t i = 0; i < B; ++i) {
            const auto& p = *outputs[static_cast<std::size_t>(i)].probs();
            if (static_cast<std::int64_t>(p.size()) != num_classes)
                throw ShapeMismatch("oracle probability vector has the wrong length");
            for (std::int64_t k = 0; k < num_classes; ++k)
                pa[i][k] = p[static_cast<std::size_t>(k)];
        }
    }
    for (std::int64_t i = 0; i < B; ++i) {
        const auto& o = outputs[static_cast<std::size_t>(i)];
        if (o.mode() != t.mode)
            throw InvalidArgument("oracle outputs mix probability and label-only answers");
        la[i] = o.label();
    }
    return t;
}

torch::Tensor substitute_loss(const torch::Tensor& logits, const TeacherTargets& targets, const LossConfig& cfg)
{
    cfg.validate();
    if (logits.dim() != 2)
        throw ShapeMismatch("logits must be B x N");
    if (targets.mode == OutputMode::LabelOnly || cfg.hard_labels) {
        if (targets.mode == OutputMode::LabelOnly && cfg.lambda2 > 0.0)
            throw ConfigError("label-only targets carry no probabilities; lambda2 must be 0");
        auto loss = torch::nn::functional::cross_entropy(logits, targets.labels) * cfg.lambda1;
        if (cfg.lambda2 > 0.0) {
            const auto probs = targets.probs.to(logits.scalar_type());
            loss = loss + torch::mse_loss(torch::softmax(logits, 1), probs) * cfg.lambda2;
        }
        return loss;
    }
    const auto t = targets.probs.to(logits.scalar_type());
    if (t.sizes() != logits.sizes())
        throw ShapeMismatch("teacher probabilities and logits differ in shape");
    const auto soft_ce = -(t * torch::log_softmax(logits, 1)).sum(1).mean();
    const auto mse = torch::mse_loss(torch::softmax(logits, 1), t);
    return soft_ce * cfg.lambda1 + mse * cfg.lambda2;
}

// ---- training configuration -------------------------------------------------

std::string_view to_string(DataArm arm)
{
    switch (arm) {
    case DataArm::Lca:
        return "lca";
    case DataArm::MembersOnly:
        return "members_only";
    case DataArm::PromptBaseline:
        return "baseline";
    }
    return "?";
}

DataArm parse_data_arm(std::string_view text)
{
    if (text == "lca" || text == "full")
        return DataArm::Lca;
    if (text == "members_only" || text == "members-only" || text == "no_lca")
        return DataArm::MembersOnly;
    if (text == "baseline" || text == "prompt")
        return DataArm::PromptBaseline;
    throw ConfigError("unknown training data arm '" + std::string(text) + "'");
}

void TrainConfig::validate() const
{
    if (batch_size < 1)
        throw ConfigError("batch size must be positive");
    if (!(learning_rate > 0.0))
        throw ConfigError("learning rate must be positive");
    if (max_steps && *max_steps < 0)
        throw ConfigError("max_steps must be non-negative");
    if (checkpoint_every < 0)
        throw ConfigError("checkpoint_every must be non-negative");
    if (queue_depth < 1)
        throw ConfigError("queue depth must be positive");
    sampler.validate();
    loss.validate();
}

nlohmann::json TrainConfig::to_json() const
{
    return {{"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"max_steps", max_steps ? nlohmann::json(*max_steps) : nlohmann::json()},
            {"checkpoint_every", checkpoint_every},
            {"queue_depth", queue_depth},
            {"arm", std::string(to_string(arm))},
            {"sampler", sampler.to_json()},
            {"loss", loss.to_json()},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("max_steps") && !j.at("max_steps").is_null())
        c.max_steps = j.at("max_steps").get<std::int64_t>();
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.queue_depth = j.value("queue_depth", c.queue_depth);
    c.arm = parse_data_arm(j.value("arm", std::string("lca")));
    if (j.contains("sampler"))
        c.sampler = lca::SamplerConfig::from_json(j.at("sampler"));
    if (j.contains("loss"))
        c.loss = LossConfig::from_json(j.at("loss"));
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

nlohmann::json StepMetrics::to_json() const
{
    return {{"step", step}, {"loss", loss}, {"agreement", agreement}, {"n1", ledger.n_stage1}, {"n2", ledger.n_stage2}};
}

nlohmann::json TrainState::to_json() const
{
    return {{"step", step},
            {"running_loss", running_loss},
            {"ledger", ledger.to_json()},
            {"lineage", lineage},
            {"budget_exhausted", budget_exhausted}};
}

// ---- batches ----------------------------------------------------------------

ImageBatch make_training_batch(const Codebook& codebook, GeneratorBackend& generator, const TrainConfig& cfg,
                               std::int64_t step)
{
    torch::NoGradGuard no_grad;
    const auto step_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(step), 0x7a1);
    const auto n = static_cast<std::size_t>(cfg.batch_size);
    const auto num_classes = generator.classes().num_classes();

    if (cfg.arm == DataArm::PromptBaseline) {
        std::vector<ImageBatch> parts;
        for (std::size_t i = 0; i < n; ++i) {
            std::mt19937_64 rng(derive_seed(step_seed, i, 3));
            const auto c = std::uniform_int_distribution<std::int64_t>(0, num_classes - 1)(rng);
            parts.push_back(generator.text_to_images(c, 1, derive_seed(step_seed, i, 4)));
        }
        return ImageBatch::concat(parts);
    }

    std::vector<std::int64_t> filled;
    for (std::int64_t c = 0; c < codebook.num_classes(); ++c)
        if (codebook.count(c) > 0)
            filled.push_back(c);
    if (filled.empty())
        throw InvalidArgument("the codebook holds no codes; stage 2 has nothing to decode");

    std::vector<LatentCode> codes;
    codes.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(step_seed, i, 1));
        const auto c = filled[std::uniform_int_distribution<std::size_t>(0, filled.size() - 1)(rng)];
        if (cfg.arm == DataArm::Lca) {
            const auto plan = lca::sample_plan(codebook, c, derive_seed(step_seed, i, 2), cfg.sampler);
            codes.push_back(lca::execute_plan(plan, codebook));
        } else {
            const auto slot = std::uniform_int_distribution<std::int64_t>(0, codebook.count(c) - 1)(rng);
            codes.push_back(codebook.entry(c, slot));
        }
    }
    return generator.latents_to_images(codes, derive_seed(step_seed, 5));
}

// ---- checkpoints ------------------------------------------------------------

namespace {

std::filesystem::path checkpoint_stem(const std::filesystem::path& dir, std::int64_t step)
{
    std::ostringstream name;
    name << "step_" << std::setw(8) << std::setfill('0') << step;
    return dir / name.str();
}

void write_checkpoint(SubstituteNet& net, torch::optim::Adam& opt, const SubstituteSpec& spec,
                      const TrainConfig& cfg, const TrainState& state, const std::filesystem::path& stem)
{
    TensorArchive archive;
    store_module(*net, archive, "model.");
    auto& opt_state = opt.state();
    nlohmann::json steps = nlohmann::json::array();
    const auto params = net->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto it = opt_state.find(params[i].unsafeGetTensorImpl());
        if (it == opt_state.end()) {
            steps.push_back(nullptr);
            continue;
        }
        auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
        archive.put("adam." + std::to_string(i) + ".exp_avg", s.exp_avg());
        archive.put("adam." + std::to_string(i) + ".exp_avg_sq", s.exp_avg_sq());
        steps.push_back(s.step());
    }
    archive.meta() = {{"kind", "substitute_checkpoint"},
                      {"spec", spec.to_json()},
                      {"config", cfg.to_json()},
                      {"state", state.to_json()},
                      {"adam_steps", steps}};
    std::filesystem::create_directories(stem.parent_path());
    archive.save(stem);
}

void restore_optimizer(torch::optim::Adam& opt, SubstituteNet& net, const TensorArchive& archive)
{
    const auto& steps = archive.meta().at("adam_steps");
    const auto params = net->parameters();
    if (steps.size() != params.size())
        throw IoError("checkpoint optimizer state does not match the model");
    auto& opt_state = opt.state();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (steps[i].is_null())
            continue;
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(steps[i].get<std::int64_t>());
        s->exp_avg(archive.get("adam." + std::to_string(i) + ".exp_avg").clone());
        s->exp_avg_sq(archive.get("adam." + std::to_string(i) + ".exp_avg_sq").clone());
        opt_state[params[i].unsafeGetTensorImpl()] = std::move(s);
    }
}

struct Produced {
    std::int64_t step = 0;
    ImageBatch images;
    std::vector<OracleOutput> outputs;
    QueryLedger ledger;
    bool end = false;
    bool budget_exhausted = false;
    std::exception_ptr error;
};

class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t depth) : depth_(depth) {}

    // Returns false when the consumer has asked the producer to stop.
    bool push(Produced item)
    {
        std::unique_lock lock(mutex_);
        not_full_.wait(lock, [&] { return items_.size() < depth_ || stopped_; });
        if (stopped_)
            return false;
        items_.push_back(std::move(item));
        not_empty_.notify_one();
        return true;
    }

    Produced pop()
    {
        std::unique_lock lock(mutex_);
        not_empty_.wait(lock, [&] { return !items_.empty(); });
        auto item = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return item;
    }

    void stop()
    {
        std::lock_guard lock(mutex_);
        stopped_ = true;
        not_full_.notify_all();
    }

    bool stopped() const
    {
        std::lock_guard lock(mutex_);
        return stopped_;
    }

private:
    std::size_t depth_;
    mutable std::mutex mutex_;
    std::condition_variable not_full_, not_empty_;
    std::deque<Produced> items_;
    bool stopped_ = false;
};

bool parameters_finite(SubstituteNet& net)
{
    for (const auto& p : net->parameters())
        if (!torch::isfinite(p).all().item<bool>())
            return false;
    return true;
}

} // namespace

TrainResult train_substitute(const Codebook& codebook, GeneratorBackend& generator, BlackBox& oracle,
                             const SubstituteSpec& spec, const TrainConfig& cfg, const TrainOutputs& outputs,
                             const std::optional<std::filesystem::path>& resume, const CheckpointHook& hook)
{
    cfg.validate();
    if (!cfg.max_steps && !oracle.remaining_budget())
        throw ConfigError("training needs a query budget or max_steps; neither is set");
    if (spec.num_classes != oracle.num_classes())
        throw ConfigError("substitute and oracle disagree on the number of classes");
    if (cfg.arm != DataArm::PromptBaseline)
        codebook.check_backend(generator);
    const auto loss_cfg = cfg.loss.for_mode(oracle.mode());

    seed_torch(derive_seed(cfg.seed, 0x5eed));
    SubstituteNet net(spec);
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
    TrainState state;
    if (resume) {
        const auto archive = TensorArchive::load(*resume);
        if (archive.meta().value("kind", "") != "substitute_checkpoint")
            throw IoError(resume->string() + " is not a substitute checkpoint");
        if (SubstituteSpec::from_json(archive.meta().at("spec")).to_json() != spec.to_json())
            throw ConfigError("checkpoint architecture differs from the requested substitute");
        restore_module(*net, archive, "model.");
        restore_optimizer(opt, net, archive);
        const auto& s = archive.meta().at("state");
        state.step = s.at("step").get<std::int64_t>();
        state.running_loss = s.at("running_loss").get<double>();
        state.ledger = QueryLedger::from_json(s.at("ledger"));
        state.lineage = s.at("lineage").get<std::vector<std::string>>();
        if (oracle.snapshot_ledger() != state.ledger)
            throw ConfigError("the oracle's ledger does not continue from the checkpoint's ledger");
    } else {
        state.ledger = oracle.snapshot_ledger();
    }

    std::ofstream metrics_out;
    if (!outputs.metrics_file.empty()) {
        if (outputs.metrics_file.has_parent_path())
            std::filesystem::create_directories(outputs.metrics_file.parent_path());
        metrics_out.open(outputs.metrics_file, std::ios::app);
        if (!metrics_out)
            throw IoError("cannot open metrics file " + outputs.metrics_file.string());
    }

    TrainResult result;
    auto checkpoint = [&] {
        if (!outputs.checkpoint_dir.empty()) {
            const auto stem = checkpoint_stem(outputs.checkpoint_dir, state.step);
            write_checkpoint(net, opt, spec, cfg, state, stem);
            state.lineage.push_back(stem.filename().string());
        }
        if (hook)
            hook(state, net);
    };

    BoundedQueue queue(static_cast<std::size_t>(cfg.queue_depth));
    const auto first_step = state.step + 1;
    std::thread producer([&, first_step] {
        torch::NoGradGuard no_grad;
        for (auto step = first_step; !cfg.max_steps || step <= *cfg.max_steps; ++step) {
            if (queue.stopped())
                return;
            Produced item;
            item.step = step;
            try {
                const auto remaining = oracle.remaining_budget();
                if (remaining && *remaining < cfg.batch_size)
                    throw BudgetExhausted(oracle.snapshot_ledger(), cfg.batch_size, *remaining);
                item.images = make_training_batch(codebook, generator, cfg, step);
                item.outputs = oracle.query(item.images, Stage::Stage2);
                item.ledger = oracle.snapshot_ledger();
            } catch (const BudgetExhausted&) {
                item.end = true;
                item.budget_exhausted = true;
                queue.push(std::move(item));
                return;
            } catch (...) {
                item.end = true;
                item.error = std::current_exception();
                queue.push(std::move(item));
                return;
            }
            if (!queue.push(std::move(item)))
                return;
        }
        Produced done;
        done.end = true;
        queue.push(std::move(done));
    });

    auto shutdown = [&] {
        queue.stop();
        if (producer.joinable())
            producer.join();
    };

    try {
        net->train();
        bool checkpointed = false;
        while (true) {
            auto item = queue.pop();
            if (item.end) {
                if (item.error)
                    std::rethrow_exception(item.error);
                state.budget_exhausted = item.budget_exhausted;
                break;
            }
            const auto targets = TeacherTargets::from_outputs(item.outputs, spec.num_classes);
            opt.zero_grad();
            const auto logits = net->forward(item.images.pixels());
            const auto loss = substitute_loss(logits, targets, loss_cfg);
            const auto loss_value = loss.item<double>();
            if (!std::isfinite(loss_value))
                throw TrainingDiverged("non-finite loss at step " + std::to_string(item.step));
            loss.backward();
            opt.step();
            if (!parameters_finite(net))
                throw TrainingDiverged("non-finite substitute parameters after step " + std::to_string(item.step));

            StepMetrics m;
            m.step = item.step;
            m.loss = loss_value;
            m.agreement = logits.argmax(1).eq(targets.labels).to(torch::kFloat64).mean().item<double>();
            m.ledger = item.ledger;
            state.step = item.step;
            state.ledger = item.ledger;
            state.running_loss = state.step == 1 ? loss_value : 0.9 * state.running_loss + 0.1 * loss_value;
            if (metrics_out) {
                auto j = m.to_json();
                j["running_loss"] = state.running_loss;
                metrics_out << j.dump() << "\n" << std::flush;
            }
            result.metrics.push_back(m);
            checkpointed = false;
            if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
                checkpoint();
                checkpointed = true;
            }
        }
        if (!checkpointed)
            checkpoint();
    } catch (...) {
        shutdown();
        throw;
    }
    shutdown();
    net->eval();
    result.model = net;
    result.state = state;
    return result;
}

void save_substitute(SubstituteNet& net, const nlohmann::json& meta, const std::filesystem::path& stem)
{
    TensorArchive archive;
    store_module(*net, archive, "model.");
    archive.meta() = meta;
    archive.meta()["kind"] = "substitute_model";
    archive.meta()["spec"] = net->spec().to_json();
    if (stem.has_parent_path())
        std::filesystem::create_directories(stem.parent_path());
    archive.save(stem);
}

SubstituteNet load_substitute(const std::filesystem::path& stem, nlohmann::json* meta)
{
    const auto archive = TensorArchive::load(stem);
    const auto kind = archive.meta().value("kind", "");
    if (kind != "substitute_model" && kind != "substitute_checkpoint")
        throw IoError(stem.string() + " does not hold a substitute model");
    SubstituteNet net(SubstituteSpec::from_json(archive.meta().at("spec")));
    restore_module(*net, archive, "model.");
    net->eval();
    if (meta)
        *meta = archive.meta();
    return net;
}

double label_agreement(ClassifierNet& net, const ImageBatch& batch, const std::vector<std::int64_t>& labels)
{
    if (static_cast<std::int64_t>(labels.size()) != batch.size())
        throw ShapeMismatch("one label per image is required");
    if (labels.empty())
        return 0.0;
    const auto pred = predict_logits(net, batch.pixels()).argmax(1);
    const auto ref = torch::tensor(labels, torch::kInt64);
    return pred.eq(ref).to(torch::kFloat64).mean().item<double>();
}

} // namespace latentsub
