#include "latentsub/oracle.hpp"

#include "latentsub/wire.hpp"

namespace latentsub {

std::int64_t& QueryLedger::counter(Stage stage)
{
    switch (stage) {
    case Stage::Stage1: return n_stage1;
    case Stage::Stage2: return n_stage2;
    case Stage::Eval: return n_eval;
    }
    throw InvalidArgument("unknown stage");
}

std::int64_t QueryLedger::counter(Stage stage) const
{
    return const_cast<QueryLedger&>(*this).counter(stage);
}

nlohmann::json QueryLedger::to_json() const
{
    return {{"n_stage1", n_stage1}, {"n_stage2", n_stage2}, {"n_eval", n_eval},
            {"n_qb", attack_queries()}, {"total", total()}};
}

QueryLedger QueryLedger::from_json(const nlohmann::json& j)
{
    QueryLedger l;
    l.n_stage1 = j.at("n_stage1").get<std::int64_t>();
    l.n_stage2 = j.at("n_stage2").get<std::int64_t>();
    l.n_eval = j.value("n_eval", std::int64_t{0});
    return l;
}

BudgetExhausted::BudgetExhausted(QueryLedger ledger, std::int64_t requested, std::int64_t budget)
    : Error("query budget exhausted: " + std::to_string(ledger.attack_queries()) + " of " +
            std::to_string(budget) + " used, batch of " + std::to_string(requested) + " rejected"),
      ledger_(ledger), requested_(requested)
{
}

std::vector<OracleOutput> outputs_from_logits(const torch::Tensor& logits, OutputMode mode)
{
    auto probs = torch::softmax(logits.detach().to(torch::kFloat64), 1).contiguous();
    std::vector<OracleOutput> out;
    out.reserve(static_cast<std::size_t>(probs.size(0)));
    const auto n = probs.size(1);
    const auto* data = probs.data_ptr<double>();
    for (std::int64_t i = 0; i < probs.size(0); ++i) {
        std::vector<double> p(data + i * n, data + (i + 1) * n);
        if (mode == OutputMode::Probability)
            out.push_back(OracleOutput::from_probabilities(std::move(p)));
        else
            out.push_back(OracleOutput::from_label(argmax_lowest(p)));
    }
    return out;
}

LocalClassifier::LocalClassifier(std::shared_ptr<ClassifierNet> net) : net_(std::move(net))
{
    if (!net_)
        throw InvalidArgument("local classifier needs a model");
    net_->eval();
}

std::vector<OracleOutput> LocalClassifier::classify(const torch::Tensor& pixels, OutputMode mode)
{
    std::lock_guard lock(mutex_);
    return outputs_from_logits(predict_logits(*net_, pixels), mode);
}

nlohmann::json make_classify_request(const torch::Tensor& pixels, OutputMode mode)
{
    auto j = wire::tensor_to_json(pixels);
    j["mode"] = std::string(to_string(mode));
    return j;
}

nlohmann::json answer_classify_request(ClassifierBackend& backend, const nlohmann::json& request)
{
    const auto mode = parse_output_mode(request.at("mode").get<std::string>());
    const auto pixels = wire::tensor_from_json(request);
    if (pixels.dim() != 4)
        throw ShapeMismatch("classify expects a B x C x H x W tensor");
    const auto outputs = backend.classify(pixels, mode);
    nlohmann::json labels = nlohmann::json::array();
    nlohmann::json probs = mode == OutputMode::Probability ? nlohmann::json::array() : nlohmann::json();
    for (const auto& o : outputs) {
        labels.push_back(o.label());
        if (mode == OutputMode::Probability)
            probs.push_back(*o.probs());
    }
    return {{"labels", labels}, {"probs", probs}};
}

MeteredOracle::MeteredOracle(std::shared_ptr<ClassifierBackend> backend, OracleConfig config)
    : backend_(std::move(backend)), config_(config)
{
    if (!backend_)
        throw InvalidArgument("oracle needs a classifier backend");
    if (config_.budget && *config_.budget <= 0)
        throw ConfigError("query budget must be positive");
}

std::vector<OracleOutput> MeteredOracle::query(const ImageBatch& batch, Stage stage)
{
    const auto n = batch.size();
    const bool charged = stage != Stage::Eval;
    {
        std::lock_guard lock(mutex_);
        used_ = true;
        if (charged && config_.budget &&
            ledger_.attack_queries() + reserved_ + n > *config_.budget)
            throw BudgetExhausted(ledger_, n, *config_.budget);
        if (charged)
            reserved_ += n;
    }
    std::vector<OracleOutput> outputs;
    try {
        outputs = n == 0 ? std::vector<OracleOutput>{} : backend_->classify(batch.pixels(), config_.mode);
    } catch (...) {
        std::lock_guard lock(mutex_);
        if (charged)
            reserved_ -= n;
        throw;
    }
    if (static_cast<std::int64_t>(outputs.size()) != n) {
        std::lock_guard lock(mutex_);
        if (charged)
            reserved_ -= n;
        throw Error("backend returned " + std::to_string(outputs.size()) + " answers for " +
                    std::to_string(n) + " images");
    }
    if (config_.mode == OutputMode::LabelOnly) {
        for (auto& o : outputs)
            o = o.label_only();
    }
    std::lock_guard lock(mutex_);
    if (charged)
        reserved_ -= n;
    ledger_.counter(stage) += n;
    return outputs;
}

QueryLedger MeteredOracle::snapshot_ledger() const
{
    std::lock_guard lock(mutex_);
    return ledger_;
}

std::optional<std::int64_t> MeteredOracle::remaining_budget() const
{
    if (!config_.budget)
        return std::nullopt;
    std::lock_guard lock(mutex_);
    return *config_.budget - ledger_.attack_queries() - reserved_;
}

void MeteredOracle::restore_ledger(const QueryLedger& ledger)
{
    std::lock_guard lock(mutex_);
    if (used_)
        throw InvalidArgument("ledger can only be restored before the first query");
    if (ledger.n_stage1 < 0 || ledger.n_stage2 < 0 || ledger.n_eval < 0)
        throw InvalidArgument("ledger counters must be non-negative");
    ledger_ = ledger;
}

std::vector<OracleOutput> RecordingOracle::query(const ImageBatch& batch, Stage stage)
{
    auto out = inner_.query(batch, stage);
    std::lock_guard lock(mutex_);
    calls_.push_back({stage, batch.size()});
    return out;
}

std::vector<RecordingOracle::Call> RecordingOracle::calls() const
{
    std::lock_guard lock(mutex_);
    return calls_;
}

std::int64_t RecordingOracle::images_forwarded(Stage stage) const
{
    std::lock_guard lock(mutex_);
    std::int64_t n = 0;
    for (const auto& c : calls_)
        n += c.stage == stage ? c.images : 0;
    return n;
}

std::int64_t RecordingOracle::images_forwarded() const
{
    std::lock_guard lock(mutex_);
    std::int64_t n = 0;
    for (const auto& c : calls_)
        n += c.images;
    return n;
}

void save_target_checkpoint(TargetNet& net, const nlohmann::json& meta, const std::filesystem::path& stem)
{
    TensorArchive archive;
    store_module(*net, archive);
    const auto& s = net->spec();
    archive.meta() = meta;
    archive.meta()["kind"] = "target_model";
    archive.meta()["arch"] = {{"type", "target_convnet"},
                              {"num_classes", s.num_classes},
                              {"in_channels", s.in_channels},
                              {"image_size", s.image_size},
                              {"width1", s.width1},
                              {"width2", s.width2},
                              {"hidden", s.hidden}};
    archive.save(stem);
}

TargetNet load_target_checkpoint(const std::filesystem::path& stem, nlohmann::json* meta)
{
    auto archive = TensorArchive::load(stem);
    if (archive.meta().value("kind", "") != "target_model")
        throw IoError(stem.string() + " is not a target model checkpoint");
    const auto& a = archive.meta().at("arch");
    TargetNetSpec spec;
    spec.num_classes = a.at("num_classes").get<std::int64_t>();
    spec.in_channels = a.at("in_channels").get<std::int64_t>();
    spec.image_size = a.at("image_size").get<std::int64_t>();
    spec.width1 = a.at("width1").get<std::int64_t>();
    spec.width2 = a.at("width2").get<std::int64_t>();
    spec.hidden = a.at("hidden").get<std::int64_t>();
    TargetNet net(spec);
    restore_module(*net, archive);
    net->eval();
    if (meta)
        *meta = archive.meta();
    return net;
}

std::shared_ptr<MeteredOracle> open_local_oracle(const std::filesystem::path& checkpoint, OracleConfig config)
{
    auto net = load_target_checkpoint(checkpoint);
    auto backend = std::make_shared<LocalClassifier>(net.ptr());
    return std::make_shared<MeteredOracle>(std::move(backend), config);
}

} // namespace latentsub
