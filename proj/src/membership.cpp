#include "latentsub/membership.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "latentsub/archive.hpp"

namespace latentsub {

void MembershipConfig::validate() const
{
    if (!(sigma > 0.0) || sigma > 0.25)
        throw ConfigError("membership sigma must lie in (0, 0.25]");
    if (!(u >= 0.0))
        throw ConfigError("membership threshold u must be non-negative");
    if (noise_draws < 1)
        throw ConfigError("noise_draws must be at least 1");
}

nlohmann::json MembershipConfig::to_json() const
{
    return {{"sigma", sigma}, {"u", u}, {"mode", std::string(to_string(mode))}, {"seed", seed},
            {"noise_draws", noise_draws}};
}

ImageBatch perturb(const ImageBatch& batch, double sigma, std::uint64_t seed, std::int64_t first_index)
{
    if (!(sigma >= 0.0))
        throw InvalidArgument("sigma must be non-negative");
    auto noisy = batch.pixels().clone();
    for (std::int64_t i = 0; i < batch.size(); ++i) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(
            derive_seed(seed, static_cast<std::uint64_t>(first_index + i), 0x5e));
        noisy[i].add_(at::randn(noisy[i].sizes(), gen, torch::kFloat32) * sigma);
    }
    noisy.clamp_(0.0, 1.0);
    return ImageBatch(noisy, batch.labels());
}

double decision_distance(const OracleOutput& clean, const OracleOutput& noisy)
{
    if (clean.mode() != noisy.mode())
        throw InvalidArgument("decision distance needs two outputs of the same mode");
    if (clean.mode() == OutputMode::LabelOnly)
        return clean.label() == noisy.label() ? 0.0 : std::numeric_limits<double>::infinity();
    const auto& a = *clean.probs();
    const auto& b = *noisy.probs();
    if (a.size() != b.size())
        throw ShapeMismatch("probability vectors differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        sum += (a[i] - b[i]) * (a[i] - b[i]);
    return sum / static_cast<double>(a.size());
}

MembershipResult filter_members(const ImageBatch& batch, BlackBox& oracle, const MembershipConfig& cfg,
                                std::int64_t first_index)
{
    cfg.validate();
    if (oracle.mode() != cfg.mode)
        throw ConfigError("membership config mode does not match the oracle's output mode");
    MembershipResult result;
    if (batch.size() == 0) {
        result.members = batch;
        return result;
    }
    const auto clean = oracle.query(batch, Stage::Stage1);
    std::vector<double> dist(static_cast<std::size_t>(batch.size()), 0.0);
    for (std::int64_t k = 0; k < cfg.noise_draws; ++k) {
        const auto noisy_batch = perturb(batch, cfg.sigma, derive_seed(cfg.seed, static_cast<std::uint64_t>(k)),
                                         first_index);
        const auto noisy = oracle.query(noisy_batch, Stage::Stage1);
        for (std::size_t i = 0; i < dist.size(); ++i)
            dist[i] += decision_distance(clean[i], noisy[i]) / static_cast<double>(cfg.noise_draws);
    }
    for (std::int64_t i = 0; i < batch.size(); ++i) {
        const auto label = clean[static_cast<std::size_t>(i)].label();
        result.clean_labels.push_back(label);
        const bool class_ok = !batch.has_labels() || label == batch.label(i);
        if (class_ok && dist[static_cast<std::size_t>(i)] <= cfg.u)
            result.kept.push_back(i);
    }
    result.distances = std::move(dist);
    result.members = batch.select(result.kept);
    return result;
}

Codebook::Codebook(std::int64_t num_classes, std::int64_t capacity, std::string fingerprint,
                   BackendDescriptor descriptor)
    : entries_(static_cast<std::size_t>(num_classes)), capacity_(capacity), fingerprint_(std::move(fingerprint)),
      descriptor_(std::move(descriptor))
{
    if (num_classes < 2)
        throw InvalidArgument("codebook needs at least 2 classes");
    if (capacity < 1)
        throw InvalidArgument("codebook capacity M must be at least 1");
}

void Codebook::append(LatentCode code)
{
    if (frozen_)
        throw InvalidArgument("codebook is frozen");
    if (code.class_index < 0 || code.class_index >= num_classes())
        throw InvalidArgument("latent code class " + std::to_string(code.class_index) + " out of range");
    if (code.values.sizes().vec() != descriptor_.latent_shape())
        throw ShapeMismatch("latent code shape does not match the codebook backend");
    auto& slot = entries_[static_cast<std::size_t>(code.class_index)];
    if (static_cast<std::int64_t>(slot.size()) >= capacity_)
        throw InvalidArgument("class " + std::to_string(code.class_index) + " already holds M codes");
    code.values = code.values.detach().clone();
    slot.push_back(std::move(code));
}

const std::vector<LatentCode>& Codebook::entries(std::int64_t class_index) const
{
    if (class_index < 0 || class_index >= num_classes())
        throw InvalidArgument("class " + std::to_string(class_index) + " out of range");
    return entries_[static_cast<std::size_t>(class_index)];
}

const LatentCode& Codebook::entry(std::int64_t class_index, std::int64_t slot) const
{
    const auto& e = entries(class_index);
    if (slot < 0 || slot >= static_cast<std::int64_t>(e.size()))
        throw InvalidArgument("codebook has no entry " + std::to_string(slot) + " for class " +
                              std::to_string(class_index));
    return e[static_cast<std::size_t>(slot)];
}

std::int64_t Codebook::count(std::int64_t class_index) const
{
    return static_cast<std::int64_t>(entries(class_index).size());
}

std::int64_t Codebook::total() const
{
    std::int64_t n = 0;
    for (const auto& e : entries_)
        n += static_cast<std::int64_t>(e.size());
    return n;
}

void Codebook::check_backend(const GeneratorBackend& backend) const
{
    if (backend.fingerprint() != fingerprint_)
        throw InvalidArgument("codebook was built with backend '" + fingerprint_ + "', not '" +
                              backend.fingerprint() + "'");
}

void Codebook::save(const std::filesystem::path& dir, const nlohmann::json& config_echo) const
{
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "latentsub.codebook";
    manifest["capacity"] = capacity_;
    manifest["num_classes"] = num_classes();
    manifest["backend_fingerprint"] = fingerprint_;
    manifest["descriptor"] = descriptor_.to_json();
    manifest["config"] = config_echo;
    manifest["classes"] = nlohmann::json::array();
    for (std::int64_t c = 0; c < num_classes(); ++c) {
        std::ostringstream name;
        name << "class_" << std::setw(3) << std::setfill('0') << c;
        const auto& e = entries(c);
        TensorArchive archive;
        if (!e.empty())
            archive.put("codes", stack_codes(e));
        std::vector<std::string> sources;
        for (const auto& code : e)
            sources.emplace_back(to_string(code.source));
        archive.meta() = {{"kind", "codebook_class"}, {"class", c}, {"count", e.size()}, {"sources", sources}};
        archive.save(dir / name.str());
        manifest["classes"].push_back({{"class", c},
                                       {"count", e.size()},
                                       {"file", name.str()},
                                       {"backend_fingerprint", fingerprint_},
                                       {"underfilled", static_cast<std::int64_t>(e.size()) < capacity_}});
    }
    std::ofstream out(dir / "codebook.json");
    if (!out)
        throw IoError("cannot write codebook manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

Codebook Codebook::load(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "codebook.json");
    if (!in)
        throw IoError("no codebook manifest in " + dir.string());
    nlohmann::json manifest;
    in >> manifest;
    if (manifest.value("format", "") != "latentsub.codebook")
        throw IoError(dir.string() + " does not hold a codebook");
    Codebook book(manifest.at("num_classes").get<std::int64_t>(), manifest.at("capacity").get<std::int64_t>(),
                  manifest.at("backend_fingerprint").get<std::string>(),
                  BackendDescriptor::from_json(manifest.at("descriptor")));
    for (const auto& entry : manifest.at("classes")) {
        const auto c = entry.at("class").get<std::int64_t>();
        const auto count = entry.at("count").get<std::int64_t>();
        if (count == 0)
            continue;
        auto archive = TensorArchive::load(dir / entry.at("file").get<std::string>());
        const auto& codes = archive.get("codes");
        const auto sources = archive.meta().at("sources").get<std::vector<std::string>>();
        for (std::int64_t i = 0; i < count; ++i)
            book.append({codes[i].clone(), c, parse_latent_source(sources.at(static_cast<std::size_t>(i)))});
    }
    book.freeze();
    return book;
}

std::int64_t Stage1Result::generated() const
{
    std::int64_t n = 0;
    for (const auto& f : fills)
        n += f.generated;
    return n;
}

nlohmann::json Stage1Result::summary() const
{
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& f : fills)
        classes.push_back({{"class", f.class_index},
                           {"generated", f.generated},
                           {"accepted", f.accepted},
                           {"underfilled", f.underfilled}});
    return {{"capacity", codebook.capacity()},
            {"generated", generated()},
            {"codes", codebook.total()},
            {"underfilled_classes", underfilled_classes},
            {"ledger", ledger.to_json()},
            {"classes", classes}};
}

Stage1Result build_codebook(GeneratorBackend& generator, BlackBox& oracle, const MembershipConfig& cfg,
                            std::int64_t capacity, std::int64_t max_candidates_per_class)
{
    cfg.validate();
    if (max_candidates_per_class < 1)
        throw ConfigError("max_candidates_per_class must be positive");
    const auto& classes = generator.classes();
    if (oracle.num_classes() != classes.num_classes())
        throw ConfigError("oracle and generator disagree on the number of classes");
    Codebook book(classes.num_classes(), capacity, generator.fingerprint(), generator.descriptor());
    std::vector<ClassFill> fills;
    std::vector<std::int64_t> underfilled;

    for (std::int64_t c = 0; c < classes.num_classes(); ++c) {
        ClassFill fill{c, 0, 0, false};
        const auto class_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(c), 0x57a6e1);
        while (book.count(c) < capacity && fill.generated < max_candidates_per_class) {
            const auto chunk = std::min(capacity - book.count(c), max_candidates_per_class - fill.generated);
            std::vector<ImageBatch> candidates;
            for (std::int64_t j = 0; j < chunk; ++j)
                candidates.push_back(
                    generator.text_to_images(c, 1, derive_seed(class_seed, static_cast<std::uint64_t>(fill.generated + j))));
            const auto batch = ImageBatch::concat(candidates);
            MembershipConfig class_cfg = cfg;
            class_cfg.seed = class_seed;
            const auto result = filter_members(batch, oracle, class_cfg, fill.generated);
            fill.generated += chunk;
            if (result.members.size() > 0) {
                for (auto& code : generator.encode(result.members)) {
                    code.class_index = c;
                    book.append(std::move(code));
                    ++fill.accepted;
                }
            }
        }
        fill.underfilled = book.count(c) < capacity;
        if (fill.underfilled)
            underfilled.push_back(c);
        fills.push_back(fill);
    }
    book.freeze();
    return Stage1Result{std::move(book), oracle.snapshot_ledger(), std::move(fills), std::move(underfilled)};
}

} // namespace latentsub
