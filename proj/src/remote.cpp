#include <algorithm>
#include <future>
#include <thread>

#include <httplib.h>

#include "latentsub/http_service.hpp"
#include "latentsub/wire.hpp"

namespace latentsub {

// ---- classifier client ----------------------------------------------------

RemoteClassifier::RemoteClassifier(std::string host, int port, std::int64_t num_classes, int retries,
                                   int timeout_seconds)
    : host_(std::move(host)), port_(port), num_classes_(num_classes), retries_(retries),
      timeout_seconds_(timeout_seconds)
{
    if (retries_ < 0)
        throw ConfigError("retry count must be non-negative");
}

std::vector<OracleOutput> RemoteClassifier::classify(const torch::Tensor& pixels, OutputMode mode)
{
    const auto body = make_classify_request(pixels, mode).dump();
    httplib::Client client(host_, port_);
    client.set_connection_timeout(timeout_seconds_, 0);
    client.set_read_timeout(timeout_seconds_, 0);
    std::string last_error;
    for (int attempt = 1; attempt <= retries_ + 1; ++attempt) {
        last_attempts_ = attempt;
        auto res = client.Post("/classify", body, "application/json");
        if (!res) {
            last_error = httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        nlohmann::json reply;
        try {
            reply = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
            last_error = std::string("malformed reply: ") + e.what();
            continue;
        }
        std::vector<OracleOutput> out;
        const auto& labels = reply.at("labels");
        const auto& probs = reply.at("probs");
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (mode == OutputMode::Probability && !probs.is_null())
                out.push_back(OracleOutput::from_probabilities(probs.at(i).get<std::vector<double>>()));
            else
                out.push_back(OracleOutput::from_label(labels.at(i).get<std::int64_t>()));
        }
        return out;
    }
    throw TransportError("classify request to " + host_ + ":" + std::to_string(port_) + " failed after " +
                             std::to_string(retries_ + 1) + " attempts: " + last_error,
                         retries_ + 1);
}

// ---- generator client -----------------------------------------------------

RemoteGeneratorBackend::RemoteGeneratorBackend(ClassSpace classes, BackendDescriptor descriptor, std::string host,
                                               int port, double strength, int max_in_flight, int timeout_seconds)
    : GeneratorBackend(std::move(classes)), descriptor_(std::move(descriptor)), host_(std::move(host)), port_(port),
      max_in_flight_(std::max(1, max_in_flight)), timeout_seconds_(timeout_seconds)
{
    descriptor_.validate();
    set_strength(strength);
}

nlohmann::json RemoteGeneratorBackend::post(const std::string& path, const nlohmann::json& body) const
{
    httplib::Client client(host_, port_);
    client.set_connection_timeout(timeout_seconds_, 0);
    client.set_read_timeout(timeout_seconds_, 0);
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res)
        throw TransportError("generator request " + path + " failed: " + httplib::to_string(res.error()), 1);
    if (res->status != 200)
        throw TransportError("generator request " + path + " returned HTTP " + std::to_string(res->status), 1);
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw TransportError("generator reply to " + path + " is not JSON: " + e.what(), 1);
    }
}

ImageBatch RemoteGeneratorBackend::text_to_images(std::int64_t class_index, std::int64_t count, std::uint64_t seed)
{
    if (count == 0)
        return ImageBatch::empty(descriptor_.image_channels, descriptor_.image_size, descriptor_.image_size);
    const auto reply = post("/generate", {{"prompt", classes_.name(class_index)}, {"count", count}, {"seed", seed}});
    auto images = wire::tensor_from_json(reply.at("images"));
    return ImageBatch(images.clamp(0.0, 1.0), std::vector<std::int64_t>(static_cast<std::size_t>(count), class_index),
                      classes_.num_classes());
}

std::vector<LatentCode> RemoteGeneratorBackend::encode(const ImageBatch& batch)
{
    check_images(batch);
    if (batch.size() == 0)
        return {};
    const auto reply = post("/encode", {{"image", wire::tensor_to_json(batch.pixels())}});
    auto latents = wire::tensor_from_json(reply.at("latents"));
    if (latents.dim() != 4 || latents.size(0) != batch.size())
        throw ShapeMismatch("/encode returned a latent tensor of the wrong shape");
    std::vector<LatentCode> codes;
    for (std::int64_t i = 0; i < latents.size(0); ++i)
        codes.push_back({latents[i].contiguous(), batch.has_labels() ? batch.label(i) : 0, LatentSource::Encoded});
    check_codes(codes);
    return codes;
}

ImageBatch RemoteGeneratorBackend::decode_seeded(std::span<const LatentCode> codes,
                                                 std::span<const std::uint64_t> image_seeds, double strength)
{
    check_codes(codes);
    if (image_seeds.size() != codes.size())
        throw ShapeMismatch("one image seed per latent code is required");
    if (codes.empty())
        return ImageBatch::empty(descriptor_.image_channels, descriptor_.image_size, descriptor_.image_size);
    std::vector<torch::Tensor> images(codes.size());
    std::vector<std::int64_t> tags;
    for (const auto& c : codes)
        tags.push_back(c.class_index);
    for (std::size_t begin = 0; begin < codes.size(); begin += static_cast<std::size_t>(max_in_flight_)) {
        const auto end = std::min(codes.size(), begin + static_cast<std::size_t>(max_in_flight_));
        std::vector<std::future<nlohmann::json>> inflight;
        for (auto i = begin; i < end; ++i) {
            nlohmann::json body = {{"prompt", classes_.name(codes[i].class_index)},
                                   {"latent", wire::tensor_to_json(codes[i].values)},
                                   {"seed", image_seeds[i]},
                                   {"strength", strength}};
            inflight.push_back(std::async(std::launch::async, [this, body] { return post("/img2img", body); }));
        }
        for (auto i = begin; i < end; ++i)
            images[i] = wire::tensor_from_json(inflight[i - begin].get().at("image"));
    }
    return ImageBatch(torch::stack(images).clamp(0.0, 1.0), std::move(tags), classes_.num_classes());
}

// ---- servers ----------------------------------------------------------------

struct HttpService::Impl {
    httplib::Server server;
    std::thread thread;
    int port = 0;
};

HttpService::HttpService(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

HttpService::~HttpService() { stop(); }

int HttpService::port() const { return impl_->port; }

void HttpService::stop()
{
    if (!impl_)
        return;
    impl_->server.stop();
    if (impl_->thread.joinable())
        impl_->thread.join();
}

void HttpService::wait()
{
    if (impl_ && impl_->thread.joinable())
        impl_->thread.join();
}

namespace {

template <typename Handler>
void json_route(httplib::Server& server, const std::string& path, Handler handler)
{
    server.Post(path, [handler](const httplib::Request& req, httplib::Response& res) {
        try {
            const auto reply = handler(nlohmann::json::parse(req.body));
            res.set_content(reply.dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 400;
            res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
        }
    });
}

std::unique_ptr<HttpService> launch(std::unique_ptr<HttpService::Impl> impl, const std::string& host, int port)
{
    if (port == 0)
        impl->port = impl->server.bind_to_any_port(host);
    else
        impl->port = impl->server.bind_to_port(host, port) ? port : -1;
    if (impl->port < 0)
        throw IoError("cannot bind HTTP server to " + host + ":" + std::to_string(port));
    auto* server = &impl->server;
    impl->thread = std::thread([server] { server->listen_after_bind(); });
    server->wait_until_ready();
    return std::make_unique<HttpService>(std::move(impl));
}

} // namespace

std::unique_ptr<HttpService> serve_classifier(std::shared_ptr<ClassifierBackend> backend, const std::string& host,
                                              int port)
{
    auto impl = std::make_unique<HttpService::Impl>();
    json_route(impl->server, "/classify",
               [backend](const nlohmann::json& request) { return answer_classify_request(*backend, request); });
    return launch(std::move(impl), host, port);
}

std::unique_ptr<HttpService> serve_generator(std::shared_ptr<GeneratorBackend> backend, const std::string& host,
                                             int port)
{
    auto impl = std::make_unique<HttpService::Impl>();
    auto mutex = std::make_shared<std::mutex>();
    json_route(impl->server, "/generate", [backend, mutex](const nlohmann::json& req) {
        std::lock_guard lock(*mutex);
        const auto cls = backend->classes().index_of(req.at("prompt").get<std::string>());
        const auto batch = backend->text_to_images(cls, req.at("count").get<std::int64_t>(),
                                                   req.at("seed").get<std::uint64_t>());
        return nlohmann::json{{"images", wire::tensor_to_json(batch.pixels())}};
    });
    json_route(impl->server, "/img2img", [backend, mutex](const nlohmann::json& req) {
        std::lock_guard lock(*mutex);
        LatentCode code{wire::tensor_from_json(req.at("latent")),
                        backend->classes().index_of(req.at("prompt").get<std::string>()), LatentSource::Augmented};
        std::vector<LatentCode> codes{code};
        const std::vector<std::uint64_t> seeds{req.at("seed").get<std::uint64_t>()};
        const auto batch = backend->decode_seeded(codes, seeds, req.value("strength", 0.5));
        return nlohmann::json{{"image", wire::tensor_to_json(batch.pixels()[0])}};
    });
    json_route(impl->server, "/encode", [backend, mutex](const nlohmann::json& req) {
        std::lock_guard lock(*mutex);
        auto images = wire::tensor_from_json(req.at("image"));
        if (images.dim() == 3)
            images = images.unsqueeze(0);
        const auto codes = backend->encode(ImageBatch(images));
        return nlohmann::json{{"latents", wire::tensor_to_json(stack_codes(codes))}};
    });
    return launch(std::move(impl), host, port);
}

} // namespace latentsub
