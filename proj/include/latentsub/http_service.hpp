#pragma once

#include <memory>
#include <string>

#include "latentsub/generator.hpp"
#include "latentsub/oracle.hpp"

namespace latentsub {

/// A background HTTP server; stops and joins on destruction.
class HttpService {
public:
    struct Impl;
    explicit HttpService(std::unique_ptr<Impl> impl);
    ~HttpService();
    HttpService(const HttpService&) = delete;
    HttpService& operator=(const HttpService&) = delete;

    int port() const;
    void stop();
    /// Blocks until the server stops.
    void wait();

private:
    std::unique_ptr<Impl> impl_;
};

/// Serves `POST /classify` for a classifier. Port 0 picks a free port.
std::unique_ptr<HttpService> serve_classifier(std::shared_ptr<ClassifierBackend> backend,
                                              const std::string& host = "127.0.0.1", int port = 0);

/// Serves `/generate`, `/img2img` and `/encode` on top of a local backend,
/// mirroring the protocol RemoteGeneratorBackend speaks.
std::unique_ptr<HttpService> serve_generator(std::shared_ptr<GeneratorBackend> backend,
                                             const std::string& host = "127.0.0.1", int port = 0);

} // namespace latentsub
