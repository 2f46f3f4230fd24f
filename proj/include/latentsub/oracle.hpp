#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentsub/image_batch.hpp"
#include "latentsub/models.hpp"

namespace latentsub {

/// Per-stage query counters. n_stage1 + n_stage2 is the attack's query
/// budget consumption (N_QB); evaluation queries are metered separately.
struct QueryLedger {
    std::int64_t n_stage1 = 0;
    std::int64_t n_stage2 = 0;
    std::int64_t n_eval = 0;

    std::int64_t total() const { return n_stage1 + n_stage2 + n_eval; }
    std::int64_t attack_queries() const { return n_stage1 + n_stage2; }
    std::int64_t& counter(Stage stage);
    std::int64_t counter(Stage stage) const;

    nlohmann::json to_json() const;
    static QueryLedger from_json(const nlohmann::json& j);
    bool operator==(const QueryLedger&) const = default;
};

class BudgetExhausted : public Error {
public:
    BudgetExhausted(QueryLedger ledger, std::int64_t requested, std::int64_t budget);
    const QueryLedger& ledger() const { return ledger_; }
    std::int64_t requested() const { return requested_; }

private:
    QueryLedger ledger_;
    std::int64_t requested_;
};

class TransportError : public Error {
public:
    TransportError(const std::string& what, int attempts) : Error(what), attempts_(attempts) {}
    int attempts() const { return attempts_; }

private:
    int attempts_;
};

/// Whatever actually answers classification requests.
class ClassifierBackend {
public:
    virtual ~ClassifierBackend() = default;
    /// One output per image; probabilities are included only when `mode` asks for them.
    virtual std::vector<OracleOutput> classify(const torch::Tensor& pixels, OutputMode mode) = 0;
    virtual std::int64_t num_classes() const = 0;
};

/// Fixed-weight local model. Forward passes are serialized.
class LocalClassifier : public ClassifierBackend {
public:
    explicit LocalClassifier(std::shared_ptr<ClassifierNet> net);
    std::vector<OracleOutput> classify(const torch::Tensor& pixels, OutputMode mode) override;
    std::int64_t num_classes() const override { return net_->num_classes(); }
    ClassifierNet& net() { return *net_; }

private:
    std::shared_ptr<ClassifierNet> net_;
    std::mutex mutex_;
};

/// HTTP client for `POST /classify`. Failed requests are retried up to
/// `retries` more times; a request counts once however many attempts it took.
class RemoteClassifier : public ClassifierBackend {
public:
    RemoteClassifier(std::string host, int port, std::int64_t num_classes, int retries = 3,
                     int timeout_seconds = 30);
    std::vector<OracleOutput> classify(const torch::Tensor& pixels, OutputMode mode) override;
    std::int64_t num_classes() const override { return num_classes_; }
    int last_attempts() const { return last_attempts_; }

private:
    std::string host_;
    int port_;
    std::int64_t num_classes_;
    int retries_;
    int timeout_seconds_;
    int last_attempts_ = 0;
};

/// Request body for `POST /classify`.
nlohmann::json make_classify_request(const torch::Tensor& pixels, OutputMode mode);
/// Server-side handling of a `/classify` body; used by the bundled server.
nlohmann::json answer_classify_request(ClassifierBackend& backend, const nlohmann::json& request);

/// The black-box query surface seen by the attack.
class BlackBox {
public:
    virtual ~BlackBox() = default;
    virtual std::vector<OracleOutput> query(const ImageBatch& batch, Stage stage) = 0;
    virtual QueryLedger snapshot_ledger() const = 0;
    virtual OutputMode mode() const = 0;
    virtual std::int64_t num_classes() const = 0;
    /// Remaining stage-1 + stage-2 queries, or nullopt when unlimited.
    virtual std::optional<std::int64_t> remaining_budget() const = 0;
};

enum class Transport { Local, Remote };

struct OracleConfig {
    OutputMode mode = OutputMode::Probability;
    Transport transport = Transport::Local;
    /// Cap on stage-1 + stage-2 queries; evaluation queries are not charged.
    std::optional<std::int64_t> budget;
};

/// Meters every query against the ledger. The budget check and the counter
/// reservation happen in one critical section; a batch is either answered
/// in full and counted in full, or rejected with nothing counted.
class MeteredOracle : public BlackBox {
public:
    MeteredOracle(std::shared_ptr<ClassifierBackend> backend, OracleConfig config);

    std::vector<OracleOutput> query(const ImageBatch& batch, Stage stage) override;
    QueryLedger snapshot_ledger() const override;
    OutputMode mode() const override { return config_.mode; }
    std::int64_t num_classes() const override { return backend_->num_classes(); }
    std::optional<std::int64_t> remaining_budget() const override;
    const OracleConfig& config() const { return config_; }

    /// Resumes metering from a checkpointed ledger. Only valid before the first query.
    void restore_ledger(const QueryLedger& ledger);

private:
    std::shared_ptr<ClassifierBackend> backend_;
    OracleConfig config_;
    mutable std::mutex mutex_;
    QueryLedger ledger_;
    std::int64_t reserved_ = 0;
    bool used_ = false;
};

/// Pass-through wrapper that independently counts every image it forwards.
class RecordingOracle : public BlackBox {
public:
    struct Call {
        Stage stage;
        std::int64_t images;
    };

    explicit RecordingOracle(BlackBox& inner) : inner_(inner) {}
    std::vector<OracleOutput> query(const ImageBatch& batch, Stage stage) override;
    QueryLedger snapshot_ledger() const override { return inner_.snapshot_ledger(); }
    OutputMode mode() const override { return inner_.mode(); }
    std::int64_t num_classes() const override { return inner_.num_classes(); }
    std::optional<std::int64_t> remaining_budget() const override { return inner_.remaining_budget(); }

    std::vector<Call> calls() const;
    std::int64_t images_forwarded(Stage stage) const;
    std::int64_t images_forwarded() const;

private:
    BlackBox& inner_;
    mutable std::mutex mutex_;
    std::vector<Call> calls_;
};

/// Target checkpoint: TargetNet weights + manifest metadata.
void save_target_checkpoint(TargetNet& net, const nlohmann::json& meta, const std::filesystem::path& stem);
TargetNet load_target_checkpoint(const std::filesystem::path& stem, nlohmann::json* meta = nullptr);

/// Builds a metered oracle around a target checkpoint (LOCAL transport).
std::shared_ptr<MeteredOracle> open_local_oracle(const std::filesystem::path& checkpoint, OracleConfig config);

/// Converts logits to one OracleOutput per row (softmax in double precision).
std::vector<OracleOutput> outputs_from_logits(const torch::Tensor& logits, OutputMode mode);

} // namespace latentsub
