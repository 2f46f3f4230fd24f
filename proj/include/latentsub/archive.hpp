#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "latentsub/image_batch.hpp"

namespace latentsub {

/// Named tensors persisted as `<stem>.bin` (raw little-endian, concatenated)
/// plus `<stem>.json` (manifest: name, dtype, shape, byte offset of each
/// tensor, and free-form metadata). Supported dtypes: float32, float64,
/// int64, uint8.
class TensorArchive {
public:
    void put(const std::string& name, const torch::Tensor& tensor);
    const torch::Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    std::vector<std::string> names() const;

    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }

    void save(const std::filesystem::path& stem) const;
    static TensorArchive load(const std::filesystem::path& stem);

private:
    // insertion order is kept so that the data file layout is deterministic
    std::vector<std::string> order_;
    std::map<std::string, torch::Tensor> tensors_;
    nlohmann::json meta_ = nlohmann::json::object();
};

/// Normalizes "foo", "foo.json" and "foo.bin" to the stem "foo".
std::filesystem::path archive_stem(const std::filesystem::path& path);

void save_image_batch(const ImageBatch& batch, const std::filesystem::path& stem);
ImageBatch load_image_batch(const std::filesystem::path& stem);

/// FNV-1a 64-bit digest of a file's bytes, hex encoded.
std::string file_digest(const std::filesystem::path& path);

} // namespace latentsub
