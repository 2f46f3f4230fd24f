#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace latentsub::wire {

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// {"shape": [...], "dtype": "float32", "data": base64(raw little-endian float32)}
nlohmann::json tensor_to_json(const torch::Tensor& tensor);
torch::Tensor tensor_from_json(const nlohmann::json& j);

} // namespace latentsub::wire
