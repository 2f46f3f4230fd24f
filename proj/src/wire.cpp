#include "latentsub/wire.hpp"

#include <array>
#include <cstring>

#include "latentsub/common.hpp"

namespace latentsub::wire {

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

constexpr std::array<int, 256> make_reverse()
{
    std::array<int, 256> r{};
    for (auto& v : r)
        v = -1;
    for (int i = 0; i < 64; ++i)
        r[static_cast<unsigned char>(kAlphabet[i])] = i;
    return r;
}
constexpr auto kReverse = make_reverse();
} // namespace

std::string base64_encode(std::string_view bytes)
{
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const auto n = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += kAlphabet[(n >> 6) & 63];
        out += kAlphabet[n & 63];
    }
    const auto rest = bytes.size() - i;
    if (rest == 1) {
        const auto n = static_cast<unsigned char>(bytes[i]) << 16;
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const auto n = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += kAlphabet[(n >> 6) & 63];
        out += '=';
    }
    return out;
}

std::string base64_decode(std::string_view text)
{
    std::string out;
    out.reserve(text.size() / 4 * 3);
    int buffer = 0, bits = 0;
    for (char c : text) {
        if (c == '=')
            break;
        const int v = kReverse[static_cast<unsigned char>(c)];
        if (v < 0)
            throw InvalidArgument("invalid base64 character");
        buffer = (buffer << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out += static_cast<char>((buffer >> bits) & 0xff);
        }
    }
    return out;
}

nlohmann::json tensor_to_json(const torch::Tensor& tensor)
{
    auto t = tensor.detach().cpu().to(torch::kFloat32).contiguous();
    const auto* p = static_cast<const char*>(t.data_ptr());
    return {{"shape", t.sizes().vec()},
            {"dtype", "float32"},
            {"data", base64_encode(std::string_view(p, static_cast<std::size_t>(t.numel()) * sizeof(float)))}};
}

torch::Tensor tensor_from_json(const nlohmann::json& j)
{
    if (j.value("dtype", "float32") != "float32")
        throw InvalidArgument("only float32 tensors travel over the wire");
    const auto shape = j.at("shape").get<std::vector<std::int64_t>>();
    const auto bytes = base64_decode(j.at("data").get<std::string>());
    auto t = torch::empty(shape, torch::kFloat32);
    if (bytes.size() != static_cast<std::size_t>(t.numel()) * sizeof(float))
        throw ShapeMismatch("tensor payload size does not match its shape");
    std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
    return t;
}

} // namespace latentsub::wire
