#include "latentsub/archive.hpp"

#include <bit>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace latentsub {

static_assert(std::endian::native == std::endian::little, "archives assume a little-endian host");

namespace {

std::string dtype_name(torch::ScalarType t)
{
    switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw InvalidArgument("archive: unsupported dtype");
    }
}

torch::ScalarType dtype_from(const std::string& name)
{
    if (name == "float32") return torch::kFloat32;
    if (name == "float64") return torch::kFloat64;
    if (name == "int64") return torch::kInt64;
    if (name == "uint8") return torch::kUInt8;
    throw IoError("archive: unknown dtype '" + name + "'");
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix)
{
    auto p = stem;
    p += suffix;
    return p;
}

} // namespace

std::filesystem::path archive_stem(const std::filesystem::path& path)
{
    auto ext = path.extension();
    if (ext == ".json" || ext == ".bin") {
        auto p = path;
        return p.replace_extension();
    }
    return path;
}

void TensorArchive::put(const std::string& name, const torch::Tensor& tensor)
{
    dtype_name(tensor.scalar_type());
    if (!tensors_.count(name))
        order_.push_back(name);
    tensors_[name] = tensor.detach().cpu().contiguous().clone();
}

const torch::Tensor& TensorArchive::get(const std::string& name) const
{
    auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw IoError("archive has no tensor named '" + name + "'");
    return it->second;
}

std::vector<std::string> TensorArchive::names() const { return order_; }

void TensorArchive::save(const std::filesystem::path& stem_in) const
{
    const auto stem = archive_stem(stem_in);
    if (stem.has_parent_path())
        std::filesystem::create_directories(stem.parent_path());
    const auto bin_path = with_suffix(stem, ".bin");
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin)
        throw IoError("cannot write " + bin_path.string());

    nlohmann::json manifest;
    manifest["format"] = "latentsub.archive";
    manifest["version"] = 1;
    manifest["byte_order"] = "little";
    manifest["data_file"] = bin_path.filename().string();
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
        const auto& t = tensors_.at(name);
        const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
        bin.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        manifest["tensors"].push_back({{"name", name},
                                       {"dtype", dtype_name(t.scalar_type())},
                                       {"shape", t.sizes().vec()},
                                       {"offset", offset},
                                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    if (!bin)
        throw IoError("write failed for " + bin_path.string());
    manifest["meta"] = meta_;

    const auto json_path = with_suffix(stem, ".json");
    std::ofstream js(json_path, std::ios::trunc);
    if (!js)
        throw IoError("cannot write " + json_path.string());
    js << manifest.dump(2) << "\n";
}

TensorArchive TensorArchive::load(const std::filesystem::path& stem_in)
{
    const auto stem = archive_stem(stem_in);
    const auto json_path = with_suffix(stem, ".json");
    std::ifstream js(json_path);
    if (!js)
        throw IoError("cannot read " + json_path.string());
    nlohmann::json manifest;
    try {
        js >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed archive manifest " + json_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "latentsub.archive")
        throw IoError(json_path.string() + " is not a tensor archive manifest");

    const auto bin_path = stem.parent_path() / manifest.at("data_file").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin)
        throw IoError("cannot read " + bin_path.string());

    TensorArchive archive;
    archive.meta_ = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const auto dtype = dtype_from(entry.at("dtype").get<std::string>());
        auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
        const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
        if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size())
            throw IoError("archive entry '" + entry.at("name").get<std::string>() +
                          "' has inconsistent size");
        bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
        bin.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        if (!bin)
            throw IoError("truncated archive data in " + bin_path.string());
        const auto name = entry.at("name").get<std::string>();
        archive.order_.push_back(name);
        archive.tensors_[name] = t;
    }
    return archive;
}

void save_image_batch(const ImageBatch& batch, const std::filesystem::path& stem)
{
    TensorArchive archive;
    archive.put("pixels", batch.pixels());
    archive.meta()["kind"] = "image_batch";
    archive.meta()["shape"] = batch.pixels().sizes().vec();
    archive.meta()["dtype"] = "float32";
    archive.meta()["labels"] = batch.has_labels() ? nlohmann::json(*batch.labels()) : nlohmann::json();
    archive.save(stem);
}

ImageBatch load_image_batch(const std::filesystem::path& stem)
{
    auto archive = TensorArchive::load(stem);
    if (archive.meta().value("kind", "") != "image_batch")
        throw IoError(stem.string() + " does not hold an image batch");
    const auto& labels = archive.meta()["labels"];
    if (labels.is_null())
        return ImageBatch(archive.get("pixels"));
    return ImageBatch(archive.get("pixels"), labels.get<std::vector<std::int64_t>>());
}

std::string file_digest(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof(buf));
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

} // namespace latentsub
