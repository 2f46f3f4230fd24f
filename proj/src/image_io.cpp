#include "latentsub/image_io.hpp"

#include <algorithm>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

namespace latentsub {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

torch::Tensor read_png(const std::filesystem::path& path)
{
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp)
        throw IoError("cannot open image " + path.string());
    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
        throw IoError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed for " + path.string());
    }
    std::vector<png_byte> pixels;
    png_uint_32 width = 0, height = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG data in " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    const int color_type = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16)
        png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
        if (png_get_bit_depth(png, info) < 8)
            png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
    }
    if (color_type & PNG_COLOR_MASK_ALPHA)
        png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const auto rowbytes = png_get_rowbytes(png, info);
    pixels.resize(rowbytes * height);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y)
        rows[y] = pixels.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    if (rowbytes != static_cast<std::size_t>(width) * 3)
        throw IoError("unsupported PNG layout in " + path.string());
    auto t = torch::from_blob(pixels.data(), {static_cast<std::int64_t>(height), static_cast<std::int64_t>(width), 3},
                              torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(255.0)
                 .contiguous();
    return t;
}

void write_png(const torch::Tensor& image, const std::filesystem::path& path)
{
    if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1))
        throw ShapeMismatch("write_png expects a 1 x H x W or 3 x H x W tensor");
    auto rgb = image.size(0) == 1 ? image.expand({3, image.size(1), image.size(2)}) : image;
    auto bytes = rgb.detach()
                     .to(torch::kFloat32)
                     .clamp(0.0, 1.0)
                     .mul(255.0)
                     .round()
                     .to(torch::kUInt8)
                     .permute({1, 2, 0})
                     .contiguous();
    const auto height = static_cast<png_uint_32>(bytes.size(0));
    const auto width = static_cast<png_uint_32>(bytes.size(1));

    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp)
        throw IoError("cannot write image " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto* base = bytes.data_ptr<std::uint8_t>();
    for (png_uint_32 y = 0; y < height; ++y)
        png_write_row(png, base + static_cast<std::size_t>(y) * width * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_image_grid(const ImageBatch& batch, std::int64_t columns, const std::filesystem::path& path)
{
    if (batch.size() == 0)
        throw InvalidArgument("cannot write an empty image grid");
    columns = std::clamp<std::int64_t>(columns, 1, batch.size());
    const auto rows = (batch.size() + columns - 1) / columns;
    const std::int64_t h = batch.height(), w = batch.width(), pad = 1;
    auto grid = torch::ones({batch.channels(), rows * (h + pad) + pad, columns * (w + pad) + pad});
    for (std::int64_t i = 0; i < batch.size(); ++i) {
        const auto r = i / columns, c = i % columns;
        grid.slice(1, pad + r * (h + pad), pad + r * (h + pad) + h)
            .slice(2, pad + c * (w + pad), pad + c * (w + pad) + w)
            .copy_(batch.pixels()[i]);
    }
    write_png(grid, path);
}

torch::Tensor resize_bilinear(const torch::Tensor& images, std::int64_t size)
{
    if (images.size(2) == size && images.size(3) == size)
        return images;
    namespace F = torch::nn::functional;
    return F::interpolate(images, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{size, size})
                                      .mode(torch::kBilinear)
                                      .align_corners(false))
        .clamp(0.0, 1.0);
}

ImageBatch load_image_folder(const std::filesystem::path& root, const ClassSpace& classes,
                             std::int64_t image_size)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
        throw IoError("image folder " + root.string() + " does not exist");

    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory())
            continue;
        const auto name = entry.path().filename().string();
        if (!classes.contains(name))
            throw IoError("directory '" + name + "' in " + root.string() + " does not name a known class");
        dirs.push_back(entry.path());
    }

    std::vector<torch::Tensor> images;
    std::vector<std::int64_t> labels;
    std::vector<std::string> empty;
    for (std::int64_t c = 0; c < classes.num_classes(); ++c) {
        const auto dir = root / classes.name(c);
        std::vector<fs::path> files;
        if (fs::is_directory(dir)) {
            for (const auto& f : fs::directory_iterator(dir)) {
                if (f.is_regular_file() && f.path().extension() == ".png")
                    files.push_back(f.path());
            }
        }
        if (files.empty()) {
            empty.push_back(classes.name(c));
            continue;
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            auto img = read_png(f).unsqueeze(0);
            images.push_back(resize_bilinear(img, image_size).squeeze(0));
            labels.push_back(c);
        }
    }
    if (!empty.empty()) {
        std::string list;
        for (const auto& e : empty)
            list += (list.empty() ? "" : ", ") + e;
        throw IoError("no images found for class(es): " + list);
    }
    return ImageBatch(torch::stack(images), std::move(labels), classes.num_classes());
}

} // namespace latentsub
