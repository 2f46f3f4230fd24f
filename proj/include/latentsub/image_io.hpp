#pragma once

#include <filesystem>

#include "latentsub/image_batch.hpp"

namespace latentsub {

/// Decodes a PNG into a C x H x W float tensor in [0,1] (gray, gray+alpha,
/// RGB and RGBA inputs all come back as 3 channels; alpha is dropped).
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a 3 x H x W (or 1 x H x W) tensor in [0,1] as an 8-bit PNG.
void write_png(const torch::Tensor& image, const std::filesystem::path& path);

/// Tiles a batch into a grid with `columns` images per row and writes it as PNG.
void write_image_grid(const ImageBatch& batch, std::int64_t columns, const std::filesystem::path& path);

/// Bilinear resize of a B x C x H x W tensor to size x size.
torch::Tensor resize_bilinear(const torch::Tensor& images, std::int64_t size);

/// Loads `<root>/<class_name>/*.png`. Every subdirectory must name a class of
/// `classes`, and every class must have at least one image.
ImageBatch load_image_folder(const std::filesystem::path& root, const ClassSpace& classes,
                             std::int64_t image_size);

} // namespace latentsub
