#pragma once

#include <cstdint>
#include <vector>

#include "latentsub/image_batch.hpp"

namespace latentsub {

struct ToyDatasetSpec {
    std::int64_t num_classes = 10;
    std::int64_t image_size = 32;
    std::int64_t samples_per_class = 100;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Rendering distribution for the procedural shapes world.
///  - Private: the narrow style the target model is trained on (dark
///    backgrounds, centered mid-sized shapes, faithful colors).
///  - Prior: the generator's broad notion of a class (any background,
///    varied size/position/color, occasional distractors). Part of this
///    family overlaps the private style, most of it does not.
enum class ToyStyle { Private, Prior };

/// Class names are "<color>-<shape>" pairs, e.g. "red-circle". At most 36.
ClassSpace toy_class_space(std::int64_t num_classes);

/// Renders one 3 x size x size image of class `cls`; pure function of its arguments.
torch::Tensor render_toy_image(std::int64_t cls, std::int64_t num_classes, std::int64_t size,
                               ToyStyle style, std::uint64_t seed);

/// Renders `count` images of one class; image j uses derive_seed(seed, cls, j).
ImageBatch render_toy_class(std::int64_t cls, std::int64_t num_classes, std::int64_t size,
                            ToyStyle style, std::int64_t count, std::uint64_t seed,
                            std::int64_t first_index = 0);

/// num_classes x samples_per_class images, classes interleaved (image i has
/// label i mod num_classes). Row j of class c matches render_toy_class(c, ..., seed)[j].
ImageBatch generate_toy_dataset(const ToyDatasetSpec& spec, ToyStyle style = ToyStyle::Private);

} // namespace latentsub
