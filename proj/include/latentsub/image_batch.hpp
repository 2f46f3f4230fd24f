#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "latentsub/common.hpp"

namespace latentsub {

/// A batch of images in the [0,1] pixel domain, B x C x H x W float32, with
/// optional class labels. Validated on construction.
class ImageBatch {
public:
    ImageBatch() = default;
    explicit ImageBatch(torch::Tensor pixels, std::optional<std::vector<std::int64_t>> labels = {},
                        std::optional<std::int64_t> num_classes = {});

    static ImageBatch empty(std::int64_t channels, std::int64_t height, std::int64_t width);
    static ImageBatch concat(std::span<const ImageBatch> parts);

    const torch::Tensor& pixels() const { return pixels_; }
    const std::optional<std::vector<std::int64_t>>& labels() const { return labels_; }
    bool has_labels() const { return labels_.has_value(); }
    std::int64_t label(std::int64_t i) const;

    std::int64_t size() const { return pixels_.defined() ? pixels_.size(0) : 0; }
    std::int64_t channels() const { return pixels_.size(1); }
    std::int64_t height() const { return pixels_.size(2); }
    std::int64_t width() const { return pixels_.size(3); }

    ImageBatch slice(std::int64_t begin, std::int64_t end) const;
    ImageBatch select(std::span<const std::int64_t> indices) const;
    ImageBatch with_labels(std::vector<std::int64_t> labels) const;

private:
    torch::Tensor pixels_;
    std::optional<std::vector<std::int64_t>> labels_;
};

/// The label universe of a task; names double as text prompts.
class ClassSpace {
public:
    explicit ClassSpace(std::vector<std::string> names);

    std::int64_t num_classes() const { return static_cast<std::int64_t>(names_.size()); }
    const std::string& name(std::int64_t index) const;
    std::int64_t index_of(std::string_view name) const;
    bool contains(std::string_view name) const;
    const std::vector<std::string>& names() const { return names_; }

private:
    std::vector<std::string> names_;
};

/// Index of the largest element; ties resolve to the lowest index.
std::int64_t argmax_lowest(std::span<const double> values);

/// One black-box answer. Probability answers are checked on construction:
/// non-negative, summing to 1 within 1e-6, label equal to the argmax.
class OracleOutput {
public:
    static OracleOutput from_probabilities(std::vector<double> probs);
    static OracleOutput from_label(std::int64_t label);

    OutputMode mode() const { return mode_; }
    const std::optional<std::vector<double>>& probs() const { return probs_; }
    std::int64_t label() const { return label_; }

    /// Drops the probability vector, keeping the label.
    OracleOutput label_only() const { return from_label(label_); }

private:
    OracleOutput() = default;
    OutputMode mode_ = OutputMode::LabelOnly;
    std::optional<std::vector<double>> probs_;
    std::int64_t label_ = 0;
};

} // namespace latentsub
