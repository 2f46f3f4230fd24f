#include "latentsub/image_batch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace latentsub {

ImageBatch::ImageBatch(torch::Tensor pixels, std::optional<std::vector<std::int64_t>> labels,
                       std::optional<std::int64_t> num_classes)
    : pixels_(std::move(pixels)), labels_(std::move(labels))
{
    if (!pixels_.defined() || pixels_.dim() != 4)
        throw ShapeMismatch("image batch must be a 4-d tensor (B x C x H x W)");
    if (pixels_.scalar_type() != torch::kFloat32)
        pixels_ = pixels_.to(torch::kFloat32);
    pixels_ = pixels_.contiguous();
    if (pixels_.numel() > 0) {
        if (!torch::isfinite(pixels_).all().item<bool>())
            throw InvalidArgument("image batch contains non-finite pixels");
        const float lo = pixels_.min().item<float>();
        const float hi = pixels_.max().item<float>();
        if (lo < 0.0f || hi > 1.0f)
            throw InvalidArgument("pixel values must lie in [0,1], got range [" +
                                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    if (labels_) {
        if (static_cast<std::int64_t>(labels_->size()) != pixels_.size(0))
            throw ShapeMismatch("label count does not match batch size");
        for (auto l : *labels_) {
            if (l < 0 || (num_classes && l >= *num_classes))
                throw InvalidArgument("label " + std::to_string(l) + " out of range");
        }
    }
}

ImageBatch ImageBatch::empty(std::int64_t channels, std::int64_t height, std::int64_t width)
{
    return ImageBatch(torch::zeros({0, channels, height, width}), std::vector<std::int64_t>{});
}

ImageBatch ImageBatch::concat(std::span<const ImageBatch> parts)
{
    if (parts.empty())
        throw InvalidArgument("cannot concatenate zero batches");
    std::vector<torch::Tensor> tensors;
    bool all_labeled = true;
    std::vector<std::int64_t> labels;
    for (const auto& p : parts) {
        tensors.push_back(p.pixels());
        if (p.has_labels())
            labels.insert(labels.end(), p.labels()->begin(), p.labels()->end());
        else
            all_labeled = false;
    }
    auto joined = torch::cat(tensors, 0);
    if (all_labeled)
        return ImageBatch(joined, std::move(labels));
    return ImageBatch(joined);
}

std::int64_t ImageBatch::label(std::int64_t i) const
{
    if (!labels_)
        throw InvalidArgument("batch has no labels");
    return labels_->at(static_cast<std::size_t>(i));
}

ImageBatch ImageBatch::slice(std::int64_t begin, std::int64_t end) const
{
    auto px = pixels_.slice(0, begin, end);
    if (!labels_)
        return ImageBatch(px);
    return ImageBatch(px, std::vector<std::int64_t>(labels_->begin() + begin, labels_->begin() + end));
}

ImageBatch ImageBatch::select(std::span<const std::int64_t> indices) const
{
    auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
    auto px = indices.empty() ? pixels_.slice(0, 0, 0) : pixels_.index_select(0, idx);
    if (!labels_)
        return ImageBatch(px);
    std::vector<std::int64_t> picked;
    picked.reserve(indices.size());
    for (auto i : indices)
        picked.push_back(labels_->at(static_cast<std::size_t>(i)));
    return ImageBatch(px, std::move(picked));
}

ImageBatch ImageBatch::with_labels(std::vector<std::int64_t> labels) const
{
    return ImageBatch(pixels_, std::move(labels));
}

ClassSpace::ClassSpace(std::vector<std::string> names) : names_(std::move(names))
{
    if (names_.size() < 2)
        throw InvalidArgument("a class space needs at least 2 classes");
    std::set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty())
            throw InvalidArgument("class names must be non-empty");
        if (!seen.insert(n).second)
            throw InvalidArgument("duplicate class name '" + n + "'");
    }
}

const std::string& ClassSpace::name(std::int64_t index) const
{
    if (index < 0 || index >= num_classes())
        throw InvalidArgument("class index " + std::to_string(index) + " out of range");
    return names_[static_cast<std::size_t>(index)];
}

std::int64_t ClassSpace::index_of(std::string_view name) const
{
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end())
        throw InvalidArgument("unknown class '" + std::string(name) + "'");
    return it - names_.begin();
}

bool ClassSpace::contains(std::string_view name) const
{
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::int64_t argmax_lowest(std::span<const double> values)
{
    if (values.empty())
        throw InvalidArgument("argmax of an empty vector");
    std::int64_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)])
            best = static_cast<std::int64_t>(i);
    }
    return best;
}

OracleOutput OracleOutput::from_probabilities(std::vector<double> probs)
{
    if (probs.size() < 2)
        throw InvalidArgument("probability output needs at least 2 entries");
    double sum = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0)
            throw InvalidArgument("probability output has a negative or non-finite entry");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw InvalidArgument("probability output sums to " + std::to_string(sum) + ", not 1");
    OracleOutput out;
    out.mode_ = OutputMode::Probability;
    out.label_ = argmax_lowest(probs);
    out.probs_ = std::move(probs);
    return out;
}

OracleOutput OracleOutput::from_label(std::int64_t label)
{
    if (label < 0)
        throw InvalidArgument("label must be non-negative");
    OracleOutput out;
    out.mode_ = OutputMode::LabelOnly;
    out.label_ = label;
    return out;
}

} // namespace latentsub
