#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "petal/core.hpp"

namespace petal {

/// Planar float image with intensities in [0, 1], channel-major storage.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<float> data;
    /// Externally computed quality score carried alongside the pixels (e.g. a
    /// manifest `quality` field produced by an offline IQA network).
    std::optional<double> annotated_quality;

    Image() = default;
    Image(int w, int h, int c = 1, float fill = 0.0f)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill)
    {}

    bool empty() const { return data.empty(); }
    std::size_t plane() const { return static_cast<std::size_t>(width) * height; }

    float& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    float at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }

    bool same_pixels(const Image& o) const
    {
        return width == o.width && height == o.height && channels == o.channels && data == o.data;
    }
};

/// Mean over channels.
Image to_gray(const Image& img);

/// Rounds every intensity to the nearest multiple of 1/255 and clamps to [0, 1],
/// so the image survives an 8-bit PNG round trip unchanged.
void quantize_8bit(Image& img);

Image read_png(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);

/// Stacks images into a (p x C*H*W) matrix, one flattened image per row.
template <typename Scalar>
Mat<Scalar> pixel_rows(std::span<const Image> images)
{
    if (images.empty())
        return Mat<Scalar>(0, 0);
    const auto cols = static_cast<Eigen::Index>(images.front().data.size());
    Mat<Scalar> out(static_cast<Eigen::Index>(images.size()), cols);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (static_cast<Eigen::Index>(images[i].data.size()) != cols)
            throw DimensionError("images in one batch must share a shape");
        for (Eigen::Index j = 0; j < cols; ++j)
            out(static_cast<Eigen::Index>(i), j) = static_cast<Scalar>(images[i].data[j]);
    }
    return out;
}

} // namespace petal
