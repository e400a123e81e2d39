#include "petal/image.hpp"

#include <algorithm>
#include <cmath>

#include <png.h>

namespace petal {

Image to_gray(const Image& img)
{
    if (img.channels == 1)
        return img;
    Image out(img.width, img.height, 1);
    out.annotated_quality = img.annotated_quality;
    for (std::size_t i = 0; i < img.plane(); ++i) {
        float s = 0.0f;
        for (int c = 0; c < img.channels; ++c)
            s += img.data[c * img.plane() + i];
        out.data[i] = s / static_cast<float>(img.channels);
    }
    return out;
}

void quantize_8bit(Image& img)
{
    for (float& v : img.data)
        v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
}

Image read_png(const std::filesystem::path& path)
{
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str()))
        throw InputError("cannot read PNG '" + path.string() + "': " + png.message);
    const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
    png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw InputError("cannot decode PNG '" + path.string() + "': " + msg);
    }
    const int c = color ? 3 : 1;
    Image img(static_cast<int>(png.width), static_cast<int>(png.height), c);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int k = 0; k < c; ++k)
                img.at(k, y, x) = buf[(static_cast<std::size_t>(y) * img.width + x) * c + k] / 255.0f;
    return img;
}

void write_png(const Image& img, const std::filesystem::path& path)
{
    if (img.empty())
        throw InputError("refusing to write an empty image");
    if (img.channels != 1 && img.channels != 3)
        throw InputError("PNG output supports 1 or 3 channels");
    std::vector<unsigned char> buf(img.plane() * img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int k = 0; k < img.channels; ++k)
                buf[(static_cast<std::size_t>(y) * img.width + x) * img.channels + k] =
                    static_cast<unsigned char>(std::lround(std::clamp(img.at(k, y, x), 0.0f, 1.0f) * 255.0f));
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr))
        throw InputError("cannot write PNG '" + path.string() + "': " + png.message);
}

} // namespace petal
