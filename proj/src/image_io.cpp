#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <regex>
#include <string>

#include "avatarkit/errors.hpp"
#include "avatarkit/raster.hpp"

namespace avk {

namespace fs = std::filesystem;

Image downsample(const Image& img, int factor) {
    if (factor < 1 || img.width % factor || img.height % factor)
        throw InvalidArgument("downsample: factor must divide the image size");
    if (factor == 1) return img;
    Image out(img.width / factor, img.height / factor, img.channels);
    const double inv = 1.0 / (factor * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            int fg = 0;
            for (int c = 0; c < img.channels; ++c) {
                double s = 0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) s += img.at(x * factor + dx, y * factor + dy, c);
                out.at(x, y, c) = s * inv;
            }
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    fg += img.foreground[std::size_t(y * factor + dy) * img.width + x * factor + dx];
            out.foreground[std::size_t(y) * out.width + x] = 2 * fg >= factor * factor;
        }
    return out;
}

Image upsample(const Image& img, int factor) {
    if (factor < 1) throw InvalidArgument("upsample: factor must be positive");
    Image out(img.width * factor, img.height * factor, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x / factor, y / factor, c);
            out.foreground[std::size_t(y) * out.width + x] =
                img.foreground[std::size_t(y / factor) * img.width + x / factor];
        }
    return out;
}

Image resize_area(const Image& img, int width, int height) {
    if (width < 1 || height < 1) throw InvalidArgument("resize_area: empty target size");
    if (width == img.width && height == img.height) return img;
    Image out(width, height, img.channels);
    const double sx = double(img.width) / width, sy = double(img.height) / height;
    std::vector<double> fg(std::size_t(width) * height, 0.0);
    for (int y = 0; y < height; ++y) {
        const double y0 = y * sy, y1 = (y + 1) * sy;
        for (int x = 0; x < width; ++x) {
            const double x0 = x * sx, x1 = (x + 1) * sx;
            double wsum = 0;
            for (int iy = int(std::floor(y0)); iy < std::min(img.height, int(std::ceil(y1))); ++iy) {
                const double wy = std::min(y1, iy + 1.0) - std::max(y0, double(iy));
                if (wy <= 0) continue;
                for (int ix = int(std::floor(x0)); ix < std::min(img.width, int(std::ceil(x1))); ++ix) {
                    const double wx = std::min(x1, ix + 1.0) - std::max(x0, double(ix));
                    if (wx <= 0) continue;
                    const double w = wx * wy;
                    wsum += w;
                    for (int c = 0; c < img.channels; ++c) out.at(x, y, c) += w * img.at(ix, iy, c);
                    fg[std::size_t(y) * width + x] += w * img.foreground[std::size_t(iy) * img.width + ix];
                }
            }
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) /= wsum;
            out.foreground[std::size_t(y) * width + x] = fg[std::size_t(y) * width + x] / wsum >= 0.5;
        }
    }
    return out;
}

void write_png(const Image& img, const fs::path& path) {
    if (img.channels != 1 && img.channels != 3 && img.channels != 4)
        throw InvalidArgument("write_png: unsupported channel count");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_byte> buf(std::size_t(img.width) * img.height * img.channels);
    for (Eigen::Index i = 0; i < img.data.size(); ++i)
        buf[std::size_t(i)] = png_byte(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) rows[std::size_t(y)] = buf.data() + std::size_t(y) * img.width * img.channels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing " + path.string());
    }
    const int type = img.channels == 1 ? PNG_COLOR_TYPE_GRAY
                     : img.channels == 3 ? PNG_COLOR_TYPE_RGB
                                         : PNG_COLOR_TYPE_RGBA;
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const fs::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
    if (!fp) throw IoError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
        throw IoError(path.string() + ": not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng failed reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_expand(png);
    png_read_update_info(png, info);
    const int w = int(png_get_image_width(png, info)), h = int(png_get_image_height(png, info));
    const int c = int(png_get_channels(png, info));
    std::vector<png_byte> buf(std::size_t(w) * h * c);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[std::size_t(y)] = buf.data() + std::size_t(y) * w * c;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    Image img(w, h, c);
    for (std::size_t i = 0; i < buf.size(); ++i) img.data[Eigen::Index(i)] = buf[i] / 255.0;
    return img;
}

void write_npy(const Image& img, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(img.height) + ", " +
                         std::to_string(img.width) + ", " + std::to_string(img.channels) + "), }";
    const std::size_t total = 10 + header.size() + 1;
    header.append((64 - total % 64) % 64, ' ');
    header.push_back('\n');
    const auto len = static_cast<std::uint16_t>(header.size());
    out.write("\x93NUMPY\x01\x00", 8);
    const char lenb[2] = {char(len & 0xff), char(len >> 8)};
    out.write(lenb, 2);
    out.write(header.data(), std::streamsize(header.size()));
    out.write(reinterpret_cast<const char*>(img.data.data()), std::streamsize(img.data.size() * sizeof(double)));
    if (!out) throw IoError("write failed: " + path.string());
}

Image read_npy(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[10];
    in.read(magic, 10);
    if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw IoError(path.string() + ": not a .npy file");
    std::size_t hlen = 0;
    if (magic[6] == 1) {
        hlen = std::size_t(static_cast<unsigned char>(magic[8])) | (std::size_t(static_cast<unsigned char>(magic[9])) << 8);
    } else {
        char more[2];
        in.read(more, 2);
        hlen = std::size_t(static_cast<unsigned char>(magic[8])) | (std::size_t(static_cast<unsigned char>(magic[9])) << 8) |
               (std::size_t(static_cast<unsigned char>(more[0])) << 16) |
               (std::size_t(static_cast<unsigned char>(more[1])) << 24);
    }
    std::string header(hlen, '\0');
    in.read(header.data(), std::streamsize(hlen));
    if (header.find("'<f8'") == std::string::npos) throw IoError(path.string() + ": only <f8 arrays are supported");
    if (header.find("'fortran_order': True") != std::string::npos)
        throw IoError(path.string() + ": fortran order not supported");
    std::smatch m;
    const std::regex shape_re(R"('shape':\s*\((\d+),\s*(\d+)(?:,\s*(\d+))?,?\s*\))");
    if (!std::regex_search(header, m, shape_re)) throw IoError(path.string() + ": unsupported shape");
    const int h = std::stoi(m[1]), w = std::stoi(m[2]);
    const int c = m[3].matched ? std::stoi(m[3]) : 1;
    Image img(w, h, c);
    in.read(reinterpret_cast<char*>(img.data.data()), std::streamsize(img.data.size() * sizeof(double)));
    if (!in) throw IoError(path.string() + ": truncated data");
    return img;
}

}  // namespace avk
