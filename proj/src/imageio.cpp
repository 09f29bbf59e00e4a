#include "pxun/imageio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace pxun {

namespace {

int clamp_pixel(double v, int maxval) {
    const double x = std::lround(v * maxval);
    return static_cast<int>(std::min<double>(std::max(x, 0.0), maxval));
}

// Skips whitespace and '#' comment lines between PGM header tokens.
int next_token(std::istream& in) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            in.unget();
            break;
        }
        c = in.get();
    }
    int v = 0;
    if (!(in >> v)) throw IoError("pgm: malformed header");
    return v;
}

}  // namespace

Image read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("pgm: cannot open '" + path + "'");
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '5') throw IoError("pgm: '" + path + "' is not binary PGM (P5)");
    const int w = next_token(f);
    const int h = next_token(f);
    const int maxval = next_token(f);
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw IoError("pgm: bad extents/maxval");
    f.get();  // single whitespace before raster
    Image img(h, w);
    if (maxval < 256) {
        std::vector<unsigned char> row(w);
        for (int i = 0; i < h; ++i) {
            f.read(reinterpret_cast<char*>(row.data()), w);
            if (!f) throw IoError("pgm: truncated raster");
            for (int j = 0; j < w; ++j) img(i, j) = row[j] / static_cast<double>(maxval);
        }
    } else {
        std::vector<unsigned char> row(2 * w);
        for (int i = 0; i < h; ++i) {
            f.read(reinterpret_cast<char*>(row.data()), 2 * w);
            if (!f) throw IoError("pgm: truncated raster");
            for (int j = 0; j < w; ++j) {
                const int v = (row[2 * j] << 8) | row[2 * j + 1];  // most-significant byte first (Netpbm raw format)
                img(i, j) = v / static_cast<double>(maxval);
            }
        }
    }
    return img;
}

void write_pgm(const std::string& path, const Image& img, int maxval) {
    if (maxval != 255 && maxval != 65535) throw ValueError("pgm: maxval must be 255 or 65535");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("pgm: cannot open '" + path + "' for writing");
    f << "P5\n" << img.cols() << " " << img.rows() << "\n" << maxval << "\n";
    if (maxval == 255) {
        std::vector<unsigned char> row(img.cols());
        for (int i = 0; i < img.rows(); ++i) {
            for (int j = 0; j < img.cols(); ++j) row[j] = static_cast<unsigned char>(clamp_pixel(img(i, j), 255));
            f.write(reinterpret_cast<const char*>(row.data()), row.size());
        }
    } else {
        std::vector<unsigned char> row(2 * img.cols());
        for (int i = 0; i < img.rows(); ++i) {
            for (int j = 0; j < img.cols(); ++j) {
                const int v = clamp_pixel(img(i, j), 65535);
                row[2 * j] = static_cast<unsigned char>(v >> 8);
                row[2 * j + 1] = static_cast<unsigned char>(v & 0xff);
            }
            f.write(reinterpret_cast<const char*>(row.data()), row.size());
        }
    }
    if (!f) throw IoError("pgm: write failed for '" + path + "'");
}

Image read_png(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("png: cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("png: init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("png: failed to decode '" + path + "'");
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);
    const int channels = png_get_channels(png, info);
    const double peak = (depth == 16) ? 65535.0 : 255.0;

    std::vector<std::vector<png_byte>> rows(h, std::vector<png_byte>(png_get_rowbytes(png, info)));
    std::vector<png_bytep> row_ptrs(h);
    for (png_uint_32 i = 0; i < h; ++i) row_ptrs[i] = rows[i].data();
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Image img(static_cast<int>(h), static_cast<int>(w));
    for (png_uint_32 i = 0; i < h; ++i) {
        const png_byte* r = rows[i].data();
        for (png_uint_32 j = 0; j < w; ++j) {
            double comp[3] = {0, 0, 0};
            for (int c = 0; c < channels && c < 3; ++c) {
                std::size_t at = (static_cast<std::size_t>(j) * channels + c) * (depth == 16 ? 2 : 1);
                comp[c] = (depth == 16) ? ((r[at] << 8) | r[at + 1]) : r[at];
            }
            double y = comp[0];
            if (channels >= 3) y = 0.299 * comp[0] + 0.587 * comp[1] + 0.114 * comp[2];
            img(static_cast<int>(i), static_cast<int>(j)) = y / peak;
        }
    }
    return img;
}

void write_png(const std::string& path, const Image& img, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16) throw ValueError("png: bit depth must be 8 or 16");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("png: cannot open '" + path + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png: init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png: failed to encode '" + path + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.cols(), img.rows(), bit_depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const int maxval = (bit_depth == 16) ? 65535 : 255;
    const int bytes = bit_depth / 8;
    std::vector<png_byte> row(static_cast<std::size_t>(img.cols()) * bytes);
    for (int i = 0; i < img.rows(); ++i) {
        for (int j = 0; j < img.cols(); ++j) {
            const int v = clamp_pixel(img(i, j), maxval);
            if (bit_depth == 16) {
                row[2 * j] = static_cast<png_byte>(v >> 8);
                row[2 * j + 1] = static_cast<png_byte>(v & 0xff);
            } else {
                row[j] = static_cast<png_byte>(v);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

namespace {
bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}
}  // namespace

Image read_image(const std::string& path) {
    if (ends_with(path, ".png") || ends_with(path, ".PNG")) return read_png(path);
    return read_pgm(path);
}

void write_image(const std::string& path, const Image& img) {
    if (ends_with(path, ".png") || ends_with(path, ".PNG")) {
        write_png(path, img);
        return;
    }
    write_pgm(path, img);
}

}  // namespace pxun
