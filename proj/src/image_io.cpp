#include "arsdm/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace arsdm {

namespace {

uint8_t to_u8(double x) {
    double v = std::lround((x + 1.0) * 0.5 * 255.0);
    return uint8_t(std::min(255.0, std::max(0.0, v)));
}

double from_u8(uint8_t u) { return double(u) / 255.0 * 2.0 - 1.0; }

std::string read_token(std::istream& in) {
    std::string tok;
    in >> tok;
    // skip comment lines
    while (!tok.empty() && tok[0] == '#') {
        std::string line;
        std::getline(in, line);
        in >> tok;
    }
    return tok;
}

void parse_header(std::istream& in, const char* magic, int& w, int& h) {
    std::string m = read_token(in);
    if (m != magic) throw std::runtime_error(std::string("bad magic, expected ") + magic);
    w = std::stoi(read_token(in));
    h = std::stoi(read_token(in));
    int maxval = std::stoi(read_token(in));
    if (maxval != 255) throw std::runtime_error("unsupported maxval");
    in.get(); // single whitespace before raster
}

} // namespace

Tensor quantize_u8(const Tensor& image) {
    Tensor out = image;
    for (double& x : out.v) x = from_u8(to_u8(x));
    return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& img) {
    if (img.shape.n != 1 || img.shape.c != 3)
        throw std::invalid_argument("write_ppm: expected [1,3,H,W]");
    const int H = img.shape.h, W = img.shape.w;
    std::ostringstream os;
    os << "P6\n" << W << " " << H << "\n255\n";
    std::string raster(size_t(H) * W * 3, '\0');
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                raster[(size_t(y) * W + x) * 3 + c] = char(to_u8(img.at(0, c, y, x)));
    atomic_write(path, os.str() + raster);
}

Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    int w = 0, h = 0;
    parse_header(in, "P6", w, h);
    std::string raster(size_t(w) * h * 3, '\0');
    in.read(raster.data(), std::streamsize(raster.size()));
    if (in.gcount() != std::streamsize(raster.size()))
        throw std::runtime_error("truncated PPM " + path.string());
    Tensor img(Shape{1, 3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(0, c, y, x) = from_u8(uint8_t(raster[(size_t(y) * w + x) * 3 + c]));
    return img;
}

void write_pgm(const std::filesystem::path& path, const Tensor& mask) {
    if (mask.shape.n != 1 || mask.shape.c != 1)
        throw std::invalid_argument("write_pgm: expected [1,1,H,W]");
    const int H = mask.shape.h, W = mask.shape.w;
    std::ostringstream os;
    os << "P5\n" << W << " " << H << "\n255\n";
    std::string raster(size_t(H) * W, '\0');
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            raster[size_t(y) * W + x] = char(mask.at(0, 0, y, x) != 0.0 ? 255 : 0);
    atomic_write(path, os.str() + raster);
}

Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    int w = 0, h = 0;
    parse_header(in, "P5", w, h);
    std::string raster(size_t(w) * h, '\0');
    in.read(raster.data(), std::streamsize(raster.size()));
    if (in.gcount() != std::streamsize(raster.size()))
        throw std::runtime_error("truncated PGM " + path.string());
    Tensor mask(Shape{1, 1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            mask.at(0, 0, y, x) = uint8_t(raster[size_t(y) * w + x]) >= 128 ? 1.0 : 0.0;
    return mask;
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace arsdm
