#include "unet3p/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace unet3p {

namespace {

void put_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tns(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot open for writing: " + path);
    os.write("TNS1", 4);
    put_u32le(os, static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t d : t.shape) put_u32le(os, static_cast<std::uint32_t>(d));
    for (double v : t.data) {
        float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32le(os, bits);
    }
    if (!os) throw ContractError("write failed: " + path);
}

TensorPtr read_tns(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNS1", 4) != 0) {
        throw ContractError("not a TNS1 file: " + path);
    }
    std::uint32_t rank = get_u32le(is);
    if (rank > 8) throw ContractError("TNS1 rank too large in " + path);
    std::vector<std::int64_t> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<std::int64_t>(get_u32le(is));
    std::int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        std::uint32_t bits = get_u32le(is);
        float f;
        std::memcpy(&f, &bits, 4);
        data[static_cast<std::size_t>(i)] = static_cast<double>(f);
    }
    if (!is) throw ContractError("truncated TNS1 file: " + path);
    return Tensor::from_data(std::move(shape), std::move(data));
}

void write_pgm_mask(const std::string& path, const Tensor& prob, double threshold) {
    std::int64_t h = 0, w = 0;
    if (prob.rank() == 2) {
        h = prob.dim(0), w = prob.dim(1);
    } else if (prob.rank() == 3 && prob.dim(0) == 1) {
        h = prob.dim(1), w = prob.dim(2);
    } else if (prob.rank() == 4 && prob.dim(0) == 1 && prob.dim(1) == 1) {
        h = prob.dim(2), w = prob.dim(3);
    } else {
        throw ShapeError("write_pgm_mask expects a single-channel map, got " + shape_str(prob.shape));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot open for writing: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            row[static_cast<std::size_t>(x)] =
                prob.data[static_cast<std::size_t>(y * w + x)] >= threshold ? 255 : 0;
        }
        os.write(reinterpret_cast<const char*>(row.data()), w);
    }
    if (!os) throw ContractError("write failed: " + path);
}

}  // namespace unet3p
