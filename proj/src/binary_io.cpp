#include "probshape/binary_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "probshape/error.hpp"

namespace probshape::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void write_magic(std::ostream &os, std::string_view magic) {
    std::array<char, kMagicSize> buf{};
    std::memcpy(buf.data(), magic.data(), std::min(magic.size(), kMagicSize));
    os.write(buf.data(), kMagicSize);
}

void expect_magic(std::istream &is, std::string_view magic, const std::string &what) {
    std::array<char, kMagicSize> buf{};
    std::array<char, kMagicSize> want{};
    std::memcpy(want.data(), magic.data(), std::min(magic.size(), kMagicSize));
    if (!is.read(buf.data(), kMagicSize) || buf != want) {
        throw DataError(what + ": bad magic, expected '" + std::string(magic.substr(0, 6)) +
                        "' (wrong file type or format version)");
    }
}

namespace {

template <typename T>
void write_raw(std::ostream &os, T v) {
    os.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream &is, const std::string &what) {
    T v{};
    if (!is.read(reinterpret_cast<char *>(&v), sizeof(T))) {
        throw DataError(what + ": truncated file");
    }
    return v;
}

} // namespace

void write_u32(std::ostream &os, std::uint32_t v) { write_raw(os, v); }
void write_f32(std::ostream &os, float v) { write_raw(os, v); }
void write_f64(std::ostream &os, double v) { write_raw(os, v); }
std::uint32_t read_u32(std::istream &is, const std::string &what) { return read_raw<std::uint32_t>(is, what); }
float read_f32(std::istream &is, const std::string &what) { return read_raw<float>(is, what); }
double read_f64(std::istream &is, const std::string &what) { return read_raw<double>(is, what); }

void write_f32_array(std::ostream &os, const float *data, std::size_t n) {
    os.write(reinterpret_cast<const char *>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

void read_f32_array(std::istream &is, float *data, std::size_t n, const std::string &what) {
    if (!is.read(reinterpret_cast<char *>(data), static_cast<std::streamsize>(n * sizeof(float)))) {
        throw DataError(what + ": truncated payload");
    }
}

std::ofstream open_output(const std::filesystem::path &path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
    return os;
}

std::ifstream open_input(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path.string() + "' for reading (missing upstream artifact?)");
    return is;
}

std::string read_text_file(const std::filesystem::path &path) {
    auto is = open_input(path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path &path, std::string_view text) {
    auto os = open_output(path);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

} // namespace probshape::io
