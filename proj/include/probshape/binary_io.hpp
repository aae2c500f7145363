#pragma once

// Little-endian primitives shared by the binary artifact formats.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace probshape::io {

inline constexpr std::size_t kMagicSize = 8;

void write_magic(std::ostream &os, std::string_view magic);
// Throws DataError naming `what` when the magic does not match.
void expect_magic(std::istream &is, std::string_view magic, const std::string &what);

void write_u32(std::ostream &os, std::uint32_t v);
void write_f32(std::ostream &os, float v);
void write_f64(std::ostream &os, double v);
std::uint32_t read_u32(std::istream &is, const std::string &what);
float read_f32(std::istream &is, const std::string &what);
double read_f64(std::istream &is, const std::string &what);

void write_f32_array(std::ostream &os, const float *data, std::size_t n);
void read_f32_array(std::istream &is, float *data, std::size_t n, const std::string &what);

std::ofstream open_output(const std::filesystem::path &path);
std::ifstream open_input(const std::filesystem::path &path);

std::string read_text_file(const std::filesystem::path &path);
void write_text_file(const std::filesystem::path &path, std::string_view text);

} // namespace probshape::io
