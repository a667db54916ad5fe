#pragma once

// Figure and array export: 8-bit PGM heatmaps with a CSV of the raw values,
// and NumPy .npy arrays.

#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kbub/error.hpp"

namespace kbub {

struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;
};

// Gray level of v on [lo, hi] -> [0, 255], rounding half down and clamping.
// A degenerate range maps everything to 0.
std::uint8_t gray_level(double v, const ValueRange& range);

// (nz, nx) field with row 0 at the bottom. The image puts the top of the
// domain in its first row. Throws NumericalError on non-finite values.
std::vector<std::uint8_t> encode_pgm(std::span<const double> field, int nx, int nz,
                                     const std::optional<ValueRange>& fixed = std::nullopt);

// Writes <stem>.pgm and <stem>.csv. The CSV keeps the field's own row order
// (row 0 = bottom), 9 significant digits, one row of nx values per line.
void export_heatmap(std::span<const double> field, int nx, int nz, const std::filesystem::path& stem,
                    const std::optional<ValueRange>& fixed = std::nullopt);

std::vector<double> read_csv_field(const std::filesystem::path& path, int* nx = nullptr, int* nz = nullptr);

struct NpyArray {
  std::vector<std::size_t> shape;
  std::vector<double> data;  // C order
};

void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               std::span<const double> data);
void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               std::span<const std::complex<double>> data);
// Little-endian f8, C order only.
NpyArray read_npy(const std::filesystem::path& path);

}  // namespace kbub
