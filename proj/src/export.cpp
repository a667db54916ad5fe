#include "kbub/export.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "kbub/byte_io.hpp"

namespace kbub {

namespace {

void check_field(std::span<const double> field, int nx, int nz) {
  if (nx <= 0 || nz <= 0 || field.size() != static_cast<std::size_t>(nx) * static_cast<std::size_t>(nz)) {
    throw ShapeError("heatmap: field of " + std::to_string(field.size()) + " values is not " + std::to_string(nz) +
                     " x " + std::to_string(nx));
  }
  for (double v : field) {
    if (!std::isfinite(v)) throw NumericalError("heatmap: field contains non-finite values");
  }
}

std::string npy_header(const char* descr, const std::vector<std::size_t>& shape) {
  std::string dims;
  for (std::size_t d : shape) dims += std::to_string(d) + ",";
  if (shape.size() > 1) dims.pop_back();
  std::string h = std::string("{'descr': '") + descr + "', 'fortran_order': False, 'shape': (" + dims + "), }";
  // magic (6) + version (2) + length (2) + header, padded with spaces to 64 and ended by '\n'
  const std::size_t total = 10 + h.size() + 1;
  h.append((64 - total % 64) % 64, ' ');
  h += '\n';
  return h;
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void write_npy_raw(const std::filesystem::path& path, const char* descr, const std::vector<std::size_t>& shape,
                   std::span<const double> words) {
  const std::string h = npy_header(descr, shape);
  ByteWriter w;
  w.u8(0x93);
  w.str("NUMPY");
  w.u8(1);
  w.u8(0);
  w.u16(static_cast<std::uint16_t>(h.size()));
  w.str(h);
  for (double v : words) w.f64(v);
  write_file(path, w.data());
}

}  // namespace

std::uint8_t gray_level(double v, const ValueRange& range) {
  const double span = range.hi - range.lo;
  if (!(span > 0.0)) return 0;
  const double x = (v - range.lo) / span * 255.0;
  const double q = std::ceil(x - 0.5);  // half rounds down
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

std::vector<std::uint8_t> encode_pgm(std::span<const double> field, int nx, int nz,
                                     const std::optional<ValueRange>& fixed) {
  check_field(field, nx, nz);
  ValueRange r;
  if (fixed) {
    r = *fixed;
  } else {
    const auto [mn, mx] = std::minmax_element(field.begin(), field.end());
    r = {*mn, *mx};
  }
  const std::string header = "P5\n" + std::to_string(nx) + " " + std::to_string(nz) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + field.size());
  for (int j = nz - 1; j >= 0; --j) {
    for (int i = 0; i < nx; ++i) out.push_back(gray_level(field[static_cast<std::size_t>(j) * nx + i], r));
  }
  return out;
}

void export_heatmap(std::span<const double> field, int nx, int nz, const std::filesystem::path& stem,
                    const std::optional<ValueRange>& fixed) {
  const auto pgm = encode_pgm(field, nx, nz, fixed);
  std::filesystem::path p = stem;
  write_file(p.replace_extension(".pgm"), pgm);
  std::string csv;
  char buf[32];
  for (int j = 0; j < nz; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int n = std::snprintf(buf, sizeof buf, "%.9g", field[static_cast<std::size_t>(j) * nx + i]);
      csv.append(buf, static_cast<std::size_t>(n));
      csv += i + 1 < nx ? ',' : '\n';
    }
  }
  write_text_file(p.replace_extension(".csv"), csv);
}

std::vector<double> read_csv_field(const std::filesystem::path& path, int* nx, int* nz) {
  const auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<double> out;
  std::string line;
  int cols = -1, rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int c = 0;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t end = std::min(line.find(',', pos), line.size());
      double v = 0.0;
      const auto res = std::from_chars(line.data() + pos, line.data() + end, v);
      if (res.ec != std::errc() || res.ptr != line.data() + end) {
        throw DataError(path.string() + ": bad number on line " + std::to_string(rows + 1));
      }
      out.push_back(v);
      ++c;
      pos = end + 1;
    }
    if (cols >= 0 && c != cols) throw DataError(path.string() + ": ragged rows");
    cols = c;
    ++rows;
  }
  if (nx) *nx = std::max(cols, 0);
  if (nz) *nz = rows;
  return out;
}

void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               std::span<const double> data) {
  if (shape_numel(shape) != data.size()) throw ShapeError("npy: shape does not match the data length");
  write_npy_raw(path, "<f8", shape, data);
}

void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               std::span<const std::complex<double>> data) {
  if (shape_numel(shape) != data.size()) throw ShapeError("npy: shape does not match the data length");
  // std::complex<double> is layout-compatible with double[2]
  write_npy_raw(path, "<c16", shape, {reinterpret_cast<const double*>(data.data()), 2 * data.size()});
}

NpyArray read_npy(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path.string());
  if (r.u8() != 0x93 || r.str(5) != "NUMPY") throw DataError(path.string() + ": not an .npy file");
  const std::uint8_t major = r.u8();
  r.skip(1);
  const std::size_t hlen = major == 1 ? r.u16() : r.u32();
  const std::string h = r.str(hlen);
  if (h.find("'descr': '<f8'") == std::string::npos || h.find("'fortran_order': False") == std::string::npos) {
    throw DataError(path.string() + ": only little-endian f8 C-order arrays are supported");
  }
  const auto open = h.find("'shape': (");
  const auto close = h.find(')', open);
  if (open == std::string::npos || close == std::string::npos) throw DataError(path.string() + ": no shape");
  NpyArray a;
  std::string dims = h.substr(open + 10, close - open - 10);
  std::replace(dims.begin(), dims.end(), ',', ' ');
  std::istringstream ds(dims);
  for (std::size_t d; ds >> d;) a.shape.push_back(d);
  const std::size_t n = shape_numel(a.shape);
  if (r.remaining() != 8 * n) throw DataError(path.string() + ": payload size does not match the shape");
  a.data.resize(n);
  for (double& v : a.data) v = r.f64();
  return a;
}

}  // namespace kbub
