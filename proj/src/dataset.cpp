#include "kbub/dataset.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kbub/byte_io.hpp"

namespace kbub {

namespace {

constexpr char kMagic[4] = {'K', 'B', 'U', 'B'};
constexpr std::size_t kHeaderBytes = 32;

void write_field(ByteWriter& w, const Field& f, PayloadType dtype) {
  if (dtype == PayloadType::f32) {
    for (double v : f) w.f32(static_cast<float>(v));
  } else {
    for (double v : f) w.f64(v);
  }
}

Field read_field(ByteReader& r, std::size_t n, PayloadType dtype) {
  Field f(n);
  if (dtype == PayloadType::f32) {
    for (auto& v : f) v = static_cast<double>(r.f32());
  } else {
    for (auto& v : f) v = r.f64();
  }
  return f;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_dataset(std::span<const TrajectoryRecord> records, const NormStats& stats, int nx,
                                         int nz, PayloadType dtype) {
  if (nx <= 0 || nz <= 0) throw ConfigError("encode_dataset: grid dimensions must be positive");
  const std::size_t cells = static_cast<std::size_t>(nx) * static_cast<std::size_t>(nz);

  ByteWriter w;
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(nx));
  w.u32(static_cast<std::uint32_t>(nz));
  w.u32(kNumVariables);
  w.u32(static_cast<std::uint32_t>(records.size()));
  w.u8(static_cast<std::uint8_t>(dtype));
  for (int k = 0; k < 7; ++k) w.u8(0);

  for (std::size_t v = 0; v < kNumVariables; ++v) {
    w.f64(stats.mean[v]);
    w.f64(stats.std[v]);
  }

  for (std::size_t r = 0; r < records.size(); ++r) {
    const TrajectoryRecord& rec = records[r];
    if (rec.specs.size() > 0xFFFF) throw ConfigError("encode_dataset: too many bubble specs in one record");
    const std::size_t start = w.size();
    w.u16(static_cast<std::uint16_t>(rec.specs.size()));
    for (const BubbleSpec& s : rec.specs) {
      w.u8(static_cast<std::uint8_t>(s.kind));
      w.f64(s.temp_k);
      w.f64(s.radius_m);
      w.f64(s.stability_m);
      w.f64(s.cx_m);
      w.f64(s.cz_m);
    }
    w.u8(rec.truncated ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(rec.states.size()));
    for (const State2D& s : rec.states) {
      if (s.rho.size() != cells || s.rho_u1.size() != cells || s.rho_u3.size() != cells ||
          s.rho_theta.size() != cells) {
        std::ostringstream os;
        os << "encode_dataset: record " << r << " has a state that does not match " << nz << "x" << nx;
        throw ShapeError(os.str());
      }
      write_field(w, s.rho, dtype);
      write_field(w, s.rho_u1, dtype);
      write_field(w, s.rho_u3, dtype);
      write_field(w, s.rho_theta, dtype);
    }
    const std::uint32_t crc = crc32(std::span(w.data()).subspan(start));
    w.u32(crc);
  }
  return std::move(w).take();
}

void write_dataset(const std::filesystem::path& path, std::span<const TrajectoryRecord> records,
                   const NormStats& stats, int nx, int nz, PayloadType dtype) {
  const std::vector<std::uint8_t> bytes = encode_dataset(records, stats, nx, nz, dtype);
  write_file(path, bytes);
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes, double output_interval_s) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DatasetLoadError(LoadFailure::bad_magic, "dataset: bad magic (expected \"KBUB\")");
  }
  if (bytes.size() < kHeaderBytes) throw DatasetLoadError(LoadFailure::truncated, "dataset: truncated header");

  ByteReader r(bytes, "dataset");
  r.skip(4);
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    std::ostringstream os;
    os << "dataset: unsupported format version " << version << " (expected " << kDatasetVersion << ")";
    throw DatasetLoadError(LoadFailure::bad_version, os.str());
  }
  Dataset ds;
  const std::uint32_t nx = r.u32();
  const std::uint32_t nz = r.u32();
  const std::uint32_t n_vars = r.u32();
  const std::uint32_t n_records = r.u32();
  const std::uint8_t dtype = r.u8();
  r.skip(7);
  if (n_vars != kNumVariables) throw DatasetLoadError(LoadFailure::malformed, "dataset: expected 4 variables");
  if (dtype > 1) throw DatasetLoadError(LoadFailure::malformed, "dataset: unknown payload dtype code");
  if (nx == 0 || nz == 0) throw DatasetLoadError(LoadFailure::malformed, "dataset: zero grid dimension");
  ds.nx = static_cast<int>(nx);
  ds.nz = static_cast<int>(nz);
  ds.dtype = static_cast<PayloadType>(dtype);

  for (std::size_t v = 0; v < kNumVariables; ++v) {
    ds.stats.mean[v] = r.f64();
    ds.stats.std[v] = r.f64();
  }

  const std::size_t cells = static_cast<std::size_t>(nx) * nz;
  const std::size_t value_bytes = ds.dtype == PayloadType::f32 ? 4 : 8;
  ds.records.reserve(n_records);
  for (std::uint32_t k = 0; k < n_records; ++k) {
    const std::size_t start = r.position();
    TrajectoryRecord rec;
    const std::uint16_t n_specs = r.u16();
    rec.specs.resize(n_specs);
    for (BubbleSpec& s : rec.specs) {
      const std::uint8_t kind = r.u8();
      if (kind > 1) {
        throw DatasetLoadError(LoadFailure::malformed, "dataset: record " + std::to_string(k) + " has bad bubble kind");
      }
      s.kind = static_cast<BubbleKind>(kind);
      s.temp_k = r.f64();
      s.radius_m = r.f64();
      s.stability_m = r.f64();
      s.cx_m = r.f64();
      s.cz_m = r.f64();
    }
    rec.truncated = r.u8() != 0;
    const std::uint32_t n_saved = r.u32();
    // check the payload fits before allocating
    const std::size_t payload = static_cast<std::size_t>(n_saved) * 4 * cells * value_bytes;
    if (payload / value_bytes / 4 / cells != n_saved || r.remaining() < payload + 4) {
      throw DatasetLoadError(LoadFailure::truncated,
                             "dataset: record " + std::to_string(k) + " is truncated (file too short)");
    }
    const std::uint32_t expected = crc32(bytes.subspan(start, r.position() - start + payload));
    rec.states.resize(n_saved);
    for (std::uint32_t s = 0; s < n_saved; ++s) {
      State2D& st = rec.states[s];
      st.rho = read_field(r, cells, ds.dtype);
      st.rho_u1 = read_field(r, cells, ds.dtype);
      st.rho_u3 = read_field(r, cells, ds.dtype);
      st.rho_theta = read_field(r, cells, ds.dtype);
      st.time = static_cast<double>(s) * output_interval_s;
    }
    const std::uint32_t stored = r.u32();
    if (stored != expected) {
      std::ostringstream os;
      os << "dataset: checksum mismatch in record " << k << " (stored 0x" << std::hex << stored << ", computed 0x"
         << expected << ")";
      throw DatasetLoadError(LoadFailure::checksum, os.str());
    }
    ds.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw DatasetLoadError(LoadFailure::malformed, "dataset: trailing bytes after the last record");
  }
  return ds;
}

Dataset read_dataset(const std::filesystem::path& path, double output_interval_s) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw DatasetLoadError(LoadFailure::io, e.what());
  }
  return decode_dataset(bytes, output_interval_s);
}

TrajectoryRecord quantize(const TrajectoryRecord& record, PayloadType dtype) {
  TrajectoryRecord out = record;
  if (dtype == PayloadType::f64) return out;
  auto round_f32 = [](Field& f) {
    for (double& v : f) v = static_cast<double>(static_cast<float>(v));
  };
  for (State2D& s : out.states) {
    round_f32(s.rho);
    round_f32(s.rho_u1);
    round_f32(s.rho_u3);
    round_f32(s.rho_theta);
  }
  return out;
}

}  // namespace kbub
