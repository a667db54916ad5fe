#pragma once

// Binary trajectory dataset, little-endian throughout.
//
//   header (32 bytes)
//     magic "KBUB" | version u32 | nx u32 | nz u32 | n_variables u32 (= 4)
//     | n_records u32 | payload dtype u8 (0 = f32, 1 = f64) | 7 reserved bytes
//   stats block: 4 x (mean f64, std f64), variable order rho, u1, u3, theta
//   per record:
//     spec count u16
//     per spec: kind u8, temp f64, radius f64, stability f64, cx f64, cz f64
//     truncated u8 | n_saved u32
//     n_saved x 4 x (nz * nx) values, row-major, order rho, rho_u1, rho_u3, rho_theta
//     CRC-32 (IEEE) of every record byte above

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kbub/scenario.hpp"

namespace kbub {

enum class PayloadType : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint32_t kDatasetVersion = 1;

enum class LoadFailure { io, bad_magic, bad_version, truncated, checksum, malformed };

class DatasetLoadError : public DataError {
 public:
  DatasetLoadError(LoadFailure kind, const std::string& what) : DataError(what), kind_(kind) {}
  LoadFailure kind() const { return kind_; }

 private:
  LoadFailure kind_;
};

struct Dataset {
  int nx = 0;
  int nz = 0;
  PayloadType dtype = PayloadType::f32;
  NormStats stats;
  std::vector<TrajectoryRecord> records;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Serializes to a byte buffer / file. Every state must match (nx, nz).
std::vector<std::uint8_t> encode_dataset(std::span<const TrajectoryRecord> records, const NormStats& stats, int nx,
                                         int nz, PayloadType dtype);
void write_dataset(const std::filesystem::path& path, std::span<const TrajectoryRecord> records,
                   const NormStats& stats, int nx, int nz, PayloadType dtype = PayloadType::f32);

// Saved-state times are not stored; state k is stamped k * output_interval_s.
Dataset decode_dataset(std::span<const std::uint8_t> bytes, double output_interval_s = 5.0);
Dataset read_dataset(const std::filesystem::path& path, double output_interval_s = 5.0);

// Rounds every field value through the payload type, as a write/read would.
TrajectoryRecord quantize(const TrajectoryRecord& record, PayloadType dtype);

}  // namespace kbub
