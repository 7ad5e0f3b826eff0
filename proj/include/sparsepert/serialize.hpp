#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "sparsepert/dgp.hpp"
#include "sparsepert/encoder.hpp"
#include "sparsepert/perturb.hpp"

namespace sparsepert {

class VersionMismatchError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public Error {
 public:
  using Error::Error;
};

namespace serialize {

/// Binary layout: 8-byte magic, u32 format version, u64 header length, a JSON
/// header naming the payload blocks and their shapes plus a SHA-256 of the
/// payload, then the raw little-endian float64 blocks back to back.
inline constexpr std::uint32_t kFormatVersion = 1;

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

void save_model(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_model(const std::filesystem::path& path);

void save_mixing(const MixingFunction& g, const std::filesystem::path& path);
MixingFunction load_mixing(const std::filesystem::path& path);

void save_perturbations(const PerturbationSet& set, const std::filesystem::path& path);
PerturbationSet load_perturbations(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

}  // namespace serialize
}  // namespace sparsepert
