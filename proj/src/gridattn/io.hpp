#pragma once
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "matrix.hpp"

namespace gridattn {

using json = nlohmann::json;

// FNV-1a 64-bit over a byte string.
std::uint64_t fnv1a64(const void* data, std::size_t n);

// Stable hash of a JSON value (hashes the canonical compact dump).
std::uint64_t json_hash(const json& j);
std::string hash_hex(std::uint64_t h);

// Write a file atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// Binary matrix blob with a JSON header line:
//   {"rows":R,"cols":C,"meta":{...}}\n followed by rows*cols little-endian doubles.
void write_matrix_blob(const std::filesystem::path& path, const Matrix& m, const json& meta);
Matrix read_matrix_blob(const std::filesystem::path& path, json* meta_out = nullptr);

// Error with a machine-readable JSON record (printed by the CLI on exit).
struct CliError : std::runtime_error {
  json record;
  CliError(const std::string& code, const std::string& message, json detail = json::object())
      : std::runtime_error(message),
        record({{"error", code}, {"message", message}, {"detail", std::move(detail)}}) {}
};

}  // namespace gridattn
