#include "io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gridattn {

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t json_hash(const json& j) {
  std::string s = j.dump();
  return fnv1a64(s.data(), s.size());
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CliError("io_error", "cannot open for write: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw CliError("io_error", "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError("io_error", "cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_matrix_blob(const std::filesystem::path& path, const Matrix& m, const json& meta) {
  json header = {{"rows", m.rows}, {"cols", m.cols}, {"meta", meta}};
  std::string out = header.dump();
  out.push_back('\n');
  std::size_t bytes = m.size() * sizeof(double);
  out.append(reinterpret_cast<const char*>(m.data.data()), bytes);
  write_file_atomic(path, out);
}

Matrix read_matrix_blob(const std::filesystem::path& path, json* meta_out) {
  std::string raw = read_file(path);
  std::size_t nl = raw.find('\n');
  if (nl == std::string::npos) throw CliError("format_error", "matrix blob missing header: " + path.string());
  json header = json::parse(raw.substr(0, nl));
  Matrix m(header.at("rows").get<std::size_t>(), header.at("cols").get<std::size_t>());
  std::size_t bytes = m.size() * sizeof(double);
  if (raw.size() - nl - 1 != bytes)
    throw CliError("format_error", "matrix blob size mismatch: " + path.string());
  std::memcpy(m.data.data(), raw.data() + nl + 1, bytes);
  if (meta_out) *meta_out = header.at("meta");
  return m;
}

}  // namespace gridattn
