#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace bilm {

// Lowercase hex SHA-256 digests used for content addressing and provenance.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace bilm
