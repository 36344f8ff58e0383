#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace sgm {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// Writes to a sibling temporary and renames it into place, so readers never
// observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sgm

namespace sgm {

// Keeps large freed blocks in the heap instead of returning them to the OS.
// Training allocates and frees the same big buffers every step; without this
// most of the time goes to page faults.
void retain_freed_memory();

}  // namespace sgm
