#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace medt {

inline constexpr std::string_view kCodeVersion = "0.3.0";

/// FNV-1a 64-bit over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

std::string read_file(const std::string& path);
/// Writes through a temporary file and renames, so readers never see a
/// half-written artifact.
void write_file(const std::string& path, std::string_view contents);

/// Keeps freed memory in the process instead of returning it to the kernel
/// after every tape. No-op outside glibc.
void tune_allocator();

} // namespace medt
