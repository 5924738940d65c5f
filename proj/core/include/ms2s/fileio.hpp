#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ms2s {

// Little-endian primitives. The on-disk formats are LE regardless of host.
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);

void write_magic(std::ostream& os, const char magic[8]);
void expect_magic(std::istream& is, const char magic[8], const std::string& what);

// Writes to <path>.tmp.<pid> then renames, so a killed run never leaves a
// truncated artifact at the target path.
void atomic_write_file(const std::string& path, const std::function<void(std::ostream&)>& writer);

std::string read_text_file(const std::string& path);
void atomic_write_text(const std::string& path, const std::string& content);

}  // namespace ms2s
