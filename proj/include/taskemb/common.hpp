#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

// Shared plumbing: error taxonomy, hashing, seed derivation, file helpers.
namespace taskemb {

// All recoverable failures surface as one of these; the CLI maps them to
// nonzero exit codes (usage errors are handled separately by the parser).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& msg) : Error("validation: " + msg) {}
};

// Shape mismatches carry the operation plus expected/actual extents.
struct DimensionError : Error {
  DimensionError(const std::string& op, const std::string& expected, const std::string& actual)
      : Error("dimension: " + op + ": expected " + expected + ", got " + actual) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

// Parse failures in line-oriented inputs report the offending line.
struct ParseError : Error {
  ParseError(const std::string& file, std::size_t line, const std::string& msg)
      : Error("parse: " + file + ":" + std::to_string(line) + ": " + msg) {}
};

struct IntegrityError : Error {
  explicit IntegrityError(const std::string& msg) : Error("integrity: " + msg) {}
};

// FNV-1a 64-bit; used for content hashes and labeled seed derivation.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t h);

// Deterministic fan-out of one master seed into independent labeled streams.
// Identical (master, label) pairs always yield the same generator state.
std::uint64_t derive_seed(std::uint64_t master, const std::string& label);
std::mt19937_64 make_rng(std::uint64_t master, const std::string& label);

std::string base64_encode(const void* data, std::size_t n);
std::vector<unsigned char> base64_decode(const std::string& s);

// Round-trip exact decimal form for 64-bit reals ("%.17g").
std::string fmt_real(double v);

std::string read_file(const std::string& path);
// Write via temp file + rename so readers never observe partial artifacts.
void atomic_write_file(const std::string& path, const std::string& content);

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace taskemb
