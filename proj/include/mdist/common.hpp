#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mdist {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kStaleCache,
  kNonFinite,
  kIo,
  kCorrupt,
  kVersionMismatch,
  kHashMismatch,
  kConfig,
  kStageDependency,
  kDivergence,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Throws kDimensionMismatch with a "<what>: expected X, got Y" diagnostic.
void check_dim(std::string_view what, Eigen::Index expected, Eigen::Index got);

// 64-bit FNV-1a, used for artifact provenance and file checksums.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Uniform in [0, 1), built from the raw engine output so sequences are
// identical across standard library implementations.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
int uniform_int(Rng& rng, int lo, int hi);  // inclusive bounds

// Samples an index from an (unnormalized is fine) nonnegative weight vector.
int sample_categorical(const Vec& probs, Rng& rng);

// Mean and population std summed in index order, so the result does not
// depend on how the storage happens to be aligned.
struct Moments {
  double mean = 0.0;
  double std = 0.0;
};
Moments moments(std::span<const double> v);

// Derives an independent child seed from (seed, stream) via splitmix64.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Little-endian byte writer/reader used by every binary artifact.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v);
  void f64s(std::span<const double> v);
  void str(std::string_view s);
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64();
  void f64s(std::span<double> out);
  std::string str();
  std::string_view raw(std::size_t n);
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace mdist
