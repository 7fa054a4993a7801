#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sff {

// Error categories shared by every module; the C API maps these 1:1 onto
// sff_status values and the CLI onto process exit codes.
enum class ErrorKind : int {
  kUsage = 2,    // invalid argument / configuration
  kData = 3,     // malformed or inconsistent input data
  kNumeric = 4,  // non-finite values, failed numeric contract
  kIo = 5,       // filesystem failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Distinct failure reasons for the streamline/scalar file codecs.
enum class FormatErrorCode : int {
  kBadMagic = 1,
  kBadVersion,
  kTruncated,
  kNonFinite,
  kShortStreamline,
  kTrailingBytes,
  kSyntax,
  kShapeMismatch,
  kOutOfRange,
};

const char* to_string(FormatErrorCode code) noexcept;

class FormatError : public Error {
 public:
  FormatError(FormatErrorCode code, std::uint64_t offset, const std::string& detail);
  FormatErrorCode code() const noexcept { return code_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  FormatErrorCode code_;
  std::uint64_t offset_;
};

}  // namespace sff
