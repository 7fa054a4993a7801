#include "sfformer/error.hpp"

namespace sff {

const char* to_string(FormatErrorCode code) noexcept {
  switch (code) {
    case FormatErrorCode::kBadMagic: return "bad magic";
    case FormatErrorCode::kBadVersion: return "unsupported version";
    case FormatErrorCode::kTruncated: return "truncated payload";
    case FormatErrorCode::kNonFinite: return "non-finite value";
    case FormatErrorCode::kShortStreamline: return "streamline with fewer than 2 points";
    case FormatErrorCode::kTrailingBytes: return "trailing bytes";
    case FormatErrorCode::kSyntax: return "syntax error";
    case FormatErrorCode::kShapeMismatch: return "shape mismatch";
    case FormatErrorCode::kOutOfRange: return "value out of range";
  }
  return "unknown";
}

FormatError::FormatError(FormatErrorCode code, std::uint64_t offset, const std::string& detail)
    : Error(ErrorKind::kData, std::string(to_string(code)) + " at byte " + std::to_string(offset) +
                                  (detail.empty() ? "" : ": " + detail)),
      code_(code),
      offset_(offset) {}

}  // namespace sff
