#pragma once

#include <stdexcept>
#include <string>

namespace safer {

/// Coarse error classes. The CLI maps these onto its exit codes.
enum class ErrorKind {
  kConfig,           // invalid configuration or arguments
  kMissingArtifact,  // an upstream artifact is absent
  kFormat,           // malformed or corrupted file
  kDimension,        // vector/matrix shape disagreement
  kData,             // semantically invalid data (pairing, ids, ...)
  kNumeric,          // non-finite values, degenerate aggregates
  kTransport,        // judge endpoint unreachable after retries
  kAuth,             // judge endpoint rejected the credentials
  kIo,               // filesystem failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfig, w) {}
};
struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& w)
      : Error(ErrorKind::kMissingArtifact, w) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& w)
      : Error(ErrorKind::kDimension, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::kData, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::kNumeric, w) {}
};
struct TransportError : Error {
  explicit TransportError(const std::string& w)
      : Error(ErrorKind::kTransport, w) {}
};
struct AuthError : Error {
  explicit AuthError(const std::string& w) : Error(ErrorKind::kAuth, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};

/// Format errors carry a finer reason so corrupted-file fixtures can be
/// told apart.
enum class FormatFault { kBadMagic, kUnsupportedVersion, kTruncated, kCorrupt };

class FormatError : public Error {
 public:
  FormatError(FormatFault fault, const std::string& what)
      : Error(ErrorKind::kFormat, what), fault_(fault) {}

  FormatFault fault() const noexcept { return fault_; }

 private:
  FormatFault fault_;
};

}  // namespace safer
