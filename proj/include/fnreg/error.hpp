#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fnreg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shape mismatch. `layer` is the offending layer index, or
/// npos when the mismatch is not tied to a layer.
class ShapeError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit ShapeError(const std::string& what, std::size_t layer = npos)
      : Error(what), layer_(layer) {}

  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

/// Invalid argument value (out-of-range label, empty batch, bad k, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
      : Error("divergence at epoch " + std::to_string(epoch) + ", batch " +
              std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

/// Slice sampling failures.
class SliceError : public Error {
 public:
  using Error::Error;
};

/// The density at the chain's current point is not positive and finite; the
/// caller should reinitialize the chain.
class ChainRestartError : public SliceError {
 public:
  using SliceError::SliceError;
};

/// Shrinkage collapsed the hyperrectangle on every axis without finding a
/// point inside the slice.
class DegenerateSliceError : public SliceError {
 public:
  using SliceError::SliceError;
};

/// Malformed or unreadable dataset file.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Failure writing run artifacts.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Configuration parse or validation error, naming the field and, when known,
/// the 1-based line it came from (0 = not tied to a line).
class ConfigError : public Error {
 public:
  ConfigError(std::string field, std::size_t line, const std::string& what)
      : Error(format(field, line, what)), field_(std::move(field)), line_(line) {}

  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& field, std::size_t line,
                            const std::string& what) {
    std::string out = "config error";
    if (!field.empty()) out += " in '" + field + "'";
    if (line != 0) out += " (line " + std::to_string(line) + ")";
    return out + ": " + what;
  }

  std::string field_;
  std::size_t line_;
};

}  // namespace fnreg
