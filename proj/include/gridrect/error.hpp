#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gridrect {

enum class ErrorKind {
  InvalidInput,
  ArithmeticError,
  DegenerateFit,
  NoViableSpec,
  TooFewInliers,
  CheiralityViolation,
  SingularMap,
  PointAtInfinity,
  InvisibleGrid,
};

inline std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::ArithmeticError: return "ArithmeticError";
    case ErrorKind::DegenerateFit: return "DegenerateFit";
    case ErrorKind::NoViableSpec: return "NoViableSpec";
    case ErrorKind::TooFewInliers: return "TooFewInliers";
    case ErrorKind::CheiralityViolation: return "CheiralityViolation";
    case ErrorKind::SingularMap: return "SingularMap";
    case ErrorKind::PointAtInfinity: return "PointAtInfinity";
    case ErrorKind::InvisibleGrid: return "InvisibleGrid";
  }
  return "Unknown";
}

/// Library-wide exception. The kind is what callers branch on; the message is
/// for humans and may carry context prefixes such as the pipeline round.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), index_(index) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
  /// Offending element, when the failure is tied to one (e.g. PointAtInfinity).
  [[nodiscard]] std::optional<std::size_t> index() const noexcept { return index_; }

  [[nodiscard]] Error with_context(std::string_view context) const {
    Error copy = *this;
    static_cast<std::runtime_error&>(copy) = std::runtime_error(std::string(context) + ": " + what());
    return copy;
  }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> index_;
};

}  // namespace gridrect
