#include "efsign/errors.hpp"

namespace efsign {

const char* category_name(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::config: return "configuration error";
    case ErrorCategory::input: return "input error";
    case ErrorCategory::format: return "format error";
    case ErrorCategory::incompatible: return "incompatibility error";
    case ErrorCategory::corruption: return "corruption error";
    case ErrorCategory::training: return "training error";
    case ErrorCategory::numeric: return "numeric error";
    case ErrorCategory::io: return "I/O error";
  }
  return "error";
}

}  // namespace efsign
