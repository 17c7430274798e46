#pragma once

#include <stdexcept>
#include <string>

namespace efsign {

// Every failure surfaced by the library belongs to exactly one category.
// The CLI maps categories to process exit codes.
enum class ErrorCategory {
  config = 2,
  input = 3,
  format = 4,
  incompatible = 5,
  corruption = 6,
  training = 7,
  numeric = 8,
  io = 9,
};

const char* category_name(ErrorCategory category) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

#define EFSIGN_DEFINE_ERROR(Name, cat)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& message)                            \
        : Error(ErrorCategory::cat, message) {}                          \
  };

EFSIGN_DEFINE_ERROR(ConfigError, config)
EFSIGN_DEFINE_ERROR(InputError, input)
EFSIGN_DEFINE_ERROR(FormatError, format)
EFSIGN_DEFINE_ERROR(IncompatibleError, incompatible)
EFSIGN_DEFINE_ERROR(CorruptionError, corruption)
EFSIGN_DEFINE_ERROR(TrainingError, training)
EFSIGN_DEFINE_ERROR(NumericError, numeric)
EFSIGN_DEFINE_ERROR(IoError, io)

#undef EFSIGN_DEFINE_ERROR

}  // namespace efsign
