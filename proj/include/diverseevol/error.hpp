#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace devol {

enum class ErrorCode {
  parse,
  empty_corpus,
  schema,
  alignment,
  numeric,
  shape,
  duplication,
  ordering,
  budget,
  precondition,
  coverage,
  kernel_validity,
  eigensolver,
  division,
  range,
  empty_input,
  config,
  collision,
  hook,
  timeout,
  io,
};

/// Coarse error classes; the CLI maps them to exit codes 1, 2 and 3.
enum class ErrorClass { config = 1, hook = 2, data = 3 };

std::string_view to_string(ErrorCode code) noexcept;
ErrorClass classify(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorClass error_class() const noexcept { return classify(code_); }

 private:
  ErrorCode code_;
};

}  // namespace devol
