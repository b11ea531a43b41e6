#include "diverseevol/error.hpp"

namespace devol {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::parse: return "parse error";
    case ErrorCode::empty_corpus: return "empty corpus";
    case ErrorCode::schema: return "schema error";
    case ErrorCode::alignment: return "alignment error";
    case ErrorCode::numeric: return "numeric error";
    case ErrorCode::shape: return "shape error";
    case ErrorCode::duplication: return "duplication error";
    case ErrorCode::ordering: return "ordering error";
    case ErrorCode::budget: return "budget error";
    case ErrorCode::precondition: return "precondition error";
    case ErrorCode::coverage: return "coverage error";
    case ErrorCode::kernel_validity: return "kernel validity error";
    case ErrorCode::eigensolver: return "eigensolver error";
    case ErrorCode::division: return "division error";
    case ErrorCode::range: return "range error";
    case ErrorCode::empty_input: return "empty input";
    case ErrorCode::config: return "config error";
    case ErrorCode::collision: return "workdir collision";
    case ErrorCode::hook: return "hook error";
    case ErrorCode::timeout: return "hook timeout";
    case ErrorCode::io: return "i/o error";
  }
  return "error";
}

ErrorClass classify(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::config:
    case ErrorCode::collision:
    case ErrorCode::budget:
      return ErrorClass::config;
    case ErrorCode::hook:
    case ErrorCode::timeout:
      return ErrorClass::hook;
    default:
      return ErrorClass::data;
  }
}

}  // namespace devol
