#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

namespace devol::detail {

struct HttpResult {
  int status = 0;
  std::string body;
};

/// POSTs `body` to `url` (http:// or https://). Throws hook/timeout errors on
/// transport failure; the caller interprets the status code.
HttpResult http_post(const std::string& url, const std::string& body, const std::string& content_type,
                     const std::vector<std::pair<std::string, std::string>>& headers,
                     std::chrono::milliseconds timeout);

}  // namespace devol::detail
