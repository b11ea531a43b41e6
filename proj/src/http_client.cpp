#include "http_client.hpp"

#include <fmt/format.h>
#include <httplib.h>

#include "diverseevol/error.hpp"

namespace devol::detail {

HttpResult http_post(const std::string& url, const std::string& body, const std::string& content_type,
                     const std::vector<std::pair<std::string, std::string>>& headers,
                     std::chrono::milliseconds timeout) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw Error(ErrorCode::config, fmt::format("URL '{}' has no scheme", url));
  const auto path_begin = url.find('/', scheme_end + 3);
  const std::string base = path_begin == std::string::npos ? url : url.substr(0, path_begin);
  const std::string path = path_begin == std::string::npos ? "/" : url.substr(path_begin);

  httplib::Client client(base);
  if (!client.is_valid()) throw Error(ErrorCode::config, fmt::format("unsupported URL '{}'", url));
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers hdrs;
  for (const auto& [k, v] : headers) hdrs.emplace(k, v);
  auto res = client.Post(path, hdrs, body, content_type);
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::Write ||
        err == httplib::Error::ConnectionTimeout)
      throw Error(ErrorCode::timeout, fmt::format("POST {}: {}", url, httplib::to_string(err)));
    throw Error(ErrorCode::hook, fmt::format("POST {}: {}", url, httplib::to_string(err)));
  }
  return {res->status, res->body};
}

}  // namespace devol::detail
