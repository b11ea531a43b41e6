#include "diverseevol/hooks.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "diverseevol/error.hpp"
#include "http_client.hpp"

extern char** environ;

namespace devol {

namespace fs = std::filesystem;

namespace {

std::string shell_quote(std::string_view s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

std::string tail_of(const fs::path& path, std::size_t max_bytes = 2000) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  if (s.size() > max_bytes) s = "..." + s.substr(s.size() - max_bytes);
  return s;
}

void require_output(const HookRequest& req) {
  if (!fs::exists(req.out_file))
    throw Error(ErrorCode::hook, fmt::format("{} hook exited cleanly but did not write {}",
                                             to_string(req.role), req.out_file.string()));
}

class SubprocessHook : public HookRunner {
 public:
  explicit SubprocessHook(HookSpec spec) : spec_(std::move(spec)) {}

  void run(const HookRequest& req) override {
    const std::string command = substitute_placeholders(spec_.command, req);
    const fs::path log_path = fs::path(req.out_file).concat(".log");
    std::error_code ec;
    fs::remove(req.out_file, ec);

    // Everything the child needs is prepared before fork.
    std::vector<std::string> env_storage;
    for (char** e = environ; *e != nullptr; ++e)
      if (std::strncmp(*e, "DIVERSEEVOL_ITER=", 17) != 0) env_storage.emplace_back(*e);
    env_storage.push_back(fmt::format("DIVERSEEVOL_ITER={}", req.iteration));
    std::vector<char*> envp;
    for (auto& s : env_storage) envp.push_back(s.data());
    envp.push_back(nullptr);
    const std::string log_str = log_path.string();

    const pid_t pid = fork();
    if (pid < 0) throw Error(ErrorCode::hook, fmt::format("fork failed: {}", std::strerror(errno)));
    if (pid == 0) {
      setpgid(0, 0);
      const int fd = ::open(log_str.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
      if (fd >= 0) {
        dup2(fd, STDOUT_FILENO);
        dup2(fd, STDERR_FILENO);
        ::close(fd);
      }
      const int devnull = ::open("/dev/null", O_RDONLY);
      if (devnull >= 0) dup2(devnull, STDIN_FILENO);
      const char* argv[] = {"/bin/sh", "-c", command.c_str(), nullptr};
      execve("/bin/sh", const_cast<char* const*>(argv), envp.data());
      _exit(127);
    }
    setpgid(pid, pid);

    const auto deadline = std::chrono::steady_clock::now() + spec_.timeout;
    auto nap = std::chrono::milliseconds(1);
    int status = 0;
    for (;;) {
      const pid_t r = waitpid(pid, &status, WNOHANG);
      if (r == pid) break;
      if (r < 0 && errno != EINTR)
        throw Error(ErrorCode::hook, fmt::format("waitpid failed: {}", std::strerror(errno)));
      if (std::chrono::steady_clock::now() >= deadline) {
        kill(-pid, SIGKILL);
        kill(pid, SIGKILL);
        waitpid(pid, &status, 0);
        throw Error(ErrorCode::timeout,
                    fmt::format("{} hook timed out after {} ms: {}", to_string(req.role),
                                spec_.timeout.count(), command));
      }
      std::this_thread::sleep_for(nap);
      nap = std::min(nap * 2, std::chrono::milliseconds(50));
    }

    if (WIFEXITED(status) && WEXITSTATUS(status) == 0) {
      require_output(req);
      return;
    }
    const std::string why = WIFEXITED(status) ? fmt::format("exited with status {}", WEXITSTATUS(status))
                                              : fmt::format("killed by signal {}", WTERMSIG(status));
    throw Error(ErrorCode::hook, fmt::format("{} hook {}: {}\n{}", to_string(req.role), why, command,
                                             tail_of(log_path)));
  }

 private:
  HookSpec spec_;
};

class HttpHook : public HookRunner {
 public:
  explicit HttpHook(HookSpec spec) : spec_(std::move(spec)) {}

  void run(const HookRequest& req) override {
    const nlohmann::json body = {{"iteration", req.iteration},
                                 {"role", to_string(req.role)},
                                 {"pool_file", fs::absolute(req.pool_file).string()},
                                 {"corpus_file", fs::absolute(req.corpus_file).string()},
                                 {"model_file", req.model_file.empty() ? std::string()
                                                                       : fs::absolute(req.model_file).string()}};
    const auto res = detail::http_post(spec_.url, body.dump(), "application/json", {}, spec_.timeout);
    if (res.status < 200 || res.status >= 300)
      throw Error(ErrorCode::hook, fmt::format("{} hook at {} returned HTTP {}: {}", to_string(req.role),
                                               spec_.url, res.status, res.body));
    std::ofstream out(req.out_file, std::ios::binary | std::ios::trunc);
    out.write(res.body.data(), static_cast<std::streamsize>(res.body.size()));
    if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", req.out_file.string()));
  }

 private:
  HookSpec spec_;
};

}  // namespace

std::string_view to_string(HookRole role) noexcept {
  switch (role) {
    case HookRole::train: return "train";
    case HookRole::embed: return "embed";
    case HookRole::score: return "score";
  }
  return "?";
}

void validate_hook_spec(const HookSpec& spec, HookRole role) {
  if (spec.timeout.count() <= 0)
    throw Error(ErrorCode::config, fmt::format("{} hook timeout must be positive", to_string(role)));
  if (spec.kind == HookKind::http) {
    if (spec.url.empty()) throw Error(ErrorCode::config, fmt::format("{} hook has no URL", to_string(role)));
    return;
  }
  if (spec.command.empty())
    throw Error(ErrorCode::config, fmt::format("{} hook has no command", to_string(role)));
  std::vector<std::string_view> required = {"{OUT_FILE}"};
  required.push_back(role == HookRole::embed ? "{CORPUS_FILE}" : "{POOL_FILE}");
  for (auto placeholder : required)
    if (spec.command.find(placeholder) == std::string::npos)
      throw Error(ErrorCode::config, fmt::format("{} hook command lacks the {} placeholder",
                                                 to_string(role), placeholder));
}

std::unique_ptr<HookRunner> make_hook(const HookSpec& spec, HookRole role) {
  validate_hook_spec(spec, role);
  if (spec.kind == HookKind::http) return std::make_unique<HttpHook>(spec);
  return std::make_unique<SubprocessHook>(spec);
}

std::string substitute_placeholders(std::string_view command, const HookRequest& req) {
  auto abs = [](const fs::path& p) { return p.empty() ? std::string() : fs::absolute(p).string(); };
  const std::pair<std::string_view, std::string> values[] = {
      {"{POOL_FILE}", shell_quote(abs(req.pool_file))},
      {"{CORPUS_FILE}", shell_quote(abs(req.corpus_file))},
      {"{MODEL_FILE}", shell_quote(abs(req.model_file))},
      {"{OUT_FILE}", shell_quote(abs(req.out_file))},
      {"{ITER}", std::to_string(req.iteration)},
  };
  std::string out;
  std::size_t i = 0;
  while (i < command.size()) {
    bool matched = false;
    if (command[i] == '{') {
      for (const auto& [placeholder, value] : values) {
        if (command.substr(i, placeholder.size()) == placeholder) {
          out += value;
          i += placeholder.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) out += command[i++];
  }
  return out;
}

}  // namespace devol
