#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerkit/control.hpp"

namespace steerkit {

namespace planner_extern_detail {

// Writing to a pipe whose reader died raises SIGPIPE, which would take the
// whole process down. Block it around the write and swallow any pending
// instance so the failure surfaces as EPIPE instead.
class SigpipeGuard {
 public:
  SigpipeGuard() {
    sigemptyset(&set_);
    sigaddset(&set_, SIGPIPE);
    pthread_sigmask(SIG_BLOCK, &set_, &old_);
  }
  ~SigpipeGuard() {
    timespec zero{0, 0};
    while (sigtimedwait(&set_, nullptr, &zero) > 0) {
    }
    pthread_sigmask(SIG_SETMASK, &old_, nullptr);
  }
  SigpipeGuard(const SigpipeGuard&) = delete;
  SigpipeGuard& operator=(const SigpipeGuard&) = delete;

 private:
  sigset_t set_, old_;
};

}  // namespace planner_extern_detail

// Adapter to an out-of-process stage planner speaking newline-delimited
// JSON over its standard streams. One request line yields exactly one
// response line:
//
//   request:  {"type":"plan"|"next_stage"|"recover", "instruction":…,
//              "keypoints":[{"label":…, "xyz":[…]}], "dims":{"T":…,"D":…,"n":…},
//              "history":[…], "stage":…}
//   response: {"program":"<reward DSL text>"}  or  {"action":"restart_stage"|"abort"}
//
// ("stage" is present on next_stage and recover requests.) The child is
// spawned lazily on the first request and kept for the planner's lifetime.
// A malformed or late response is a PlanningError; the child is killed on
// timeout so a stuck planner cannot wedge the episode loop.
class ExternalPlanner : public StagePlanner {
 public:
  explicit ExternalPlanner(std::vector<std::string> argv, double timeout_seconds = 30.0)
      : argv_(std::move(argv)), timeout_(timeout_seconds) {
    if (argv_.empty()) throw std::invalid_argument("ExternalPlanner: empty command line");
  }

  ~ExternalPlanner() override { shutdown(); }

  ExternalPlanner(const ExternalPlanner&) = delete;
  ExternalPlanner& operator=(const ExternalPlanner&) = delete;

  RewardProgram plan(const PlanContext& ctx) override {
    const nlohmann::json reply = exchange(make_request("plan", ctx, {}, std::nullopt));
    return parse_program_reply(reply, ctx.dims, "plan");
  }

  std::optional<RewardProgram> next_stage(const PlanContext& ctx, int stage,
                                          const std::vector<double>& history) override {
    const nlohmann::json reply = exchange(make_request("next_stage", ctx, history, stage));
    if (reply.contains("program") &&
        (reply["program"].is_null() ||
         (reply["program"].is_string() && reply["program"].get<std::string>().empty())))
      return std::nullopt;  // planner keeps the current program
    return parse_program_reply(reply, ctx.dims, "next_stage");
  }

  RecoveryAction recover(const PlanContext& ctx, int stage,
                         const std::vector<double>& history) override {
    const nlohmann::json reply = exchange(make_request("recover", ctx, history, stage));
    if (!reply.contains("action") || !reply["action"].is_string())
      throw PlanningError("external planner: recover response lacks an action");
    const std::string action = reply["action"].get<std::string>();
    if (action == "restart_stage") return RecoveryAction::RestartStage;
    if (action == "abort") return RecoveryAction::Abort;
    throw PlanningError("external planner: unknown recovery action '" + action + "'");
  }

 private:
  nlohmann::json make_request(const char* type, const PlanContext& ctx,
                              const std::vector<double>& history,
                              std::optional<int> stage) const {
    nlohmann::json req;
    req["type"] = type;
    req["instruction"] = ctx.instruction;
    req["keypoints"] = nlohmann::json::array();
    for (int i = 0; i < ctx.keypoints.size(); ++i) {
      nlohmann::json xyz = nlohmann::json::array();
      for (int d = 0; d < ctx.keypoints.dim; ++d) xyz.push_back(ctx.keypoints.at(i, d));
      req["keypoints"].push_back({{"label", ctx.keypoints.labels[static_cast<std::size_t>(i)]},
                                  {"xyz", std::move(xyz)}});
    }
    req["dims"] = {{"T", ctx.dims.T}, {"D", ctx.dims.D}, {"n", ctx.dims.n}};
    req["history"] = history;
    if (stage) req["stage"] = *stage;
    return req;
  }

  RewardProgram parse_program_reply(const nlohmann::json& reply, const RewardDims& dims,
                                    const char* what) {
    if (!reply.contains("program") || !reply["program"].is_string())
      throw PlanningError(std::string("external planner: ") + what +
                          " response lacks a program");
    try {
      return parse_reward(reply["program"].get<std::string>(), dims);
    } catch (const std::exception& e) {
      throw PlanningError(std::string("external planner: invalid program: ") + e.what());
    }
  }

  void spawn() {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0) throw PlanningError("external planner: pipe failed");
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      throw PlanningError("external planner: pipe failed");
    }
    pid_ = fork();
    if (pid_ < 0) {
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) close(fd);
      throw PlanningError("external planner: fork failed");
    }
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) close(fd);
      std::vector<char*> argv;
      argv.reserve(argv_.size() + 1);
      for (auto& a : argv_) argv.push_back(a.data());
      argv.push_back(nullptr);
      execvp(argv[0], argv.data());
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
  }

  void shutdown() {
    if (in_fd_ >= 0) close(in_fd_);
    if (out_fd_ >= 0) close(out_fd_);
    in_fd_ = out_fd_ = -1;
    if (pid_ > 0) {
      // closing stdin asks the child to exit; escalate if it lingers
      int status = 0;
      for (int i = 0; i < 50; ++i) {
        if (waitpid(pid_, &status, WNOHANG) == pid_) {
          pid_ = -1;
          return;
        }
        usleep(10 * 1000);
      }
      kill(pid_, SIGKILL);
      waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  nlohmann::json exchange(const nlohmann::json& request) {
    if (pid_ <= 0) spawn();
    const std::string line = request.dump() + "\n";
    {
      planner_extern_detail::SigpipeGuard guard;
      std::size_t off = 0;
      while (off < line.size()) {
        const ssize_t n = write(in_fd_, line.data() + off, line.size() - off);
        if (n < 0) {
          if (errno == EINTR) continue;
          shutdown();
          throw PlanningError("external planner: child is not accepting requests");
        }
        off += static_cast<std::size_t>(n);
      }
    }
    const std::string reply_line = read_line();
    try {
      return nlohmann::json::parse(reply_line);
    } catch (const std::exception&) {
      throw PlanningError("external planner: response is not valid JSON: " + reply_line);
    }
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                              std::chrono::duration<double>(timeout_));
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto now = std::chrono::steady_clock::now();
      if (now >= deadline) {
        shutdown();
        throw PlanningError("external planner: timed out waiting for a response");
      }
      pollfd pfd{out_fd_, POLLIN, 0};
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
      const int pr = poll(&pfd, 1, static_cast<int>(std::min<long long>(left + 1, 60 * 1000)));
      if (pr < 0) {
        if (errno == EINTR) continue;
        shutdown();
        throw PlanningError("external planner: poll failed");
      }
      if (pr == 0) continue;
      char chunk[4096];
      const ssize_t n = read(out_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        shutdown();
        throw PlanningError("external planner: read failed");
      }
      if (n == 0) {
        shutdown();
        throw PlanningError("external planner: child closed its output stream");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::vector<std::string> argv_;
  double timeout_;
  pid_t pid_ = -1;
  int in_fd_ = -1, out_fd_ = -1;
  std::string buffer_;
};

}  // namespace steerkit
