// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include <fcntl.h>
#include <openssl/evp.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <thread>

#include "p4o/environments.hpp"
#include "p4o/errors.hpp"

namespace p4o {

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw EnvError("base64: length " + std::to_string(text.size()) + " is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * (text.size() / 4));
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw EnvError("base64: malformed input");
  // DecodeBlock counts the padding as zero bytes.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

namespace {

void close_fd(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

}  // namespace

ExternalEnv::ExternalEnv(const std::string& command, int timeout_ms) : command_(command), timeout_ms_(timeout_ms) {
  int in_pipe[2], out_pipe[2], err_pipe[2];
  if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0 || ::pipe(err_pipe) != 0) {
    throw EnvError("external env: pipe failed: " + std::string(std::strerror(errno)));
  }
  pid_ = ::fork();
  if (pid_ < 0) throw EnvError("external env: fork failed: " + std::string(std::strerror(errno)));
  if (pid_ == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::dup2(err_pipe[1], STDERR_FILENO);
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) ::close(fd);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  child_err_ = err_pipe[0];
  ::fcntl(child_err_, F_SETFL, ::fcntl(child_err_, F_GETFL) | O_NONBLOCK);
  ::signal(SIGPIPE, SIG_IGN);

  const auto hello = receive();
  try {
    actions_ = hello.at("actions").get<int>();
    const auto shape = hello.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) fail("handshake shape must have 3 entries");
    shape_ = {shape[0], shape[1], shape[2]};
  } catch (const nlohmann::json::exception& e) {
    fail("malformed handshake: " + std::string(e.what()));
  }
  if (actions_ < 1 || shape_.size() == 0) fail("handshake declares no actions or an empty frame");
}

ExternalEnv::~ExternalEnv() {
  close_fd(to_child_);
  close_fd(from_child_);
  close_fd(child_err_);
  if (pid_ > 0) {
    ::kill(pid_, SIGTERM);
    ::waitpid(pid_, nullptr, 0);
  }
}

std::string ExternalEnv::drain_stderr() {
  std::string text;
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(child_err_, buf, sizeof buf);
    if (n <= 0) break;
    text.append(buf, static_cast<std::size_t>(n));
  }
  return text;
}

void ExternalEnv::fail(const std::string& what) {
  std::string msg = "external env '" + command_ + "': " + what;
  const std::string err = drain_stderr();
  if (!err.empty()) msg += "\nchild stderr:\n" + err;
  throw EnvError(msg);
}

void ExternalEnv::send(const nlohmann::json& message) {
  const std::string line = message.dump() + "\n";
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(to_child_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail("write failed (child exited?): " + std::string(std::strerror(errno)));
    }
    written += static_cast<std::size_t>(n);
  }
}

nlohmann::json ExternalEnv::receive() {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
  for (;;) {
    const auto nl = pending_.find('\n');
    if (nl != std::string::npos) {
      const std::string line = pending_.substr(0, nl);
      pending_.erase(0, nl + 1);
      try {
        return nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        fail("malformed message: " + line.substr(0, 200));
      }
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) fail("timed out after " + std::to_string(timeout_ms_) + " ms");
    pollfd pfd{from_child_, POLLIN, 0};
    const int r = ::poll(&pfd, 1, static_cast<int>(left.count()));
    if (r < 0 && errno == EINTR) continue;
    if (r == 0) continue;
    char buf[65536];
    const ssize_t n = ::read(from_child_, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      int status = 0;
      std::string how = "child closed its output";
      // EOF usually precedes the exit by a moment; give the child 200 ms.
      bool reaped = false;
      for (int i = 0; i < 100 && !reaped; ++i) {
        reaped = ::waitpid(pid_, &status, WNOHANG) == pid_;
        if (!reaped) std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
      if (reaped) {
        how = WIFEXITED(status) ? "child exited with status " + std::to_string(WEXITSTATUS(status))
                                : "child terminated by a signal";
        pid_ = -1;
      }
      fail(how);
    }
    pending_.append(buf, static_cast<std::size_t>(n));
  }
}

EnvStep ExternalEnv::parse_frame(const nlohmann::json& m) {
  EnvStep s;
  std::vector<std::size_t> shape;
  std::string encoded;
  try {
    shape = m.at("shape").get<std::vector<std::size_t>>();
    encoded = m.at("obs").get<std::string>();
    s.reward = m.at("reward").get<double>();
    s.terminal = m.at("done").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail("malformed frame message: " + std::string(e.what()));
  }
  if (shape != std::vector<std::size_t>{shape_.channels, shape_.height, shape_.width}) {
    fail("frame shape differs from the handshake " + to_string(shape_));
  }
  try {
    s.observation = base64_decode(encoded);
  } catch (const EnvError& e) {
    fail(e.what());
  }
  if (s.observation.size() != shape_.size()) {
    fail("frame holds " + std::to_string(s.observation.size()) + " bytes, expected " + std::to_string(shape_.size()));
  }
  return s;
}

std::vector<std::uint8_t> ExternalEnv::reset(std::uint64_t seed) {
  send({{"cmd", "reset"}, {"seed", seed}});
  auto s = parse_frame(receive());
  done_ = false;
  return std::move(s.observation);
}

EnvStep ExternalEnv::step(int action) {
  check_action(action);
  if (done_) throw EnvError("external env: step after terminal; reset first");
  send({{"cmd", "step"}, {"action", static_cast<std::uint32_t>(action)}});
  auto s = parse_frame(receive());
  done_ = s.terminal;
  return s;
}

}  // namespace p4o
