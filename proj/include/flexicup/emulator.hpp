#pragma once

#include <atomic>
#include <cstdint>
#include <string>

#include "flexicup/device.hpp"

namespace flexicup::device {

// Single-threaded TCP device emulator: one client per session, frames on a
// wall-clock schedule, commands answered in arrival order.
class EmulatorServer {
 public:
  EmulatorServer(scene::Scene scene, scene::ConfigId config_id,
                 const physics::ConfigRegistry& registry = physics::ConfigRegistry::defaults());
  ~EmulatorServer();

  EmulatorServer(const EmulatorServer&) = delete;
  EmulatorServer& operator=(const EmulatorServer&) = delete;

  // Bind and listen; "host:port" with port 0 picking a free port.
  void listen(const std::string& endpoint);
  int port() const { return port_; }
  std::string endpoint() const;

  // Accept and run one client session to disconnect. Returns frames sent.
  std::uint64_t serve_one();
  // Accept sessions until stop() is called from a signal/other thread.
  void serve_forever();
  void stop() { stop_.store(true); }

 private:
  void run_session(int client_fd);

  scene::Scene scene_;
  scene::ConfigId config_id_;
  physics::ConfigRegistry registry_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stop_{false};
  std::uint64_t frames_sent_ = 0;
};

}  // namespace flexicup::device
