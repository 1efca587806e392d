// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ws_server.hpp
 * @brief  WebSocket transport for the session protocol.
 *
 * Each accepted connection runs on its own thread with its own
 * ProtocolHandler; messages on one connection are handled in arrival order.
 * Every text frame carries one JSON message and every reply is sent as its
 * own text frame.
 */
#pragma once

#include "cchp/realtime_service.hpp"

#include <atomic>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace cchp {

class WebSocketServer {
 public:
  /// bind is "host:port"; port 0 picks a free port.
  WebSocketServer(const std::string& bind, ServiceResources resources, std::ostream* log = nullptr);
  ~WebSocketServer();
  WebSocketServer(const WebSocketServer&) = delete;
  WebSocketServer& operator=(const WebSocketServer&) = delete;

  unsigned short port() const;

  /// Accepts connections until stop() is called.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cchp
