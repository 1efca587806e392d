// SPDX-License-Identifier: Apache-2.0
#include "cchp/ws_server.hpp"

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <stdexcept>

namespace cchp {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

struct WebSocketServer::Impl {
  ServiceResources resources;
  std::ostream* log = nullptr;
  asio::io_context io;
  tcp::acceptor acceptor{io};
  std::atomic<bool> stopping{false};
  std::atomic<unsigned> next_id{0};
  std::mutex mu;
  std::vector<std::thread> workers;

  void say(const std::string& line) {
    if (log == nullptr) return;
    std::lock_guard lock(mu);
    *log << line << '\n';
    log->flush();
  }

  void serve(tcp::socket socket, std::string id) {
    try {
      websocket::stream<tcp::socket> ws(std::move(socket));
      ws.accept();
      ws.text(true);
      ProtocolHandler handler(resources, id);
      say("connection " + id + " opened");
      while (!handler.closed()) {
        beast::flat_buffer buffer;
        ws.read(buffer);
        for (const auto& reply : handler.handle(beast::buffers_to_string(buffer.data()))) {
          ws.write(asio::buffer(reply.dump()));
        }
      }
      ws.close(websocket::close_code::normal);
      say("connection " + id + " closed");
    } catch (const beast::system_error& e) {
      if (e.code() != websocket::error::closed) say("connection " + id + ": " + e.code().message());
    } catch (const std::exception& e) {
      say("connection " + id + ": " + e.what());
    }
  }
};

namespace {

tcp::endpoint parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("bind address must be host:port, got " + bind);
  const std::string host = bind.substr(0, colon);
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(bind.substr(colon + 1), &used);
    if (used != bind.size() - colon - 1) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid port in bind address " + bind);
  }
  if (port < 0 || port > 65535) throw std::invalid_argument("port out of range in " + bind);
  boost::system::error_code ec;
  const auto addr = asio::ip::make_address(host.empty() ? "0.0.0.0" : host, ec);
  if (ec) throw std::invalid_argument("invalid host in bind address " + bind);
  return {addr, static_cast<unsigned short>(port)};
}

}  // namespace

WebSocketServer::WebSocketServer(const std::string& bind, ServiceResources resources, std::ostream* log)
    : impl_(std::make_unique<Impl>()) {
  impl_->resources = std::move(resources);
  impl_->log = log;
  const tcp::endpoint ep = parse_bind(bind);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(asio::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen();
}

WebSocketServer::~WebSocketServer() {
  stop();
  for (auto& w : impl_->workers) {
    if (w.joinable()) w.join();
  }
}

unsigned short WebSocketServer::port() const { return impl_->acceptor.local_endpoint().port(); }

void WebSocketServer::run() {
  impl_->say("listening on port " + std::to_string(port()));
  while (!impl_->stopping) {
    tcp::socket socket(impl_->io);
    boost::system::error_code ec;
    impl_->acceptor.accept(socket, ec);
    if (impl_->stopping) break;
    if (ec) {
      impl_->say("accept: " + ec.message());
      continue;
    }
    const std::string id = "s" + std::to_string(impl_->next_id++);
    std::lock_guard lock(impl_->mu);
    impl_->workers.emplace_back([this, s = std::move(socket), id]() mutable { impl_->serve(std::move(s), id); });
  }
}

void WebSocketServer::stop() {
  if (impl_->stopping.exchange(true)) return;
  boost::system::error_code ec;
  // A blocking accept() is not reliably interrupted by closing the acceptor from
  // another thread, so wake it with a throwaway connection; run() closes it.
  const tcp::endpoint local = impl_->acceptor.local_endpoint(ec);
  if (!ec) {
    asio::io_context io;
    tcp::socket poke(io);
    const auto addr = local.address().is_unspecified() ? asio::ip::address(asio::ip::address_v4::loopback())
                                                       : local.address();
    poke.connect({addr, local.port()}, ec);
  }
}

}  // namespace cchp
