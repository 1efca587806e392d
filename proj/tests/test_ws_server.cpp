// SPDX-License-Identifier: Apache-2.0
#include "cchp/ws_server.hpp"

#include "support.hpp"

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <thread>

using namespace cchp;
namespace asio = boost::asio;
namespace beast = boost::beast;
using tcp = asio::ip::tcp;

namespace {

class Client {
 public:
  explicit Client(unsigned short port) : ws_(io_) {
    tcp::resolver resolver(io_);
    asio::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/");
    ws_.text(true);
  }
  void send(const nlohmann::json& j) { ws_.write(asio::buffer(j.dump())); }
  nlohmann::json receive() {
    beast::flat_buffer b;
    ws_.read(b);
    return nlohmann::json::parse(beast::buffers_to_string(b.data()));
  }
  void close() {
    beast::error_code ec;
    ws_.close(beast::websocket::close_code::normal, ec);
  }

 private:
  asio::io_context io_;
  beast::websocket::stream<tcp::socket> ws_;
};

nlohmann::json frame_message(long t, const GestureFrame& f) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : f.segments) segs.push_back(std::vector<double>(s.begin(), s.end()));
  return {{"type", "frame"}, {"t", t}, {"segments", segs}};
}

}  // namespace

TEST(WebSocket, StreamsCommandsOverTheWire) {
  const auto& d = cchp::testing::default_dataset();
  auto model = std::make_shared<const CchpModel>(ModelConfig::tiny(8, 4), 3);
  ServiceResources res;
  res.context_db = {d.train[0], d.train[1], d.train[2]};
  res.load_model = [model](const std::string&) { return model; };
  res.defaults.checkpoint = "mem";
  res.defaults.seed = 4;

  WebSocketServer server("127.0.0.1:0", res);
  ASSERT_GT(server.port(), 0);
  std::thread loop([&] { server.run(); });

  // Reference replies from an in-process handler with the same resources.
  ProtocolHandler direct(res);
  const nlohmann::json open{{"type", "open"}, {"config", {{"context_ids", {d.train[0].clip_id, d.train[2].clip_id}}}}};
  direct.handle(open);

  {
    Client c(server.port());
    c.send(open);
    const auto opened = c.receive();
    ASSERT_EQ(opened.at("type"), "opened");
    const Clip& target = d.test_in_sample[2];
    int commands = 0;
    for (long t = 0; t < 100; ++t) {
      const auto msg = frame_message(t, target.gesture.frames[static_cast<std::size_t>(t) % target.size()]);
      c.send(msg);
      const auto expected = direct.handle(msg);
      for (const auto& want : expected) {
        const auto got = c.receive();
        ASSERT_EQ(got.at("type"), want.at("type"));
        if (got.at("type") == "command") {
          ++commands;
          EXPECT_EQ(got.at("velocity"), want.at("velocity"));
          EXPECT_EQ(got.at("pose"), want.at("pose"));
        } else {
          EXPECT_EQ(got.at("mean"), want.at("mean"));
        }
      }
    }
    EXPECT_EQ(commands, 20);
    c.send({{"type", "pause"}});
    EXPECT_EQ(c.receive().at("type"), "paused");
    c.send(frame_message(100, target.gesture.frames[0]));
    EXPECT_EQ(c.receive().at("code"), "session_paused");
    c.send({{"type", "close"}});
    EXPECT_EQ(c.receive().at("type"), "closed");
    c.close();
  }
  {
    Client c(server.port());
    c.send(nlohmann::json{{"type", "frame"}});
    EXPECT_EQ(c.receive().at("code"), "not_open");
    c.send({{"type", "close"}});
    c.receive();
    c.close();
  }
  server.stop();
  loop.join();
}

TEST(WebSocket, RejectsBadBindAddress) {
  EXPECT_THROW(WebSocketServer("localhost", ServiceResources{}), std::invalid_argument);
  EXPECT_THROW(WebSocketServer("127.0.0.1:99999", ServiceResources{}), std::invalid_argument);
}
