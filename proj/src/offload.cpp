#include "cloak/offload.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cstring>

#include "cloak/losses.hpp"

namespace cloak {

namespace wire {

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back((v >> 24) & 0xFF);
  out.push_back((v >> 16) & 0xFF);
  out.push_back((v >> 8) & 0xFF);
  out.push_back(v & 0xFF);
}

std::uint32_t get_u32_be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  const std::uint32_t v = std::bit_cast<std::uint32_t>(f);
  out.push_back(v & 0xFF);
  out.push_back((v >> 8) & 0xFF);
  out.push_back((v >> 16) & 0xFF);
  out.push_back((v >> 24) & 0xFF);
}

float get_f32_le(const std::uint8_t* p) {
  const std::uint32_t v = static_cast<std::uint32_t>(p[0]) |
                          (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(v);
}

}  // namespace

std::string to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::truncated_payload: return "truncated_payload";
    case ErrorCode::bad_kind: return "bad_kind";
    case ErrorCode::bad_payload: return "bad_payload";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::internal: return "internal";
    case ErrorCode::network: return "network";
  }
  return "?";
}

std::vector<std::uint8_t> encode_message(const Message& m) {
  std::vector<std::uint8_t> out;
  out.reserve(10 + m.payload.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(m.kind));
  put_u32_be(out, static_cast<std::uint32_t>(m.payload.size()));
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

Message decode_message(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10)
    throw ProtocolError(ErrorCode::truncated_payload, "frame shorter than header");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw ProtocolError(ErrorCode::bad_magic, "bad magic");
  if (bytes[4] != kVersion)
    throw ProtocolError(ErrorCode::version_mismatch,
                        "unsupported protocol version " + std::to_string(bytes[4]));
  const std::uint8_t kind = bytes[5];
  if (kind > static_cast<std::uint8_t>(Kind::error))
    throw ProtocolError(ErrorCode::bad_kind, "unknown message kind " + std::to_string(kind));
  const std::uint32_t len = get_u32_be(bytes.data() + 6);
  if (len > kMaxPayload)
    throw ProtocolError(ErrorCode::bad_payload, "payload length exceeds limit");
  if (bytes.size() != 10u + len)
    throw ProtocolError(ErrorCode::truncated_payload, "payload length mismatch");
  Message m;
  m.kind = static_cast<Kind>(kind);
  m.payload.assign(bytes.begin() + 10, bytes.end());
  return m;
}

std::vector<std::uint8_t> request_payload(const Tensor& image) {
  std::vector<std::uint8_t> p;
  p.reserve(13 + static_cast<std::size_t>(image.numel()) * 4);
  p.push_back(kDtypeF32LE);
  put_u32_be(p, static_cast<std::uint32_t>(image.c()));
  put_u32_be(p, static_cast<std::uint32_t>(image.h()));
  put_u32_be(p, static_cast<std::uint32_t>(image.w()));
  for (std::int64_t i = 0; i < image.numel(); ++i) put_f32_le(p, image[i]);
  return p;
}

Tensor parse_request_payload(const std::vector<std::uint8_t>& p) {
  if (p.size() < 13) throw ProtocolError(ErrorCode::bad_payload, "request payload too short");
  if (p[0] != kDtypeF32LE)
    throw ProtocolError(ErrorCode::bad_payload,
                        "unsupported dtype tag " + std::to_string(p[0]));
  const std::uint32_t c = get_u32_be(p.data() + 1);
  const std::uint32_t h = get_u32_be(p.data() + 5);
  const std::uint32_t w = get_u32_be(p.data() + 9);
  const std::uint64_t count = static_cast<std::uint64_t>(c) * h * w;
  if (c == 0 || h == 0 || w == 0 || count > kMaxPayload / 4)
    throw ProtocolError(ErrorCode::bad_payload, "implausible image dims");
  if (p.size() != 13 + count * 4)
    throw ProtocolError(ErrorCode::bad_payload, "image byte count mismatch");
  Tensor t(1, static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
  for (std::uint64_t i = 0; i < count; ++i) t[static_cast<std::int64_t>(i)] =
      get_f32_le(p.data() + 13 + i * 4);
  return t;
}

std::vector<std::uint8_t> encode_request(const Tensor& image) {
  if (image.n() != 1) throw Error("encode_request: expected a single image");
  return encode_message({Kind::classify_request, request_payload(image)});
}

Tensor decode_request(const std::vector<std::uint8_t>& frame) {
  Message m = decode_message(frame);
  if (m.kind != Kind::classify_request)
    throw ProtocolError(ErrorCode::bad_kind, "not a classify_request");
  return parse_request_payload(m.payload);
}

std::vector<std::uint8_t> encode_response(int class_id, const std::vector<float>& probs) {
  std::vector<std::uint8_t> p;
  put_u32_be(p, static_cast<std::uint32_t>(class_id));
  put_u32_be(p, static_cast<std::uint32_t>(probs.size()));
  for (float f : probs) put_f32_le(p, f);
  return encode_message({Kind::classify_response, std::move(p)});
}

wire::Response decode_response(const std::vector<std::uint8_t>& frame) {
  Message m = decode_message(frame);
  if (m.kind != Kind::classify_response)
    throw ProtocolError(ErrorCode::bad_kind, "not a classify_response");
  if (m.payload.size() < 8)
    throw ProtocolError(ErrorCode::bad_payload, "response payload too short");
  Response r;
  r.class_id = static_cast<int>(get_u32_be(m.payload.data()));
  const std::uint32_t n = get_u32_be(m.payload.data() + 4);
  if (m.payload.size() != 8 + static_cast<std::size_t>(n) * 4)
    throw ProtocolError(ErrorCode::bad_payload, "probability count mismatch");
  r.probabilities.resize(n);
  for (std::uint32_t i = 0; i < n; ++i)
    r.probabilities[i] = get_f32_le(m.payload.data() + 8 + i * 4);
  return r;
}

std::vector<std::uint8_t> encode_hello(Shape3 s) {
  std::vector<std::uint8_t> p;
  p.push_back(kDtypeF32LE);
  put_u32_be(p, static_cast<std::uint32_t>(s.c));
  put_u32_be(p, static_cast<std::uint32_t>(s.h));
  put_u32_be(p, static_cast<std::uint32_t>(s.w));
  return encode_message({Kind::hello, std::move(p)});
}

Shape3 decode_hello(const std::vector<std::uint8_t>& frame) {
  Message m = decode_message(frame);
  if (m.kind != Kind::hello) throw ProtocolError(ErrorCode::bad_kind, "not a hello");
  if (m.payload.size() != 13)
    throw ProtocolError(ErrorCode::bad_payload, "hello payload size mismatch");
  return {static_cast<int>(get_u32_be(m.payload.data() + 1)),
          static_cast<int>(get_u32_be(m.payload.data() + 5)),
          static_cast<int>(get_u32_be(m.payload.data() + 9))};
}

std::vector<std::uint8_t> encode_error(ErrorCode code, const std::string& message) {
  std::vector<std::uint8_t> p;
  p.push_back(static_cast<std::uint8_t>(code));
  put_u32_be(p, static_cast<std::uint32_t>(message.size()));
  p.insert(p.end(), message.begin(), message.end());
  return encode_message({Kind::error, std::move(p)});
}

std::pair<ErrorCode, std::string> decode_error(const std::vector<std::uint8_t>& frame) {
  Message m = decode_message(frame);
  if (m.kind != Kind::error) throw ProtocolError(ErrorCode::bad_kind, "not an error");
  if (m.payload.size() < 5)
    throw ProtocolError(ErrorCode::bad_payload, "error payload too short");
  const ErrorCode code = static_cast<ErrorCode>(m.payload[0]);
  const std::uint32_t len = get_u32_be(m.payload.data() + 1);
  if (m.payload.size() != 5 + static_cast<std::size_t>(len))
    throw ProtocolError(ErrorCode::bad_payload, "error message length mismatch");
  return {code, std::string(m.payload.begin() + 5, m.payload.end())};
}

}  // namespace wire

// --- transports ------------------------------------------------------------

TcpTransport::TcpTransport(const std::string& host, int port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw wire::ProtocolError(wire::ErrorCode::network, "socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    fd_ = -1;
    throw wire::ProtocolError(wire::ErrorCode::network, "bad address: " + host);
  }
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw wire::ProtocolError(wire::ErrorCode::network,
                              "connect to " + host + ":" + std::to_string(port) + " failed");
  }
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

TcpTransport::~TcpTransport() {
  if (fd_ >= 0) ::close(fd_);
}

void TcpTransport::send(const std::uint8_t* data, std::size_t len) {
  std::size_t sent = 0;
  while (sent < len) {
    const ssize_t n = ::send(fd_, data + sent, len - sent, MSG_NOSIGNAL);
    if (n <= 0) throw wire::ProtocolError(wire::ErrorCode::network, "send failed");
    sent += static_cast<std::size_t>(n);
  }
}

std::size_t TcpTransport::recv(std::uint8_t* data, std::size_t len) {
  const ssize_t n = ::recv(fd_, data, len, 0);
  if (n < 0) throw wire::ProtocolError(wire::ErrorCode::network, "recv failed");
  return static_cast<std::size_t>(n);
}

namespace {

bool recv_exact(Transport& t, std::uint8_t* data, std::size_t len) {
  std::size_t got = 0;
  while (got < len) {
    const std::size_t n = t.recv(data + got, len - got);
    if (n == 0) return false;
    got += n;
  }
  return true;
}

/// Reads one full frame. Returns false on clean end-of-stream before any
/// byte; throws ProtocolError(truncated_payload) on mid-frame EOF.
bool read_frame(Transport& t, std::vector<std::uint8_t>& frame) {
  std::uint8_t header[10];
  const std::size_t first = t.recv(header, sizeof(header));
  if (first == 0) return false;
  if (first < sizeof(header) && !recv_exact(t, header + first, sizeof(header) - first))
    throw wire::ProtocolError(wire::ErrorCode::truncated_payload, "stream ended mid-header");
  if (!std::equal(wire::kMagic.begin(), wire::kMagic.end(), header))
    throw wire::ProtocolError(wire::ErrorCode::bad_magic, "bad magic");
  if (header[4] != wire::kVersion)
    throw wire::ProtocolError(wire::ErrorCode::version_mismatch,
                              "unsupported protocol version " + std::to_string(header[4]));
  const std::uint32_t len = (static_cast<std::uint32_t>(header[6]) << 24) |
                            (static_cast<std::uint32_t>(header[7]) << 16) |
                            (static_cast<std::uint32_t>(header[8]) << 8) |
                            static_cast<std::uint32_t>(header[9]);
  if (len > wire::kMaxPayload)
    throw wire::ProtocolError(wire::ErrorCode::bad_payload, "payload length exceeds limit");
  frame.assign(header, header + sizeof(header));
  frame.resize(10 + len);
  if (len > 0 && !recv_exact(t, frame.data() + 10, len))
    throw wire::ProtocolError(wire::ErrorCode::truncated_payload, "stream ended mid-payload");
  return true;
}

class FdTransport : public Transport {
 public:
  explicit FdTransport(int fd) : fd_(fd) {}
  void send(const std::uint8_t* data, std::size_t len) override {
    std::size_t sent = 0;
    while (sent < len) {
      const ssize_t n = ::send(fd_, data + sent, len - sent, MSG_NOSIGNAL);
      if (n <= 0) throw wire::ProtocolError(wire::ErrorCode::network, "send failed");
      sent += static_cast<std::size_t>(n);
    }
  }
  std::size_t recv(std::uint8_t* data, std::size_t len) override {
    const ssize_t n = ::recv(fd_, data, len, 0);
    if (n < 0) throw wire::ProtocolError(wire::ErrorCode::network, "recv failed");
    return static_cast<std::size_t>(n);
  }

 private:
  int fd_;
};

}  // namespace

// --- server ------------------------------------------------------------------

ClassifierServer::ClassifierServer(NetworkHandle clf) : clf_(std::move(clf)) {
  if (clf_.trainable)
    throw FrozenContractError("ClassifierServer: classifier must be frozen");
  input_shape_ = {clf_.spec.input_shape[0], clf_.spec.input_shape[1], clf_.spec.input_shape[2]};
}

ClassifierServer::~ClassifierServer() { stop(); }

void ClassifierServer::start(const std::string& host, int port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error("socket() failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw Error("bad bind address: " + host);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    throw Error("bind to " + host + ":" + std::to_string(port) + " failed");
  if (::listen(listen_fd_, 64) != 0) throw Error("listen failed");

  sockaddr_in bound{};
  socklen_t blen = sizeof(bound);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &blen);
  port_ = ntohs(bound.sin_port);

  running_ = true;
  accept_thread_ = std::thread(&ClassifierServer::accept_loop, this);
}

void ClassifierServer::stop() {
  if (!running_.exchange(false)) {
    if (accept_thread_.joinable()) accept_thread_.join();
    return;
  }
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard<std::mutex> lock(mu_);
    workers.swap(workers_);
  }
  for (auto& t : workers)
    if (t.joinable()) t.join();
}

void ClassifierServer::accept_loop() {
  while (running_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (!running_) break;
      continue;
    }
    std::lock_guard<std::mutex> lock(mu_);
    open_fds_.insert(fd);
    workers_.emplace_back([this, fd] { handle_connection(fd); });
  }
}

void ClassifierServer::handle_connection(int fd) {
  FdTransport t(fd);
  try {
    const auto hello = wire::encode_hello(input_shape_);
    t.send(hello.data(), hello.size());

    std::vector<std::uint8_t> frame;
    while (running_) {
      bool have = false;
      try {
        have = read_frame(t, frame);
      } catch (const wire::ProtocolError& e) {
        // Framing is gone; answer with the specific code and drop the link.
        try {
          const auto err = wire::encode_error(e.code, e.what());
          t.send(err.data(), err.size());
        } catch (...) {
        }
        break;
      }
      if (!have) break;

      try {
        wire::Message m = wire::decode_message(frame);
        if (m.kind != wire::Kind::classify_request) {
          const auto err = wire::encode_error(wire::ErrorCode::bad_kind,
                                              "expected classify_request");
          t.send(err.data(), err.size());
          continue;  // recoverable, keep the connection
        }
        Tensor image = wire::parse_request_payload(m.payload);
        if (image.c() != input_shape_.c || image.h() != input_shape_.h ||
            image.w() != input_shape_.w) {
          const auto err = wire::encode_error(
              wire::ErrorCode::shape_mismatch,
              "expected (" + std::to_string(input_shape_.c) + "," +
                  std::to_string(input_shape_.h) + "," + std::to_string(input_shape_.w) + ")");
          t.send(err.data(), err.size());
          continue;
        }
        Tensor logits = infer(clf_, image);
        Tensor probs = softmax(logits);
        int best = 0;
        for (int k = 1; k < static_cast<int>(probs.image_size()); ++k)
          if (probs[k] > probs[best]) best = k;
        std::vector<float> pv(probs.data(), probs.data() + probs.image_size());
        const auto resp = wire::encode_response(best, pv);
        t.send(resp.data(), resp.size());
      } catch (const wire::ProtocolError& e) {
        const auto err = wire::encode_error(e.code, e.what());
        t.send(err.data(), err.size());
      } catch (const std::exception& e) {
        const auto err = wire::encode_error(wire::ErrorCode::internal, e.what());
        t.send(err.data(), err.size());
      }
    }
  } catch (...) {
    // connection-level failure; fall through to cleanup
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    open_fds_.erase(fd);
  }
  ::close(fd);
}

// --- client ------------------------------------------------------------------

ClassifyResult edge_classify_over(Transport& transport, const Tensor& image,
                                  const NetworkHandle& obf) {
  std::vector<std::uint8_t> frame;
  if (!read_frame(transport, frame))
    throw wire::ProtocolError(wire::ErrorCode::network, "service closed before hello");
  const Shape3 service_shape = wire::decode_hello(frame);

  Tensor obfuscated = infer(obf, image);
  if (obfuscated.c() != service_shape.c || obfuscated.h() != service_shape.h ||
      obfuscated.w() != service_shape.w)
    throw ShapeError("obfuscator output does not match the service input shape");

  const auto request = wire::encode_request(obfuscated);
  transport.send(request.data(), request.size());

  if (!read_frame(transport, frame))
    throw wire::ProtocolError(wire::ErrorCode::network, "service closed before response");
  wire::Message m = wire::decode_message(frame);
  if (m.kind == wire::Kind::error) {
    auto [code, msg] = wire::decode_error(frame);
    throw wire::ProtocolError(code, "service error (" + wire::to_string(code) + "): " + msg);
  }
  wire::Response r = wire::decode_response(frame);
  return {r.class_id, std::move(r.probabilities)};
}

ClassifyResult edge_classify(const Tensor& image, const NetworkHandle& obf,
                             const std::string& host, int port, int max_retries) {
  std::string last_error;
  for (int attempt = 1; attempt <= max_retries; ++attempt) {
    try {
      TcpTransport t(host, port);
      return edge_classify_over(t, image, obf);
    } catch (const wire::ProtocolError& e) {
      if (e.code != wire::ErrorCode::network) throw;
      last_error = e.what();
    }
  }
  throw wire::ProtocolError(wire::ErrorCode::network,
                            "network failure after " + std::to_string(max_retries) +
                                " attempts: " + last_error);
}

}  // namespace cloak
