#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "cloak/errors.hpp"
#include "cloak/nets.hpp"
#include "cloak/tensor.hpp"

namespace cloak {

namespace wire {

// Frame layout: 4-byte magic, version byte, kind byte, payload length as a
// big-endian u32, payload bytes. Image/probability data inside payloads is
// 32-bit little-endian floating point; all other integers are big-endian.
inline constexpr std::array<std::uint8_t, 4> kMagic{'O', 'B', 'F', 'W'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32LE = 1;
inline constexpr std::uint32_t kMaxPayload = 1u << 26;

enum class Kind : std::uint8_t {
  hello = 0,  // served on connect; advertises the expected input shape
  classify_request = 1,
  classify_response = 2,
  error = 3,
};

enum class ErrorCode : std::uint8_t {
  bad_magic = 1,
  version_mismatch = 2,
  truncated_payload = 3,
  bad_kind = 4,
  bad_payload = 5,
  shape_mismatch = 6,
  internal = 7,
  network = 8,
};

std::string to_string(ErrorCode c);

struct Message {
  Kind kind = Kind::error;
  std::vector<std::uint8_t> payload;
};

struct ProtocolError : Error {
  ProtocolError(ErrorCode c, const std::string& msg) : Error(msg), code(c) {}
  ErrorCode code;
};

std::vector<std::uint8_t> encode_message(const Message& m);
/// Parses one full frame from a buffer; the buffer must contain exactly one
/// frame. Throws ProtocolError with the specific code on malformed input.
Message decode_message(const std::vector<std::uint8_t>& bytes);

/// classify_request round-trip for a single image (batch of one).
std::vector<std::uint8_t> encode_request(const Tensor& image);
Tensor decode_request(const std::vector<std::uint8_t>& frame);

std::vector<std::uint8_t> encode_response(int class_id, const std::vector<float>& probs);
struct Response {
  int class_id = 0;
  std::vector<float> probabilities;
};
Response decode_response(const std::vector<std::uint8_t>& frame);

std::vector<std::uint8_t> encode_hello(Shape3 input_shape);
Shape3 decode_hello(const std::vector<std::uint8_t>& frame);

std::vector<std::uint8_t> encode_error(ErrorCode code, const std::string& message);
std::pair<ErrorCode, std::string> decode_error(const std::vector<std::uint8_t>& frame);

// payload-level codecs (no frame header), used by the framed variants
std::vector<std::uint8_t> request_payload(const Tensor& image);
Tensor parse_request_payload(const std::vector<std::uint8_t>& payload);

}  // namespace wire

/// Byte-stream the client talks through; injectable so tests can observe
/// exactly what goes on the wire.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(const std::uint8_t* data, std::size_t len) = 0;
  /// Returns bytes read (may be short); 0 means end of stream.
  virtual std::size_t recv(std::uint8_t* data, std::size_t len) = 0;
};

class TcpTransport : public Transport {
 public:
  TcpTransport(const std::string& host, int port);
  ~TcpTransport() override;
  void send(const std::uint8_t* data, std::size_t len) override;
  std::size_t recv(std::uint8_t* data, std::size_t len) override;

 private:
  int fd_ = -1;
};

/// Serves classify requests over TCP against one frozen classifier.
/// Connections are handled concurrently; the model is shared read-only, so
/// identical request bytes always produce identical response bytes.
class ClassifierServer {
 public:
  explicit ClassifierServer(NetworkHandle clf);
  ~ClassifierServer();

  /// Binds and starts accepting. port 0 picks an ephemeral port.
  void start(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  void accept_loop();
  void handle_connection(int fd);

  NetworkHandle clf_;
  Shape3 input_shape_{3, 32, 32};
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::vector<std::thread> workers_;
  std::set<int> open_fds_;
};

struct ClassifyResult {
  int class_id = 0;
  std::vector<float> probabilities;
};

/// One round-trip over an already-connected transport: read the hello
/// frame, obfuscate locally, send only the obfuscated image, return the
/// service's answer. The raw image never reaches the transport.
ClassifyResult edge_classify_over(Transport& transport, const Tensor& image,
                                  const NetworkHandle& obf);

/// TCP convenience wrapper; connection or stream failures are retried and
/// surfaced with the attempt count in the error message.
ClassifyResult edge_classify(const Tensor& image, const NetworkHandle& obf,
                             const std::string& host, int port, int max_retries = 3);

}  // namespace cloak
