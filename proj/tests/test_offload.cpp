#include <doctest.h>

#include <thread>

#include "cloak/offload.hpp"
#include "cloak/trainer.hpp"
#include "testutil.hpp"

using namespace cloak;

namespace {

/// Transport wrapper that records every byte the client sends.
class RecordingTransport : public Transport {
 public:
  explicit RecordingTransport(Transport& inner) : inner_(inner) {}
  void send(const std::uint8_t* data, std::size_t len) override {
    sent_.insert(sent_.end(), data, data + len);
    inner_.send(data, len);
  }
  std::size_t recv(std::uint8_t* data, std::size_t len) override {
    return inner_.recv(data, len);
  }
  const std::vector<std::uint8_t>& sent() const { return sent_; }

 private:
  Transport& inner_;
  std::vector<std::uint8_t> sent_;
};

NetworkHandle make_frozen_classifier(int classes, std::uint64_t seed) {
  NetworkHandle clf = build_classifier(ClassifierArch::small_cnn, classes, seed);
  freeze(clf);
  return clf;
}

}  // namespace

TEST_CASE("wire messages round-trip over random payloads") {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    wire::Message m;
    m.kind = static_cast<wire::Kind>(rng.uniform_int(4));
    m.payload.resize(rng.uniform_int(300));
    for (auto& b : m.payload) b = static_cast<std::uint8_t>(rng.uniform_int(256));
    wire::Message back = wire::decode_message(wire::encode_message(m));
    CHECK(back.kind == m.kind);
    CHECK(back.payload == m.payload);
  }
}

TEST_CASE("classify requests round-trip bit-exactly") {
  Rng rng(7);
  Tensor img(1, 3, 32, 32);
  testutil::randomize(img, rng, 0.0, 1.0);
  Tensor back = wire::decode_request(wire::encode_request(img));
  CHECK(back.c() == 3);
  CHECK(back.h() == 32);
  CHECK(back.w() == 32);
  for (std::int64_t i = 0; i < img.numel(); ++i) CHECK(back[i] == img[i]);

  // minimal case: one pixel
  Tensor tiny(1, 1, 1, 1);
  tiny[0] = 0.123456f;
  Tensor tback = wire::decode_request(wire::encode_request(tiny));
  CHECK(tback[0] == tiny[0]);
}

TEST_CASE("malformed frames produce distinct error codes") {
  Rng rng(9);
  Tensor img(1, 3, 32, 32);
  testutil::randomize(img, rng, 0.0, 1.0);
  auto good = wire::encode_request(img);

  {
    auto bad = good;
    bad[0] = 'X';
    try {
      wire::decode_message(bad);
      FAIL("expected bad_magic");
    } catch (const wire::ProtocolError& e) {
      CHECK(e.code == wire::ErrorCode::bad_magic);
    }
  }
  {
    auto bad = good;
    bad[4] = 9;  // version
    try {
      wire::decode_message(bad);
      FAIL("expected version_mismatch");
    } catch (const wire::ProtocolError& e) {
      CHECK(e.code == wire::ErrorCode::version_mismatch);
    }
  }
  {
    auto bad = good;
    bad.resize(bad.size() - 10);  // truncated payload
    try {
      wire::decode_message(bad);
      FAIL("expected truncated_payload");
    } catch (const wire::ProtocolError& e) {
      CHECK(e.code == wire::ErrorCode::truncated_payload);
    }
  }
  {
    auto bad = good;
    bad[5] = 200;  // kind
    try {
      wire::decode_message(bad);
      FAIL("expected bad_kind");
    } catch (const wire::ProtocolError& e) {
      CHECK(e.code == wire::ErrorCode::bad_kind);
    }
  }
}

TEST_CASE("service answers classify requests with a probability vector") {
  ClassifierServer server(make_frozen_classifier(10, 3));
  server.start("127.0.0.1", 0);
  REQUIRE(server.port() > 0);

  Rng rng(1);
  Tensor img(1, 3, 32, 32);
  testutil::randomize(img, rng, 0.0, 1.0);
  NetworkHandle identity = build_obfuscator(identity_spec());

  ClassifyResult r = edge_classify(img, identity, "127.0.0.1", server.port());
  CHECK(r.class_id >= 0);
  CHECK(r.class_id < 10);
  REQUIRE(r.probabilities.size() == 10);
  double sum = 0;
  for (float p : r.probabilities) sum += p;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));

  server.stop();
}

TEST_CASE("identity obfuscator matches the local forward argmax end to end") {
  NetworkHandle clf = make_frozen_classifier(10, 5);
  ClassifierServer server(clf);
  server.start("127.0.0.1", 0);
  NetworkHandle identity = build_obfuscator(identity_spec());

  DatasetSplit data = synthetic_split(32, 10, 77);
  for (int i = 0; i < data.size(); ++i) {
    Tensor img = data.images.slice_batch(i, i + 1);
    ClassifyResult remote = edge_classify(img, identity, "127.0.0.1", server.port());
    Tensor logits = infer(clf, img);
    int best = 0;
    for (int k = 1; k < 10; ++k)
      if (logits[k] > logits[best]) best = k;
    CHECK(remote.class_id == best);
  }
  server.stop();
}

TEST_CASE("responses are a pure function of request bytes") {
  ClassifierServer server(make_frozen_classifier(10, 11));
  server.start("127.0.0.1", 0);

  Rng rng(31);
  Tensor img(1, 3, 32, 32);
  testutil::randomize(img, rng, 0.0, 1.0);
  const auto request = wire::encode_request(img);

  auto run_once = [&]() {
    TcpTransport t("127.0.0.1", server.port());
    std::uint8_t buf[4096];
    // swallow hello
    std::vector<std::uint8_t> hello(10);
    std::size_t got = 0;
    while (got < 10) got += t.recv(hello.data() + got, 10 - got);
    const std::uint32_t hlen = (hello[6] << 24) | (hello[7] << 16) | (hello[8] << 8) | hello[9];
    std::size_t skipped = 0;
    while (skipped < hlen) skipped += t.recv(buf, std::min<std::size_t>(sizeof(buf), hlen - skipped));
    t.send(request.data(), request.size());
    std::vector<std::uint8_t> resp;
    std::uint8_t header[10];
    got = 0;
    while (got < 10) got += t.recv(header + got, 10 - got);
    const std::uint32_t len = (header[6] << 24) | (header[7] << 16) | (header[8] << 8) | header[9];
    resp.assign(header, header + 10);
    resp.resize(10 + len);
    got = 0;
    while (got < len) got += t.recv(resp.data() + 10 + got, len - got);
    return resp;
  };

  auto a = run_once();
  auto b = run_once();
  CHECK(a == b);
  server.stop();
}

TEST_CASE("malformed magic is answered with a bad_magic error") {
  ClassifierServer server(make_frozen_classifier(10, 13));
  server.start("127.0.0.1", 0);

  TcpTransport t("127.0.0.1", server.port());
  // swallow hello frame
  std::uint8_t header[10];
  std::size_t got = 0;
  while (got < 10) got += t.recv(header + got, 10 - got);
  const std::uint32_t hlen = (header[6] << 24) | (header[7] << 16) | (header[8] << 8) | header[9];
  std::vector<std::uint8_t> sink(hlen);
  got = 0;
  while (got < hlen) got += t.recv(sink.data() + got, hlen - got);

  const std::uint8_t junk[10] = {'J', 'U', 'N', 'K', 1, 1, 0, 0, 0, 0};
  t.send(junk, sizeof(junk));

  std::vector<std::uint8_t> frame;
  got = 0;
  while (got < 10) got += t.recv(header + got, 10 - got);
  const std::uint32_t len = (header[6] << 24) | (header[7] << 16) | (header[8] << 8) | header[9];
  frame.assign(header, header + 10);
  frame.resize(10 + len);
  got = 0;
  while (got < len) got += t.recv(frame.data() + 10 + got, len - got);

  auto [code, msg] = wire::decode_error(frame);
  CHECK(code == wire::ErrorCode::bad_magic);
  (void)msg;
  server.stop();
}

TEST_CASE("32 concurrent clients each get deterministic answers") {
  ClassifierServer server(make_frozen_classifier(10, 17));
  server.start("127.0.0.1", 0);
  NetworkHandle identity = build_obfuscator(identity_spec());

  DatasetSplit data = synthetic_split(32, 10, 3);
  std::vector<int> first(32, -1);
  std::vector<std::thread> clients;
  std::atomic<int> failures{0};
  for (int ci = 0; ci < 32; ++ci) {
    clients.emplace_back([&, ci] {
      try {
        Tensor img = data.images.slice_batch(ci, ci + 1);
        int prev = -1;
        for (int rep = 0; rep < 10; ++rep) {
          ClassifyResult r = edge_classify(img, identity, "127.0.0.1", server.port());
          if (prev >= 0 && r.class_id != prev) ++failures;
          prev = r.class_id;
        }
        first[ci] = prev;
      } catch (...) {
        ++failures;
      }
    });
  }
  for (auto& t : clients) t.join();
  CHECK(failures.load() == 0);
  for (int v : first) CHECK(v >= 0);
  server.stop();
}

TEST_CASE("client writes exactly the obfuscated request to the wire") {
  NetworkHandle clf = make_frozen_classifier(10, 19);
  ClassifierServer server(clf);
  server.start("127.0.0.1", 0);
  NetworkHandle obf = build_obfuscator(tiny_obfuscator_spec(), 23);

  Rng rng(41);
  Tensor img(1, 3, 32, 32);
  testutil::randomize(img, rng, 0.0, 1.0);

  TcpTransport tcp("127.0.0.1", server.port());
  RecordingTransport rec(tcp);
  ClassifyResult r = edge_classify_over(rec, img, obf);
  (void)r;

  // the complete client->server byte stream is one encoded request of the
  // obfuscated image; the raw image bytes never appear
  Tensor obfuscated = infer(obf, img);
  CHECK(rec.sent() == wire::encode_request(obfuscated));
  server.stop();
}

TEST_CASE("connection failures carry the retry count") {
  NetworkHandle identity = build_obfuscator(identity_spec());
  Rng rng(1);
  Tensor img(1, 3, 32, 32);
  testutil::randomize(img, rng, 0.0, 1.0);
  try {
    edge_classify(img, identity, "127.0.0.1", 1, /*max_retries=*/2);  // nothing listens
    FAIL("expected network error");
  } catch (const wire::ProtocolError& e) {
    CHECK(e.code == wire::ErrorCode::network);
    CHECK(std::string(e.what()).find("after 2 attempts") != std::string::npos);
  }
}
