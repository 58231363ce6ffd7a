#include <catch2/catch_amalgamated.hpp>
#include <atomic>
#include <cstdlib>
#include <thread>

#include "dlat/oracles.hpp"
#include "dlat/remote.hpp"

using namespace dlat;

namespace {
Rng rng(99);

FaceImage random_image(Rng& r, int side = 32) {
  FaceImage img{random_normal({3, side, side}, r), std::nullopt, std::nullopt};
  img.pixels.vec() = img.pixels.vec().array().tanh();
  return img;
}

// Starts a local verifier endpoint; `handler` fills the response.
struct LocalServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  explicit LocalServer(httplib::Server::Handler handler) {
    server.Post("/verify", std::move(handler));
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalServer() {
    server.stop();
    thread.join();
  }
};

RemoteVerifierConfig local_config(int port) {
  RemoteVerifierConfig c;
  c.host = "127.0.0.1";
  c.port = port;
  c.backoff_ms = 1;
  return c;
}
}  // namespace

TEST_CASE("mock oracle invariants: self-similarity, unit norm, race simplex") {
  MockOracles o(0);
  FaceImage x = random_image(rng);
  CHECK(o.verify(x, x) == Catch::Approx(100.0).margin(1e-6));

  Tensor e = o.embed(x);
  REQUIRE(e.numel() == kEmbedDim);
  CHECK(e.vec().norm() == Catch::Approx(1.0).margin(1e-6));

  Tensor d = o.race(x);
  REQUIRE(d.numel() == kRaceClasses);
  double sum = 0.0;
  for (double v : d.data) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(sum == Catch::Approx(1.0).margin(1e-6));

  const double a = o.age(x);
  CHECK(a >= 0.0);
  CHECK(std::isfinite(a));

  auto feats = o.perceptual(x);
  REQUIRE(feats.size() == 4);

  LandmarkSet l = o.detect_landmarks(x);
  l.check();
  for (double v : l.points.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 32.0);
  }
}

TEST_CASE("mock oracle outputs are deterministic in the seed and inputs") {
  Rng r(7);
  FaceImage x = random_image(r), y = random_image(r);
  MockOracles a(123), b(123), c(124);
  CHECK(a.verify(x, y) == b.verify(x, y));
  for (int64_t i = 0; i < a.embed(x).numel(); ++i) CHECK(a.embed(x)[i] == b.embed(x)[i]);
  CHECK(a.age(x) == b.age(x));
  // A different seed changes the projections.
  double diff = 0.0;
  for (int64_t i = 0; i < a.embed(x).numel(); ++i) diff += std::abs(a.embed(x)[i] - c.embed(x)[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("verifier similarity is symmetric and bounded") {
  MockOracles o(5);
  Rng r(8);
  for (int t = 0; t < 10; ++t) {
    FaceImage x = random_image(r), y = random_image(r);
    const double s = o.verify(x, y);
    CHECK(s >= 0.0);
    CHECK(s <= 100.0);
    CHECK(o.verify(y, x) == Catch::Approx(s).margin(1e-12));
  }
}

TEST_CASE("oracle suite wraps the same functions") {
  MockOracles o(9);
  OracleSuite s = o.suite();
  Rng r(10);
  FaceImage x = random_image(r), y = random_image(r);
  CHECK(s.face_verifier(x, y) == o.verify(x, y));
  CHECK(s.age_estimator(x) == o.age(x));
  CHECK(s.identity_embedder(x).vec().norm() == Catch::Approx(1.0).margin(1e-6));
  CHECK(s.race_estimator(x).numel() == kRaceClasses);
  CHECK(s.perceptual_extractor(x).size() == 4);
  s.landmark_detector(x).check();
}

TEST_CASE("remote verifier parses a well-formed response") {
  setenv("DLAT_API_KEY", "test-key", 1);
  std::string seen_auth;
  LocalServer srv([&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    auto j = nlohmann::json::parse(req.body);
    REQUIRE(j.at("image_a").at("side").get<int>() == 32);
    REQUIRE(j.at("image_a").at("pixels").size() == 3 * 32 * 32);
    res.set_content("{\"similarity\": 91.27}", "application/json");
  });
  RemoteVerifier v(local_config(srv.port));
  Rng r(11);
  CHECK(v.verify(random_image(r), random_image(r), "p0") == Catch::Approx(91.27));
  CHECK(seen_auth == "Bearer test-key");
}

TEST_CASE("remote verifier retries on 429 and succeeds within the budget") {
  std::atomic<int> calls{0};
  LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = 429;
    } else {
      res.set_content("{\"similarity\": 55.5}", "application/json");
    }
  });
  RemoteVerifier v(local_config(srv.port));
  Rng r(12);
  CHECK(v.verify(random_image(r), random_image(r), "p1") == Catch::Approx(55.5));
  CHECK(calls == 3);
}

TEST_CASE("remote verifier gives up after bounded retries, naming the pair") {
  std::atomic<int> calls{0};
  LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 429;
  });
  RemoteVerifier v(local_config(srv.port));
  Rng r(13);
  try {
    v.verify(random_image(r), random_image(r), "pair-42");
    FAIL("expected RemoteOracleError");
  } catch (const RemoteOracleError& e) {
    CHECK(std::string(e.what()).find("pair-42") != std::string::npos);
  }
  CHECK(calls == 1 + local_config(0).max_retries);
}

TEST_CASE("out-of-range and malformed responses are protocol errors") {
  LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"similarity\": 140.0}", "application/json");
  });
  RemoteVerifier v(local_config(srv.port));
  Rng r(14);
  CHECK_THROWS_AS(v.verify(random_image(r), random_image(r), "p2"), RemoteOracleError);

  LocalServer bad([&](const httplib::Request&, httplib::Response& res) {
    res.set_content("not json", "application/json");
  });
  RemoteVerifier vb(local_config(bad.port));
  CHECK_THROWS_AS(vb.verify(random_image(r), random_image(r), "p3"), RemoteOracleError);
}

TEST_CASE("unreachable host surfaces as a remote oracle error") {
  RemoteVerifierConfig c = local_config(1);  // nothing listens on port 1
  c.max_retries = 0;
  RemoteVerifier v(c);
  Rng r(15);
  CHECK_THROWS_AS(v.verify(random_image(r), random_image(r), "p4"), RemoteOracleError);
}
