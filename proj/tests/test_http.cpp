#include <gtest/gtest.h>

#include "support.hpp"

using namespace refsent;
namespace ts = testing_support;

namespace {

RetryPolicy fast_retry(int attempts = 3) {
  RetryPolicy r;
  r.max_attempts = attempts;
  r.base_delay = std::chrono::milliseconds(1);
  r.log = nullptr;
  return r;
}

CompletionRequest request(std::string prompt = "Review: x\nStars: ") {
  return {"tiny-model", std::move(prompt), DecodingParams{}, std::nullopt};
}

}  // namespace

TEST(Endpoint, UrlForms) {
  auto a = completions_endpoint("http://127.0.0.1:8080");
  EXPECT_EQ(a.scheme_host_port, "http://127.0.0.1:8080");
  EXPECT_EQ(a.path, "/v1/completions");
  EXPECT_EQ(completions_endpoint("http://h:1/v1/").path, "/v1/completions");
  EXPECT_EQ(completions_endpoint("http://h:1/api/v1/completions").path, "/api/v1/completions");
  EXPECT_THROW(completions_endpoint("localhost:8080"), std::invalid_argument);
  EXPECT_THROW(completions_endpoint("https://api.example.com/v1"), std::invalid_argument);
}

TEST(HttpBackend, SendsOpenAiCompletionRequest) {
  nlohmann::json seen;
  ts::StubCompletionServer server([&](const nlohmann::json& body, httplib::Response& res) {
    seen = body;
    ts::StubCompletionServer::reply_text(res, " 4");
  });
  HttpCompletionBackend backend({server.url(), "tiny-model", "secret", std::chrono::seconds(5)});
  auto req = request();
  req.params.seed = 11;
  const auto res = complete(req, backend, fast_retry());
  EXPECT_EQ(res.text, " 4");
  EXPECT_EQ(parse_rating(res.text), 4);
  EXPECT_EQ(seen["model"], "tiny-model");
  EXPECT_EQ(seen["prompt"], "Review: x\nStars: ");
  EXPECT_EQ(seen["max_tokens"], 1);
  EXPECT_DOUBLE_EQ(seen["temperature"].get<double>(), 1.0);
  EXPECT_EQ(seen["seed"], 11);
  EXPECT_EQ(server.last_authorization(), "Bearer secret");
  EXPECT_EQ(backend.model_id(), "tiny-model");
}

TEST(HttpBackend, ServerErrorsAreRetried) {
  std::atomic<int> n{0};
  ts::StubCompletionServer server([&](const nlohmann::json&, httplib::Response& res) {
    if (n++ < 2) {
      res.status = n == 1 ? 503 : 429;
      res.set_content("busy", "text/plain");
      return;
    }
    ts::StubCompletionServer::reply_text(res, "5");
  });
  HttpCompletionBackend backend({server.url(), "m", "", std::chrono::seconds(5)});
  EXPECT_EQ(complete(request(), backend, fast_retry(3)).text, "5");
  EXPECT_EQ(server.requests(), 3);
}

TEST(HttpBackend, ClientErrorsAreNotRetried) {
  ts::StubCompletionServer server([&](const nlohmann::json&, httplib::Response& res) {
    res.status = 400;
    res.set_content(R"({"error": "unknown model"})", "application/json");
  });
  HttpCompletionBackend backend({server.url(), "m", "", std::chrono::seconds(5)});
  try {
    complete(request(), backend, fast_retry(3));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_FALSE(e.transient());
    EXPECT_NE(std::string(e.what()).find("HTTP 400"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("unknown model"), std::string::npos);
  }
  EXPECT_EQ(server.requests(), 1);
}

TEST(HttpBackend, MalformedPayload) {
  ts::StubCompletionServer server([&](const nlohmann::json&, httplib::Response& res) {
    res.set_content(R"({"choices": []})", "application/json");
  });
  HttpCompletionBackend backend({server.url(), "m", "", std::chrono::seconds(5)});
  EXPECT_THROW(complete(request(), backend, fast_retry()), BackendError);
}

TEST(HttpBackend, ConnectionRefusedIsTransient) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpCompletionBackend backend(
      {"http://127.0.0.1:" + std::to_string(port), "m", "", std::chrono::seconds(1)});
  try {
    complete(request(), backend, fast_retry(2));
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_TRUE(e.transient());
    EXPECT_EQ(e.attempts(), 2);
  }
}

TEST(HttpBackend, BatchAgainstStubServer) {
  ts::StubCompletionServer server([&](const nlohmann::json& body, httplib::Response& res) {
    ts::StubCompletionServer::reply_text(res, ts::heuristic_model_reply(body["prompt"], 0));
  });
  HttpCompletionBackend backend({server.url(), "m", "", std::chrono::seconds(5)});
  std::vector<ReviewSample> ss;
  for (int i = 0; i < 12; ++i) ss.push_back(ts::make_sample("h" + std::to_string(i), 4, 3.0, 1.0 + i % 5));
  BatchOptions opts;
  opts.concurrency = 4;
  opts.retry = fast_retry();
  const auto out = predict_batch(ss, PromptVariant::parse("JSON-UB"), backend, DecodingParams{}, opts);
  for (std::size_t i = 0; i < ss.size(); ++i) {
    EXPECT_EQ(out[i].rating, round_half_up_stars(ss[i].business_average));
    EXPECT_FALSE(out[i].imputed);
  }
}
