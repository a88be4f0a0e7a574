#include "doctest.h"

#include "fusion/llm.h"
#include "fusion/tasks.h"
#include "httplib.h"
#include "json.hpp"

#include <thread>

using namespace fusion;

namespace {

struct Fixture {
  SkeletonSpec skel = make_desk_skeleton();
  VertexCatalog cat = make_desk_catalog(skel);
};

const char* kGood = R"(Sure! {"contacts": [{"a": "left_palm", "b": "right_palm", "frame": 20},
                                           {"a": "left_palm", "b": "right_palm", "frame": 40}]})";

} // namespace

TEST_CASE("json extraction skips prose and braces inside strings") {
  CHECK(extract_json_object("none here").empty());
  CHECK(extract_json_object(R"(x {"a": "}"} y)") == R"({"a": "}"})");
  CHECK(extract_json_object(R"({broken {"b": 1})") == R"({"b": 1})");
  CHECK(extract_json_object("```json\n{\"c\": [1, {\"d\": 2}]}\n```") == R"({"c": [1, {"d": 2}]})");
}

TEST_CASE_FIXTURE(Fixture, "prompt lists labels and the schema") {
  const auto msgs = build_plan_prompt({"clap", cat.labels(), 60});
  REQUIRE(msgs.size() == 2);
  CHECK(msgs[0].role == "system");
  for (const auto& l : cat.labels()) {
    CHECK(msgs[0].content.find(l) != std::string::npos);
  }
  CHECK(msgs[0].content.find("\"contacts\"") != std::string::npos);
  CHECK(msgs[1].content.find("clap") != std::string::npos);
}

TEST_CASE_FIXTURE(Fixture, "a valid first reply is accepted") {
  FixtureTransport t({kGood});
  const PlanOutcome out = llm_plan("clap twice", cat, 60, t);
  CHECK(out.attempts == 1);
  CHECK(t.calls() == 1);
  REQUIRE(out.plan.triples.size() == 2);
  CHECK(out.plan.triples[0] == ContactTriple{"left_palm", "right_palm", 20});
}

TEST_CASE_FIXTURE(Fixture, "violations are fed back until the reply is valid") {
  struct Recording : ChatTransport {
    std::vector<std::vector<ChatMessage>> seen;
    std::vector<std::string> replies;
    std::string complete(const std::vector<ChatMessage>& m) override {
      seen.push_back(m);
      return replies[seen.size() - 1];
    }
  } t;
  t.replies = {"I cannot help with JSON.", R"({"contacts": [{"a": "left_plam", "b": "right_palm", "frame": 20}]})",
               kGood};
  const PlanOutcome out = llm_plan("clap", cat, 60, t);
  CHECK(out.attempts == 3);
  CHECK(out.replies.size() == 3);
  REQUIRE(t.seen.size() == 3);
  CHECK(t.seen[1].size() == 4);
  CHECK(t.seen[2].back().content.find("left_palm") != std::string::npos);
}

TEST_CASE_FIXTURE(Fixture, "malformed replies exhaust the retries") {
  for (const char* reply :
       {"no json at all", R"({"contacts": "left_palm"})", R"({"contacts": [{"a": "left_palm", "b": "right_palm"}]})",
        R"({"contacts": [{"a": "left_palm", "b": "right_palm", "frame": 60}]})",
        R"({"contacts": [{"a": "left_palm", "b": "left_palm", "frame": 3}]})"}) {
    FixtureTransport t({reply});
    try {
      llm_plan("clap", cat, 60, t, 3);
      FAIL("expected PlanError");
    } catch (const PlanError& e) {
      CHECK(e.code() == ErrorCode::InvalidPlanAfterRetries);
      CHECK(e.replies().size() == 4);
      CHECK(t.calls() == 4);
      CHECK(std::string(e.what()).find("4 attempts") != std::string::npos);
    }
  }
  FixtureTransport once({"nope"});
  CHECK_THROWS_AS(llm_plan("clap", cat, 60, once, 0), PlanError);
  CHECK(once.calls() == 1);
}

TEST_CASE_FIXTURE(Fixture, "transport failures surface as endpoint errors") {
  HttpChatTransport none(EndpointConfig{});
  try {
    llm_plan("clap", cat, 60, none);
    FAIL("expected PlanError");
  } catch (const PlanError& e) {
    CHECK(e.code() == ErrorCode::EndpointError);
  }
}

TEST_CASE_FIXTURE(Fixture, "offline fixture file") {
  const auto path = fixture_path(FUSION_DATA_DIR, "clap");
  FixtureTransport t = FixtureTransport::from_file(path);
  const PlanOutcome out = llm_plan("clap your hands", cat, 60, t);
  CHECK_FALSE(out.plan.empty());
  CHECK(validate_plan(out.plan, cat, 60).empty());
  CHECK_THROWS_AS(FixtureTransport::from_file("/nonexistent.json"), Error);
  CHECK_THROWS_AS(FixtureTransport(std::vector<std::string>{}), Error);
}

TEST_CASE_FIXTURE(Fixture, "HTTP transport speaks the chat completions format") {
  httplib::Server server;
  nlohmann::json received;
  std::string auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    received = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    const nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", kGood}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("oops", "text/plain");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  EndpointConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "test-model";
  cfg.api_key = "secret";
  cfg.timeout_seconds = 5;
  HttpChatTransport t(cfg);
  const PlanOutcome out = llm_plan("clap", cat, 60, t);
  CHECK(out.plan.triples.size() == 2);
  CHECK(received["model"] == "test-model");
  CHECK(received["temperature"] == 0);
  CHECK(received["messages"].size() == 2);
  CHECK(auth == "Bearer secret");

  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  HttpChatTransport broken(cfg);
  try {
    broken.complete({{"user", "hi"}});
    FAIL("expected EndpointError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EndpointError);
    CHECK(std::string(e.what()).find("500") != std::string::npos);
  }
  server.stop();
  th.join();
}
