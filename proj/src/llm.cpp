#include "fusion/llm.h"

#include "httplib.h"
#include "json.hpp"

#include <cstdlib>
#include <sstream>

namespace fusion {

using nlohmann::json;

EndpointConfig EndpointConfig::from_env() {
  EndpointConfig c;
  auto get = [](const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
  };
  c.url = get("FUSION_LLM_URL");
  c.model = get("FUSION_LLM_MODEL");
  c.api_key = get("FUSION_LLM_API_KEY");
  return c;
}

HttpChatTransport::HttpChatTransport(EndpointConfig config) : config_(std::move(config)) {}

std::string HttpChatTransport::complete(const std::vector<ChatMessage>& messages) {
  if (config_.url.empty()) {
    throw Error(ErrorCode::EndpointError, "no endpoint configured (set FUSION_LLM_URL)");
  }
  const auto scheme_end = config_.url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::EndpointError, "endpoint URL needs a scheme: " + config_.url);
  }
  const auto path_start = config_.url.find('/', scheme_end + 3);
  const std::string origin = config_.url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : config_.url.substr(path_start);

  json body = {{"model", config_.model}, {"temperature", 0}, {"messages", json::array()}};
  for (const auto& m : messages) {
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  }

  httplib::Client client(origin);
  if (!client.is_valid()) {
    throw Error(ErrorCode::EndpointError, "unsupported endpoint " + origin);
  }
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  client.set_write_timeout(config_.timeout_seconds);
  httplib::Headers headers;
  if (!config_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + config_.api_key);
  }
  const auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw Error(ErrorCode::EndpointError, "request to " + config_.url + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::EndpointError,
                "endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 2000));
  }
  try {
    const json r = json::parse(res->body);
    return r.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::EndpointError,
                std::string("unexpected endpoint response (") + e.what() + "): " + res->body.substr(0, 2000));
  }
}

FixtureTransport::FixtureTransport(std::vector<std::string> replies) : replies_(std::move(replies)) {
  if (replies_.empty()) {
    throw Error(ErrorCode::SchemaError, "fixture has no replies");
  }
}

FixtureTransport FixtureTransport::from_file(const std::filesystem::path& path) {
  try {
    const json j = json::parse(read_text_file(path));
    return FixtureTransport(j.at("replies").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaError, "fixture " + path.string() + ": " + e.what());
  }
}

std::string FixtureTransport::complete(const std::vector<ChatMessage>&) {
  const std::size_t i = std::min(calls_, replies_.size() - 1);
  ++calls_;
  return replies_[i];
}

std::filesystem::path fixture_path(const std::filesystem::path& data_dir, const std::string& name) {
  return data_dir / "fixtures" / "plans" / (name + ".json");
}

std::vector<ChatMessage> build_plan_prompt(const PlanRequest& request) {
  std::ostringstream sys;
  sys << "You plan self-contact for a human motion generator. The motion has " << request.frames
      << " frames at 30 fps, numbered 0 to " << request.frames - 1 << ".\n"
      << "Body surface points you may use (use these labels exactly):\n";
  for (std::size_t i = 0; i < request.labels.size(); ++i) {
    sys << (i ? ", " : "") << request.labels[i];
  }
  sys << "\n\nAnswer with one JSON object and nothing else:\n"
      << "{\"contacts\": [{\"a\": <label>, \"b\": <label>, \"frame\": <int>}, ...]}\n"
      << "Each entry asks points a and b to touch at that frame. a and b must differ. "
      << "Spread repeated contacts over time and leave a few frames at the start free.\n\n"
      << "Example. Instruction: \"clap your hands twice\" (60 frames)\n"
      << "{\"contacts\": [{\"a\": \"left_palm\", \"b\": \"right_palm\", \"frame\": 20}, "
      << "{\"a\": \"left_palm\", \"b\": \"right_palm\", \"frame\": 40}]}\n\n"
      << "Example. Instruction: \"scratch your head with the right hand\" (60 frames)\n"
      << "{\"contacts\": [{\"a\": \"right_index_tip\", \"b\": \"head_top\", \"frame\": 30}, "
      << "{\"a\": \"right_index_tip\", \"b\": \"head_top\", \"frame\": 40}]}\n\n"
      << "Example. Instruction: \"put your left hand on your right shoulder\" (60 frames)\n"
      << "{\"contacts\": [{\"a\": \"left_palm\", \"b\": \"right_shoulder_top\", \"frame\": 35}]}\n";
  return {{"system", sys.str()}, {"user", "Instruction: \"" + request.instruction + "\""}};
}

std::string extract_json_object(const std::string& text) {
  for (std::size_t start = text.find('{'); start != std::string::npos; start = text.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      const char c = text[i];
      if (in_string) {
        if (escaped) {
          escaped = false;
        } else if (c == '\\') {
          escaped = true;
        } else if (c == '"') {
          in_string = false;
        }
        continue;
      }
      if (c == '"') {
        in_string = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}' && --depth == 0) {
        const std::string candidate = text.substr(start, i - start + 1);
        if (json::accept(candidate)) {
          return candidate;
        }
        break;
      }
    }
  }
  return {};
}

namespace {

/// Parses a reply into a plan; returns the problems found (empty when valid).
std::vector<std::string> read_reply(const std::string& reply, const VertexCatalog& catalog, int frames,
                                    ContactPlan& plan) {
  const std::string obj = extract_json_object(reply);
  if (obj.empty()) {
    return {"the reply contained no JSON object"};
  }
  plan = ContactPlan{};
  try {
    const json j = json::parse(obj);
    const json& contacts = j.at("contacts");
    if (!contacts.is_array()) {
      return {"\"contacts\" must be an array"};
    }
    for (const auto& c : contacts) {
      plan.triples.push_back({c.at("a").get<std::string>(), c.at("b").get<std::string>(), c.at("frame").get<int>()});
    }
  } catch (const json::exception& e) {
    return {std::string("the JSON does not follow the schema: ") + e.what()};
  }
  plan = dedupe_plan(plan);
  std::vector<std::string> problems;
  for (const auto& v : validate_plan(plan, catalog, frames)) {
    problems.push_back("contact " + std::to_string(v.triple) + ": " + v.message);
  }
  return problems;
}

} // namespace

PlanOutcome llm_plan(const std::string& instruction, const VertexCatalog& catalog, int frames,
                     ChatTransport& transport, int retries) {
  PlanOutcome out;
  std::vector<ChatMessage> messages = build_plan_prompt({instruction, catalog.labels(), frames});
  std::string last_problems;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    std::string reply;
    try {
      reply = transport.complete(messages);
    } catch (const Error& e) {
      throw PlanError(ErrorCode::EndpointError, e.what(), out.replies);
    }
    out.replies.push_back(reply);
    out.attempts = attempt + 1;
    ContactPlan plan;
    const std::vector<std::string> problems = read_reply(reply, catalog, frames, plan);
    if (problems.empty()) {
      out.plan = plan;
      return out;
    }
    std::ostringstream fb;
    fb << "That plan is invalid:\n";
    for (const auto& p : problems) {
      fb << "- " << p << "\n";
    }
    fb << "Reply again with only the corrected JSON object.";
    last_problems = fb.str();
    messages.push_back({"assistant", reply});
    messages.push_back({"user", last_problems});
  }
  throw PlanError(ErrorCode::InvalidPlanAfterRetries,
                  "no valid plan after " + std::to_string(out.attempts) + " attempts; last reply: " +
                      out.replies.back().substr(0, 500) + "\n" + last_problems,
                  out.replies);
}

} // namespace fusion
