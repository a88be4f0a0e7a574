#pragma once

#include "fusion/tasks.h"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace fusion {

struct ChatMessage {
  std::string role; // "system", "user", "assistant"
  std::string content;
};

/// Sends one chat-completion request and returns the assistant's text.
/// Implementations throw EndpointError on transport or protocol failure.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

struct EndpointConfig {
  std::string url;   // full URL of the chat-completions endpoint
  std::string model;
  std::string api_key;
  int timeout_seconds = 60;

  /// FUSION_LLM_URL, FUSION_LLM_MODEL, FUSION_LLM_API_KEY.
  static EndpointConfig from_env();
};

/// OpenAI-style JSON chat API over HTTP(S).
class HttpChatTransport : public ChatTransport {
 public:
  explicit HttpChatTransport(EndpointConfig config);
  std::string complete(const std::vector<ChatMessage>& messages) override;

 private:
  EndpointConfig config_;
};

/// Plays back recorded replies in order (the last one repeats). A fixture file
/// is {"instruction": "...", "replies": ["...", ...]}.
class FixtureTransport : public ChatTransport {
 public:
  explicit FixtureTransport(std::vector<std::string> replies);
  static FixtureTransport from_file(const std::filesystem::path& path);
  std::string complete(const std::vector<ChatMessage>& messages) override;

  std::size_t calls() const {
    return calls_;
  }

 private:
  std::vector<std::string> replies_;
  std::size_t calls_ = 0;
};

/// data/fixtures/plans/<name>.json under the given data directory.
std::filesystem::path fixture_path(const std::filesystem::path& data_dir, const std::string& name);

struct PlanRequest {
  std::string instruction;
  std::vector<std::string> labels;
  int frames = 60;
};

/// System prompt (label list, output schema, worked examples) and the user turn.
std::vector<ChatMessage> build_plan_prompt(const PlanRequest& request);

/// The first balanced {...} in `text` that parses as JSON, or "" if none.
std::string extract_json_object(const std::string& text);

/// Raised when no reply yields a valid plan; keeps the raw replies.
class PlanError : public Error {
 public:
  PlanError(ErrorCode code, const std::string& message, std::vector<std::string> replies)
      : Error(code, message), replies_(std::move(replies)) {}
  const std::vector<std::string>& replies() const {
    return replies_;
  }

 private:
  std::vector<std::string> replies_;
};

struct PlanOutcome {
  ContactPlan plan;
  int attempts = 0;
  std::vector<std::string> replies;
};

/// Asks for a plan and validates it, feeding violations back for up to
/// `retries` more attempts. Throws PlanError with InvalidPlanAfterRetries or
/// EndpointError.
PlanOutcome llm_plan(const std::string& instruction, const VertexCatalog& catalog, int frames,
                     ChatTransport& transport, int retries = 3);

} // namespace fusion
