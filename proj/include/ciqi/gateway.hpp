#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "ciqi/base64.hpp"
#include "ciqi/error.hpp"
#include "ciqi/image.hpp"
#include "ciqi/retrieval.hpp"

namespace ciqi {

enum class Role { System, User, Assistant };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

inline std::optional<Role> role_from_string(std::string_view s) {
  for (auto r : {Role::System, Role::User, Role::Assistant})
    if (to_string(r) == s) return r;
  return std::nullopt;
}

// One chat turn. Images are PNG bytes and may only ride on user turns.
struct ChatMessage {
  Role role = Role::User;
  std::string text;
  std::vector<Bytes> images;

  static ChatMessage system(std::string text) { return {Role::System, std::move(text), {}}; }
  static ChatMessage assistant(std::string text) { return {Role::Assistant, std::move(text), {}}; }
  static ChatMessage user(std::string text, std::vector<Bytes> images = {}) {
    return {Role::User, std::move(text), std::move(images)};
  }

  bool operator==(const ChatMessage&) const = default;
};

struct ChatParams {
  std::string model;
  double temperature = 0.0;
  int max_tokens = 2048;
};

// Anything that can play the policy or the judge.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string chat(const std::vector<ChatMessage>& messages, const ChatParams& params) = 0;
};

struct Endpoint {
  std::string url;
  std::string api_key;

  // Reads `<prefix>_URL` and `<prefix>_KEY`, e.g. CIQI_POLICY_URL.
  static std::optional<Endpoint> from_env(std::string_view prefix) {
    const std::string base(prefix);
    const char* url = std::getenv((base + "_URL").c_str());
    if (url == nullptr || *url == '\0') return std::nullopt;
    const char* key = std::getenv((base + "_KEY").c_str());
    return Endpoint{url, key ? key : ""};
  }
};

struct RetryPolicy {
  int max_attempts = 5;  // total attempts, first one included
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{8000};

  std::chrono::milliseconds backoff(int retry) const {
    const double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, retry);
    return std::min(max_backoff, std::chrono::milliseconds(static_cast<long long>(ms)));
  }
};

struct HttpOptions {
  std::chrono::milliseconds timeout{std::chrono::seconds(120)};
  RetryPolicy retry;
  std::ptrdiff_t max_in_flight = 8;
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

namespace detail {

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // no trailing slash
};

inline ParsedUrl parse_url(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) throw Error(ErrorCode::InvalidArgument, "URL needs a scheme: " + std::string(url));
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl p;
  p.origin = std::string(url.substr(0, path_start));
  p.path = path_start == std::string_view::npos ? "" : std::string(url.substr(path_start));
  while (!p.path.empty() && p.path.back() == '/') p.path.pop_back();
  return p;
}

inline std::string join_path(const std::string& base, std::string_view suffix) {
  if (base.size() >= suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) return base;
  return base + std::string(suffix);
}

// Counting semaphore wrapper that releases on scope exit.
class InFlight {
 public:
  explicit InFlight(std::counting_semaphore<>& sem) : sem_(sem) { sem_.acquire(); }
  ~InFlight() { sem_.release(); }
  InFlight(const InFlight&) = delete;
  InFlight& operator=(const InFlight&) = delete;

 private:
  std::counting_semaphore<>& sem_;
};

}  // namespace detail

// Serializes a conversation in the chat-completions request shape.
inline nlohmann::json chat_request_json(const std::vector<ChatMessage>& messages, const ChatParams& params) {
  if (messages.empty()) throw Error(ErrorCode::InvalidArgument, "chat needs at least one message");
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : messages) {
    if (!m.images.empty() && m.role != Role::User)
      throw Error(ErrorCode::InvalidArgument, "images are only allowed on user messages");
    nlohmann::json j = {{"role", to_string(m.role)}};
    if (m.role == Role::User) {
      nlohmann::json parts = nlohmann::json::array();
      for (const auto& img : m.images)
        parts.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:image/png;base64," + base64::encode(img)}}}});
      parts.push_back({{"type", "text"}, {"text", m.text}});
      j["content"] = std::move(parts);
    } else {
      j["content"] = m.text;
    }
    msgs.push_back(std::move(j));
  }
  return {{"model", params.model},
          {"temperature", params.temperature},
          {"max_tokens", params.max_tokens},
          {"messages", std::move(msgs)}};
}

inline std::string chat_response_text(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::BackendError, std::string("unparseable response: ") + e.what());
  }
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw Error(ErrorCode::BackendError, "response has no choices");
  const auto& content = j["choices"][0]["message"]["content"];
  if (content.is_string()) return content.get<std::string>();
  if (content.is_array()) {
    std::string out;
    for (const auto& part : content)
      if (part.value("type", "") == "text") out += part.value("text", "");
    return out;
  }
  throw Error(ErrorCode::BackendError, "response message has no text content");
}

struct ChatReply {
  std::string text;
  int retries = 0;
};

// Chat-completions client. 429 responses are retried with exponential
// backoff up to the attempt cap; transport failures and other non-2xx
// statuses surface immediately.
class HttpChatBackend : public ChatBackend {
 public:
  explicit HttpChatBackend(Endpoint endpoint, HttpOptions options = {})
      : endpoint_(std::move(endpoint)),
        url_(detail::parse_url(endpoint_.url)),
        options_(std::move(options)),
        in_flight_(std::max<std::ptrdiff_t>(1, options_.max_in_flight)) {}

  std::string chat(const std::vector<ChatMessage>& messages, const ChatParams& params) override {
    return chat_with_meta(messages, params).text;
  }

  ChatReply chat_with_meta(const std::vector<ChatMessage>& messages, const ChatParams& params) {
    const std::string body = chat_request_json(messages, params).dump();
    const std::string path = detail::join_path(url_.path, "/chat/completions");
    detail::InFlight guard(in_flight_);
    for (int attempt = 0;; ++attempt) {
      httplib::Client client(url_.origin);
      set_timeouts(client);
      httplib::Headers headers;
      if (!endpoint_.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.api_key);
      auto res = client.Post(path, headers, body, "application/json");
      if (!res) throw Error(ErrorCode::Transport, httplib::to_string(res.error()) + " (" + endpoint_.url + ")");
      if (res->status == 429) {
        if (attempt + 1 >= options_.retry.max_attempts)
          throw Error(ErrorCode::RateLimited, "still rate limited after " + std::to_string(attempt + 1) + " attempts");
        options_.sleep(options_.retry.backoff(attempt));
        continue;
      }
      if (res->status < 200 || res->status >= 300)
        throw Error(ErrorCode::BackendError, "HTTP " + std::to_string(res->status) + ": " + res->body);
      return {chat_response_text(res->body), attempt};
    }
  }

 private:
  void set_timeouts(httplib::Client& client) const {
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
  }

  Endpoint endpoint_;
  detail::ParsedUrl url_;
  HttpOptions options_;
  std::counting_semaphore<> in_flight_;
};

enum class Modality { Image, Text };

inline std::string_view to_string(Modality m) { return m == Modality::Image ? "image" : "text"; }

// Embedding provider for the two retrieval spaces. Image payloads are raw
// encoded image bytes; text payloads are UTF-8.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::vector<std::vector<float>> embed_batch(Modality modality, Space space,
                                                      const std::vector<std::string>& payloads) = 0;

  std::vector<float> embed(Modality modality, std::string_view payload, Space space) {
    auto out = embed_batch(modality, space, {std::string(payload)});
    if (out.size() != 1) throw Error(ErrorCode::BackendError, "encoder returned " + std::to_string(out.size()) + " vectors for 1 item");
    return std::move(out.front());
  }

 protected:
  static void validate_request(Modality modality, Space space, const std::vector<std::string>& payloads) {
    if (modality == Modality::Image && space == Space::Text)
      throw Error(ErrorCode::BadModality, "image payloads can only be embedded in the clip space");
    if (payloads.empty()) throw Error(ErrorCode::BadModality, "empty batch");
    for (const auto& p : payloads)
      if (p.empty()) throw Error(ErrorCode::BadModality, "empty payload");
  }
};

inline std::string as_payload(const Bytes& bytes) { return std::string(bytes.begin(), bytes.end()); }

// Client for the embedding sidecar:
//   POST /v1/embed {"modality","space","items"} -> {"dim","vectors","space"}
//   GET  /healthz -> {"status","clip_dim","text_dim"}
class HttpEncoder : public Encoder {
 public:
  explicit HttpEncoder(std::string url, HttpOptions options = {})
      : url_string_(std::move(url)), url_(detail::parse_url(url_string_)), options_(std::move(options)) {}

  static std::optional<HttpEncoder> from_env() {
    const char* url = std::getenv("CIQI_ENCODER_URL");
    if (url == nullptr || *url == '\0') return std::nullopt;
    return HttpEncoder(url);
  }

  // Advertised dim per space, fetched once from /healthz.
  std::size_t advertised_dim(Space space) {
    std::call_once(health_->once, [&] { fetch_health(); });
    return space == Space::Clip ? health_->clip_dim : health_->text_dim;
  }

  std::vector<std::vector<float>> embed_batch(Modality modality, Space space,
                                              const std::vector<std::string>& payloads) override {
    validate_request(modality, space, payloads);
    const std::size_t dim = advertised_dim(space);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& p : payloads) items.push_back(modality == Modality::Image ? base64::encode(p) : p);
    const nlohmann::json req = {{"modality", to_string(modality)}, {"space", to_string(space)}, {"items", items}};

    auto client = make_client();
    auto res = client.Post(url_.path + "/v1/embed", req.dump(), "application/json");
    if (!res) throw Error(ErrorCode::Transport, httplib::to_string(res.error()) + " (" + url_string_ + ")");
    if (res->status == 400) throw Error(ErrorCode::BadModality, "encoder rejected request: " + res->body);
    if (res->status == 503) throw Error(ErrorCode::EncoderUnavailable, "encoder not ready");
    if (res->status != 200) throw Error(ErrorCode::BackendError, "HTTP " + std::to_string(res->status) + ": " + res->body);

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::BackendError, std::string("unparseable encoder response: ") + e.what());
    }
    if (!j.contains("vectors") || !j["vectors"].is_array() || j["vectors"].size() != payloads.size())
      throw Error(ErrorCode::BackendError, "encoder returned the wrong number of vectors");
    std::vector<std::vector<float>> out;
    out.reserve(payloads.size());
    // DimMismatch carries the batch position as its subject.
    for (std::size_t pos = 0; pos < j["vectors"].size(); ++pos) {
      const auto& v = j["vectors"][pos];
      if (!v.is_array()) throw Error(ErrorCode::BackendError, "vector is not an array");
      if (v.size() != dim)
        throw Error(ErrorCode::DimMismatch,
                    "encoder advertised dim " + std::to_string(dim) + " but returned " + std::to_string(v.size()),
                    std::to_string(pos));
      std::vector<float> vec;
      vec.reserve(dim);
      for (const auto& x : v) {
        if (!x.is_number() || !std::isfinite(x.get<double>()))
          throw Error(ErrorCode::BackendError, "non-finite vector component");
        vec.push_back(x.get<float>());
      }
      out.push_back(std::move(vec));
    }
    return out;
  }

 private:
  httplib::Client make_client() const {
    httplib::Client client(url_.origin);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
    client.set_connection_timeout(secs.count(), 0);
    client.set_read_timeout(secs.count(), 0);
    return client;
  }

  void fetch_health() {
    auto client = make_client();
    auto res = client.Get(url_.path + "/healthz");
    if (!res) throw Error(ErrorCode::EncoderUnavailable, httplib::to_string(res.error()) + " (" + url_string_ + ")");
    if (res->status != 200) throw Error(ErrorCode::EncoderUnavailable, "healthz returned HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      health_->clip_dim = j.at("clip_dim").get<std::size_t>();
      health_->text_dim = j.at("text_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::EncoderUnavailable, std::string("bad healthz body: ") + e.what());
    }
  }

  std::string url_string_;
  detail::ParsedUrl url_;
  HttpOptions options_;
  struct Health {
    std::once_flag once;
    std::size_t clip_dim = 0;
    std::size_t text_dim = 0;
  };
  // Shared so copies of the client see one health probe.
  std::shared_ptr<Health> health_ = std::make_shared<Health>();
};

}  // namespace ciqi
