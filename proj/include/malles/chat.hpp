#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "malles/common.hpp"

namespace malles {

struct PromptSidecar;

struct Message {
    std::string role;  // "system", "user" or "assistant"
    std::string content;

    friend bool operator==(const Message&, const Message&) = default;
};

/// One entry of a dialogue history: the speaking role and its text.
struct Turn {
    std::string role;
    std::string text;

    friend bool operator==(const Turn&, const Turn&) = default;
};

/// What a request asks for. Real backends only see the messages; mock agents
/// use the task and the structured sidecar instead of reading prose.
enum class ChatTask { generic, retail_decision, strategy_scoring, emphasis_report, dialogue_turn, profile_summary };

struct ChatRequest {
    std::vector<Message> messages;
    ChatTask task = ChatTask::generic;
    const PromptSidecar* sidecar = nullptr;
    /// Strategy the decision must follow (retail_decision) or the strategy
    /// list being scored (strategy_scoring), by name.
    std::vector<std::string> strategies;
    std::string dialogue_role;
    bool final_round = false;
    std::uint64_t seed = 0;
};

class BackendError : public Error {
public:
    enum class Kind { transport, status, malformed, unavailable };
    BackendError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// A chat model endpoint or a mock standing in for one. Implementations must
/// be safe to call concurrently and must not retain the request.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string name() const = 0;
    virtual std::string chat(const ChatRequest& request) = 0;
};

/// Non-empty list of backends with deterministic per-inference selection.
class BackendPool {
public:
    BackendPool() = default;
    BackendPool(std::vector<std::shared_ptr<ChatBackend>> backends, std::uint64_t selection_seed);
    explicit BackendPool(std::shared_ptr<ChatBackend> backend) : BackendPool({std::move(backend)}, 0) {}

    /// Uniform choice derived from (selection_seed, inference_index).
    ChatBackend& select(std::uint64_t inference_index) const;
    std::size_t size() const { return backends_.size(); }
    std::uint64_t selection_seed() const { return seed_; }

private:
    std::vector<std::shared_ptr<ChatBackend>> backends_;
    std::uint64_t seed_ = 0;
};

/// Index in [0, pool_size) for one inference; counter-based so draws are
/// independent across indices.
std::size_t select_backend_index(std::size_t pool_size, std::uint64_t selection_seed, std::uint64_t inference_index);

}  // namespace malles
