#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "malles/agent_backend.hpp"
#include "malles/chat.hpp"

namespace malles {

inline constexpr const char* kRoleBackground = "background";
inline constexpr const char* kRoleDealer = "dealer";
inline constexpr const char* kRoleService = "service";
inline constexpr const char* kRoleManufacturer = "manufacturer";

/// Roles for rounds 1..n: dealer, service, manufacturer, then the same cycle,
/// with round n always the dealer. Throws for n < 4.
std::vector<std::string> role_schedule(int n);

/// h[0] is the background; h[t] is the turn of round t.
struct DialogueState {
    std::string background;
    std::vector<Turn> history;
    int t = 0;
    int n = 0;
};

DialogueState init_dialogue(std::string background, int n);

/// Role instructions; `dealer_final` is used in round n.
struct RoleTemplates {
    std::string dealer;
    std::string service;
    std::string manufacturer;
    std::string dealer_final;

    static RoleTemplates defaults();
    /// Reads dealer.txt, service.txt, manufacturer.txt and dealer_final.txt.
    static RoleTemplates load(const std::filesystem::path& dir);
    const std::string& instruction(const std::string& role, bool final_round) const;
};

/// One agent per role; a single backend may play every role.
class RoleAgents {
public:
    explicit RoleAgents(std::shared_ptr<ChatBackend> all);
    RoleAgents(std::shared_ptr<ChatBackend> dealer, std::shared_ptr<ChatBackend> service,
               std::shared_ptr<ChatBackend> manufacturer);
    ChatBackend& agent(const std::string& role) const;

private:
    std::map<std::string, std::shared_ptr<ChatBackend>> agents_;
};

struct DialogueContext {
    RoleTemplates templates = RoleTemplates::defaults();
    /// Structured view of the market for mock agents.
    const PromptSidecar* sidecar = nullptr;
    /// Round t uses chat seed derive_seed(seed, t).
    std::uint64_t seed = 0;
};

/// Backend failure during a round; carries the history up to the failure.
class DialogueError : public Error {
public:
    DialogueError(const std::string& what, std::vector<Turn> partial)
        : Error(what), partial_(std::move(partial)) {}
    const std::vector<Turn>& partial_history() const { return partial_; }

private:
    std::vector<Turn> partial_;
};

/// Text shown to the agent for a history; serialize(h_t) is a prefix of
/// serialize(h_{t+1}).
std::string serialize_history(const std::vector<Turn>& history);

/// Returns a new state with one more turn; the input is not modified.
DialogueState advance_round(const DialogueState& state, const RoleAgents& agents, const DialogueContext& context);

std::vector<Turn> run_dialogue(const std::string& background, int n, const RoleAgents& agents,
                               const DialogueContext& context);

struct WholesaleOutcome {
    std::vector<Turn> transcript;
    std::optional<WholesaleDecision> decision;
    std::optional<ParseError::Kind> error;
    std::string error_text;
};

/// Runs the dialogue and parses the final dealer turn. Parse failures are
/// returned with the transcript; backend failures throw DialogueError.
WholesaleOutcome simulate_wholesale(const std::string& background, int n, const RoleAgents& agents,
                                    const DialogueContext& context,
                                    const std::vector<std::string>& candidate_ids = {});

/// One {round, role, text} line per turn, round 0 being the background.
void write_transcript_jsonl(std::ostream& out, const std::vector<Turn>& history);

}  // namespace malles
