#include "malles/dialogue.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace malles {

std::vector<std::string> role_schedule(int n) {
    if (n < 4) throw InvalidArgument("dialogue needs at least 4 rounds, got " + std::to_string(n));
    static const char* kCycle[] = {kRoleDealer, kRoleService, kRoleManufacturer};
    std::vector<std::string> roles;
    roles.reserve(static_cast<std::size_t>(n));
    for (int r = 1; r < n; ++r) roles.emplace_back(kCycle[(r - 1) % 3]);
    roles.emplace_back(kRoleDealer);
    return roles;
}

DialogueState init_dialogue(std::string background, int n) {
    role_schedule(n);
    DialogueState s;
    s.background = std::move(background);
    s.history.push_back({kRoleBackground, s.background});
    s.n = n;
    return s;
}

RoleTemplates RoleTemplates::defaults() {
    RoleTemplates t;
    t.dealer =
        "You are the dealer. Analyse the competitive context, the historical performance of each product and your "
        "purchasing objectives. Respond to the points raised so far.";
    t.service =
        "You are the service provider. Address the dealer's points and describe the promotions and support you can "
        "offer.";
    t.manufacturer =
        "You are the manufacturer. Explain production constraints, supply availability and partnership terms.";
    t.dealer_final =
        "You are the dealer. Synthesize the discussion into a final analysis and end with your order as a single "
        "JSON object on its own line: {\"product_id\": \"<id>\", \"quantity\": <integer>}";
    return t;
}

namespace {

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("missing role template: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::string(trim(ss.str()));
}

}  // namespace

RoleTemplates RoleTemplates::load(const std::filesystem::path& dir) {
    RoleTemplates t;
    t.dealer = read_text(dir / "dealer.txt");
    t.service = read_text(dir / "service.txt");
    t.manufacturer = read_text(dir / "manufacturer.txt");
    t.dealer_final = read_text(dir / "dealer_final.txt");
    return t;
}

const std::string& RoleTemplates::instruction(const std::string& role, bool final_round) const {
    if (role == kRoleDealer) return final_round ? dealer_final : dealer;
    if (role == kRoleService) return service;
    if (role == kRoleManufacturer) return manufacturer;
    throw InvalidArgument("unknown role: " + role);
}

RoleAgents::RoleAgents(std::shared_ptr<ChatBackend> all) : RoleAgents(all, all, all) {}

RoleAgents::RoleAgents(std::shared_ptr<ChatBackend> dealer, std::shared_ptr<ChatBackend> service,
                       std::shared_ptr<ChatBackend> manufacturer) {
    if (!dealer || !service || !manufacturer) throw InvalidArgument("null role agent");
    agents_[kRoleDealer] = std::move(dealer);
    agents_[kRoleService] = std::move(service);
    agents_[kRoleManufacturer] = std::move(manufacturer);
}

ChatBackend& RoleAgents::agent(const std::string& role) const {
    const auto it = agents_.find(role);
    if (it == agents_.end()) throw InvalidArgument("no agent for role: " + role);
    return *it->second;
}

std::string serialize_history(const std::vector<Turn>& history) {
    std::string out;
    for (const auto& turn : history) {
        out += '[';
        out += turn.role;
        out += "]\n";
        out += turn.text;
        out += "\n\n";
    }
    return out;
}

DialogueState advance_round(const DialogueState& state, const RoleAgents& agents, const DialogueContext& context) {
    if (state.t >= state.n) throw InvalidArgument("dialogue already finished");
    const int round = state.t + 1;
    const auto role = role_schedule(state.n)[static_cast<std::size_t>(round - 1)];
    const bool final_round = round == state.n;

    ChatRequest req;
    req.task = ChatTask::dialogue_turn;
    req.dialogue_role = role;
    req.final_round = final_round;
    req.sidecar = context.sidecar;
    req.seed = derive_seed(context.seed, static_cast<std::uint64_t>(round));
    req.messages = {{"system", context.templates.instruction(role, final_round)},
                    {"user", serialize_history(state.history) + "Round " + std::to_string(round) + " of " +
                                 std::to_string(state.n) + ". You speak as the " + role + "."}};

    std::string text;
    try {
        text = agents.agent(role).chat(req);
    } catch (const BackendError& e) {
        throw DialogueError("round " + std::to_string(round) + " (" + role + "): " + e.what(), state.history);
    }
    DialogueState next = state;
    next.history.push_back({role, std::move(text)});
    next.t = round;
    return next;
}

std::vector<Turn> run_dialogue(const std::string& background, int n, const RoleAgents& agents,
                               const DialogueContext& context) {
    auto state = init_dialogue(background, n);
    while (state.t < state.n) state = advance_round(state, agents, context);
    return state.history;
}

WholesaleOutcome simulate_wholesale(const std::string& background, int n, const RoleAgents& agents,
                                    const DialogueContext& context, const std::vector<std::string>& candidate_ids) {
    WholesaleOutcome out;
    out.transcript = run_dialogue(background, n, agents, context);
    try {
        out.decision = parse_wholesale(out.transcript, candidate_ids);
    } catch (const ParseError& e) {
        out.error = e.kind();
        out.error_text = e.raw_text();
    }
    return out;
}

void write_transcript_jsonl(std::ostream& out, const std::vector<Turn>& history) {
    for (std::size_t i = 0; i < history.size(); ++i)
        out << nlohmann::json{{"round", i}, {"role", history[i].role}, {"text", history[i].text}}.dump() << '\n';
}

}  // namespace malles
