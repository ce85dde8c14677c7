#include <gtest/gtest.h>

#include <chrono>
#include <sstream>

#include <nlohmann/json.hpp>

#include "malles/dialogue.hpp"
#include "test_support.hpp"

using namespace malles;

namespace {

/// Names the role and round so every turn is distinguishable.
std::shared_ptr<ScriptedBackend> narrator() {
    return std::make_shared<ScriptedBackend>([](const ChatRequest& r) {
        return r.dialogue_role + " speaks at seed " + std::to_string(r.seed) + (r.final_round ? " (final)" : "");
    });
}

std::shared_ptr<ScriptedBackend> trio_converging_on(const std::string& id, int qty) {
    return std::make_shared<ScriptedBackend>([=](const ChatRequest& r) -> std::string {
        if (r.dialogue_role == kRoleService) return "Service can deliver " + id + " within a week.";
        if (r.dialogue_role == kRoleManufacturer) return "Manufacturer suggests " + std::to_string(qty) + " units of " + id + ".";
        if (!r.final_round) return "Dealer leans toward " + id + ".";
        return "Agreed.\n" + nlohmann::json{{"product_id", id}, {"quantity", qty}}.dump();
    });
}

}  // namespace

TEST(Dialogue, InitContract) {
    const auto s = init_dialogue("Quarterly stocking for store 9.", 5);
    EXPECT_EQ(s.t, 0);
    ASSERT_EQ(s.history.size(), 1u);
    EXPECT_EQ(s.history[0].role, kRoleBackground);
    EXPECT_EQ(s.history[0].text, "Quarterly stocking for store 9.");
    EXPECT_THROW(init_dialogue("b", 3), InvalidArgument);
}

TEST(Dialogue, ScheduleEnumeration) {
    EXPECT_EQ(role_schedule(4), (std::vector<std::string>{"dealer", "service", "manufacturer", "dealer"}));
    EXPECT_EQ(role_schedule(7), (std::vector<std::string>{"dealer", "service", "manufacturer", "dealer", "service",
                                                          "manufacturer", "dealer"}));
    EXPECT_THROW(role_schedule(3), InvalidArgument);
}

TEST(Dialogue, AdvanceAppendsScheduledRoleWithoutMutating) {
    RoleAgents agents(narrator());
    const auto s0 = init_dialogue("b", 5);
    const auto s1 = advance_round(s0, agents, {});
    const auto s2 = advance_round(s1, agents, {});
    EXPECT_EQ(s0.history.size(), 1u);
    EXPECT_EQ(s1.history.size(), 2u);
    EXPECT_EQ(s2.history.size(), 3u);
    EXPECT_EQ(s1.history.back().role, kRoleDealer);
    EXPECT_EQ(s2.history.back().role, kRoleService);
    EXPECT_EQ(s1.t, 1);
}

TEST(Dialogue, AgentsSeeFullHistory) {
    std::vector<std::string> seen;
    auto spy = std::make_shared<ScriptedBackend>([&](const ChatRequest& r) {
        seen.push_back(r.messages.back().content);
        return "turn " + std::to_string(seen.size());
    });
    run_dialogue("background text", 4, RoleAgents(spy), {});
    ASSERT_EQ(seen.size(), 4u);
    for (std::size_t t = 1; t < seen.size(); ++t) {
        EXPECT_NE(seen[t].find("background text"), std::string::npos);
        EXPECT_NE(seen[t].find("turn " + std::to_string(t)), std::string::npos);
    }
}

TEST(Dialogue, ProtocolPropertiesForAllLengths) {
    const auto start = std::chrono::steady_clock::now();
    RoleAgents agents(narrator());
    for (int n = 4; n <= 20; ++n) {
        const auto h = run_dialogue("b", n, agents, {});
        ASSERT_EQ(h.size(), static_cast<std::size_t>(n + 1));
        const auto schedule = role_schedule(n);
        for (int t = 1; t <= n; ++t) EXPECT_EQ(h[t].role, schedule[t - 1]);
        EXPECT_EQ(h.back().role, kRoleDealer);
        for (int t = 1; t < n; ++t) {
            const std::vector<Turn> prefix(h.begin(), h.begin() + t);
            const std::vector<Turn> longer(h.begin(), h.begin() + t + 1);
            EXPECT_EQ(serialize_history(longer).rfind(serialize_history(prefix), 0), 0u);
        }
    }
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 5.0);
}

TEST(Dialogue, SeparateRoleAgents) {
    auto make = [](const std::string& who) {
        return std::make_shared<ScriptedBackend>([who](const ChatRequest&) { return who; });
    };
    const auto h = run_dialogue("b", 4, RoleAgents(make("D"), make("S"), make("M")), {});
    EXPECT_EQ(h[1].text, "D");
    EXPECT_EQ(h[2].text, "S");
    EXPECT_EQ(h[3].text, "M");
    EXPECT_EQ(h[4].text, "D");
}

TEST(Dialogue, FinalRoundUsesFinalInstruction) {
    std::vector<std::string> systems;
    auto spy = std::make_shared<ScriptedBackend>([&](const ChatRequest& r) {
        systems.push_back(r.messages.front().content);
        return std::string("x");
    });
    DialogueContext ctx;
    run_dialogue("b", 4, RoleAgents(spy), ctx);
    EXPECT_EQ(systems[0], ctx.templates.dealer);
    EXPECT_EQ(systems[3], ctx.templates.dealer_final);
}

TEST(Dialogue, BackendFailureKeepsPartialHistory) {
    int calls = 0;
    auto flaky = std::make_shared<ScriptedBackend>([&](const ChatRequest&) -> std::string {
        if (++calls == 3) throw BackendError(BackendError::Kind::status, "HTTP 500");
        return "ok";
    });
    try {
        run_dialogue("b", 6, RoleAgents(flaky), {});
        FAIL();
    } catch (const DialogueError& e) {
        EXPECT_EQ(e.partial_history().size(), 3u);
        EXPECT_NE(std::string(e.what()).find("round 3"), std::string::npos);
    }
}

TEST(Wholesale, ScriptedTrioConverges) {
    const auto out = simulate_wholesale("b", 6, RoleAgents(trio_converging_on("P2", 120)), {});
    ASSERT_TRUE(out.decision);
    EXPECT_EQ(*out.decision, (WholesaleDecision{"P2", 120}));
    EXPECT_EQ(out.transcript.size(), 7u);
}

TEST(Wholesale, MissingBlockReturnsTranscript) {
    const auto out = simulate_wholesale("b", 4, RoleAgents(narrator()), {});
    EXPECT_FALSE(out.decision);
    ASSERT_TRUE(out.error);
    EXPECT_EQ(*out.error, ParseError::Kind::no_decision_found);
    EXPECT_EQ(out.transcript.size(), 5u);
}

TEST(Wholesale, UnknownCandidateIsFlagged) {
    const auto out = simulate_wholesale("b", 4, RoleAgents(trio_converging_on("P9", 3)), {}, {"P1", "P2"});
    ASSERT_TRUE(out.error);
    EXPECT_EQ(*out.error, ParseError::Kind::unknown_candidate);
}

TEST(Wholesale, MockAgentReplayIsIdentical) {
    const auto w = malles::testing::small_world(2, 10);
    DatasetOptions d;
    const auto cases = build_retail_cases(w.transactions, w.catalog, w.customers, d).cases;
    ASSERT_FALSE(cases.empty());
    auto agent = std::make_shared<MockLinearAgent>(MockAgentParams{PlantedRule{}, 0.3, 4}, w.planted);
    DialogueContext ctx;
    ctx.sidecar = &cases[0].prompt.sidecar;
    ctx.seed = 99;
    const auto a = simulate_wholesale("b", 6, RoleAgents(agent), ctx, cases[0].prompt.candidate_ids());
    const auto b = simulate_wholesale("b", 6, RoleAgents(agent), ctx, cases[0].prompt.candidate_ids());
    EXPECT_EQ(a.transcript, b.transcript);
    ASSERT_TRUE(a.decision);
    EXPECT_EQ(a.decision->product_id, agent->decide(cases[0].prompt.sidecar, derive_seed(99, 6)).product_id);
}

TEST(Wholesale, TranscriptLines) {
    std::ostringstream out;
    write_transcript_jsonl(out, {{"background", "b"}, {"dealer", "d"}});
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(nlohmann::json::parse(line).at("round"), 0);
    std::getline(in, line);
    EXPECT_EQ(nlohmann::json::parse(line).at("role"), "dealer");
}

TEST(Roles, TemplatesFromDirectory) {
    malles::testing::TempDir dir("roles");
    for (const char* f : {"dealer", "service", "manufacturer", "dealer_final"})
        malles::testing::write_file(dir / (std::string(f) + ".txt"), std::string("You are the ") + f + ".\n");
    const auto t = RoleTemplates::load(dir.path());
    EXPECT_EQ(t.instruction("service", false), "You are the service.");
    EXPECT_EQ(t.instruction("dealer", true), "You are the dealer_final.");
    std::filesystem::remove(dir / "service.txt");
    EXPECT_THROW(RoleTemplates::load(dir.path()), Error);
    const auto shipped = RoleTemplates::load(std::filesystem::path(MALLES_SOURCE_DIR) / "config" / "roles");
    const auto defaults = RoleTemplates::defaults();
    EXPECT_EQ(shipped.dealer, defaults.dealer);
    EXPECT_EQ(shipped.dealer_final, defaults.dealer_final);
}
