#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "httplib.h"
#include "malles/agent_backend.hpp"

using namespace malles;
using nlohmann::json;

namespace {

/// Local chat endpoint recording every request body.
class StubServer {
public:
    explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
            {
                std::lock_guard lock(mu_);
                bodies_.push_back(req.body);
                auth_.push_back(req.get_header_value("Authorization"));
            }
            handler(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubServer() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
    std::vector<std::string> bodies() {
        std::lock_guard lock(mu_);
        return bodies_;
    }
    std::vector<std::string> auth() {
        std::lock_guard lock(mu_);
        return auth_;
    }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
    std::mutex mu_;
    std::vector<std::string> bodies_;
    std::vector<std::string> auth_;
};

std::string completion(const std::string& text) {
    return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", text}}}}})}}.dump();
}

BackendDescriptor descriptor(const std::string& endpoint) {
    BackendDescriptor d;
    d.name = "stub";
    d.endpoint = endpoint;
    d.model = "test-model-7";
    d.temperature = 0.3;
    d.timeout_seconds = 5;
    d.max_retries = 2;
    d.backoff_base_seconds = 0.0;
    return d;
}

ChatRequest request(std::vector<Message> messages) {
    ChatRequest r;
    r.messages = std::move(messages);
    return r;
}

PromptSidecar sidecar_of(std::vector<std::pair<std::string, double>> prices, const std::string& customer = "C1") {
    PromptSidecar s;
    s.customer_id = customer;
    for (const auto& [id, price] : prices) {
        SidecarRow r;
        r.product_id = id;
        r.category = "A";
        r.features.unit_price = Money::from_double(price);
        s.rows.push_back(r);
    }
    return s;
}

PlantedRule rule(double alpha, double beta, double gamma = 0.0) {
    PlantedRule r;
    r.alpha = alpha;
    r.beta = beta;
    r.gamma = gamma;
    r.utility_weights[0] = -1.0;
    return r;
}

}  // namespace

TEST(Chat, EchoBackend) {
    EchoBackend echo("canned");
    EXPECT_EQ(echo.chat(request({{"user", "hello"}})), "canned");
}

TEST(Chat, WireCapture) {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
        res.set_content(completion("hi there"), "application/json");
    });
    auto d = descriptor(server.endpoint());
    d.api_key_env = "MALLES_TEST_KEY";
    ::setenv("MALLES_TEST_KEY", "sekrit", 1);
    HttpChatBackend backend(d);
    const std::vector<Message> msgs{{"system", "persona"}, {"user", "first"}, {"assistant", "reply"}, {"user", "second"}};
    EXPECT_EQ(backend.chat(request(msgs)), "hi there");
    const auto bodies = server.bodies();
    ASSERT_EQ(bodies.size(), 1u);
    const auto body = json::parse(bodies[0]);
    EXPECT_EQ(body.at("model"), "test-model-7");
    EXPECT_DOUBLE_EQ(body.at("temperature").get<double>(), 0.3);
    ASSERT_EQ(body.at("messages").size(), msgs.size());
    for (std::size_t i = 0; i < msgs.size(); ++i) {
        EXPECT_EQ(body["messages"][i]["role"], msgs[i].role);
        EXPECT_EQ(body["messages"][i]["content"], msgs[i].content);
    }
    EXPECT_EQ(server.auth()[0], "Bearer sekrit");
}

TEST(Chat, RetriesServerErrorsThenFails) {
    StubServer server([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    HttpChatBackend backend(descriptor(server.endpoint()));
    try {
        backend.chat(request({{"user", "x"}}));
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_EQ(e.kind(), BackendError::Kind::transport);
    }
    EXPECT_EQ(server.bodies().size(), 3u);
}

TEST(Chat, RecoversAfterTransientFailure) {
    std::atomic<int> calls{0};
    StubServer server([&](const httplib::Request&, httplib::Response& res) {
        if (calls++ == 0) {
            res.status = 500;
            return;
        }
        res.set_content(completion("ok"), "application/json");
    });
    HttpChatBackend backend(descriptor(server.endpoint()));
    EXPECT_EQ(backend.chat(request({{"user", "x"}})), "ok");
    EXPECT_EQ(calls.load(), 2);
}

TEST(Chat, UnreachableEndpointAfterThreeAttempts) {
    int port = 0;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    HttpChatBackend backend(descriptor("http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions"));
    try {
        backend.chat(request({{"user", "x"}}));
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_EQ(e.kind(), BackendError::Kind::transport);
        EXPECT_NE(std::string(e.what()).find("after 3 attempts"), std::string::npos);
    }
}

TEST(Chat, StatusAndMalformedBodies) {
    StubServer bad_status([](const httplib::Request&, httplib::Response& res) { res.status = 401; });
    HttpChatBackend a(descriptor(bad_status.endpoint()));
    try {
        a.chat(request({{"user", "x"}}));
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_EQ(e.kind(), BackendError::Kind::status);
    }
    EXPECT_EQ(bad_status.bodies().size(), 1u);

    StubServer garbage([](const httplib::Request&, httplib::Response& res) {
        res.set_content("{\"choices\": []}", "application/json");
    });
    HttpChatBackend b(descriptor(garbage.endpoint()));
    try {
        b.chat(request({{"user", "x"}}));
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_EQ(e.kind(), BackendError::Kind::malformed);
    }
}

TEST(Chat, DescriptorValidation) {
    auto d = descriptor("http://127.0.0.1:1/x");
    d.temperature = -1;
    EXPECT_THROW(d.validate(), InvalidArgument);
    d = descriptor("http://127.0.0.1:1/x");
    d.max_retries = -1;
    EXPECT_THROW(d.validate(), InvalidArgument);
}

TEST(Selection, PoolOfOne) {
    auto echo = std::make_shared<EchoBackend>("x", "only");
    BackendPool pool({echo}, 99);
    for (std::uint64_t i = 0; i < 100; ++i) EXPECT_EQ(pool.select(i).name(), "only");
    EXPECT_THROW(BackendPool({}, 1), InvalidArgument);
}

TEST(Selection, ReplayAndFrequency) {
    EXPECT_EQ(select_backend_index(4, 17, 123), select_backend_index(4, 17, 123));
    std::array<int, 4> counts{};
    const int n = 40000;
    for (int i = 0; i < n; ++i) ++counts[select_backend_index(4, 17, static_cast<std::uint64_t>(i))];
    for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / n, 0.25, 0.01);
}

TEST(ParseRetail, StrictBlocks) {
    const std::vector<std::string> ids{"P7", "P8"};
    auto r = parse_retail(R"({"buy": true, "product_id": "P7", "quantity": 3})", ids);
    EXPECT_EQ(r.decision, RetailDecision::purchase("P7", 3));
    EXPECT_FALSE(r.lenient);
    r = parse_retail(R"({"buy": false})", ids);
    EXPECT_EQ(r.decision, RetailDecision::no_purchase());
    r = parse_retail("thinking...\n{\"buy\": true, \"product_id\": \"P8\", \"quantity\": 1}\n{\"buy\": false}", ids);
    EXPECT_EQ(r.decision, RetailDecision::purchase("P8", 1));
}

TEST(ParseRetail, ErrorsCarryRawText) {
    const std::vector<std::string> ids{"P7"};
    auto kind_of = [&](const std::string& text, ParseOptions o = {}) {
        try {
            parse_retail(text, ids, o);
        } catch (const ParseError& e) {
            EXPECT_EQ(e.raw_text(), text);
            return e.kind();
        }
        ADD_FAILURE() << text;
        return ParseError::Kind::wrong_final_role;
    };
    EXPECT_EQ(kind_of(R"({"buy": true, "product_id": "P9", "quantity": 3})"), ParseError::Kind::unknown_candidate);
    EXPECT_EQ(kind_of(R"({"buy": true, "product_id": "P7", "quantity": 0})"), ParseError::Kind::invalid_quantity);
    EXPECT_EQ(kind_of(R"({"buy": true, "product_id": "P7"})"), ParseError::Kind::invalid_quantity);
    EXPECT_EQ(kind_of("the weather is nice"), ParseError::Kind::no_decision_found);
    EXPECT_EQ(kind_of("I would buy P7, quantity: 3", ParseOptions{false}), ParseError::Kind::no_decision_found);
}

TEST(ParseRetail, HandLabeledCorpus) {
    const std::vector<std::string> ids{"P3", "P7", "P12"};
    const auto none = RetailDecision::no_purchase();
    auto buy = [](const char* id, std::int64_t q) { return RetailDecision::purchase(id, q); };
    const std::vector<std::pair<std::string, RetailDecision>> corpus{
        {"After comparing, I would buy P7, quantity: 3.", buy("P7", 3)},
        {"I'll purchase 2 units of P12 since it is on promotion.", buy("P12", 2)},
        {"Option 2 looks best to me. I'll buy it, qty 5.", buy("P7", 5)},
        {"I will not buy anything this time.", none},
        {"No purchase: prices are too high for my budget.", none},
        {"Decision: P3 x 4", buy("P3", 4)},
        {"P12 is too expensive, so I choose P3 and take 6 pieces.", buy("P3", 6)},
        {"Comparing P3 (4.5 stars) and P7 (20% off), I'd go with P7. Quantity: 2", buy("P7", 2)},
        {"My pick is candidate 3 with 10 units, the budget allows it.", buy("P12", 10)},
        {"I'll skip this purchase; none of the options fit.", none},
        {"Buying P12: 12 packs.", buy("P12", 12)},
        {"I recommend P3. It has the best reviews. Quantity 1.", buy("P3", 1)},
        {"Between P7 and P12, P7 wins on price after the 15% discount. I'll take 3.", buy("P7", 3)},
        {"Final answer: P3, quantity 8. P7 was a close second.", buy("P3", 8)},
        {"I would order 24 pcs of P12 for the store.", buy("P12", 24)},
        {R"({"buy": true, "product_id": "P7", "quantity": 3})", buy("P7", 3)},
        {"Reasoning: P3 is cheapest.\n{\"buy\": true, \"product_id\": \"P3\", \"quantity\": 2}", buy("P3", 2)},
        {"I decided not to buy P7 at that price.", none},
        {"I won't buy P12, but I'll buy P3 instead, 2 units.", buy("P3", 2)},
        {"Let's select the second option: 4 units please.", buy("P7", 4)},
    };
    ASSERT_EQ(corpus.size(), 20u);
    for (const auto& [text, expected] : corpus) {
        const auto r = parse_retail(text, ids);
        EXPECT_EQ(r.decision, expected) << text;
        EXPECT_EQ(r.lenient, text.find('{') == std::string::npos) << text;
    }
}

TEST(ParseRetail, RoundTripsRenderedDecisions) {
    std::mt19937_64 rng(5);
    std::vector<std::string> ids;
    for (int i = 0; i < 30; ++i) ids.push_back("SKU-" + std::to_string(i));
    for (int i = 0; i < 1000; ++i) {
        RetailDecision d;
        if (rng() % 4 != 0) d = RetailDecision::purchase(ids[rng() % ids.size()], 1 + static_cast<std::int64_t>(rng() % 500));
        const auto r = parse_retail(render_retail_decision(d), ids);
        EXPECT_EQ(r.decision, d);
        EXPECT_FALSE(r.lenient);
    }
}

TEST(ParseWholesale, FinalDealerTurn) {
    std::vector<Turn> h{{"background", "b"}, {"dealer", "a"}, {"service", "s"}, {"manufacturer", "m"},
                        {"dealer", "Summary.\n{\"product_id\":\"P2\",\"quantity\":120}"}};
    EXPECT_EQ(parse_wholesale(h), (WholesaleDecision{"P2", 120}));
    EXPECT_EQ(parse_wholesale(h, {"P1", "P2"}), (WholesaleDecision{"P2", 120}));
}

TEST(ParseWholesale, ProtocolErrors) {
    auto kind_of = [](const std::vector<Turn>& h) {
        try {
            parse_wholesale(h);
        } catch (const ParseError& e) {
            return e.kind();
        }
        ADD_FAILURE();
        return ParseError::Kind::unknown_candidate;
    };
    EXPECT_EQ(kind_of({{"background", "b"}, {"dealer", "x"}, {"service", "{\"product_id\":\"P2\",\"quantity\":1}"}}),
              ParseError::Kind::wrong_final_role);
    // A block in round 3 does not count; only the final dealer turn is parsed.
    EXPECT_EQ(kind_of({{"background", "b"},
                       {"dealer", "x"},
                       {"service", "y"},
                       {"manufacturer", "{\"product_id\":\"P2\",\"quantity\":7}"},
                       {"dealer", "Let us think more."}}),
              ParseError::Kind::no_decision_found);
    EXPECT_EQ(kind_of({{"background", "b"}, {"dealer", "{\"product_id\":\"P2\",\"quantity\":0}"}}),
              ParseError::Kind::invalid_quantity);
    EXPECT_EQ(kind_of({}), ParseError::Kind::no_decision_found);
}

TEST(MockAgent, PicksCheapestUnderNegativePriceUtility) {
    MockLinearAgent agent({rule(10, 0), 0.0, 1});
    const auto d = agent.decide(sidecar_of({{"A9", 9.0}, {"A5", 5.0}}), 0);
    EXPECT_EQ(d.product_id, "A5");
}

TEST(MockAgent, HandEvaluatedQuantity) {
    MockLinearAgent agent({rule(10, 2), 0.0, 1});
    const auto d = agent.decide(sidecar_of({{"X", 3.0}}), 0);
    EXPECT_EQ(d, RetailDecision::purchase("X", 4));
    // Quantities that round below one mean no purchase.
    EXPECT_FALSE(agent.decide(sidecar_of({{"X", 6.0}}), 0).buy);
}

TEST(MockAgent, PermutationInvariantChoice) {
    MockLinearAgent agent({rule(10, 1), 0.0, 1});
    std::vector<std::pair<std::string, double>> rows{{"A", 4.0}, {"B", 2.5}, {"C", 2.5}, {"D", 7.0}};
    std::sort(rows.begin(), rows.end());
    do {
        EXPECT_EQ(agent.decide(sidecar_of(rows), 0).product_id, "B");
    } while (std::next_permutation(rows.begin(), rows.end()));
}

TEST(MockAgent, EmitsParseableBlockAndIsDeterministic) {
    MockLinearAgent agent({rule(10, 1), 0.8, 3});
    const auto s = sidecar_of({{"A", 2.0}, {"B", 3.0}});
    ChatRequest r;
    r.task = ChatTask::retail_decision;
    r.sidecar = &s;
    r.seed = 77;
    const auto text = agent.chat(r);
    EXPECT_EQ(text, agent.chat(r));
    const auto parsed = parse_retail(text, {"A", "B"});
    EXPECT_FALSE(parsed.lenient);
    EXPECT_EQ(parsed.decision, agent.decide(s, 77));
    r.seed = 78;
    bool differs = false;
    for (std::uint64_t k = 0; k < 20 && !differs; ++k) {
        r.seed = 100 + k;
        differs = parse_retail(agent.chat(r), {"A", "B"}).decision != parsed.decision;
    }
    EXPECT_TRUE(differs);
}

TEST(MockAgent, PopulationRules) {
    std::map<std::string, PlantedRule> pop{{"C1", rule(10, 2)}, {"C2", rule(20, 2)}};
    MockLinearAgent agent({rule(5, 0), 0.0, 1}, pop);
    EXPECT_EQ(agent.decide(sidecar_of({{"X", 3.0}}, "C1"), 0).quantity, 4);
    EXPECT_EQ(agent.decide(sidecar_of({{"X", 3.0}}, "C2"), 0).quantity, 14);
    EXPECT_EQ(agent.decide(sidecar_of({{"X", 3.0}}, "C9"), 0).quantity, 5);
}

TEST(Audit, RecordAndHash) {
    std::ostringstream out;
    write_audit_record(out, {4, "mock", prompt_hash({{"user", "x"}}), "text", "ok"});
    const auto j = json::parse(out.str());
    EXPECT_EQ(j.at("inference_index"), 4);
    EXPECT_EQ(j.at("parse_status"), "ok");
    EXPECT_NE(prompt_hash({{"user", "x"}}), prompt_hash({{"user", "y"}}));
    EXPECT_NE(prompt_hash({{"user", "ab"}}), prompt_hash({{"use", "rab"}}));
}

TEST(Audit, AverageParsedScores) {
    EXPECT_DOUBLE_EQ(average_parsed_scores({"score: 4", "I give it 2.5 points", "no number here", "-1"}),
                     (4.0 + 2.5 - 1.0) / 3.0);
    EXPECT_THROW(average_parsed_scores({"nothing"}), Error);
}
