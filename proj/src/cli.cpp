#include "malles/cli.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "malles/agent_backend.hpp"
#include "malles/calibration.hpp"
#include "malles/data_model.hpp"
#include "malles/dialogue.hpp"
#include "malles/meanfield.hpp"
#include "malles/metrics.hpp"
#include "malles/parallel.hpp"
#include "malles/prompt_builder.hpp"
#include "malles/retail_engine.hpp"
#include "malles/symbolic.hpp"

namespace malles {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

/// Reads keys of one config object and rejects unknown ones.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw UsageError("config section " + path_ + " must be an object");
    }
    ~Section() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw UsageError("unknown config key: " + path_ + k);
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end() || it->is_null()) return;
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw UsageError("config key " + path_ + key + " has the wrong type");
        }
    }
    void path(const char* key, fs::path& out, const fs::path& base) {
        std::string s;
        get(key, s);
        if (s.empty()) return;
        fs::path p(s);
        if (p.is_relative() && !base.empty()) p = base / p;
        out = p;
    }
    std::optional<json> sub(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end() || it->is_null()) return std::nullopt;
        return std::optional<json>(std::in_place, *it);
    }
    const std::string& prefix() const { return path_; }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require_exists(const fs::path& p, const char* what) {
    if (!p.empty() && !fs::exists(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

}  // namespace

RunConfig parse_run_config(const json& j, const fs::path& base) {
    RunConfig c;
    Section top(j, "");
    top.get("seed", c.seed);
    top.get("workers", c.workers);
    std::string out_dir;
    top.get("output_dir", out_dir);
    if (!out_dir.empty()) c.output_dir = out_dir;
    top.get("selection_seed", c.selection_seed);

    if (auto d = top.sub("data")) {
        Section s(*d, "data.");
        s.path("transactions", c.transactions, base);
        s.path("products", c.products, base);
        s.path("customers", c.customers, base);
        s.path("planted", c.planted, base);
        if (auto sp = s.sub("split")) {
            Section ss(*sp, "data.split.");
            ss.get("train", c.train_categories);
            ss.get("test", c.test_categories);
        }
    }
    if (auto d = top.sub("synthetic")) {
        Section s(*d, "synthetic.");
        s.get("customers", c.synthetic_customers);
        s.get("categories", c.synthetic_categories);
        s.get("months", c.synthetic_months);
        s.get("zero_elasticity", c.synthetic_zero_elasticity);
    }
    if (auto d = top.sub("backends")) {
        if (!d->is_array() || d->empty()) throw UsageError("backends must be a non-empty list");
        c.backends.clear();
        for (std::size_t i = 0; i < d->size(); ++i) {
            Section s((*d)[i], "backends[" + std::to_string(i) + "].");
            BackendConfig b;
            s.get("name", b.name);
            s.get("type", b.type);
            s.get("endpoint", b.endpoint);
            s.get("model", b.model);
            s.get("temperature", b.temperature);
            s.get("timeout_seconds", b.timeout_seconds);
            s.get("max_retries", b.max_retries);
            s.get("api_key_env", b.api_key_env);
            s.get("max_in_flight", b.max_in_flight);
            if (b.name.empty()) throw UsageError("backend " + std::to_string(i) + " has no name");
            if (b.type != "mock" && b.type != "http") throw UsageError("backend type must be mock or http");
            if (b.type == "http" && b.endpoint.empty()) throw UsageError("http backend " + b.name + " needs an endpoint");
            c.backends.push_back(b);
        }
    }
    if (auto d = top.sub("mock")) {
        Section s(*d, "mock.");
        s.get("noise_sigma", c.mock_noise_sigma);
        double slope = 0.0;
        if (auto v = s.sub("field_slope")) {
            if (!v->is_number()) throw UsageError("mock.field_slope must be a number");
            slope = v->get<double>();
            c.mock_field_slope = slope;
        }
    }
    if (auto d = top.sub("dataset")) {
        Section s(*d, "dataset.");
        s.get("distractors", c.distractors);
        s.get("trends_window", c.trends_window);
        s.get("max_instances", c.max_instances);
        s.get("bottom_half", c.bottom_half);
        s.get("categories", c.dataset_categories);
    }
    if (auto d = top.sub("retail")) {
        Section s(*d, "retail.");
        s.get("samples", c.retail_samples);
        s.get("strategies", c.retail_strategies);
        s.get("emphasis", c.retail_emphasis);
        s.get("lenient_fallback", c.lenient_fallback);
        if (auto cons = s.sub("consistency")) {
            Section cs(*cons, "retail.consistency.");
            cs.get("enabled", c.retail_consistency);
            cs.get("sigma", c.consistency_sigma);
            cs.get("k", c.consistency_k);
        }
    }
    if (auto d = top.sub("wholesale")) {
        Section s(*d, "wholesale.");
        s.get("rounds", c.wholesale_rounds);
        s.path("roles_dir", c.roles_dir, base);
        s.get("instances", c.wholesale_instances);
    }
    if (auto d = top.sub("meanfield")) {
        Section s(*d, "meanfield.");
        s.get("window", c.meanfield_window);
        s.get("eta", c.meanfield_eta);
        s.get("tol", c.meanfield_tol);
        s.get("max_iter", c.meanfield_max_iter);
        s.get("instances", c.meanfield_instances);
    }
    if (auto d = top.sub("calibration")) {
        Section s(*d, "calibration.");
        s.get("buckets", c.calibration_buckets);
        s.get("smoothing", c.calibration_smoothing);
        s.get("min_count", c.calibration_min_count);
        s.get("discount_cuts", c.discount_cuts);
        s.get("w_min", c.w_min);
        s.get("w_max", c.w_max);
        s.get("delta", c.delta);
    }
    if (auto d = top.sub("rules")) {
        Section s(*d, "rules.");
        s.get("budget", c.rules_budget);
        s.get("max_depth", c.rules_max_depth);
        s.get("population", c.rules_population);
        s.path("dataset", c.rules_dataset, base);
    }

    require_exists(c.transactions, "transactions file");
    require_exists(c.products, "products file");
    require_exists(c.customers, "customers file");
    require_exists(c.planted, "planted rules file");
    require_exists(c.roles_dir, "role template directory");
    require_exists(c.rules_dataset, "rule dataset");
    if (!c.transactions.empty() && c.products.empty()) throw UsageError("data.products is required with data.transactions");
    if (c.workers < 1) throw UsageError("workers must be >= 1");
    if (c.wholesale_rounds < 4) throw UsageError("wholesale.rounds must be >= 4");
    if (c.retail_samples < 1) throw UsageError("retail.samples must be >= 1");
    if (!(c.mock_noise_sigma >= 0.0)) throw UsageError("mock.noise_sigma must be >= 0");
    try {
        WindowConfig{c.meanfield_window, c.meanfield_eta}.validate();
        BinningConfig{c.calibration_buckets, c.calibration_smoothing, c.calibration_min_count, c.discount_cuts}
            .validate();
    } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
    }
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

json RunConfig::to_json() const {
    json backs = json::array();
    for (const auto& b : backends)
        backs.push_back({{"name", b.name},
                         {"type", b.type},
                         {"endpoint", b.endpoint},
                         {"model", b.model},
                         {"temperature", b.temperature},
                         {"timeout_seconds", b.timeout_seconds},
                         {"max_retries", b.max_retries},
                         {"api_key_env", b.api_key_env},
                         {"max_in_flight", b.max_in_flight}});
    return {
        {"seed", seed},
        {"workers", workers},
        {"output_dir", output_dir.string()},
        {"selection_seed", selection_seed},
        {"data",
         {{"transactions", transactions.string()},
          {"products", products.string()},
          {"customers", customers.string()},
          {"planted", planted.string()},
          {"split", {{"train", train_categories}, {"test", test_categories}}}}},
        {"synthetic",
         {{"customers", synthetic_customers},
          {"categories", synthetic_categories},
          {"months", synthetic_months},
          {"zero_elasticity", synthetic_zero_elasticity}}},
        {"backends", backs},
        {"mock",
         {{"noise_sigma", mock_noise_sigma},
          {"field_slope", mock_field_slope ? json(*mock_field_slope) : json(nullptr)}}},
        {"dataset",
         {{"distractors", distractors},
          {"trends_window", trends_window},
          {"max_instances", max_instances},
          {"bottom_half", bottom_half},
          {"categories", dataset_categories}}},
        {"retail",
         {{"samples", retail_samples},
          {"strategies", retail_strategies},
          {"emphasis", retail_emphasis},
          {"lenient_fallback", lenient_fallback},
          {"consistency", {{"enabled", retail_consistency}, {"sigma", consistency_sigma}, {"k", consistency_k}}}}},
        {"wholesale", {{"rounds", wholesale_rounds}, {"roles_dir", roles_dir.string()}, {"instances", wholesale_instances}}},
        {"meanfield",
         {{"window", meanfield_window},
          {"eta", meanfield_eta},
          {"tol", meanfield_tol},
          {"max_iter", meanfield_max_iter},
          {"instances", meanfield_instances}}},
        {"calibration",
         {{"buckets", calibration_buckets},
          {"smoothing", calibration_smoothing},
          {"min_count", calibration_min_count},
          {"discount_cuts", discount_cuts},
          {"w_min", w_min},
          {"w_max", w_max},
          {"delta", delta}}},
        {"rules",
         {{"budget", rules_budget},
          {"max_depth", rules_max_depth},
          {"population", rules_population},
          {"dataset", rules_dataset.string()}}},
    };
}

std::string config_hash(const RunConfig& config) {
    auto j = config.to_json();
    j.erase("output_dir");
    return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------

namespace {

std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    return format_timestamp(static_cast<Timestamp>(t)) + "Z";
}

/// Writes run outputs and keeps the inventory for the manifest.
class Run {
public:
    Run(const RunConfig& config, std::string command)
        : config_(config), command_(std::move(command)), started_(now_iso()),
          clock_start_(std::chrono::steady_clock::now()) {
        fs::create_directories(config_.output_dir);
    }

    void write(const fs::path& relative, const std::function<void(std::ostream&)>& body) {
        const auto path = config_.output_dir / relative;
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ostringstream buf;
        body(buf);
        const auto bytes = buf.str();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write " + path.string());
        out << bytes;
        inventory_.push_back({{"path", relative.generic_string()},
                              {"bytes", bytes.size()},
                              {"fnv1a64", hex64(fnv1a64(bytes))}});
    }

    json& extra() { return extra_; }

    void finish() {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start_).count();
        json m;
        m["run_id"] = config_hash(config_) + "-" + command_;
        m["command"] = command_;
        m["config_hash"] = config_hash(config_);
        m["config"] = config_.to_json();
        m["started_at"] = started_;
        m["finished_at"] = now_iso();
        m["wall_seconds"] = wall;
        m["module_versions"] = {{"data-model", kVersion},   {"prompt-builder", kVersion}, {"agent-backend", kVersion},
                                {"retail-engine", kVersion}, {"wholesale-engine", kVersion}, {"meanfield", kVersion},
                                {"calibration", kVersion},   {"metrics", kVersion},         {"cli", kVersion}};
        m["outputs"] = inventory_;
        m["details"] = extra_;
        std::ofstream out(config_.output_dir / "manifest.json");
        out << m.dump(2) << '\n';
    }

private:
    const RunConfig& config_;
    std::string command_;
    std::string started_;
    std::chrono::steady_clock::time_point clock_start_;
    json inventory_ = json::array();
    json extra_ = json::object();
};

struct World {
    std::vector<TransactionRecord> transactions;
    Catalog catalog;
    CustomerMap customers;
    std::map<std::string, PlantedRule> planted;
    std::vector<RejectedRow> rejects;
};

World load_world(const RunConfig& c) {
    World w;
    if (c.transactions.empty()) {
        SyntheticConfig sc;
        sc.seed = c.seed;
        sc.n_customers = c.synthetic_customers;
        sc.n_categories = c.synthetic_categories;
        sc.months = c.synthetic_months;
        sc.zero_elasticity = c.synthetic_zero_elasticity;
        auto m = generate_synthetic_market(sc);
        w.transactions = std::move(m.transactions);
        w.catalog = std::move(m.catalog);
        w.customers = std::move(m.customers);
        w.planted = std::move(m.planted);
        return w;
    }
    auto tx = ingest_transactions(c.transactions);
    auto products = ingest_products(c.products);
    w.transactions = std::move(tx.records);
    w.rejects = std::move(tx.rejects);
    w.catalog = std::move(products.records);
    if (!c.customers.empty()) {
        w.customers = ingest_customers(c.customers, w.transactions);
    } else {
        link_purchase_histories(w.customers, w.transactions);
    }
    if (!c.planted.empty()) w.planted = read_planted_json(c.planted);
    return w;
}

BackendPool make_pool(const RunConfig& c, const World& w, bool force_mock) {
    std::vector<std::shared_ptr<ChatBackend>> backends;
    auto planted = w.planted;
    if (c.mock_field_slope)
        for (auto& [id, r] : planted) r.field_slope = *c.mock_field_slope;
    for (const auto& b : c.backends) {
        if (force_mock || b.type == "mock") {
            MockAgentParams p;
            p.noise_sigma = c.mock_noise_sigma;
            p.seed = c.seed;
            if (c.mock_field_slope) p.rule.field_slope = *c.mock_field_slope;
            const auto name = b.type == "mock" ? b.name : "mock:" + b.name;
            backends.push_back(std::make_shared<MockLinearAgent>(p, planted, name));
        } else {
            BackendDescriptor d;
            d.name = b.name;
            d.endpoint = b.endpoint;
            d.model = b.model;
            d.temperature = b.temperature;
            d.timeout_seconds = b.timeout_seconds;
            d.max_retries = b.max_retries;
            d.api_key_env = b.api_key_env;
            d.max_in_flight = b.max_in_flight;
            backends.push_back(std::make_shared<HttpChatBackend>(d));
        }
    }
    return BackendPool(std::move(backends), c.selection_seed);
}

DatasetOptions dataset_options(const RunConfig& c, const World& w, std::optional<BuyerType> buyers) {
    DatasetOptions o;
    o.distractors = c.distractors;
    o.trends_window = c.trends_window;
    o.seed = c.seed;
    o.eligible_categories = c.dataset_categories;
    std::set<std::string> eligible;
    if (c.bottom_half) eligible = sample_bottom_half_customers(w.transactions, c.seed);
    if (buyers) {
        std::set<std::string> typed;
        for (const auto& [id, cust] : w.customers)
            if (cust.buyer_type == *buyers && (!c.bottom_half || eligible.count(id))) typed.insert(id);
        eligible = std::move(typed);
        // An empty set means "everyone" downstream; keep it non-empty.
        if (eligible.empty()) eligible.insert("");
    }
    o.eligible_customers = std::move(eligible);
    return o;
}

std::vector<RetailCase> capped(std::vector<RetailCase> cases, std::size_t cap) {
    if (cap > 0 && cases.size() > cap) cases.resize(cap);
    return cases;
}

GroundTruth truth_of(const RetailCase& c) {
    return {c.instance_id, c.truth.customer_id, c.truth.product_id, c.truth.quantity,
            c.category,    c.income_bracket,    c.truth.discount};
}

void write_dataset_report(std::ostream& out, const DatasetReport& r) {
    out << json{{"eligible", r.eligible},
                {"examples", r.examples},
                {"short_candidate_sets", r.short_candidate_sets},
                {"short_categories", r.short_categories},
                {"skipped_unknown_product", r.skipped_unknown_product},
                {"skipped_unknown_customer", r.skipped_unknown_customer}}
               .dump(2)
        << '\n';
}

void write_reports(Run& run, const RunReport& report) {
    run.write("report.json", [&](std::ostream& o) { write_report_json(o, report); });
    run.write("report.md", [&](std::ostream& o) { write_report_md(o, {report}); });
}

Prediction prediction_of(const RetailRunEpisode& e) {
    Prediction p;
    p.instance_id = e.episode.instance_id;
    p.valid = e.episode.valid;
    p.buy = e.episode.decision.buy;
    p.product_id = e.episode.decision.product_id;
    p.quantity = e.episode.decision.quantity;
    for (std::size_t s = 0; s < e.episode.samples.size(); ++s)
        if (e.episode.sample_valid[s])
            p.samples.push_back(e.episode.samples[s].buy ? static_cast<double>(e.episode.samples[s].quantity) : 0.0);
    p.time_cost = static_cast<double>(e.episode.chat_calls);
    return p;
}

std::string summary_line(const RunReport& r) {
    std::ostringstream s;
    s << "hit_rate " << format_double(r.hit_rate) << " quantity_error "
      << (r.quantity_error ? format_double(*r.quantity_error) : "n/a") << " stability "
      << (r.stability ? format_double(*r.stability) : "n/a") << " n " << r.n << " invalid " << r.n_invalid;
    return s.str();
}

// ---------------------------------------------------------------------------

int cmd_generate(const RunConfig& c, bool rule_points, std::ostream& out) {
    Run run(c, "generate");
    SyntheticConfig sc;
    sc.seed = c.seed;
    sc.n_customers = c.synthetic_customers;
    sc.n_categories = c.synthetic_categories;
    sc.months = c.synthetic_months;
    sc.zero_elasticity = c.synthetic_zero_elasticity;
    const auto m = generate_synthetic_market(sc);
    run.write("transactions.csv", [&](std::ostream& o) { write_transactions_csv(o, m.transactions); });
    run.write("products.jsonl", [&](std::ostream& o) { write_products_jsonl(o, m.catalog); });
    run.write("customers.jsonl", [&](std::ostream& o) { write_customers_jsonl(o, m.customers); });
    run.write("planted.json", [&](std::ostream& o) { write_planted_json(o, m.planted); });
    if (rule_points) {
        // Noiseless q = 10 - 2 * price over 50 points.
        std::mt19937_64 rng(derive_seed(c.seed, 0x5e));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<RulePoint> pts;
        for (int i = 0; i < 50; ++i) {
            RulePoint p;
            const double price = std::round((0.5 + 4.0 * u(rng)) * 100.0) / 100.0;
            p.features = {{"price", price},
                          {"discount", std::round(u(rng) * 30.0) / 100.0},
                          {"hist_volume", std::round(u(rng) * 50.0)},
                          {"trend", std::round(u(rng) * 200.0)},
                          {"review", std::round((3.0 + 2.0 * u(rng)) * 10.0) / 10.0}};
            p.target = 10.0 - 2.0 * price;
            pts.push_back(std::move(p));
        }
        run.write("rule_points.csv", [&](std::ostream& o) { write_rule_points_csv(o, pts); });
    }
    run.finish();
    out << "generated " << m.transactions.size() << " transactions, " << m.catalog.size() << " products, "
        << m.customers.size() << " customers\n";
    return 0;
}

int cmd_build_dataset(const RunConfig& c, std::ostream& out) {
    const auto w = load_world(c);
    if (w.transactions.empty()) throw UsageError("no transactions to build a dataset from");
    Run run(c, "build-dataset");
    const auto ds = build_alignment_dataset(w.transactions, w.catalog, w.customers, dataset_options(c, w, std::nullopt));
    run.write("alignment.jsonl", [&](std::ostream& o) { write_alignment_jsonl(o, ds.examples); });
    run.write("dataset_report.json", [&](std::ostream& o) { write_dataset_report(o, ds.report); });
    if (!w.rejects.empty()) run.write("rejects.jsonl", [&](std::ostream& o) { write_reject_report(o, w.rejects); });
    run.extra()["examples"] = ds.examples.size();
    run.finish();
    out << ds.examples.size() << " examples\n";
    return 0;
}

int simulate_retail_mode(const RunConfig& c, const World& w, const BackendPool& pool, Run& run, std::ostream& out) {
    auto cases = capped(
        build_retail_cases(w.transactions, w.catalog, w.customers, dataset_options(c, w, BuyerType::retail)).cases,
        c.max_instances);
    if (cases.empty()) throw UsageError("no retail instances to simulate");
    RetailRunOptions o;
    o.seed = c.seed;
    o.samples = c.retail_samples;
    o.use_strategies = c.retail_strategies;
    o.parse.lenient_fallback = c.lenient_fallback;
    o.workers = c.workers;
    if (c.retail_consistency) {
        PerturbationConfig pc;
        pc.sigma = c.consistency_sigma;
        pc.k = c.consistency_k;
        pc.seed = c.seed;
        o.consistency = pc;
    }
    o.elicit_emphasis = c.retail_emphasis;
    const auto episodes = simulate_retail(cases, w.customers, w.catalog, pool, o);

    std::vector<GroundTruth> truth;
    std::vector<Prediction> preds;
    for (const auto& cs : cases) truth.push_back(truth_of(cs));
    for (const auto& e : episodes) preds.push_back(prediction_of(e));
    run.write("episodes.jsonl", [&](std::ostream& s) {
        for (std::size_t i = 0; i < episodes.size(); ++i) write_episode_jsonl(s, i, episodes[i]);
    });
    run.write("truth.jsonl", [&](std::ostream& s) { write_truth_jsonl(s, truth); });
    const auto report = evaluate_run(preds, truth, "retail", config_hash(c));
    write_reports(run, report);
    out << "retail " << summary_line(report) << '\n';
    return 0;
}

std::string wholesale_background(const RetailCase& c) {
    std::string text = c.prompt.rendered_text;
    const auto cut = text.find("\nExplain your reasoning briefly");
    if (cut != std::string::npos) text.resize(cut);
    const std::string heading = "# Retail purchase decision";
    if (text.rfind(heading, 0) == 0) text.replace(0, heading.size(), "# Wholesale purchasing review");
    return text;
}

int simulate_wholesale_mode(const RunConfig& c, const World& w, const BackendPool& pool, Run& run,
                            std::ostream& out) {
    auto cases = capped(
        build_retail_cases(w.transactions, w.catalog, w.customers, dataset_options(c, w, BuyerType::wholesale)).cases,
        c.wholesale_instances);
    if (cases.empty()) throw UsageError("no wholesale instances to simulate");
    DialogueContext ctx;
    if (!c.roles_dir.empty()) ctx.templates = RoleTemplates::load(c.roles_dir);

    std::vector<WholesaleOutcome> outcomes(cases.size());
    parallel_for(cases.size(), c.workers, [&](std::size_t i) {
        DialogueContext local = ctx;
        local.sidecar = &cases[i].prompt.sidecar;
        local.seed = derive_seed(c.seed, i);
        RoleAgents agents(std::shared_ptr<ChatBackend>(&pool.select(i), [](ChatBackend*) {}));
        outcomes[i] = simulate_wholesale(wholesale_background(cases[i]), c.wholesale_rounds, agents, local,
                                         cases[i].prompt.candidate_ids());
    });

    std::vector<GroundTruth> truth;
    std::vector<Prediction> preds;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        truth.push_back(truth_of(cases[i]));
        Prediction p;
        p.instance_id = cases[i].instance_id;
        p.valid = outcomes[i].decision.has_value();
        if (p.valid) {
            p.buy = true;
            p.product_id = outcomes[i].decision->product_id;
            p.quantity = outcomes[i].decision->quantity;
        }
        p.time_cost = static_cast<double>(c.wholesale_rounds);
        preds.push_back(std::move(p));
        run.write(fs::path("transcripts") / (cases[i].instance_id + ".jsonl"),
                  [&](std::ostream& s) { write_transcript_jsonl(s, outcomes[i].transcript); });
    }
    run.write("episodes.jsonl", [&](std::ostream& s) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            json roles = json::array();
            for (std::size_t t = 1; t < outcomes[i].transcript.size(); ++t) roles.push_back(outcomes[i].transcript[t].role);
            json j{{"inference_index", i},
                   {"instance_id", preds[i].instance_id},
                   {"backend_name", pool.select(i).name()},
                   {"valid", preds[i].valid},
                   {"buy", preds[i].buy},
                   {"product_id", preds[i].product_id ? json(*preds[i].product_id) : json(nullptr)},
                   {"quantity", preds[i].quantity},
                   {"parse_status", outcomes[i].error ? to_string(*outcomes[i].error) : std::string("ok")},
                   {"roles", roles},
                   {"chat_calls", c.wholesale_rounds}};
            s << j.dump() << '\n';
        }
    });
    run.write("truth.jsonl", [&](std::ostream& s) { write_truth_jsonl(s, truth); });
    const auto report = evaluate_run(preds, truth, "wholesale", config_hash(c));
    write_reports(run, report);
    run.extra()["rounds"] = c.wholesale_rounds;
    run.extra()["transcripts"] = cases.size();
    out << "wholesale " << summary_line(report) << '\n';
    return 0;
}

int simulate_meanfield_mode(const RunConfig& c, const World& w, const BackendPool& pool, Run& run,
                            std::ostream& out) {
    if (w.transactions.empty()) throw UsageError("no transactions for the mean-field run");
    MonthIndex last = month_of(w.transactions.front().timestamp);
    for (const auto& t : w.transactions) last = std::max(last, month_of(t.timestamp));
    // Batch: retail instances of the final month; mu_0 from the window before it.
    auto opts = dataset_options(c, w, BuyerType::retail);
    auto all = build_retail_cases(w.transactions, w.catalog, w.customers, opts).cases;
    std::vector<RetailCase> cases;
    for (auto& cs : all)
        if (month_of(cs.truth.timestamp) == last) cases.push_back(std::move(cs));
    cases = capped(std::move(cases), c.meanfield_instances);
    if (cases.empty()) throw UsageError("no retail instances in the final month");

    const WindowConfig wc{c.meanfield_window, c.meanfield_eta};
    const auto mu0 = init_meanfield(w.transactions, w.catalog, c.meanfield_window, last);
    std::vector<RetailEpisode> last_batch(cases.size());
    std::mutex mu;
    const BatchRunner runner = [&](const MeanFieldState& state) {
        const auto field = to_market_field(state);
        std::vector<RetailEpisode> eps(cases.size());
        parallel_for(cases.size(), c.workers, [&](std::size_t i) {
            RetailPrompt prompt = cases[i].prompt;
            embed_market_field(prompt, field);
            const auto& customer = w.customers.at(cases[i].truth.customer_id);
            eps[i] = run_retail_episode(customer, prompt, customer.style, pool.select(i), derive_seed(c.seed, i), {},
                                        cases[i].instance_id);
        });
        std::vector<BatchDecision> batch;
        for (const auto& e : eps) {
            if (!e.valid) continue;
            BatchDecision d;
            if (e.decision.buy) {
                d.product_id = e.decision.product_id;
                d.category = w.catalog.at(*e.decision.product_id).first_category();
                d.quantity = static_cast<double>(e.decision.quantity);
            }
            batch.push_back(std::move(d));
        }
        std::lock_guard lock(mu);
        last_batch = std::move(eps);
        return batch;
    };
    const auto result = run_meanfield(wc, mu0, runner, c.meanfield_tol, c.meanfield_max_iter, w.catalog);

    std::vector<GroundTruth> truth;
    std::vector<Prediction> preds;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        truth.push_back(truth_of(cases[i]));
        RetailRunEpisode r{last_batch[i], std::nullopt, std::nullopt, std::nullopt};
        r.episode.samples = {r.episode.decision};
        r.episode.sample_valid = {r.episode.valid};
        preds.push_back(prediction_of(r));
    }
    run.write("trajectory.jsonl", [&](std::ostream& s) { write_trajectory_jsonl(s, result); });
    run.write("episodes.jsonl", [&](std::ostream& s) {
        for (std::size_t i = 0; i < last_batch.size(); ++i)
            write_episode_jsonl(s, i, RetailRunEpisode{last_batch[i], std::nullopt, std::nullopt, std::nullopt});
    });
    run.write("truth.jsonl", [&](std::ostream& s) { write_truth_jsonl(s, truth); });
    const auto report = evaluate_run(preds, truth, "meanfield", config_hash(c));
    write_reports(run, report);
    run.extra()["converged"] = result.converged;
    run.extra()["iterations"] = result.deltas.size();
    run.extra()["final_delta"] = result.deltas.empty() ? 0.0 : result.deltas.back();
    out << "meanfield converged " << (result.converged ? "true" : "false") << " iterations " << result.deltas.size()
        << ' ' << summary_line(report) << '\n';
    return 0;
}

int cmd_simulate(const RunConfig& c, const std::string& mode, bool force_mock, std::ostream& out) {
    if (mode != "retail" && mode != "wholesale" && mode != "meanfield")
        throw UsageError("mode must be retail, wholesale or meanfield");
    const auto w = load_world(c);
    const auto pool = make_pool(c, w, force_mock);
    Run run(c, mode == "meanfield" ? "meanfield" : "simulate-" + mode);
    run.extra()["mode"] = mode;
    if (!w.rejects.empty()) run.write("rejects.jsonl", [&](std::ostream& o) { write_reject_report(o, w.rejects); });
    int rc = 0;
    if (mode == "retail") rc = simulate_retail_mode(c, w, pool, run, out);
    if (mode == "wholesale") rc = simulate_wholesale_mode(c, w, pool, run, out);
    if (mode == "meanfield") rc = simulate_meanfield_mode(c, w, pool, run, out);
    run.finish();
    return rc;
}

template <class T, class Reader>
T read_file(const fs::path& p, Reader reader) {
    std::ifstream in(p);
    if (!in) throw UsageError("file not found: " + p.string());
    return reader(in);
}

int cmd_evaluate(const RunConfig& c, fs::path episodes, fs::path truth_path, bool ood, std::ostream& out) {
    if (ood && (c.train_categories.empty() || c.test_categories.empty()))
        throw UsageError("--ood needs data.split.train and data.split.test in the config");
    if (episodes.empty()) episodes = c.output_dir / "episodes.jsonl";
    if (truth_path.empty()) truth_path = c.output_dir / "truth.jsonl";
    const auto preds = read_file<std::vector<Prediction>>(episodes, read_predictions_jsonl);
    const auto truth = read_file<std::vector<GroundTruth>>(truth_path, read_truth_jsonl);
    Run run(c, "evaluate");
    const auto report = evaluate_run(preds, truth, "run", config_hash(c));
    write_reports(run, report);
    out << summary_line(report) << '\n';
    if (ood) {
        std::map<std::string, const GroundTruth*> by_id;
        for (const auto& t : truth) by_id[t.instance_id] = &t;
        std::vector<Prediction> ptrain, ptest;
        std::vector<GroundTruth> ttrain, ttest;
        for (const auto& p : preds) {
            const auto* t = by_id.at(p.instance_id);
            if (c.train_categories.count(t->category)) {
                ptrain.push_back(p);
                ttrain.push_back(*t);
            } else if (c.test_categories.count(t->category)) {
                ptest.push_back(p);
                ttest.push_back(*t);
            }
        }
        if (ptrain.empty() || ptest.empty()) throw Error("OOD split leaves an empty side");
        const OodSplit split{c.train_categories, c.test_categories};
        const auto cmp = ood_report(evaluate_run(ptrain, ttrain, "train", config_hash(c), false),
                                    evaluate_run(ptest, ttest, "test", config_hash(c), true), split);
        run.write("ood_report.json", [&](std::ostream& o) { write_ood_json(o, cmp); });
        run.write("ood_report.md", [&](std::ostream& o) { write_report_md(o, {cmp.train, cmp.test}); });
        out << "ood delta_hit_rate " << format_double(cmp.delta_hit_rate) << '\n';
    }
    run.finish();
    return 0;
}

int cmd_calibrate(const RunConfig& c, fs::path episodes, fs::path truth_path, int shift, std::ostream& out) {
    BinningConfig bc{c.calibration_buckets, c.calibration_smoothing, c.calibration_min_count, c.discount_cuts};
    std::vector<CalibrationSample> real, sim;
    if (shift != 0 || episodes.empty()) {
        const auto w = load_world(c);
        for (const auto& t : w.transactions) {
            const auto it = w.catalog.find(t.product_id);
            if (it == w.catalog.end()) continue;
            const auto ct = w.customers.find(t.customer_id);
            CalibrationSample s{it->second.first_category(),
                                ct == w.customers.end() ? std::string("unknown") : ct->second.income_bracket,
                                t.discount, static_cast<double>(t.quantity)};
            real.push_back(s);
            s.quantity = std::max(0.0, s.quantity + shift);
            sim.push_back(s);
        }
    } else {
        if (truth_path.empty()) truth_path = c.output_dir / "truth.jsonl";
        const auto preds = read_file<std::vector<Prediction>>(episodes, read_predictions_jsonl);
        const auto truth = read_file<std::vector<GroundTruth>>(truth_path, read_truth_jsonl);
        for (const auto& i : align_instances(preds, truth)) {
            CalibrationSample s{i.truth.category, i.truth.income_bracket, i.truth.discount,
                                static_cast<double>(i.truth.quantity)};
            real.push_back(s);
            if (!i.prediction.valid) continue;
            s.quantity = i.prediction.buy ? static_cast<double>(i.prediction.quantity) : 0.0;
            sim.push_back(s);
        }
    }
    if (real.empty() || sim.empty()) throw UsageError("no samples to calibrate");
    const auto hr = estimate_conditional(real, bc);
    auto hs = estimate_conditional(sim, bc);
    // Bins seen on one side only get a smoothed empty histogram on the other.
    auto fill = [&](ConditionalHistogram& into, const ConditionalHistogram& from) {
        for (const auto& [k, h] : from.bins)
            if (!into.bins.count(k))
                into.bins[k] = Histogram{std::vector<double>(bc.buckets, 1.0 / static_cast<double>(bc.buckets)), 0, true};
    };
    auto hr_full = hr;
    fill(hr_full, hs);
    fill(hs, hr_full);
    const auto fmap = fit_calibration(hs, hr_full);
    const auto weights = reweight(hr_full, hs, c.w_min, c.w_max);

    // Count-weighted KL before and after.
    double before = 0.0, after = 0.0, n = 0.0;
    for (const auto& [k, fit] : fmap.bins) {
        const double wgt = static_cast<double>(hr_full.bins.at(k).count);
        before += wgt * fit.kl_identity;
        after += wgt * fit.kl_fitted;
        n += wgt;
    }
    before /= n;
    after /= n;
    const double reduction = before > 0.0 ? (before - after) / before : 0.0;

    auto mean_q = [](const std::vector<CalibrationSample>& v) {
        double s = 0.0;
        for (const auto& x : v) s += x.quantity;
        return s / static_cast<double>(v.size());
    };
    std::vector<CalibrationSample> calibrated = sim;
    for (auto& s : calibrated) {
        const auto* m = fmap.map_for(bin_key(s, bc));
        if (m) s.quantity = std::max(0.0, std::round((*m)(s.quantity)));
    }
    const std::map<std::string, double> baseline{{"mean_quantity", mean_q(real)}};
    const std::map<std::string, double> kpis{{"mean_quantity", mean_q(sim)}};
    const std::map<std::string, double> thresholds{{"mean_quantity", c.delta}};
    const auto signals = detect_bottleneck(kpis, baseline, thresholds, c.delta);

    Run run(c, "calibrate");
    run.write("calibration.json", [&](std::ostream& o) { write_calibration_json(o, fmap, weights); });
    run.write("kpi_report.json", [&](std::ostream& o) { write_kpi_report_json(o, kpis, baseline, thresholds, signals); });
    run.extra()["kl_before"] = before;
    run.extra()["kl_after"] = after;
    run.extra()["calibrated_mean_quantity"] = mean_q(calibrated);
    run.finish();
    out << "KL before " << format_double(before) << " after " << format_double(after) << " reduction "
        << format_double(std::round(reduction * 1e4) / 100.0) << "%\n";
    return 0;
}

std::vector<RulePoint> rule_points_from_world(const World& w) {
    const MarketIndex market(w.transactions, w.catalog);
    std::map<std::string, std::int64_t> volume;
    std::vector<RulePoint> pts;
    for (const auto& t : w.transactions) {
        const auto it = w.catalog.find(t.product_id);
        if (it == w.catalog.end()) continue;
        const auto m = month_of(t.timestamp);
        RulePoint p;
        p.features = {{"price", t.unit_price.value()},
                      {"discount", t.discount},
                      {"hist_volume", static_cast<double>(volume[t.customer_id])},
                      {"trend", static_cast<double>(market.category_quantity(it->second.first_category(), m - 3, m - 1))},
                      {"review", it->second.rating()}};
        p.target = static_cast<double>(t.quantity);
        pts.push_back(std::move(p));
        volume[t.customer_id] += t.quantity;
    }
    return pts;
}

int cmd_discover_rules(const RunConfig& c, fs::path dataset, bool refine, bool force_mock, std::ostream& out) {
    if (dataset.empty()) dataset = c.rules_dataset;
    std::vector<RulePoint> pts;
    World w;
    if (!dataset.empty()) {
        pts = read_file<std::vector<RulePoint>>(dataset, read_rule_points_csv);
    } else {
        w = load_world(c);
        pts = rule_points_from_world(w);
    }
    if (pts.size() < 10) throw UsageError("rule discovery needs at least 10 points");
    DiscoverOptions o;
    o.budget = c.rules_budget;
    o.seed = c.seed;
    o.max_depth = c.rules_max_depth;
    o.population = c.rules_population;
    o.workers = c.workers;
    auto fit = discover_rule(pts, o);
    Run run(c, "discover-rules");
    if (refine) {
        const auto pool = make_pool(c, w, force_mock);
        DialogueContext ctx;
        if (!c.roles_dir.empty()) ctx.templates = RoleTemplates::load(c.roles_dir);
        ctx.seed = c.seed;
        RoleAgents agents(std::shared_ptr<ChatBackend>(&pool.select(0), [](ChatBackend*) {}));
        const auto r = refine_rule_via_dialogue(fit, pts, "Purchasing formula review.", c.wholesale_rounds, agents, ctx);
        run.write("refine_transcript.jsonl", [&](std::ostream& s) { write_transcript_jsonl(s, r.transcript); });
        run.extra()["refine"] = {{"improved", r.improved}, {"no_proposal", r.no_proposal}, {"unparseable", r.unparseable}};
        fit.expression = r.fit.expression;
        fit.rmse = r.fit.rmse;
        fit.mae = r.fit.mae;
        fit.complexity = r.fit.complexity;
    }
    run.write("rules.json", [&](std::ostream& s) { write_rules_json(s, fit); });
    run.extra()["evaluations"] = fit.evaluations;
    run.finish();
    out << "rule q = " << fit.expression.str() << " rmse " << format_double(fit.rmse) << " complexity "
        << fit.complexity << '\n';
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Market simulation with LLM agents", "malles"};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool mock = false;
    std::string out_dir;
    app.add_option("--config", config_path, "JSON configuration file");
    app.add_option("--seed", seed, "Override the master seed");
    app.add_flag("--mock", mock, "Use mock agents for every backend");
    app.add_option("--out", out_dir, "Output directory");

    auto* generate = app.add_subcommand("generate", "Write a synthetic market to the output directory");
    bool rule_points = false;
    generate->add_flag("--rule-points", rule_points, "Also write a planted rule dataset");

    app.add_subcommand("build-dataset", "Build the alignment dataset");

    auto* simulate = app.add_subcommand("simulate", "Run simulation episodes");
    std::string mode = "retail";
    simulate->add_option("--mode", mode, "retail, wholesale or meanfield");

    app.add_subcommand("meanfield", "Alias of simulate --mode meanfield");

    auto* evaluate = app.add_subcommand("evaluate", "Score episodes against ground truth");
    std::string episodes, truth;
    bool ood = false;
    evaluate->add_option("--episodes", episodes, "episodes.jsonl");
    evaluate->add_option("--truth", truth, "truth.jsonl");
    evaluate->add_flag("--ood", ood, "Add the out-of-distribution comparison");

    auto* calibrate = app.add_subcommand("calibrate", "Fit calibration maps and reweighting");
    int shift = 0;
    calibrate->add_option("--episodes", episodes, "episodes.jsonl");
    calibrate->add_option("--truth", truth, "truth.jsonl");
    calibrate->add_option("--shift", shift, "Use real quantities shifted by this many units as the simulation");

    auto* discover = app.add_subcommand("discover-rules", "Symbolic regression over purchase data");
    std::string dataset;
    bool refine = false;
    discover->add_option("--dataset", dataset, "CSV with feature columns and quantity");
    discover->add_flag("--refine", refine, "Refine the rule through a role dialogue");

    auto* bound = app.add_subcommand("bound", "Generalization gain lower bound");
    double d = 0, n_target = 0, n_full = 0, lambda = 0, r_transfer = 0;
    bound->add_option("--d", d, "Model complexity")->required();
    bound->add_option("--n-target", n_target, "Target-domain sample size")->required();
    bound->add_option("--n-full", n_full, "Full sample size")->required();
    bound->add_option("--lambda", lambda, "Transfer weight");
    bound->add_option("--r-transfer", r_transfer, "Transfer term");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    }

    try {
        RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (seed) c.seed = *seed;
        if (!out_dir.empty()) c.output_dir = out_dir;
        if (*generate) return cmd_generate(c, rule_points, out);
        if (app.got_subcommand("build-dataset")) return cmd_build_dataset(c, out);
        if (*simulate) return cmd_simulate(c, mode, mock, out);
        if (app.got_subcommand("meanfield")) return cmd_simulate(c, "meanfield", mock, out);
        if (*evaluate) return cmd_evaluate(c, episodes, truth, ood, out);
        if (*calibrate) return cmd_calibrate(c, episodes, truth, shift, out);
        if (*discover) return cmd_discover_rules(c, dataset, refine, mock, out);
        if (*bound) {
            try {
                out << format_double(generalization_gain_lower_bound(d, n_target, n_full, lambda, r_transfer)) << '\n';
            } catch (const InvalidArgument& e) {
                throw UsageError(e.what());
            }
            return 0;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace malles
