#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "malles/common.hpp"

namespace malles {

/// Bad command line or configuration; exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

struct BackendConfig {
    std::string name;
    /// "mock" or "http".
    std::string type = "mock";
    std::string endpoint;
    std::string model;
    double temperature = 0.0;
    double timeout_seconds = 60.0;
    int max_retries = 2;
    std::string api_key_env;
    int max_in_flight = 4;
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::filesystem::path output_dir = "out";

    // Data. Empty transaction path means a synthetic world from `seed`.
    std::filesystem::path transactions;
    std::filesystem::path products;
    std::filesystem::path customers;
    std::filesystem::path planted;
    std::set<std::string> train_categories;
    std::set<std::string> test_categories;

    int synthetic_customers = 200;
    int synthetic_categories = 10;
    int synthetic_months = 12;
    bool synthetic_zero_elasticity = false;

    std::vector<BackendConfig> backends{BackendConfig{"mock", "mock", {}, {}, 0.0, 60.0, 2, {}, 4}};
    std::uint64_t selection_seed = 7;
    double mock_noise_sigma = 0.0;
    std::optional<double> mock_field_slope;

    std::size_t distractors = 4;
    int trends_window = 3;
    std::size_t max_instances = 0;
    bool bottom_half = false;
    std::set<std::string> dataset_categories;

    std::size_t retail_samples = 3;
    bool retail_strategies = false;
    bool retail_consistency = false;
    double consistency_sigma = 0.05;
    std::size_t consistency_k = 4;
    bool retail_emphasis = false;
    bool lenient_fallback = true;

    int wholesale_rounds = 6;
    std::filesystem::path roles_dir;
    std::size_t wholesale_instances = 100;

    int meanfield_window = 3;
    double meanfield_eta = 0.5;
    double meanfield_tol = 1e-6;
    int meanfield_max_iter = 25;
    std::size_t meanfield_instances = 200;

    std::size_t calibration_buckets = 11;
    double calibration_smoothing = 1.0;
    std::size_t calibration_min_count = 5;
    std::pair<double, double> discount_cuts{0.1, 0.2};
    double w_min = 0.2;
    double w_max = 5.0;
    double delta = 0.15;

    std::size_t rules_budget = 100000;
    std::size_t rules_max_depth = 6;
    std::size_t rules_population = 200;
    std::filesystem::path rules_dataset;

    /// Canonical JSON of the effective configuration.
    nlohmann::json to_json() const;
};

/// Parses a JSON config; unknown keys and missing referenced files are errors.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Hash of the canonical configuration without the output directory; key
/// order does not matter.
std::string config_hash(const RunConfig& config);

/// Runs one command line (without the program name). Returns the exit code:
/// 0 success, 1 runtime failure, 2 usage or configuration error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace malles
