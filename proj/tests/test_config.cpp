#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "petgamma/config.hpp"
#include "petgamma/report.hpp"

using namespace petgamma;
using nlohmann::json;

namespace {

std::string error_of(const json& j) {
    try {
        parse_config(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

}  // namespace

TEST(Config, ExampleConfigsParse) {
    int n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(PETGAMMA_CONFIG_DIR)) {
        if (entry.path().extension() != ".json") continue;
        EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
        ++n;
    }
    EXPECT_GE(n, 5);
}

TEST(Config, GeometricGenerator) {
    auto c = parse_config(json::parse(R"({
        "sequences": {"q": {"generator": "geometric", "base": 4, "count": 3},
                      "r": {"generator": "geometric", "base": 2, "exponent": -0.5, "n_power": 1, "count": 3}},
        "seeds": [1]})"));
    ASSERT_EQ(c.q.size(), 3u);
    EXPECT_DOUBLE_EQ(c.q[0], 4.0);
    EXPECT_DOUBLE_EQ(c.q[2], 64.0);
    EXPECT_NEAR(c.r[1], 2.0 * 0.5, 1e-15);
}

TEST(Config, QPowerAndConstant) {
    auto c = parse_config(json::parse(R"({
        "sequences": {"q": [100, 10000], "beta": {"generator": "q_power", "exponent": -0.5},
                      "u": {"generator": "constant", "value": 2}},
        "seeds": {"start": 5, "count": 3}})"));
    EXPECT_NEAR(c.beta[0], 0.1, 1e-15);
    EXPECT_NEAR(c.beta[1], 0.01, 1e-15);
    EXPECT_EQ(c.u, (std::vector<double>{2.0, 2.0}));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{5, 6, 7}));
}

TEST(Config, ErrorsNameTheField) {
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": []})")), "seeds"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({})")), "seeds"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "sequences": {"q": [1, "x"]}})")), "sequences.q[1]"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "sequences": {"q": [10, 1]}})")), "sequences.q"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "sequences": {"q": {"generator": "spiral"}}})")),
                            "sequences.q.generator"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "probabilities": {"pa": 0.5, "ps": 0.5, "pd": 0.5}})")),
                            "probabilities"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "probabilities": {"pa": 0.3, "ps": 0.0, "pd": 0.7}})")),
                            "probabilities.ps"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "partitions": {"case": "Q"}})")), "partitions.case"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "partitions": {"regime": "loose"}})")), "partitions.regime"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "geometry": {"R_scan": 0.5}})")), "geometry.R_scan"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [-1]})")), "seeds[0]"));
    EXPECT_TRUE(starts_with(error_of(json::parse(R"({"seeds": [1], "sequences": {"q": [1], "u": [0]}})")), "sequences.u[0]"));
}

TEST(Config, UnreadableOrInvalidJson) {
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
    auto path = std::filesystem::temp_directory_path() / "petgamma_bad.json";
    std::ofstream(path) << "{ not json";
    EXPECT_THROW(load_config(path), ConfigError);
    std::filesystem::remove(path);
}

TEST(Config, RegimeWarning) {
    auto ok = parse_config(json::parse(R"({"seeds": [1],
        "sequences": {"q": [1e3, 1e4, 1e5], "beta": {"generator": "q_power", "exponent": -0.5}},
        "partitions": {"time_bins": [2, 4, 8]}})"));
    EXPECT_TRUE(ok.warnings.empty());
    auto bad = parse_config(json::parse(R"({"seeds": [1],
        "sequences": {"q": [1e3, 1e3, 1e3], "beta": [1e-3, 1e-4, 1e-5]},
        "partitions": {"time_bins": [2, 4, 8]}})"));
    EXPECT_EQ(bad.warnings.size(), 1u);
}

TEST(Report, CsvIsDeterministic) {
    Table t{{"a", "b"}, {}};
    t.add({0.1, 1e-300});
    t.add({1.0 / 3.0, -2.0});
    auto dir = std::filesystem::temp_directory_path() / "petgamma_report";
    write_csv(dir / "x.csv", t);
    write_csv(dir / "y.csv", t);
    std::ifstream fx(dir / "x.csv", std::ios::binary), fy(dir / "y.csv", std::ios::binary);
    std::string sx((std::istreambuf_iterator<char>(fx)), {}), sy((std::istreambuf_iterator<char>(fy)), {});
    EXPECT_EQ(sx, sy);
    EXPECT_EQ(sx.find('\r'), std::string::npos);
    EXPECT_NE(sx.find("0.33333333333333331"), std::string::npos);
    std::filesystem::remove_all(dir);
}

TEST(Report, LogLogSlope) {
    std::vector<double> x{1, 10, 100}, y{2, 0.2, 0.02};
    EXPECT_NEAR(loglog_slope(x, y), -1.0, 1e-12);
    EXPECT_EQ(median({3, 1, 2}), 2.0);
    EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
}
