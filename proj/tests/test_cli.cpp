#include <catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "shjb/field.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string cli = SHJB_CLI_PATH;
const std::string problems = SHJB_PROBLEM_DIR;

struct Scratch {
    fs::path dir;
    Scratch() {
        dir = fs::temp_directory_path() / ("shjb_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
};

int run(const std::string& args, const std::string& env = "") {
    const std::string command = env + (env.empty() ? "" : " ") + cli + " " + args + " > /dev/null 2>&1";
    const int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::string problem(const std::string& name) { return problems + "/" + name + ".json"; }

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    FAIL("missing column " << name);
    return 0;
}

}  // namespace

TEST_CASE("validate on the constant-cost problem succeeds", "[cli]") {
    Scratch s;
    const fs::path out = s.dir / "validate";
    REQUIRE(run("validate " + problem("constant_cost") + " --out-dir " + out.string()) == 0);
    CHECK(fs::exists(out / "validate.csv"));
    const json manifest = json::parse(slurp(out / "manifest.json"));
    CHECK(manifest.at("mode") == "validate");
    CHECK(manifest.at("passed") == true);
    CHECK(manifest.at("config_name") == "constant_cost");
    CHECK(manifest.at("config_hash").get<std::string>().size() == 16);
    CHECK(manifest.at("artifacts").size() == 1);
}

TEST_CASE("a failed validation exits with status one", "[cli]") {
    Scratch s;
    // the linear terminal cost takes negative values
    CHECK(run("validate " + problem("linear_terminal") + " --out-dir " + (s.dir / "v").string()) == 1);
}

TEST_CASE("usage and configuration errors exit with status two", "[cli]") {
    Scratch s;
    CHECK(run("validate " + (s.dir / "absent.json").string()) == 2);
    const fs::path broken = s.dir / "broken.json";
    std::ofstream(broken) << "{\"name\": \"broken\", \"problem\": {";
    CHECK(run("validate " + broken.string() + " --out-dir " + (s.dir / "b").string()) == 2);
    CHECK(run("solve") == 2);
    CHECK(run("no-such-mode") == 2);
}

TEST_CASE("solve then verify the dynamic programming principle on LQ", "[cli]") {
    Scratch s;
    const fs::path solved = s.dir / "solve";
    REQUIRE(run("solve " + problem("lq") + " --mesh 0.1 --out-dir " + solved.string()) == 0);
    std::ifstream in(solved / "field.bin", std::ios::binary);
    const shjb::ValueField field = shjb::read_field(in);
    const std::vector<double> origin{0.0};
    const shjb::WienerEnv w{{0.0}, {0.0}};
    CHECK(std::fabs(field.eval(0.0, origin, w).value / std::log(std::cosh(1.0)) - 1.0) <= 0.03);

    const fs::path dpp = s.dir / "dpp";
    REQUIRE(run("verify-dpp " + problem("lq") + " --mesh 0.1 --out-dir " + dpp.string()) == 0);
    const auto rows = read_csv(dpp / "dpp.csv");
    REQUIRE(rows.size() == 2);
    const double residual = std::stod(rows[1][column(rows[0], "residual")]);
    const double threshold = std::stod(rows[1][column(rows[0], "threshold")]);
    CHECK(residual <= threshold);
    CHECK(rows[1][column(rows[0], "pass")] == "1");
}

TEST_CASE("rerun reproduces every artifact byte for byte", "[cli]") {
    Scratch s;
    const fs::path out = s.dir / "sim";
    REQUIRE(run("simulate " + problem("lq") + " --paths 50 --out-dir " + out.string()) == 0);
    REQUIRE(run("rerun " + (out / "manifest.json").string()) == 0);
    CHECK(slurp(out / "paths.csv") == slurp(out / "rerun" / "paths.csv"));
    CHECK(slurp(out / "summary.csv") == slurp(out / "rerun" / "summary.csv"));

    const fs::path other = s.dir / "sim_again";
    REQUIRE(run("simulate " + problem("lq") + " --paths 50 --out-dir " + other.string()) == 0);
    CHECK(slurp(out / "paths.csv") == slurp(other / "paths.csv"));
    const fs::path reseeded = s.dir / "sim_seed";
    REQUIRE(run("simulate " + problem("lq") + " --paths 50 --seed 99 --out-dir " + reseeded.string()) == 0);
    CHECK(slurp(out / "paths.csv") != slurp(reseeded / "paths.csv"));
}

TEST_CASE("report of one manifest is a one-row table", "[cli]") {
    Scratch s;
    const fs::path out = s.dir / "oracle";
    REQUIRE(run("oracle " + problem("constant_cost") + " --out-dir " + out.string()) == 0);
    const fs::path table = s.dir / "table.csv";
    REQUIRE(run("report " + (out / "manifest.json").string() + " --out " + table.string()) == 0);
    const auto rows = read_csv(table);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0][0] == "config");
    CHECK(rows[1][0] == "constant_cost");
    CHECK(rows[1][column(rows[0], "mode")] == "oracle");
}

TEST_CASE("output directory defaults to the environment variable", "[cli]") {
    Scratch s;
    const fs::path out = s.dir / "from_env";
    REQUIRE(run("validate " + problem("constant_cost"), "SHJB_OUT_DIR=" + out.string()) == 0);
    CHECK(fs::exists(out / "manifest.json"));
}
