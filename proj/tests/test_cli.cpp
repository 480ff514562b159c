#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string binary_path() {
    if (const char* env = std::getenv("CDSENS_BIN")) return env;
    return "../tools/cdsens";  // ctest runs from build/tests
}

int run_cli(const std::string& argstr) {
    std::string cmd = binary_path() + " " + argstr + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

// deterministic synthetic input: two groups, confounded mediator
fs::path make_input() {
    fs::path p = "/tmp/cdsens_cli_input.csv";
    std::ostringstream ss;
    ss << "Y,M,R,x1,c1\n";
    unsigned state = 12345;
    auto next = [&]() {
        state = state * 1103515245u + 12345u;
        return static_cast<double>((state >> 16) & 0x7fff) / 32768.0;
    };
    for (int i = 0; i < 240; ++i) {
        int r = i % 2;
        double x1 = 2.0 * next() - 1.0 + 0.3 * r;
        int c = next() < 0.5 ? 0 : 1;
        int m = next() < 0.5 + 0.2 * x1 - 0.1 * r ? 1 : 0;
        double y = 0.5 - 0.5 * r + 0.4 * x1 + m * (0.3 - 0.4 * x1) + 0.2 * c +
                   0.4 * (next() - 0.5);
        ss << y << "," << m << "," << r << "," << x1 << "," << c << "\n";
    }
    write(p, ss.str());
    return p;
}

fs::path make_config() {
    fs::path cfg = "/tmp/cdsens_cli_config.json";
    write(cfg, R"({
      "data": {"path": "/tmp/cdsens_cli_input.csv",
               "roles": {"y":"Y","m":"M","r":"R","x":["x1"],"c":["c1"],
                         "h1":["x1"],"am":["x1"]}},
      "otr": {"method":"qlearning","stratify":false},
      "decompose": {"estimator":"regression","bootstrap_reps":30}
    })");
    return cfg;
}

} // namespace

TEST_CASE("decompose command writes its artifacts and succeeds") {
    make_input();
    fs::path cfg = make_config();
    fs::path out = "/tmp/cdsens_cli_out";
    fs::remove_all(out);
    int rc = run_cli("decompose --config " + cfg.string() + " --out " + out.string() +
                     " --seed 11");
    REQUIRE(rc == 0);
    CHECK(fs::exists(out / "summary.json"));
    CHECK(fs::exists(out / "manifest.json"));
    std::string table = slurp(out / "table_decomposition.csv");
    CHECK(table.find("initial_disparity") != std::string::npos);
    CHECK(table.find("pct_reduction_iie") != std::string::npos);
    std::string manifest = slurp(out / "manifest.json");
    CHECK(manifest.find("config_hash") != std::string::npos);
}

TEST_CASE("missing seed or config is a validation error (exit 1)") {
    make_input();
    fs::path cfg = make_config();
    CHECK(run_cli("decompose --config " + cfg.string() + " --out /tmp/cdsens_cli_x") == 1);
    CHECK(run_cli("decompose --config /tmp/does_not_exist.json --out /tmp/cdsens_cli_x "
                  "--seed 1") == 1);
}

TEST_CASE("estimation failures surface as exit 2") {
    write("/tmp/cdsens_cli_onegroup.csv", "Y,M,R\n1,1,1\n2,0,1\n");
    write("/tmp/cdsens_cli_onegroup.json",
          R"({"data":{"path":"/tmp/cdsens_cli_onegroup.csv",
               "roles":{"y":"Y","m":"M","r":"R"}}})");
    CHECK(run_cli("decompose --config /tmp/cdsens_cli_onegroup.json "
                  "--out /tmp/cdsens_cli_x --seed 1") == 2);
}

TEST_CASE("identical config and seed give byte-identical artifacts") {
    make_input();
    fs::path cfg = make_config();
    fs::path a = "/tmp/cdsens_cli_rep_a", b = "/tmp/cdsens_cli_rep_b";
    fs::remove_all(a);
    fs::remove_all(b);
    REQUIRE(run_cli("decompose --config " + cfg.string() + " --out " + a.string() +
                    " --seed 5 --workers 1") == 0);
    REQUIRE(run_cli("decompose --config " + cfg.string() + " --out " + b.string() +
                    " --seed 5 --workers 3") == 0);
    for (const char* name :
         {"summary.json", "table_decomposition.csv", "manifest.json"}) {
        INFO(name);
        CHECK(slurp(a / name) == slurp(b / name));
    }
    // a different seed must change the bootstrap SEs
    fs::path c = "/tmp/cdsens_cli_rep_c";
    fs::remove_all(c);
    REQUIRE(run_cli("decompose --config " + cfg.string() + " --out " + c.string() +
                    " --seed 6") == 0);
    CHECK(slurp(a / "table_decomposition.csv") != slurp(c / "table_decomposition.csv"));
}

TEST_CASE("simstudy command emits the metrics table") {
    fs::path cfg = "/tmp/cdsens_cli_sim.json";
    write(cfg, R"({
      "otr": {"method":"qlearning","stratify":false},
      "simstudy": {"mode":"constant","population_size":20000,"n_grid":[250],
                   "iterations":10,"S":3,"B_boot":0,
                   "em":{"burn_in":5,"window":5,"max_iter":25}}
    })");
    fs::path out = "/tmp/cdsens_cli_sim_out";
    fs::remove_all(out);
    REQUIRE(run_cli("simstudy --config " + cfg.string() + " --out " + out.string() +
                    " --seed 21") == 0);
    std::string table = slurp(out / "table_metrics.csv");
    CHECK(table.find("acc_median") != std::string::npos);
    // header + one unadjusted and one adjusted row
    CHECK(std::count(table.begin(), table.end(), '\n') == 3);
    CHECK(fs::exists(out / "plot_metrics.tsv"));
}
